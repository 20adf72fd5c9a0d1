use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{DistributionSpec, ProposalType, SampleValue};
use crate::runtime::{ExecutionHandle, Mode, ModelProgram, ObservationKind, RuntimeError};
use crate::trace::{Address, Observations, Trace};

/// Isotropic 2-D Gaussian mixture with an unknown (or fixed) number of
/// clusters. Assignments are marginalized: each data point is observed under
/// the equal-weight mixture density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianMixture {
    /// `K` is uniform over `1..=max_clusters` unless `fixed_clusters` is set.
    pub max_clusters: u32,
    pub fixed_clusters: Option<u32>,
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub points: usize,
    /// Histogram resolution of the observation features.
    pub bins: usize,
}

impl Default for GaussianMixture {
    fn default() -> Self {
        GaussianMixture {
            max_clusters: 5,
            fixed_clusters: None,
            sigma_low: 0.05,
            sigma_high: 0.15,
            points: 100,
            bins: 20,
        }
    }
}

pub const MEAN_LOW: f64 = -1.0;
pub const MEAN_HIGH: f64 = 1.0;

/// Parameters of one cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub mean: [f64; 2],
    pub sigma: f64,
}

impl Cluster {
    pub fn radius(&self) -> f64 {
        self.mean[0].hypot(self.mean[1])
    }
}

/// Sorts clusters by distance of their mean from the origin.
pub fn sort_clusters(clusters: &mut [Cluster]) {
    clusters.sort_by(|a, b| a.radius().total_cmp(&b.radius()));
}

impl GaussianMixture {
    pub fn fixed(k: u32) -> Self {
        GaussianMixture { fixed_clusters: Some(k), max_clusters: k, ..Default::default() }
    }

    fn cluster_count_prior(&self) -> Result<DistributionSpec, RuntimeError> {
        Ok(DistributionSpec::categorical_uniform(self.max_clusters)?)
    }

    fn mean_prior(&self) -> Result<DistributionSpec, RuntimeError> {
        Ok(DistributionSpec::uniform(MEAN_LOW, MEAN_HIGH)?)
    }

    fn sigma_prior(&self) -> Result<DistributionSpec, RuntimeError> {
        Ok(DistributionSpec::uniform(self.sigma_low, self.sigma_high)?)
    }

    /// Cluster parameters recorded in a trace, in trace order.
    pub fn clusters(&self, trace: &Trace) -> Vec<Cluster> {
        let k = trace.entries.iter().filter(|e| e.address.as_str() == "sigma").count() as u32;
        (1..=k)
            .filter_map(|i| {
                let x = trace.value_at("mu_x", i)?.as_real()?;
                let y = trace.value_at("mu_y", i)?.as_real()?;
                let sigma = trace.value_at("sigma", i)?.as_real()?;
                Some(Cluster { mean: [x, y], sigma })
            })
            .collect()
    }

    pub fn likelihood(clusters: &[Cluster]) -> Result<DistributionSpec, RuntimeError> {
        Ok(DistributionSpec::gaussian_mixture_2d(clusters.iter().map(|c| (c.mean, c.sigma)).collect())?)
    }

    /// Draws `points` data points from the mixture with the given clusters.
    pub fn generate_points<R: Rng + ?Sized>(
        &self,
        clusters: &[Cluster],
        rng: &mut R,
    ) -> Result<Observations, RuntimeError> {
        let lik = Self::likelihood(clusters)?;
        Ok(Observations::new((0..self.points).map(|_| lik.sample(rng)).collect()))
    }

    /// Mean Euclidean distance between sorted cluster means, paired by rank.
    /// When the counts differ, each unpaired cluster costs one plus its
    /// distance from the origin.
    pub fn mean_error(estimate: &[[f64; 2]], truth: &[[f64; 2]]) -> f64 {
        let n = estimate.len().max(truth.len());
        if n == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for k in 0..n {
            total += match (estimate.get(k), truth.get(k)) {
                (Some(a), Some(b)) => (a[0] - b[0]).hypot(a[1] - b[1]),
                (Some(a), None) | (None, Some(a)) => 1.0 + a[0].hypot(a[1]),
                (None, None) => unreachable!(),
            };
        }
        total / n as f64
    }
}

impl ModelProgram for GaussianMixture {
    fn id(&self) -> String {
        let k = match self.fixed_clusters {
            Some(k) => format!("k={k}"),
            None => format!("kmax={}", self.max_clusters),
        };
        format!("gmm({k},sigma=[{},{}],n={},bins={})", self.sigma_low, self.sigma_high, self.points, self.bins)
    }

    fn observe_count(&self) -> usize {
        self.points
    }

    fn observation_kind(&self) -> ObservationKind {
        ObservationKind::Point
    }

    fn address_table(&self) -> Vec<(Address, ProposalType)> {
        let mut table = Vec::new();
        if self.fixed_clusters.is_none() {
            table.push((Address::new("K").unwrap(), ProposalType::Categorical { categories: self.max_clusters }));
        }
        let mean = ProposalType::UniformContinuous { low: MEAN_LOW, high: MEAN_HIGH };
        table.push((Address::new("mu_x").unwrap(), mean));
        table.push((Address::new("mu_y").unwrap(), mean));
        table.push((
            Address::new("sigma").unwrap(),
            ProposalType::UniformContinuous { low: self.sigma_low, high: self.sigma_high },
        ));
        table
    }

    fn feature_dim(&self) -> usize {
        self.bins * self.bins
    }

    /// Histogram counts scaled so a uniform spread over 100 points and 10×10
    /// occupied bins gives features near 1.
    fn observation_features(&self, obs: &Observations) -> Vec<f64> {
        let hist = summarize_observations(obs, self.bins);
        let scale = 10.0 / obs.len().max(1) as f64;
        hist.counts.iter().map(|&c| c as f64 * scale).collect()
    }

    fn run(&self, h: &mut ExecutionHandle<'_>) -> Result<(), RuntimeError> {
        let k = match self.fixed_clusters {
            Some(k) => k,
            None => h.sample_category("K", &self.cluster_count_prior()?)? + 1,
        };
        let start = h.position();
        let (mean_prior, sigma_prior) = (self.mean_prior()?, self.sigma_prior()?);
        let mut clusters = Vec::with_capacity(k as usize);
        for _ in 0..k {
            let x = h.sample_real("mu_x", &mean_prior)?;
            let y = h.sample_real("mu_y", &mean_prior)?;
            let sigma = h.sample_real("sigma", &sigma_prior)?;
            clusters.push(Cluster { mean: [x, y], sigma });
        }
        if h.mode() == Mode::Unconstrained {
            let mut order: Vec<usize> = (0..clusters.len()).collect();
            order.sort_by(|&a, &b| clusters[a].radius().total_cmp(&clusters[b].radius()));
            h.permute_blocks(start, 3, &order)?;
            clusters = order.iter().map(|&o| clusters[o]).collect();
        }
        let lik = Self::likelihood(&clusters)?;
        for _ in 0..self.points {
            h.observe(&lik)?;
        }
        Ok(())
    }

    /// `k`, then sorted cluster means `(x, y)` padded with NaN to
    /// `max_clusters`.
    fn summary_names(&self) -> Vec<String> {
        let mut names = vec!["k".to_string()];
        for c in 1..=self.max_clusters {
            names.push(format!("mu{c}_x"));
            names.push(format!("mu{c}_y"));
        }
        names
    }

    fn summarize(&self, trace: &Trace) -> Vec<f64> {
        let mut clusters = self.clusters(trace);
        sort_clusters(&mut clusters);
        let mut out = vec![clusters.len() as f64];
        for c in 0..self.max_clusters as usize {
            match clusters.get(c) {
                Some(cl) => out.extend_from_slice(&cl.mean),
                None => out.extend_from_slice(&[f64::NAN, f64::NAN]),
            }
        }
        out
    }
}

/// Bin counts of 2-D points over `[-1, 1]²`, row-major with the first
/// coordinate selecting the row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistogramSummary {
    pub bins: usize,
    pub counts: Vec<u32>,
}

impl HistogramSummary {
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.counts[row * self.bins + col]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

fn bin_index(v: f64, bins: usize) -> usize {
    let t = ((v - MEAN_LOW) / (MEAN_HIGH - MEAN_LOW) * bins as f64).floor();
    if t.is_nan() || t < 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

/// Half-open bins `[edge_i, edge_{i+1})` with the last bin closed. Points
/// outside `[-1, 1]²` are clamped into the boundary bins; real-valued or
/// categorical observations are skipped.
pub fn summarize_observations(obs: &Observations, bins: usize) -> HistogramSummary {
    assert!(bins > 0, "histogram needs at least one bin");
    let mut counts = vec![0u32; bins * bins];
    for p in obs.values.iter().filter_map(SampleValue::as_point) {
        counts[bin_index(p[0], bins) * bins + bin_index(p[1], bins)] += 1;
    }
    HistogramSummary { bins, counts }
}
