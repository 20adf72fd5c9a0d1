//! Fixture datasets and the particle-count sweep comparing prior and
//! artifact proposals.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compiler::seeds;
use crate::distributions::SampleValue;
use crate::models::{GaussianMixture, ModelSpec};
use crate::neural::ProposalArtifact;
use crate::runtime::{execute, Mode, ModelProgram, ObservationKind};
use crate::sis::{run_sis, ParticleSet, Proposal};
use crate::trace::Observations;

/// Minimum distance between any two generating cluster means.
pub const MIN_CLUSTER_SEPARATION: f64 = 0.4;
/// Minimum gap between consecutive sorted cluster radii, so the sorted
/// labeling of the ground truth is unambiguous.
pub const MIN_RADIUS_GAP: f64 = 0.1;

/// A dataset drawn from the model together with the summary of the trace
/// that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub observations: Observations,
    pub truth: Vec<f64>,
}

fn well_separated(summary: &[f64]) -> bool {
    let means = sorted_means(summary);
    let k = means.len();
    for i in 0..k {
        for j in i + 1..k {
            if (means[i][0] - means[j][0]).hypot(means[i][1] - means[j][1]) < MIN_CLUSTER_SEPARATION {
                return false;
            }
        }
    }
    means.windows(2).all(|w| w[1][0].hypot(w[1][1]) - w[0][0].hypot(w[0][1]) >= MIN_RADIUS_GAP)
}

/// Draws `count` datasets from the unconstrained model. Mixture fixtures are
/// redrawn until their clusters are well separated.
pub fn generate_fixtures(spec: &ModelSpec, count: usize, seed: u64) -> Result<Vec<Fixture>> {
    let model = spec.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 10_000 * count.max(1) {
            bail!("could not draw {count} acceptable fixtures");
        }
        let ex = execute(model.as_ref(), Mode::Unconstrained, None, None, &mut rng)?;
        let truth = model.summarize(&ex.trace);
        if matches!(spec, ModelSpec::Gmm(_)) && !well_separated(&truth) {
            continue;
        }
        out.push(Fixture { observations: ex.synthetic_observations.unwrap_or_default(), truth });
    }
    Ok(out)
}

fn observation_header(kind: ObservationKind) -> &'static [&'static str] {
    match kind {
        ObservationKind::Real | ObservationKind::Category => &["y"],
        ObservationKind::Point => &["x", "y"],
    }
}

pub fn write_observations<W: Write>(out: W, kind: ObservationKind, obs: &Observations) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(observation_header(kind))?;
    for v in &obs.values {
        match *v {
            SampleValue::Real(x) => w.write_record([x.to_string()])?,
            SampleValue::Category(c) => w.write_record([c.to_string()])?,
            SampleValue::Point([x, y]) => w.write_record([x.to_string(), y.to_string()])?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a data file: a header row, then one observation per row (`y` for
/// scalar models, `x,y` for point models).
pub fn read_observations(path: &Path, kind: ObservationKind) -> Result<Observations> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let width = observation_header(kind).len();
    let mut values = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != width {
            bail!("{}: row {} has {} fields, expected {width}", path.display(), i + 1, rec.len());
        }
        let num = |j: usize| -> Result<f64> {
            rec[j].trim().parse::<f64>().with_context(|| format!("{}: row {}: bad number", path.display(), i + 1))
        };
        values.push(match kind {
            ObservationKind::Real => SampleValue::Real(num(0)?),
            ObservationKind::Category => SampleValue::Category(
                rec[0]
                    .trim()
                    .parse::<u32>()
                    .with_context(|| format!("{}: row {}: bad category", path.display(), i + 1))?,
            ),
            ObservationKind::Point => SampleValue::Point([num(0)?, num(1)?]),
        });
    }
    Ok(Observations::new(values))
}

pub fn fixture_file(i: usize) -> String {
    format!("fixture_{i:03}.csv")
}

/// Writes `fixture_NNN.csv` data files and `truth.csv`
/// (`fixture,<summary columns>`) into `dir`.
pub fn write_fixtures(dir: &Path, model: &dyn ModelProgram, fixtures: &[Fixture]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in fixtures.iter().enumerate() {
        let file = fs::File::create(dir.join(fixture_file(i)))?;
        write_observations(file, model.observation_kind(), &f.observations)?;
    }
    let mut w = csv::Writer::from_path(dir.join("truth.csv"))?;
    let mut header = vec!["fixture".to_string()];
    header.extend(model.summary_names());
    w.write_record(&header)?;
    for (i, f) in fixtures.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(f.truth.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fixtures(dir: &Path, model: &dyn ModelProgram) -> Result<Vec<Fixture>> {
    let truth_path = dir.join("truth.csv");
    let mut r = csv::Reader::from_path(&truth_path).with_context(|| format!("reading {}", truth_path.display()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let i: usize = rec[0].parse().context("bad fixture index in truth.csv")?;
        let truth = rec.iter().skip(1).map(|s| s.parse::<f64>()).collect::<Result<Vec<_>, _>>()?;
        let observations = read_observations(&dir.join(fixture_file(i)), model.observation_kind())?;
        out.push(Fixture { observations, truth });
    }
    if out.is_empty() {
        bail!("no fixtures listed in {}", truth_path.display());
    }
    Ok(out)
}

/// How a particle set is reduced to cluster means for mixture models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Extractor {
    /// Sorted means of the highest-weight particle.
    HighestWeight,
    /// Weighted mean of each particle's sorted means; only meaningful when
    /// the number of clusters is fixed.
    WeightedMean,
}

fn sorted_means(summary: &[f64]) -> Vec<[f64; 2]> {
    let k = summary[0] as usize;
    (0..k).map(|c| [summary[1 + 2 * c], summary[2 + 2 * c]]).collect()
}

/// Error of a particle set against a fixture:
///
/// * conjugate: `|posterior mean estimate - analytic posterior mean|`
/// * two-coin: `|estimated P(x=1) - exact P(x=1)|`
/// * gmm: mean distance between estimated and true sorted cluster means
/// * geometric: `|estimated tails - generating tails|`
pub fn estimate_error(spec: &ModelSpec, ps: &ParticleSet, fixture: &Fixture, extractor: Extractor) -> Result<f64> {
    Ok(match spec {
        ModelSpec::Conjugate(m) => {
            let est = ps.estimate_expectation(|t| m.summarize(t))?[0];
            (est - m.posterior_for(&fixture.observations).0).abs()
        }
        ModelSpec::TwoCoin(m) => {
            let est = ps.estimate_expectation(|t| m.summarize(t))?[0];
            (est - m.enumerate(&fixture.observations)?.probs[1]).abs()
        }
        ModelSpec::Gmm(m) => {
            let estimate = match extractor {
                Extractor::HighestWeight => {
                    let best = ps.highest_weight()?;
                    sorted_means(&m.summarize(best.trace.as_ref().expect("highest-weight particle has a trace")))
                }
                Extractor::WeightedMean => {
                    let mut s = ps.estimate_expectation(|t| m.summarize(t))?;
                    s[0] = s[0].round();
                    sorted_means(&s)
                }
            };
            GaussianMixture::mean_error(&estimate, &sorted_means(&fixture.truth))
        }
        ModelSpec::Geometric(m) => {
            let est = ps.estimate_expectation(|t| m.summarize(t))?[0];
            (est - fixture.truth[0]).abs()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub proposal: &'static str,
    pub particles: usize,
    pub repeat: usize,
    /// Means over the fixture set.
    pub ess: f64,
    pub log_evidence: f64,
    pub error: f64,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub particle_counts: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub extractor: Extractor,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            particle_counts: vec![1, 10, 100, 1000],
            repeats: 1,
            seed: 0,
            extractor: Extractor::HighestWeight,
        }
    }
}

/// Runs SIS for every particle count, repeat and proposal over all fixtures.
/// Both proposals see the same seed for a given (count, repeat, fixture).
pub fn sweep(
    spec: &ModelSpec,
    artifact: &ProposalArtifact,
    fixtures: &[Fixture],
    config: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    let model = spec.build()?;
    let mut rows = Vec::new();
    for &k in &config.particle_counts {
        for repeat in 0..config.repeats {
            for proposal in [Proposal::Prior, Proposal::Artifact(artifact)] {
                let (mut ess, mut ev, mut err) = (0.0, 0.0, 0.0);
                for (i, f) in fixtures.iter().enumerate() {
                    let seed = seeds::derive(config.seed, ((k as u64) << 40) ^ ((repeat as u64) << 20) ^ i as u64);
                    let ps = run_sis(model.as_ref(), &f.observations, k, proposal, seed)?;
                    ess += ps.effective_sample_size().unwrap_or(0.0);
                    ev += ps.log_evidence();
                    err += estimate_error(spec, &ps, f, config.extractor)?;
                }
                let n = fixtures.len() as f64;
                rows.push(SweepRow {
                    proposal: proposal.name(),
                    particles: k,
                    repeat,
                    ess: ess / n,
                    log_evidence: ev / n,
                    error: err / n,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["proposal", "K", "repeat", "ess", "log_evidence", "error"])?;
    for r in rows {
        w.write_record([
            r.proposal.to_string(),
            r.particles.to_string(),
            r.repeat.to_string(),
            r.ess.to_string(),
            r.log_evidence.to_string(),
            r.error.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
