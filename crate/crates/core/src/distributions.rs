//! Primitive distributions used by `sample` and `observe` statements, and the
//! link from raw network outputs (eta) to proposal distributions.
//!
//! Three prior families can appear at sample statements: Normal, continuous
//! Uniform and Categorical. Two further forms exist only as derived
//! distributions: the truncated Normal that serves as the proposal for a
//! bounded Uniform prior, and an equal-weight isotropic 2-D Gaussian mixture
//! used as an observation likelihood with the cluster assignments summed out.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor added to every proposal standard deviation.
pub const STDDEV_FLOOR: f64 = 1e-3;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("invalid parameters for {family}: {reason}")]
    InvalidParameters { family: &'static str, reason: String },
    #[error("value {value:?} is outside the support of {family}")]
    OutOfSupport { family: &'static str, value: SampleValue },
    #[error("value {value:?} has the wrong type for {family}")]
    WrongValueType { family: &'static str, value: SampleValue },
    #[error("eta has length {got}, proposal type expects {expected}")]
    EtaDimension { expected: usize, got: usize },
    #[error("{0} cannot be used as a prior at a sample statement")]
    NotProposable(&'static str),
}

/// A value produced by a sample or observe statement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SampleValue {
    Real(f64),
    Category(u32),
    Point([f64; 2]),
}

impl SampleValue {
    pub fn as_real(&self) -> Option<f64> {
        match *self {
            SampleValue::Real(x) => Some(x),
            _ => None,
        }
    }

    pub fn as_category(&self) -> Option<u32> {
        match *self {
            SampleValue::Category(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_point(&self) -> Option<[f64; 2]> {
        match *self {
            SampleValue::Point(p) => Some(p),
            _ => None,
        }
    }
}

/// The family of a distribution, without its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Normal,
    UniformContinuous,
    Categorical,
    TruncatedNormal,
    GaussianMixture2d,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Normal => "Normal",
            Family::UniformContinuous => "UniformContinuous",
            Family::Categorical => "Categorical",
            Family::TruncatedNormal => "TruncatedNormal",
            Family::GaussianMixture2d => "GaussianMixture2d",
        }
    }
}

/// A primitive distribution instance.
///
/// Build instances through the checked constructors; the density and sampling
/// routines assume the parameter invariants hold.
#[derive(Debug, Clone, PartialEq)]
pub enum DistributionSpec {
    Normal {
        mean: f64,
        stddev: f64,
    },
    UniformContinuous {
        low: f64,
        high: f64,
    },
    Categorical {
        probs: Vec<f64>,
    },
    TruncatedNormal {
        mean: f64,
        stddev: f64,
        low: f64,
        high: f64,
    },
    /// Equal-weight mixture of isotropic 2-D Gaussians `(mean, stddev)`.
    GaussianMixture2d {
        components: Vec<([f64; 2], f64)>,
    },
}

fn invalid(family: &'static str, reason: impl Into<String>) -> DistributionError {
    DistributionError::InvalidParameters { family, reason: reason.into() }
}

impl DistributionSpec {
    pub fn normal(mean: f64, stddev: f64) -> Result<Self, DistributionError> {
        let d = DistributionSpec::Normal { mean, stddev };
        d.validate()?;
        Ok(d)
    }

    pub fn uniform(low: f64, high: f64) -> Result<Self, DistributionError> {
        let d = DistributionSpec::UniformContinuous { low, high };
        d.validate()?;
        Ok(d)
    }

    pub fn categorical(probs: Vec<f64>) -> Result<Self, DistributionError> {
        let d = DistributionSpec::Categorical { probs };
        d.validate()?;
        Ok(d)
    }

    /// Uniform over `n` categories.
    pub fn categorical_uniform(n: u32) -> Result<Self, DistributionError> {
        if n == 0 {
            return Err(invalid("Categorical", "no categories"));
        }
        Self::categorical(vec![1.0 / n as f64; n as usize])
    }

    pub fn truncated_normal(mean: f64, stddev: f64, low: f64, high: f64) -> Result<Self, DistributionError> {
        let d = DistributionSpec::TruncatedNormal { mean, stddev, low, high };
        d.validate()?;
        Ok(d)
    }

    pub fn gaussian_mixture_2d(components: Vec<([f64; 2], f64)>) -> Result<Self, DistributionError> {
        let d = DistributionSpec::GaussianMixture2d { components };
        d.validate()?;
        Ok(d)
    }

    pub fn family(&self) -> Family {
        match self {
            DistributionSpec::Normal { .. } => Family::Normal,
            DistributionSpec::UniformContinuous { .. } => Family::UniformContinuous,
            DistributionSpec::Categorical { .. } => Family::Categorical,
            DistributionSpec::TruncatedNormal { .. } => Family::TruncatedNormal,
            DistributionSpec::GaussianMixture2d { .. } => Family::GaussianMixture2d,
        }
    }

    pub fn validate(&self) -> Result<(), DistributionError> {
        let name = self.family().name();
        match self {
            DistributionSpec::Normal { mean, stddev } => {
                if !mean.is_finite() {
                    return Err(invalid(name, "mean must be finite"));
                }
                if !(stddev.is_finite() && *stddev > 0.0) {
                    return Err(invalid(name, format!("stddev must be positive, got {stddev}")));
                }
            }
            DistributionSpec::UniformContinuous { low, high } => {
                if !(low.is_finite() && high.is_finite() && low < high) {
                    return Err(invalid(name, format!("need low < high, got [{low}, {high}]")));
                }
            }
            DistributionSpec::Categorical { probs } => {
                if probs.is_empty() {
                    return Err(invalid(name, "no categories"));
                }
                if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(invalid(name, "probabilities must be nonnegative"));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(invalid(name, format!("probabilities sum to {total}")));
                }
            }
            DistributionSpec::TruncatedNormal { mean, stddev, low, high } => {
                if !mean.is_finite() {
                    return Err(invalid(name, "mean must be finite"));
                }
                if !(stddev.is_finite() && *stddev > 0.0) {
                    return Err(invalid(name, format!("stddev must be positive, got {stddev}")));
                }
                if !(low.is_finite() && high.is_finite() && low < high) {
                    return Err(invalid(name, format!("need low < high, got [{low}, {high}]")));
                }
            }
            DistributionSpec::GaussianMixture2d { components } => {
                if components.is_empty() {
                    return Err(invalid(name, "no components"));
                }
                for (m, s) in components {
                    if !(m[0].is_finite() && m[1].is_finite()) {
                        return Err(invalid(name, "component means must be finite"));
                    }
                    if !(s.is_finite() && *s > 0.0) {
                        return Err(invalid(name, format!("stddev must be positive, got {s}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Natural-log density (log mass for Categorical).
    ///
    /// A real value outside a bounded support returns `-inf` rather than an
    /// error; a category index outside `[0, n)` is an error.
    pub fn log_pdf(&self, x: &SampleValue) -> Result<f64, DistributionError> {
        let name = self.family().name();
        let wrong = || DistributionError::WrongValueType { family: name, value: *x };
        match self {
            DistributionSpec::Normal { mean, stddev } => {
                let v = x.as_real().ok_or_else(wrong)?;
                Ok(normal_log_pdf(v, *mean, *stddev))
            }
            DistributionSpec::UniformContinuous { low, high } => {
                let v = x.as_real().ok_or_else(wrong)?;
                if v < *low || v > *high {
                    Ok(f64::NEG_INFINITY)
                } else {
                    Ok(-(high - low).ln())
                }
            }
            DistributionSpec::Categorical { probs } => {
                let c = x.as_category().ok_or_else(wrong)? as usize;
                match probs.get(c) {
                    Some(p) => Ok(p.ln()),
                    None => Err(DistributionError::OutOfSupport { family: name, value: *x }),
                }
            }
            DistributionSpec::TruncatedNormal { mean, stddev, low, high } => {
                let v = x.as_real().ok_or_else(wrong)?;
                if v < *low || v > *high {
                    return Ok(f64::NEG_INFINITY);
                }
                let a = (low - mean) / stddev;
                let b = (high - mean) / stddev;
                Ok(normal_log_pdf(v, *mean, *stddev) - std_normal_mass(a, b).ln())
            }
            DistributionSpec::GaussianMixture2d { components } => {
                let p = x.as_point().ok_or_else(wrong)?;
                let terms: Vec<f64> = components
                    .iter()
                    .map(|(m, s)| normal_log_pdf(p[0], m[0], *s) + normal_log_pdf(p[1], m[1], *s))
                    .collect();
                Ok(log_sum_exp(&terms) - (components.len() as f64).ln())
            }
        }
    }

    /// Draws one value. Deterministic given the state of `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SampleValue {
        match self {
            DistributionSpec::Normal { mean, stddev } => {
                let z: f64 = StandardNormal.sample(rng);
                SampleValue::Real(mean + stddev * z)
            }
            DistributionSpec::UniformContinuous { low, high } => {
                let u: f64 = rng.random();
                SampleValue::Real(low + (high - low) * u)
            }
            DistributionSpec::Categorical { probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut last_positive = 0;
                for (i, p) in probs.iter().enumerate() {
                    if *p <= 0.0 {
                        continue;
                    }
                    last_positive = i;
                    acc += p;
                    if u < acc {
                        return SampleValue::Category(i as u32);
                    }
                }
                SampleValue::Category(last_positive as u32)
            }
            DistributionSpec::TruncatedNormal { mean, stddev, low, high } => {
                SampleValue::Real(sample_truncated_normal(rng, *mean, *stddev, *low, *high))
            }
            DistributionSpec::GaussianMixture2d { components } => {
                let k = rng.random_range(0..components.len());
                let (m, s) = components[k];
                let zx: f64 = StandardNormal.sample(rng);
                let zy: f64 = StandardNormal.sample(rng);
                SampleValue::Point([m[0] + s * zx, m[1] + s * zy])
            }
        }
    }

    pub fn mean(&self) -> Option<f64> {
        match self {
            DistributionSpec::Normal { mean, .. } => Some(*mean),
            DistributionSpec::UniformContinuous { low, high } => Some(0.5 * (low + high)),
            DistributionSpec::TruncatedNormal { mean, stddev, low, high } => {
                let a = (low - mean) / stddev;
                let b = (high - mean) / stddev;
                Some(mean + stddev * (std_normal_pdf(a) - std_normal_pdf(b)) / std_normal_mass(a, b))
            }
            _ => None,
        }
    }
}

/// The kind of proposal distribution attached to a sample statement, derived
/// from its prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProposalType {
    Normal,
    /// Bounded support of a UniformContinuous prior.
    UniformContinuous {
        low: f64,
        high: f64,
    },
    Categorical {
        categories: u32,
    },
}

impl ProposalType {
    /// Number of distinct proposal kinds, used for one-hot encoding.
    pub const COUNT: usize = 3;

    pub fn for_prior(dist: &DistributionSpec) -> Result<Self, DistributionError> {
        match dist {
            DistributionSpec::Normal { .. } => Ok(ProposalType::Normal),
            DistributionSpec::UniformContinuous { low, high } => {
                Ok(ProposalType::UniformContinuous { low: *low, high: *high })
            }
            DistributionSpec::Categorical { probs } => Ok(ProposalType::Categorical { categories: probs.len() as u32 }),
            other => Err(DistributionError::NotProposable(other.family().name())),
        }
    }

    pub fn param_dim(&self) -> usize {
        match self {
            ProposalType::Normal | ProposalType::UniformContinuous { .. } => 2,
            ProposalType::Categorical { categories } => *categories as usize,
        }
    }

    /// Position in the proposal-type one-hot vocabulary.
    pub fn type_index(&self) -> usize {
        match self {
            ProposalType::Normal => 0,
            ProposalType::UniformContinuous { .. } => 1,
            ProposalType::Categorical { .. } => 2,
        }
    }

    /// Feature width of a value of this type fed to a sample embedding.
    pub fn value_feature_dim(&self) -> usize {
        match self {
            ProposalType::Normal | ProposalType::UniformContinuous { .. } => 1,
            ProposalType::Categorical { categories } => *categories as usize,
        }
    }

    /// Writes the embedding features of `x` into `out`.
    pub fn value_features(&self, x: &SampleValue, out: &mut Vec<f64>) -> Result<(), DistributionError> {
        match self {
            ProposalType::Normal | ProposalType::UniformContinuous { .. } => {
                let v = x.as_real().ok_or(DistributionError::WrongValueType { family: "Normal", value: *x })?;
                out.push(v);
            }
            ProposalType::Categorical { categories } => {
                let c =
                    x.as_category().ok_or(DistributionError::WrongValueType { family: "Categorical", value: *x })?;
                if c >= *categories {
                    return Err(DistributionError::OutOfSupport { family: "Categorical", value: *x });
                }
                out.extend((0..*categories).map(|i| if i == c { 1.0 } else { 0.0 }));
            }
        }
        Ok(())
    }

    fn check_dim(&self, eta: &[f64]) -> Result<(), DistributionError> {
        if eta.len() != self.param_dim() {
            return Err(DistributionError::EtaDimension { expected: self.param_dim(), got: eta.len() });
        }
        Ok(())
    }

    /// Maps raw network outputs to a proposal distribution.
    ///
    /// * Normal: `mean = eta[0]`, `stddev = softplus(eta[1]) + 1e-3`.
    /// * UniformContinuous(low, high): Normal truncated to `[low, high]` with
    ///   `mean = low + w * sigmoid(eta[0])`, `stddev = w * (softplus(eta[1]) + 1e-3)`,
    ///   `w = high - low`.
    /// * Categorical: `softmax(eta)`.
    pub fn from_eta(&self, eta: &[f64]) -> Result<DistributionSpec, DistributionError> {
        self.check_dim(eta)?;
        match *self {
            ProposalType::Normal => DistributionSpec::normal(eta[0], softplus(eta[1]) + STDDEV_FLOOR),
            ProposalType::UniformContinuous { low, high } => {
                let w = high - low;
                DistributionSpec::truncated_normal(
                    low + w * sigmoid(eta[0]),
                    w * (softplus(eta[1]) + STDDEV_FLOOR),
                    low,
                    high,
                )
            }
            ProposalType::Categorical { .. } => {
                let mut probs = softmax(eta);
                // Renormalize away the last few ulps so the sum check is exact enough.
                let total: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p /= total);
                DistributionSpec::categorical(probs)
            }
        }
    }

    /// `log q(x | eta)` together with its gradient with respect to `eta`.
    pub fn log_q_with_grad(&self, eta: &[f64], x: &SampleValue) -> Result<(f64, Vec<f64>), DistributionError> {
        self.check_dim(eta)?;
        match *self {
            ProposalType::Normal => {
                let v = x.as_real().ok_or(DistributionError::WrongValueType { family: "Normal", value: *x })?;
                let mean = eta[0];
                let sd = softplus(eta[1]) + STDDEV_FLOOR;
                let z = (v - mean) / sd;
                let logq = -0.5 * z * z - sd.ln() - HALF_LN_2PI;
                let d_mean = z / sd;
                let d_sd = (z * z - 1.0) / sd;
                Ok((logq, vec![d_mean, d_sd * sigmoid(eta[1])]))
            }
            ProposalType::UniformContinuous { low, high } => {
                let v =
                    x.as_real().ok_or(DistributionError::WrongValueType { family: "TruncatedNormal", value: *x })?;
                if v < low || v > high {
                    return Err(DistributionError::OutOfSupport { family: "TruncatedNormal", value: *x });
                }
                let w = high - low;
                let s0 = sigmoid(eta[0]);
                let mean = low + w * s0;
                let sd = w * (softplus(eta[1]) + STDDEV_FLOOR);
                let z = (v - mean) / sd;
                let a = (low - mean) / sd;
                let b = (high - mean) / sd;
                let mass = std_normal_mass(a, b);
                let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
                let logq = -0.5 * z * z - sd.ln() - HALF_LN_2PI - mass.ln();
                let d_mean = z / sd + (pb - pa) / (mass * sd);
                let d_sd = (z * z - 1.0) / sd + (b * pb - a * pa) / (mass * sd);
                Ok((logq, vec![d_mean * w * s0 * (1.0 - s0), d_sd * w * sigmoid(eta[1])]))
            }
            ProposalType::Categorical { categories } => {
                let c =
                    x.as_category().ok_or(DistributionError::WrongValueType { family: "Categorical", value: *x })?;
                if c >= categories {
                    return Err(DistributionError::OutOfSupport { family: "Categorical", value: *x });
                }
                let lse = log_sum_exp(eta);
                let logq = eta[c as usize] - lse;
                let grad = eta
                    .iter()
                    .enumerate()
                    .map(|(i, e)| (if i == c as usize { 1.0 } else { 0.0 }) - (e - lse).exp())
                    .collect();
                Ok((logq, grad))
            }
        }
    }

    /// Gradient of `log q(x | eta)` with respect to `eta`.
    pub fn grad_log_q(&self, eta: &[f64], x: &SampleValue) -> Result<Vec<f64>, DistributionError> {
        self.log_q_with_grad(eta, x).map(|(_, g)| g)
    }
}

pub fn normal_log_pdf(x: f64, mean: f64, stddev: f64) -> f64 {
    let z = (x - mean) / stddev;
    -0.5 * z * z - stddev.ln() - HALF_LN_2PI
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// `Phi(b) - Phi(a)` for `a <= b`, evaluated on whichever tail keeps precision.
pub fn std_normal_mass(a: f64, b: f64) -> f64 {
    let (ea, eb) = (a * FRAC_1_SQRT_2, b * FRAC_1_SQRT_2);
    if a > 0.0 {
        0.5 * (libm::erfc(ea) - libm::erfc(eb))
    } else if b < 0.0 {
        0.5 * (libm::erfc(-eb) - libm::erfc(-ea))
    } else {
        0.5 * (libm::erf(eb) - libm::erf(ea))
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sum(exp(xs)))`; `-inf` for an empty slice or all `-inf` inputs.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

fn sample_truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64, low: f64, high: f64) -> f64 {
    let a = (low - mean) / sd;
    let b = (high - mean) / sd;
    if std_normal_mass(a, b) >= 0.25 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            let x = mean + sd * z;
            if (low..=high).contains(&x) {
                return x;
            }
        }
    }
    // Narrow window relative to the scale: uniform envelope, accepted with
    // probability phi(z) / max phi over the window.
    let z_peak = 0.0f64.clamp(a, b);
    loop {
        let u: f64 = rng.random();
        let x = low + (high - low) * u;
        let z = (x - mean) / sd;
        let accept = (-0.5 * (z * z - z_peak * z_peak)).exp();
        if rng.random::<f64>() < accept {
            return x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut s = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            s += f(lo + h * i as f64);
        }
        s * h
    }

    fn density(d: &DistributionSpec, x: f64) -> f64 {
        d.log_pdf(&SampleValue::Real(x)).unwrap().exp()
    }

    #[test]
    fn log_pdf_reference_values() {
        let n = DistributionSpec::normal(0.0, 1.0).unwrap();
        assert!((n.log_pdf(&SampleValue::Real(0.0)).unwrap() + 0.918_938_5).abs() < 1e-7);
        let c = DistributionSpec::categorical(vec![0.25, 0.75]).unwrap();
        assert!((c.log_pdf(&SampleValue::Category(1)).unwrap() + 0.287_682_1).abs() < 1e-7);
        let u = DistributionSpec::uniform(-1.0, 1.0).unwrap();
        assert!((u.log_pdf(&SampleValue::Real(0.3)).unwrap() + std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn out_of_support_handling() {
        let c = DistributionSpec::categorical(vec![0.5, 0.5]).unwrap();
        assert!(matches!(c.log_pdf(&SampleValue::Category(2)), Err(DistributionError::OutOfSupport { .. })));
        let u = DistributionSpec::uniform(-1.0, 1.0).unwrap();
        assert_eq!(u.log_pdf(&SampleValue::Real(1.5)).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(u.log_pdf(&SampleValue::Category(0)), Err(DistributionError::WrongValueType { .. })));
    }

    #[test]
    fn constructors_reject_bad_parameters() {
        assert!(DistributionSpec::normal(5.0, 0.0).is_err());
        assert!(DistributionSpec::normal(5.0, -1.0).is_err());
        assert!(DistributionSpec::uniform(1.0, 1.0).is_err());
        assert!(DistributionSpec::categorical(vec![0.5, 0.6]).is_err());
        assert!(DistributionSpec::categorical(vec![-0.5, 1.5]).is_err());
        assert!(DistributionSpec::categorical(vec![]).is_err());
    }

    #[test]
    fn degenerate_categorical_always_first() {
        let c = DistributionSpec::categorical(vec![1.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert_eq!(c.sample(&mut rng), SampleValue::Category(0));
        }
        let c = DistributionSpec::categorical(vec![0.0, 0.0, 1.0]).unwrap();
        for _ in 0..1000 {
            assert_eq!(c.sample(&mut rng), SampleValue::Category(2));
        }
    }

    #[test]
    fn normal_sample_mean() {
        let d = DistributionSpec::normal(2.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| d.sample(&mut rng).as_real().unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let d = DistributionSpec::truncated_normal(0.2, 3.0, -1.0, 1.0).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| d.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn densities_normalize() {
        let n = DistributionSpec::normal(0.3, 0.7).unwrap();
        assert!((trapezoid(|x| density(&n, x), -10.0, 10.0, 20_000) - 1.0).abs() < 1e-3);
        let u = DistributionSpec::uniform(-2.0, 3.0).unwrap();
        assert!((trapezoid(|x| density(&u, x), -2.0, 3.0, 1000) - 1.0).abs() < 1e-3);
        let c = DistributionSpec::categorical(vec![0.1, 0.2, 0.7]).unwrap();
        let total: f64 = (0..3).map(|i| c.log_pdf(&SampleValue::Category(i)).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for &(m, s) in &[(0.0, 0.3), (0.9, 0.05), (-0.5, 4.0), (0.99, 1e-3)] {
            let t = DistributionSpec::truncated_normal(m, s, -1.0, 1.0).unwrap();
            let z = trapezoid(|x| density(&t, x), -1.0, 1.0, 200_000);
            assert!((z - 1.0).abs() < 1e-3, "truncated normal ({m}, {s}) integrates to {z}");
        }
    }

    #[test]
    fn mixture_normalizes_and_reduces_to_normal() {
        let mix = DistributionSpec::gaussian_mixture_2d(vec![([0.2, -0.1], 0.3), ([-0.5, 0.4], 0.2)]).unwrap();
        let (lo, hi, n) = (-3.0, 3.0, 600);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let p = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                total += mix.log_pdf(&SampleValue::Point(p)).unwrap().exp();
            }
        }
        assert!((total * h * h - 1.0).abs() < 1e-3);

        let single = DistributionSpec::gaussian_mixture_2d(vec![([0.2, -0.1], 0.3)]).unwrap();
        let p = [0.5, 0.25];
        let expected = normal_log_pdf(p[0], 0.2, 0.3) + normal_log_pdf(p[1], -0.1, 0.3);
        assert_eq!(single.log_pdf(&SampleValue::Point(p)).unwrap(), expected);
    }

    #[test]
    fn proposal_link_examples() {
        let d = ProposalType::Normal.from_eta(&[0.0, 0.0]).unwrap();
        match d {
            DistributionSpec::Normal { mean, stddev } => {
                assert_eq!(mean, 0.0);
                assert!((stddev - 0.694_147_2).abs() < 1e-7);
            }
            _ => panic!(),
        }
        let d = ProposalType::Normal.from_eta(&[1.5, 2.0]).unwrap();
        match d {
            DistributionSpec::Normal { mean, stddev } => {
                assert_eq!(mean, 1.5);
                // softplus(2) = ln(1 + e^2)
                let expected = (1.0 + 2f64.exp()).ln() + 1e-3;
                assert!((stddev - expected).abs() < 1e-12);
                assert!((stddev - 2.127_928_0).abs() < 1e-7);
            }
            _ => panic!(),
        }
        let d = ProposalType::Categorical { categories: 3 }.from_eta(&[0.7, 0.7, 0.7]).unwrap();
        match d {
            DistributionSpec::Categorical { probs } => {
                for p in probs {
                    assert!((p - 1.0 / 3.0).abs() < 1e-15);
                }
            }
            _ => panic!(),
        }
        assert!(matches!(
            ProposalType::Normal.from_eta(&[0.0]),
            Err(DistributionError::EtaDimension { expected: 2, got: 1 })
        ));
        assert!(ProposalType::Categorical { categories: 2 }.grad_log_q(&[0.0], &SampleValue::Category(0)).is_err());
    }

    #[test]
    fn gradient_examples() {
        let g = ProposalType::Normal.grad_log_q(&[0.0, 0.0], &SampleValue::Real(0.0)).unwrap();
        assert_eq!(g[0], 0.0);
        let g = ProposalType::Categorical { categories: 2 }.grad_log_q(&[0.0, 0.0], &SampleValue::Category(0)).unwrap();
        assert_eq!(g, vec![0.5, -0.5]);
    }

    #[test]
    fn log_q_matches_density_of_linked_distribution() {
        let types = [
            ProposalType::Normal,
            ProposalType::UniformContinuous { low: -1.0, high: 2.0 },
            ProposalType::Categorical { categories: 4 },
        ];
        let etas: [&[f64]; 3] = [&[0.3, -0.4], &[0.3, -0.4], &[0.1, -0.2, 0.5, 1.0]];
        let xs = [SampleValue::Real(0.7), SampleValue::Real(0.7), SampleValue::Category(2)];
        for ((t, eta), x) in types.iter().zip(etas).zip(xs) {
            let (lq, _) = t.log_q_with_grad(eta, &x).unwrap();
            let direct = t.from_eta(eta).unwrap().log_pdf(&x).unwrap();
            assert!((lq - direct).abs() < 1e-12);
        }
    }

    fn central_difference(t: &ProposalType, eta: &[f64], x: &SampleValue) -> Vec<f64> {
        let h = 1e-5;
        (0..eta.len())
            .map(|i| {
                let mut up = eta.to_vec();
                let mut dn = eta.to_vec();
                up[i] += h;
                dn[i] -= h;
                let fu = t.from_eta(&up).unwrap().log_pdf(x).unwrap();
                let fd = t.from_eta(&dn).unwrap().log_pdf(x).unwrap();
                (fu - fd) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64]) {
        for (a, n) in analytic.iter().zip(numeric) {
            let scale = a.abs().max(n.abs()).max(1.0);
            assert!((a - n).abs() <= 1e-6 * scale, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn normal_gradient_at_unit_eta_matches_finite_differences() {
        let x = SampleValue::Real(0.0);
        let g = ProposalType::Normal.grad_log_q(&[1.0, 1.0], &x).unwrap();
        assert_grad_close(&g, &central_difference(&ProposalType::Normal, &[1.0, 1.0], &x));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn normal_gradient_finite_differences(e0 in -3.0f64..3.0, e1 in -3.0f64..3.0, x in -4.0f64..4.0) {
            let t = ProposalType::Normal;
            let x = SampleValue::Real(x);
            let g = t.grad_log_q(&[e0, e1], &x).unwrap();
            assert_grad_close(&g, &central_difference(&t, &[e0, e1], &x));
        }

        #[test]
        fn truncated_gradient_finite_differences(e0 in -3.0f64..3.0, e1 in -3.0f64..2.0, u in 0.0f64..=1.0) {
            let t = ProposalType::UniformContinuous { low: -1.0, high: 1.0 };
            let x = SampleValue::Real(-1.0 + 2.0 * u);
            let g = t.grad_log_q(&[e0, e1], &x).unwrap();
            assert_grad_close(&g, &central_difference(&t, &[e0, e1], &x));
        }

        #[test]
        fn categorical_gradient_finite_differences(eta in proptest::collection::vec(-4.0f64..4.0, 5), c in 0u32..5) {
            let t = ProposalType::Categorical { categories: 5 };
            let x = SampleValue::Category(c);
            let g = t.grad_log_q(&eta, &x).unwrap();
            assert_grad_close(&g, &central_difference(&t, &eta, &x));
        }

        #[test]
        fn linked_proposals_are_valid(e0 in -1e6f64..1e6, e1 in -1e6f64..1e6, logits in proptest::collection::vec(-50.0f64..50.0, 1..8)) {
            prop_assert!(ProposalType::Normal.from_eta(&[e0, e1]).is_ok());
            let t = ProposalType::UniformContinuous { low: 0.05, high: 0.2 };
            prop_assert!(t.from_eta(&[e0, e1]).is_ok());
            let n = logits.len() as u32;
            let t = ProposalType::Categorical { categories: n };
            prop_assert!(t.from_eta(&logits).is_ok());
        }

        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
            let total: f64 = softmax(&logits).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn truncated_samples_stay_in_support(m in -1.0f64..1.0, s in 1e-3f64..10.0, seed in any::<u64>()) {
            let d = DistributionSpec::truncated_normal(m, s, -1.0, 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                let x = d.sample(&mut rng).as_real().unwrap();
                prop_assert!((-1.0..=1.0).contains(&x));
            }
        }
    }
}
