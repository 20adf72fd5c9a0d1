//! Executes model programs in prior, unconstrained, or guided mode.
//!
//! A model is ordinary Rust code that calls [`ExecutionHandle::sample`] and
//! [`ExecutionHandle::observe`]. The handle decides where values come from:
//!
//! * `Prior`: sample statements draw from their prior; observe statements
//!   score the supplied observations.
//! * `Unconstrained`: as `Prior`, but observe statements draw a synthetic
//!   value from their distribution instead of reading one. This is the
//!   training-data generator.
//! * `Guided`: sample statements draw from a proposal whose parameters come
//!   from a [`ProposalOracle`]; observe statements score the observations.

use rand::RngCore;
use thiserror::Error;

use crate::distributions::{DistributionError, DistributionSpec, ProposalType, SampleValue, STDDEV_FLOOR};
use crate::trace::{Address, AddressCounter, Observations, Trace, TraceEntry, TraceError, MAX_TRACE_LEN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("trace exceeded {0} sample entries")]
    TraceTooLong(usize),
    #[error("observe statement {index} exceeds the declared observe count {declared}")]
    TooManyObserves { index: usize, declared: usize },
    #[error("no observed value for observe statement {0}")]
    MissingObservation(usize),
    #[error("expected {expected} observations, got {got}")]
    ObservationCount { expected: usize, got: usize },
    #[error("guided execution requires a proposal oracle")]
    MissingOracle,
    #[error("address {address} used with proposal type {got:?}, previously {expected:?}")]
    ProposalTypeChanged { address: Address, expected: ProposalType, got: ProposalType },
    #[error("invalid block permutation: {0}")]
    BadPermutation(String),
    #[error("{0}")]
    Model(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Prior,
    Unconstrained,
    Guided,
}

/// How a model's observed values are typed; used when reading data files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationKind {
    Real,
    Category,
    Point,
}

/// A probabilistic program with a fixed number of observe statements.
pub trait ModelProgram: Send + Sync {
    /// Canonical identifier, including any parameters that change the model.
    fn id(&self) -> String;

    /// Number of observe statements every execution makes.
    fn observe_count(&self) -> usize;

    fn observation_kind(&self) -> ObservationKind;

    /// Addresses the program may sample at, with their proposal types.
    fn address_table(&self) -> Vec<(Address, ProposalType)>;

    /// Width of [`ModelProgram::observation_features`].
    fn feature_dim(&self) -> usize;

    /// Input to the observation embedding network.
    fn observation_features(&self, obs: &Observations) -> Vec<f64>;

    fn run(&self, h: &mut ExecutionHandle<'_>) -> Result<(), RuntimeError>;

    /// Column names of [`ModelProgram::summarize`].
    fn summary_names(&self) -> Vec<String>;

    /// Quantities of interest extracted from a trace.
    fn summarize(&self, trace: &Trace) -> Vec<f64>;
}

/// What a guided sample statement asks the oracle for.
#[derive(Debug)]
pub struct ProposalRequest<'r> {
    pub address: &'r Address,
    pub instance: u32,
    pub proposal_type: &'r ProposalType,
    pub prior: &'r DistributionSpec,
    /// Value of the previous sample statement in this execution.
    pub previous_value: Option<&'r SampleValue>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("no proposal layers for ({0}, {1})")]
    UnseenKey(Address, u32),
    #[error("proposal unavailable: {0}")]
    Unavailable(String),
}

/// Supplies proposal parameters during guided execution.
pub trait ProposalOracle {
    fn propose(&mut self, req: &ProposalRequest<'_>) -> Result<Vec<f64>, OracleError>;
}

/// Oracle whose proposals reproduce the prior wherever the proposal link can
/// represent it; bounded-uniform priors fall back to prior draws.
#[derive(Debug, Default, Clone, Copy)]
pub struct PriorOracle;

impl ProposalOracle for PriorOracle {
    fn propose(&mut self, req: &ProposalRequest<'_>) -> Result<Vec<f64>, OracleError> {
        match req.prior {
            DistributionSpec::Normal { mean, stddev } if *stddev > STDDEV_FLOOR => {
                let y = stddev - STDDEV_FLOOR;
                // Inverse of softplus.
                Ok(vec![*mean, y + (-(-y).exp_m1()).ln()])
            }
            DistributionSpec::Categorical { probs } => Ok(probs.iter().map(|p| p.ln()).collect()),
            _ => Err(OracleError::Unavailable("prior not representable by the proposal link".into())),
        }
    }
}

/// Result of one program execution.
#[derive(Debug, Clone)]
pub struct Execution {
    pub trace: Trace,
    /// Values drawn at observe statements in unconstrained mode.
    pub synthetic_observations: Option<Observations>,
    /// Sample statements that fell back to the prior in guided mode.
    pub fallbacks: usize,
}

/// The interface a running model sees.
pub struct ExecutionHandle<'a> {
    mode: Mode,
    entries: Vec<TraceEntry>,
    observe_log_pdfs: Vec<f64>,
    observe_count: usize,
    counter: AddressCounter,
    oracle: Option<&'a mut dyn ProposalOracle>,
    rng: &'a mut dyn RngCore,
    observations: Option<&'a Observations>,
    synthetic: Vec<SampleValue>,
    fallbacks: usize,
    max_len: usize,
}

impl<'a> ExecutionHandle<'a> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of sample entries recorded so far.
    pub fn position(&self) -> usize {
        self.entries.len()
    }

    pub fn sample(&mut self, address: &str, dist: &DistributionSpec) -> Result<SampleValue, RuntimeError> {
        if self.entries.len() >= self.max_len {
            return Err(RuntimeError::TraceTooLong(self.max_len));
        }
        let address = Address::new(address)?;
        let proposal_type = ProposalType::for_prior(dist)?;
        let instance = self.counter.next_instance(&address);
        if let Some(prev) = self.entries.iter().find(|e| e.address == address) {
            if prev.proposal_type != proposal_type {
                return Err(RuntimeError::ProposalTypeChanged {
                    address,
                    expected: prev.proposal_type,
                    got: proposal_type,
                });
            }
        }

        let (value, prior_log_pdf, proposal_log_pdf) = match self.mode {
            Mode::Prior | Mode::Unconstrained => {
                let value = dist.sample(&mut *self.rng);
                (value, dist.log_pdf(&value)?, None)
            }
            Mode::Guided => {
                let oracle = self.oracle.as_deref_mut().ok_or(RuntimeError::MissingOracle)?;
                let req = ProposalRequest {
                    address: &address,
                    instance,
                    proposal_type: &proposal_type,
                    prior: dist,
                    previous_value: self.entries.last().map(|e| &e.value),
                };
                let proposal = oracle.propose(&req).ok().and_then(|eta| proposal_type.from_eta(&eta).ok());
                match proposal {
                    Some(q) => {
                        let value = q.sample(&mut *self.rng);
                        (value, dist.log_pdf(&value)?, Some(q.log_pdf(&value)?))
                    }
                    None => {
                        self.fallbacks += 1;
                        let value = dist.sample(&mut *self.rng);
                        let lp = dist.log_pdf(&value)?;
                        (value, lp, Some(lp))
                    }
                }
            }
        };
        self.entries.push(TraceEntry { value, address, instance, proposal_type, prior_log_pdf, proposal_log_pdf });
        Ok(value)
    }

    pub fn sample_real(&mut self, address: &str, dist: &DistributionSpec) -> Result<f64, RuntimeError> {
        self.sample(address, dist)?
            .as_real()
            .ok_or_else(|| RuntimeError::Model(format!("{address} did not produce a real value")))
    }

    pub fn sample_category(&mut self, address: &str, dist: &DistributionSpec) -> Result<u32, RuntimeError> {
        self.sample(address, dist)?
            .as_category()
            .ok_or_else(|| RuntimeError::Model(format!("{address} did not produce a category")))
    }

    /// Conditions on the next observed value, or draws a synthetic one in
    /// unconstrained mode. Returns the value used.
    pub fn observe(&mut self, dist: &DistributionSpec) -> Result<SampleValue, RuntimeError> {
        let index = self.observe_log_pdfs.len();
        if index >= self.observe_count {
            return Err(RuntimeError::TooManyObserves { index, declared: self.observe_count });
        }
        let y = match self.mode {
            Mode::Unconstrained => {
                let y = dist.sample(&mut *self.rng);
                self.synthetic.push(y);
                y
            }
            Mode::Prior | Mode::Guided => {
                *self.observations.and_then(|o| o.values.get(index)).ok_or(RuntimeError::MissingObservation(index))?
            }
        };
        self.observe_log_pdfs.push(dist.log_pdf(&y)?);
        Ok(y)
    }

    /// Reorders `order.len()` consecutive blocks of `block_len` entries
    /// starting at `start`, so that new block `j` is old block `order[j]`,
    /// and renumbers instances to match the new order.
    pub fn permute_blocks(&mut self, start: usize, block_len: usize, order: &[usize]) -> Result<(), RuntimeError> {
        let n = order.len();
        let end = start + block_len * n;
        if end > self.entries.len() {
            return Err(RuntimeError::BadPermutation(format!(
                "blocks end at {end}, trace has {} entries",
                self.entries.len()
            )));
        }
        let mut seen = vec![false; n];
        for &o in order {
            if o >= n || std::mem::replace(&mut seen[o], true) {
                return Err(RuntimeError::BadPermutation(format!("{order:?} is not a permutation")));
            }
        }
        let old: Vec<TraceEntry> = self.entries[start..end].to_vec();
        for (j, &o) in order.iter().enumerate() {
            self.entries[start + j * block_len..start + (j + 1) * block_len]
                .clone_from_slice(&old[o * block_len..(o + 1) * block_len]);
        }
        let mut counter = AddressCounter::new();
        for e in &self.entries[..start] {
            counter.next_instance(&e.address);
        }
        for e in &mut self.entries[start..end] {
            e.instance = counter.next_instance(&e.address);
        }
        Ok(())
    }
}

/// Runs `model` once.
///
/// `observations` is required in prior and guided mode and ignored in
/// unconstrained mode; `oracle` is required in guided mode.
pub fn execute<'a>(
    model: &dyn ModelProgram,
    mode: Mode,
    observations: Option<&'a Observations>,
    oracle: Option<&'a mut dyn ProposalOracle>,
    rng: &'a mut dyn RngCore,
) -> Result<Execution, RuntimeError> {
    let n = model.observe_count();
    let observations = match mode {
        Mode::Unconstrained => None,
        Mode::Prior | Mode::Guided => {
            let obs = observations.ok_or(RuntimeError::ObservationCount { expected: n, got: 0 })?;
            if obs.len() != n {
                return Err(RuntimeError::ObservationCount { expected: n, got: obs.len() });
            }
            Some(obs)
        }
    };
    if mode == Mode::Guided && oracle.is_none() {
        return Err(RuntimeError::MissingOracle);
    }
    let mut h = ExecutionHandle {
        mode,
        entries: Vec::new(),
        observe_log_pdfs: Vec::with_capacity(n),
        observe_count: n,
        counter: AddressCounter::new(),
        oracle,
        rng,
        observations,
        synthetic: Vec::new(),
        fallbacks: 0,
        max_len: MAX_TRACE_LEN,
    };
    model.run(&mut h)?;
    let trace = Trace { entries: h.entries, observe_log_pdfs: h.observe_log_pdfs, observe_count: n };
    if !trace.is_complete() {
        return Err(TraceError::Incomplete { expected: n, got: trace.observe_log_pdfs.len() }.into());
    }
    Ok(Execution {
        trace,
        synthetic_observations: (mode == Mode::Unconstrained).then(|| Observations::new(h.synthetic)),
        fallbacks: h.fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{normal_log_pdf, softplus};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// mu ~ N(0, 1); y ~ N(mu, 1).
    struct Tiny;

    impl ModelProgram for Tiny {
        fn id(&self) -> String {
            "tiny".into()
        }
        fn observe_count(&self) -> usize {
            1
        }
        fn observation_kind(&self) -> ObservationKind {
            ObservationKind::Real
        }
        fn address_table(&self) -> Vec<(Address, ProposalType)> {
            vec![(Address::new("mu").unwrap(), ProposalType::Normal)]
        }
        fn feature_dim(&self) -> usize {
            1
        }
        fn observation_features(&self, obs: &Observations) -> Vec<f64> {
            obs.reals().collect()
        }
        fn run(&self, h: &mut ExecutionHandle<'_>) -> Result<(), RuntimeError> {
            let mu = h.sample_real("mu", &DistributionSpec::normal(0.0, 1.0)?)?;
            h.observe(&DistributionSpec::normal(mu, 1.0)?)?;
            Ok(())
        }
        fn summary_names(&self) -> Vec<String> {
            vec!["mu".into()]
        }
        fn summarize(&self, trace: &Trace) -> Vec<f64> {
            vec![trace.entries[0].value.as_real().unwrap()]
        }
    }

    /// Observes twice but declares one observe.
    struct Greedy;

    impl ModelProgram for Greedy {
        fn id(&self) -> String {
            "greedy".into()
        }
        fn observe_count(&self) -> usize {
            1
        }
        fn observation_kind(&self) -> ObservationKind {
            ObservationKind::Real
        }
        fn address_table(&self) -> Vec<(Address, ProposalType)> {
            vec![]
        }
        fn feature_dim(&self) -> usize {
            1
        }
        fn observation_features(&self, obs: &Observations) -> Vec<f64> {
            obs.reals().collect()
        }
        fn run(&self, h: &mut ExecutionHandle<'_>) -> Result<(), RuntimeError> {
            let d = DistributionSpec::normal(0.0, 1.0)?;
            h.observe(&d)?;
            h.observe(&d)?;
            Ok(())
        }
        fn summary_names(&self) -> Vec<String> {
            vec![]
        }
        fn summarize(&self, _: &Trace) -> Vec<f64> {
            vec![]
        }
    }

    struct FixedEta(Vec<f64>);

    impl ProposalOracle for FixedEta {
        fn propose(&mut self, _: &ProposalRequest<'_>) -> Result<Vec<f64>, OracleError> {
            Ok(self.0.clone())
        }
    }

    struct NeverSeen;

    impl ProposalOracle for NeverSeen {
        fn propose(&mut self, req: &ProposalRequest<'_>) -> Result<Vec<f64>, OracleError> {
            Err(OracleError::UnseenKey(req.address.clone(), req.instance))
        }
    }

    fn obs(y: f64) -> Observations {
        Observations::new(vec![SampleValue::Real(y)])
    }

    #[test]
    fn prior_mode_records_first_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = execute(&Tiny, Mode::Prior, Some(&obs(0.3)), None, &mut rng).unwrap();
        let e = &ex.trace.entries[0];
        assert_eq!(e.address.as_str(), "mu");
        assert_eq!(e.instance, 1);
        assert_eq!(e.proposal_log_pdf, None);
        assert!(ex.synthetic_observations.is_none());
    }

    #[test]
    fn prior_mode_is_reproducible() {
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            execute(&Tiny, Mode::Prior, Some(&obs(0.3)), None, &mut rng).unwrap().trace
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn unconstrained_mode_draws_observations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = execute(&Tiny, Mode::Unconstrained, None, None, &mut rng).unwrap();
        assert_eq!(ex.trace.len(), 1);
        let synth = ex.synthetic_observations.unwrap();
        assert_eq!(synth.len(), 1);
        let mu = ex.trace.entries[0].value.as_real().unwrap();
        let y = synth.values[0].as_real().unwrap();
        assert_eq!(ex.trace.observe_log_pdfs[0], normal_log_pdf(y, mu, 1.0));
    }

    #[test]
    fn unconstrained_ignores_supplied_observations() {
        let a =
            execute(&Tiny, Mode::Unconstrained, Some(&obs(100.0)), None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = execute(&Tiny, Mode::Unconstrained, None, None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.synthetic_observations, b.synthetic_observations);
    }

    #[test]
    fn guided_mode_uses_oracle_proposal() {
        let mut oracle = FixedEta(vec![0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ex = execute(&Tiny, Mode::Guided, Some(&obs(0.0)), Some(&mut oracle), &mut rng).unwrap();
        let e = &ex.trace.entries[0];
        let x = e.value.as_real().unwrap();
        let sd = 2f64.ln() + 1e-3;
        assert!((e.proposal_log_pdf.unwrap() - normal_log_pdf(x, 0.0, sd)).abs() < 1e-12);
        assert_eq!(e.prior_log_pdf, normal_log_pdf(x, 0.0, 1.0));
        assert_eq!(ex.trace.observe_log_pdfs[0], normal_log_pdf(0.0, x, 1.0));
        assert_eq!(ex.fallbacks, 0);
    }

    #[test]
    fn guided_fallback_matches_prior() {
        let mut oracle = NeverSeen;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ex = execute(&Tiny, Mode::Guided, Some(&obs(0.0)), Some(&mut oracle), &mut rng).unwrap();
        let e = &ex.trace.entries[0];
        assert_eq!(e.proposal_log_pdf, Some(e.prior_log_pdf));
        assert_eq!(ex.fallbacks, 1);
    }

    #[test]
    fn guided_requires_oracle_and_observations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(
            execute(&Tiny, Mode::Guided, Some(&obs(0.0)), None, &mut rng).unwrap_err(),
            RuntimeError::MissingOracle
        );
        assert_eq!(
            execute(&Tiny, Mode::Prior, None, None, &mut rng).unwrap_err(),
            RuntimeError::ObservationCount { expected: 1, got: 0 }
        );
    }

    #[test]
    fn extra_observe_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let err = execute(&Greedy, Mode::Unconstrained, None, None, &mut rng).unwrap_err();
        assert_eq!(err, RuntimeError::TooManyObserves { index: 1, declared: 1 });
    }

    #[test]
    fn guided_observe_scores_observation() {
        let mut oracle = PriorOracle;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ex = execute(&Tiny, Mode::Guided, Some(&obs(0.0)), Some(&mut oracle), &mut rng).unwrap();
        let mu = ex.trace.entries[0].value.as_real().unwrap();
        assert_eq!(ex.trace.observe_log_pdfs[0], normal_log_pdf(0.0, mu, 1.0));
    }

    #[test]
    fn prior_oracle_reproduces_prior_parameters() {
        let prior = DistributionSpec::normal(0.4, 2.5).unwrap();
        let a = Address::new("x").unwrap();
        let req = ProposalRequest {
            address: &a,
            instance: 1,
            proposal_type: &ProposalType::Normal,
            prior: &prior,
            previous_value: None,
        };
        let eta = PriorOracle.propose(&req).unwrap();
        match ProposalType::Normal.from_eta(&eta).unwrap() {
            DistributionSpec::Normal { mean, stddev } => {
                assert_eq!(mean, 0.4);
                assert!((stddev - 2.5).abs() < 1e-12);
            }
            _ => panic!(),
        }
        assert!((softplus(eta[1]) + STDDEV_FLOOR - 2.5).abs() < 1e-12);
    }

    /// Two-sample chi-square over equal-probability bins of the prior.
    #[test]
    fn guided_with_prior_oracle_matches_prior_distribution() {
        use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
        let n = 10_000;
        let bins = 20;
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        let edges: Vec<f64> = (1..bins).map(|i| std_normal.inverse_cdf(i as f64 / bins as f64)).collect();
        let bin_of = |x: f64| edges.iter().take_while(|e| x >= **e).count();
        let mut prior_counts = vec![0.0; bins];
        let mut guided_counts = vec![0.0; bins];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = obs(0.5);
        for _ in 0..n {
            let ex = execute(&Tiny, Mode::Prior, Some(&data), None, &mut rng).unwrap();
            prior_counts[bin_of(ex.trace.entries[0].value.as_real().unwrap())] += 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut oracle = PriorOracle;
        for _ in 0..n {
            let ex = execute(&Tiny, Mode::Guided, Some(&data), Some(&mut oracle), &mut rng).unwrap();
            let e = &ex.trace.entries[0];
            assert!((e.prior_log_pdf - e.proposal_log_pdf.unwrap()).is_finite());
            guided_counts[bin_of(e.value.as_real().unwrap())] += 1.0;
        }
        let stat: f64 = prior_counts.iter().zip(&guided_counts).map(|(a, b)| (a - b) * (a - b) / (a + b)).sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn block_permutation_renumbers_instances() {
        struct Blocks;
        impl ModelProgram for Blocks {
            fn id(&self) -> String {
                "blocks".into()
            }
            fn observe_count(&self) -> usize {
                0
            }
            fn observation_kind(&self) -> ObservationKind {
                ObservationKind::Real
            }
            fn address_table(&self) -> Vec<(Address, ProposalType)> {
                vec![]
            }
            fn feature_dim(&self) -> usize {
                0
            }
            fn observation_features(&self, _: &Observations) -> Vec<f64> {
                vec![]
            }
            fn run(&self, h: &mut ExecutionHandle<'_>) -> Result<(), RuntimeError> {
                let d = DistributionSpec::normal(0.0, 1.0)?;
                h.sample("head", &d)?;
                for _ in 0..3 {
                    h.sample("a", &d)?;
                    h.sample("b", &d)?;
                }
                let before: Vec<f64> = (1..7).map(|i| h.entries[i].value.as_real().unwrap()).collect();
                h.permute_blocks(1, 2, &[2, 0, 1])?;
                let after: Vec<f64> = (1..7).map(|i| h.entries[i].value.as_real().unwrap()).collect();
                assert_eq!(after, vec![before[4], before[5], before[0], before[1], before[2], before[3]]);
                assert!(h.permute_blocks(1, 2, &[0, 0, 1]).is_err());
                assert!(h.permute_blocks(5, 2, &[0, 1, 2]).is_err());
                Ok(())
            }
            fn summary_names(&self) -> Vec<String> {
                vec![]
            }
            fn summarize(&self, _: &Trace) -> Vec<f64> {
                vec![]
            }
        }
        let ex = execute(&Blocks, Mode::Unconstrained, None, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ex.trace.validate_instances().unwrap();
        let inst: Vec<u32> = ex.trace.entries.iter().map(|e| e.instance).collect();
        assert_eq!(inst, vec![1, 1, 1, 2, 2, 3, 3]);
    }
}
