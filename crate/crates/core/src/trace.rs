//! Execution traces: addresses, per-address instance counting, and the joint
//! density of a completed run.

use std::collections::HashMap;
use std::fmt;

use serde_json::{json, Value};
use thiserror::Error;

use crate::distributions::{ProposalType, SampleValue};

/// Maximum number of sample entries in one trace.
pub const MAX_TRACE_LEN: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("address must be non-empty")]
    EmptyAddress,
    #[error("trace has {got} observe terms, program declares {expected}")]
    Incomplete { expected: usize, got: usize },
    #[error("entry {index} at address {address} has instance {got}, expected {expected}")]
    InstanceMismatch { index: usize, address: Address, expected: u32, got: u32 },
    #[error("malformed trace JSON: {0}")]
    Json(String),
}

/// Identifier of a sample statement, supplied by the model author at the call site.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Address(String);

impl Address {
    pub fn new(id: impl Into<String>) -> Result<Self, TraceError> {
        let id = id.into();
        if id.is_empty() {
            return Err(TraceError::EmptyAddress);
        }
        Ok(Address(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Counts how many times each address has been sampled in one execution.
#[derive(Debug, Default, Clone)]
pub struct AddressCounter {
    counts: HashMap<Address, u32>,
}

impl AddressCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns 1 on the first encounter of `a`, then 2, 3, ...
    pub fn next_instance(&mut self, a: &Address) -> u32 {
        let n = self.counts.entry(a.clone()).or_insert(0);
        *n += 1;
        *n
    }

    pub fn count(&self, a: &Address) -> u32 {
        self.counts.get(a).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub value: SampleValue,
    pub address: Address,
    pub instance: u32,
    pub proposal_type: ProposalType,
    pub prior_log_pdf: f64,
    /// Present only for entries drawn during guided execution.
    pub proposal_log_pdf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
    pub observe_log_pdfs: Vec<f64>,
    /// Number of observe statements the program declares.
    pub observe_count: usize,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.observe_log_pdfs.len() == self.observe_count
    }

    /// `sum_t log f(x_t) + sum_n log g_n(y_n)`.
    pub fn joint_log_density(&self) -> Result<f64, TraceError> {
        if !self.is_complete() {
            return Err(TraceError::Incomplete { expected: self.observe_count, got: self.observe_log_pdfs.len() });
        }
        let prior: f64 = self.entries.iter().map(|e| e.prior_log_pdf).sum();
        let likelihood: f64 = self.observe_log_pdfs.iter().sum();
        Ok(prior + likelihood)
    }

    pub fn log_likelihood(&self) -> f64 {
        self.observe_log_pdfs.iter().sum()
    }

    /// First value recorded at `address`, if any.
    pub fn value_at(&self, address: &str, instance: u32) -> Option<&SampleValue> {
        self.entries.iter().find(|e| e.address.as_str() == address && e.instance == instance).map(|e| &e.value)
    }

    /// Replays the address sequence and checks every instance number.
    pub fn validate_instances(&self) -> Result<(), TraceError> {
        validate_instances(&self.entries)
    }

    /// One-line JSON debug form: entries as `[value, address, instance,
    /// prior_log_pdf]` and the observation values.
    pub fn to_json_line(&self, observations: &Observations) -> String {
        let entries: Vec<Value> = self
            .entries
            .iter()
            .map(|e| json!([value_to_json(&e.value), e.address.as_str(), e.instance, e.prior_log_pdf]))
            .collect();
        let observes: Vec<Value> = observations.values.iter().map(value_to_json).collect();
        json!({ "entries": entries, "observes": observes }).to_string()
    }
}

pub fn validate_instances(entries: &[TraceEntry]) -> Result<(), TraceError> {
    let mut counter = AddressCounter::new();
    for (index, e) in entries.iter().enumerate() {
        let expected = counter.next_instance(&e.address);
        if e.instance != expected {
            return Err(TraceError::InstanceMismatch { index, address: e.address.clone(), expected, got: e.instance });
        }
    }
    Ok(())
}

fn value_to_json(v: &SampleValue) -> Value {
    match v {
        SampleValue::Real(x) => json!(x),
        SampleValue::Category(c) => json!(c),
        SampleValue::Point(p) => json!(p),
    }
}

/// Parses a value written by [`Trace::to_json_line`].
pub fn value_from_json(v: &Value) -> Result<SampleValue, TraceError> {
    if let Some(c) = v.as_u64().filter(|_| v.is_u64()) {
        return Ok(SampleValue::Category(c as u32));
    }
    if let Some(x) = v.as_f64() {
        return Ok(SampleValue::Real(x));
    }
    if let Some([a, b]) = v.as_array().map(|a| a.as_slice()) {
        if let (Some(a), Some(b)) = (a.as_f64(), b.as_f64()) {
            return Ok(SampleValue::Point([a, b]));
        }
    }
    Err(TraceError::Json(format!("unrecognized value {v}")))
}

/// The values of a program's observe statements, in execution order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Observations {
    pub values: Vec<SampleValue>,
}

impl Observations {
    pub fn new(values: Vec<SampleValue>) -> Self {
        Observations { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn reals(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().filter_map(|v| v.as_real())
    }
}
