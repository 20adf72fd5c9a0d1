//! Affine layers and a stacked LSTM core, expressed as tape operations.

use rand::Rng;

use super::params::{ParamId, ParamStore, Tensor};
use super::tape::{NodeId, Tape};
use super::NeuralError;

/// `y = W x + b` with `W` of shape `[output_dim, input_dim]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Affine {
    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let s = 1.0 / (input_dim.max(1) as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), vec![output_dim, input_dim], s, rng);
        let bias = store.add_uniform(format!("{name}.bias"), vec![output_dim], s, rng);
        Affine { weight, bias, input_dim, output_dim }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: NodeId) -> NodeId {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let wx = tape.matvec(w, x);
        tape.add(wx, b)
    }
}

/// One LSTM cell. Gates are stacked in the order input, forget, cell, output
/// in a single `[4H, input_dim + H]` matrix applied to `concat(x, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = input_dim + hidden;
        let s = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), vec![4 * hidden, fan_in], s, rng);
        let mut bias: Vec<f64> = (0..4 * hidden).map(|_| rng.random_range(-s..=s)).collect();
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        let bias = store.add(format!("{name}.bias"), Tensor::vector(bias));
        LstmCell { weight, bias, input_dim, hidden }
    }

    /// Returns the new `(h, c)`.
    pub fn step(&self, tape: &mut Tape<'_>, x: NodeId, h: NodeId, c: NodeId) -> (NodeId, NodeId) {
        let hd = self.hidden;
        let xh = tape.concat(&[x, h]);
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let z = tape.matvec(w, xh);
        let z = tape.add(z, b);
        let i = tape.slice(z, 0, hd);
        let f = tape.slice(z, hd, hd);
        let g = tape.slice(z, 2 * hd, hd);
        let o = tape.slice(z, 3 * hd, hd);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_new = tape.add(fc, ig);
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc);
        (h_new, c_new)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmStack {
    pub cells: Vec<LstmCell>,
}

/// Per-layer `(h, c)` node pairs on a tape.
pub type TapeState = Vec<(NodeId, NodeId)>;

impl LstmStack {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let cells = (0..layers)
            .map(|l| {
                let in_dim = if l == 0 { input_dim } else { hidden };
                LstmCell::init(store, &format!("lstm.{l}"), in_dim, hidden, rng)
            })
            .collect();
        LstmStack { cells }
    }

    pub fn input_dim(&self) -> usize {
        self.cells[0].input_dim
    }

    pub fn hidden(&self) -> usize {
        self.cells[0].hidden
    }

    pub fn zero_state(&self, tape: &mut Tape<'_>) -> TapeState {
        self.cells.iter().map(|c| (tape.zeros(c.hidden), tape.zeros(c.hidden))).collect()
    }

    /// Advances every layer by one step; returns the new state. The output
    /// `h_t` is the top layer's `h`.
    pub fn step(&self, tape: &mut Tape<'_>, state: &[(NodeId, NodeId)], x: NodeId) -> TapeState {
        let mut input = x;
        let mut next = Vec::with_capacity(self.cells.len());
        for (cell, &(h, c)) in self.cells.iter().zip(state) {
            let (h2, c2) = cell.step(tape, input, h, c);
            next.push((h2, c2));
            input = h2;
        }
        next
    }
}

/// LSTM state for one execution, held outside any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmSession {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LstmSession {
    pub fn new(stack: &LstmStack) -> Self {
        LstmSession {
            h: stack.cells.iter().map(|c| vec![0.0; c.hidden]).collect(),
            c: stack.cells.iter().map(|c| vec![0.0; c.hidden]).collect(),
        }
    }

    pub fn reset(&mut self) {
        self.h.iter_mut().chain(self.c.iter_mut()).for_each(|v| v.fill(0.0));
    }

    pub(crate) fn load(&self, tape: &mut Tape<'_>) -> TapeState {
        self.h.iter().zip(&self.c).map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone()))).collect()
    }

    pub(crate) fn store(&mut self, tape: &Tape<'_>, state: &[(NodeId, NodeId)]) {
        for (l, &(h, c)) in state.iter().enumerate() {
            self.h[l].copy_from_slice(tape.value(h));
            self.c[l].copy_from_slice(tape.value(c));
        }
    }

    /// One forward step without gradient tracking; returns `h_t`.
    pub fn step(&mut self, stack: &LstmStack, store: &ParamStore, rho: &[f64]) -> Result<Vec<f64>, NeuralError> {
        if rho.len() != stack.input_dim() {
            return Err(NeuralError::Dimension { what: "LSTM input", expected: stack.input_dim(), got: rho.len() });
        }
        let mut tape = Tape::new(store);
        let state = self.load(&mut tape);
        let x = tape.constant(rho.to_vec());
        let next = stack.step(&mut tape, &state, x);
        self.store(&tape, &next);
        Ok(tape.value(next.last().unwrap().0).to_vec())
    }
}
