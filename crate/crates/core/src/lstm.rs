//! LSTM parameters, the single-step roll-out and the masked sequence forward.
//!
//! A step computes
//!
//! ```text
//! g = tanh(W_gh h + W_gx x + b_g)      f = σ(W_fh h + W_fx x + b_f)
//! i = σ(W_ih h + W_ix x + b_i)         o = σ(W_oh h + W_ox x + b_o)
//! c' = f ⊙ c + i ⊙ g                   h' = o ⊙ tanh(c')
//! ```
//!
//! Detaching never changes these values. A [`DetachMask`] only records, per
//! step, that the recurrent input `h_{t-1}` is to be treated as a constant by
//! the backward pass.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::Scalar;
use crate::numerics::{self, Matrix, NumericsError, Rng, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LstmError {
    #[error(transparent)]
    Shape(#[from] NumericsError),
    #[error("mask has {got} steps but the sequence has {expected}")]
    MaskLength { expected: usize, got: usize },
    #[error("unknown initialization scheme {0:?} (expected \"zeros\" or \"uniform-xavier\")")]
    UnknownInitScheme(String),
    #[error("hidden and input sizes must be positive (got n={hidden}, d={input})")]
    EmptyShape { hidden: usize, input: usize },
    #[error("unknown parameter tensor {0:?}")]
    UnknownTensor(String),
}

pub type Result<T> = std::result::Result<T, LstmError>;

/// The four gate blocks, in `g, f, i, o` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gate {
    G,
    F,
    I,
    O,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::G, Gate::F, Gate::I, Gate::O];

    pub fn index(self) -> usize {
        match self {
            Gate::G => 0,
            Gate::F => 1,
            Gate::I => 2,
            Gate::O => 3,
        }
    }
}

/// One of the eight weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatrixId {
    Gh,
    Fh,
    Ih,
    Oh,
    Gx,
    Fx,
    Ix,
    Ox,
}

impl MatrixId {
    pub const ALL: [MatrixId; 8] = [
        MatrixId::Gh,
        MatrixId::Fh,
        MatrixId::Ih,
        MatrixId::Oh,
        MatrixId::Gx,
        MatrixId::Fx,
        MatrixId::Ix,
        MatrixId::Ox,
    ];

    pub fn gate(self) -> Gate {
        match self {
            MatrixId::Gh | MatrixId::Gx => Gate::G,
            MatrixId::Fh | MatrixId::Fx => Gate::F,
            MatrixId::Ih | MatrixId::Ix => Gate::I,
            MatrixId::Oh | MatrixId::Ox => Gate::O,
        }
    }

    /// True for the `W_*h` matrices acting on `h_{t-1}`.
    pub fn is_recurrent(self) -> bool {
        matches!(self, MatrixId::Gh | MatrixId::Fh | MatrixId::Ih | MatrixId::Oh)
    }

    pub fn name(self) -> &'static str {
        match self {
            MatrixId::Gh => "gh",
            MatrixId::Fh => "fh",
            MatrixId::Ih => "ih",
            MatrixId::Oh => "oh",
            MatrixId::Gx => "gx",
            MatrixId::Fx => "fx",
            MatrixId::Ix => "ix",
            MatrixId::Ox => "ox",
        }
    }
}

impl fmt::Display for MatrixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "W_{}", self.name())
    }
}

impl FromStr for MatrixId {
    type Err = LstmError;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().trim_start_matches("W_").trim_start_matches("w_");
        MatrixId::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| LstmError::UnknownTensor(s.to_string()))
    }
}

/// Any of the twelve parameter tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorId {
    Weight(MatrixId),
    Bias(Gate),
}

/// A single scalar parameter: tensor plus row-major offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamSlot {
    pub tensor: TensorId,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    Zeros,
    /// `U(-1/√n, 1/√n)` weights, zero biases except `b_f = 1`.
    UniformXavier,
}

impl FromStr for InitScheme {
    type Err = LstmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(InitScheme::Zeros),
            "uniform-xavier" => Ok(InitScheme::UniformXavier),
            other => Err(LstmError::UnknownInitScheme(other.to_string())),
        }
    }
}

/// Weights and biases of a single-layer LSTM with hidden size `n` and input
/// size `d`.
///
/// Gradients share this layout, see [`ParamGrads`](crate::backprop::ParamGrads).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_gh: Matrix,
    pub w_fh: Matrix,
    pub w_ih: Matrix,
    pub w_oh: Matrix,
    pub w_gx: Matrix,
    pub w_fx: Matrix,
    pub w_ix: Matrix,
    pub w_ox: Matrix,
    pub b_g: Vector,
    pub b_f: Vector,
    pub b_i: Vector,
    pub b_o: Vector,
}

impl LstmParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        let h = || Matrix::zeros(hidden, hidden);
        let x = || Matrix::zeros(hidden, input);
        let b = || Vector::zeros(hidden);
        LstmParams {
            w_gh: h(),
            w_fh: h(),
            w_ih: h(),
            w_oh: h(),
            w_gx: x(),
            w_fx: x(),
            w_ix: x(),
            w_ox: x(),
            b_g: b(),
            b_f: b(),
            b_i: b(),
            b_o: b(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.hidden(), self.input())
    }

    pub fn hidden(&self) -> usize {
        self.w_gh.rows()
    }

    pub fn input(&self) -> usize {
        self.w_gx.cols()
    }

    pub fn weight(&self, id: MatrixId) -> &Matrix {
        match id {
            MatrixId::Gh => &self.w_gh,
            MatrixId::Fh => &self.w_fh,
            MatrixId::Ih => &self.w_ih,
            MatrixId::Oh => &self.w_oh,
            MatrixId::Gx => &self.w_gx,
            MatrixId::Fx => &self.w_fx,
            MatrixId::Ix => &self.w_ix,
            MatrixId::Ox => &self.w_ox,
        }
    }

    pub fn weight_mut(&mut self, id: MatrixId) -> &mut Matrix {
        match id {
            MatrixId::Gh => &mut self.w_gh,
            MatrixId::Fh => &mut self.w_fh,
            MatrixId::Ih => &mut self.w_ih,
            MatrixId::Oh => &mut self.w_oh,
            MatrixId::Gx => &mut self.w_gx,
            MatrixId::Fx => &mut self.w_fx,
            MatrixId::Ix => &mut self.w_ix,
            MatrixId::Ox => &mut self.w_ox,
        }
    }

    pub fn recurrent(&self, gate: Gate) -> &Matrix {
        self.weight(match gate {
            Gate::G => MatrixId::Gh,
            Gate::F => MatrixId::Fh,
            Gate::I => MatrixId::Ih,
            Gate::O => MatrixId::Oh,
        })
    }

    pub fn input_weight(&self, gate: Gate) -> &Matrix {
        self.weight(match gate {
            Gate::G => MatrixId::Gx,
            Gate::F => MatrixId::Fx,
            Gate::I => MatrixId::Ix,
            Gate::O => MatrixId::Ox,
        })
    }

    pub fn bias(&self, gate: Gate) -> &Vector {
        match gate {
            Gate::G => &self.b_g,
            Gate::F => &self.b_f,
            Gate::I => &self.b_i,
            Gate::O => &self.b_o,
        }
    }

    pub fn bias_mut(&mut self, gate: Gate) -> &mut Vector {
        match gate {
            Gate::G => &mut self.b_g,
            Gate::F => &mut self.b_f,
            Gate::I => &mut self.b_i,
            Gate::O => &mut self.b_o,
        }
    }

    pub fn tensor(&self, id: TensorId) -> &[f64] {
        match id {
            TensorId::Weight(m) => self.weight(m).as_slice(),
            TensorId::Bias(g) => self.bias(g).as_slice(),
        }
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut [f64] {
        match id {
            TensorId::Weight(m) => self.weight_mut(m).as_mut_slice(),
            TensorId::Bias(g) => self.bias_mut(g).as_mut_slice(),
        }
    }

    /// All twelve tensors in a fixed order (weights `gh..ox`, then biases
    /// `g, f, i, o`).
    pub fn tensor_ids() -> impl Iterator<Item = TensorId> {
        MatrixId::ALL
            .into_iter()
            .map(TensorId::Weight)
            .chain(Gate::ALL.into_iter().map(TensorId::Bias))
    }

    pub fn tensor_name(id: TensorId) -> String {
        match id {
            TensorId::Weight(m) => format!("w_{}", m.name()),
            TensorId::Bias(g) => format!("b_{}", ["g", "f", "i", "o"][g.index()]),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.w_gh.as_slice(),
            self.w_fh.as_slice(),
            self.w_ih.as_slice(),
            self.w_oh.as_slice(),
            self.w_gx.as_slice(),
            self.w_fx.as_slice(),
            self.w_ix.as_slice(),
            self.w_ox.as_slice(),
            self.b_g.as_slice(),
            self.b_f.as_slice(),
            self.b_i.as_slice(),
            self.b_o.as_slice(),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_gh.as_mut_slice(),
            self.w_fh.as_mut_slice(),
            self.w_ih.as_mut_slice(),
            self.w_oh.as_mut_slice(),
            self.w_gx.as_mut_slice(),
            self.w_fx.as_mut_slice(),
            self.w_ix.as_mut_slice(),
            self.w_ox.as_mut_slice(),
            self.b_g.as_mut_slice(),
            self.b_f.as_mut_slice(),
            self.b_i.as_mut_slice(),
            self.b_o.as_mut_slice(),
        ]
    }

    /// Every scalar parameter, tensor by tensor.
    pub fn slots(&self) -> Vec<ParamSlot> {
        Self::tensor_ids()
            .flat_map(|tensor| (0..self.tensor(tensor).len()).map(move |index| ParamSlot { tensor, index }))
            .collect()
    }

    pub fn get(&self, slot: ParamSlot) -> f64 {
        self.tensor(slot.tensor)[slot.index]
    }

    pub fn set(&mut self, slot: ParamSlot, value: f64) {
        self.tensor_mut(slot.tensor)[slot.index] = value;
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Multiplies the four recurrent matrices `W_*h` by `s`.
    pub fn scale_recurrent(&mut self, s: f64) {
        for m in [MatrixId::Gh, MatrixId::Fh, MatrixId::Ih, MatrixId::Oh] {
            for w in self.weight_mut(m).as_mut_slice() {
                *w *= s;
            }
        }
    }
}

pub fn init_params(hidden: usize, input: usize, rng: &mut Rng, scheme: InitScheme) -> Result<LstmParams> {
    if hidden == 0 || input == 0 {
        return Err(LstmError::EmptyShape { hidden, input });
    }
    let mut p = LstmParams::zeros(hidden, input);
    if scheme == InitScheme::UniformXavier {
        let bound = 1.0 / (hidden as f64).sqrt();
        for m in MatrixId::ALL {
            for w in p.weight_mut(m).as_mut_slice() {
                *w = rng.uniform_range(-bound, bound);
            }
        }
        p.b_f = Vector::ones(hidden);
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Vector::zeros(hidden),
            c: Vector::zeros(hidden),
        }
    }
}

/// Everything one step saw and produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub x: Vector,
    pub h_prev: Vector,
    pub c_prev: Vector,
    pub f: Vector,
    pub i: Vector,
    pub o: Vector,
    pub g: Vector,
    pub c: Vector,
    pub h: Vector,
    /// `h_prev` entered this step behind a stop-gradient.
    pub detached: bool,
    /// `c_prev` entered this step behind a stop-gradient (c-detach ablation).
    pub cell_detached: bool,
}

fn check_step_shapes(p: &LstmParams, x: &Vector, s: &LstmState) -> Result<()> {
    let n = p.hidden();
    if x.len() != p.input() {
        return Err(NumericsError::ShapeMismatch {
            op: "lstm_step input",
            left: format!("params expecting d={}", p.input()),
            right: format!("x of len {}", x.len()),
        }
        .into());
    }
    for (name, v) in [("h", &s.h), ("c", &s.c)] {
        if v.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "lstm_step state",
                left: format!("params expecting n={n}"),
                right: format!("{name} of len {}", v.len()),
            }
            .into());
        }
    }
    Ok(())
}

/// One roll-out step; the returned cache has both detach flags cleared.
pub fn lstm_step(p: &LstmParams, x: &Vector, s: &LstmState) -> Result<(LstmState, StepCache)> {
    check_step_shapes(p, x, s)?;
    let pre = |gate: Gate| -> Result<Vector> {
        let a = p.recurrent(gate).matvec(&s.h)?;
        let b = p.input_weight(gate).matvec(x)?;
        Ok(a.add(&b)?.add(p.bias(gate))?)
    };
    let g = numerics::tanh(&pre(Gate::G)?);
    let f = numerics::sigmoid(&pre(Gate::F)?);
    let i = numerics::sigmoid(&pre(Gate::I)?);
    let o = numerics::sigmoid(&pre(Gate::O)?);
    let c = f.hadamard(&s.c)?.add(&i.hadamard(&g)?)?;
    let h = o.hadamard(&numerics::tanh(&c))?;
    let cache = StepCache {
        x: x.clone(),
        h_prev: s.h.clone(),
        c_prev: s.c.clone(),
        f,
        i,
        o,
        g,
        c: c.clone(),
        h: h.clone(),
        detached: false,
        cell_detached: false,
    };
    Ok((LstmState { h, c }, cache))
}

/// Per-step stop-gradient decisions; `bits[t]` set means the recurrent input
/// of step `t` (0-based) is detached.
///
/// The theory side speaks in keep indicators, `ξ_t = 1 - bits[t]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetachMask {
    bits: Vec<bool>,
}

impl DetachMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        DetachMask { bits }
    }

    /// No step detached.
    pub fn keep_all(len: usize) -> Self {
        DetachMask { bits: vec![false; len] }
    }

    /// Every step detached.
    pub fn detach_all(len: usize) -> Self {
        DetachMask { bits: vec![true; len] }
    }

    /// Builds a mask from keep indicators `ξ`.
    pub fn from_keep(xi: &[bool]) -> Self {
        DetachMask {
            bits: xi.iter().map(|&k| !k).collect(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_detached(&self, t: usize) -> bool {
        self.bits[t]
    }

    pub fn detached_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Keep indicators `ξ_t = 1 - bits[t]`.
    pub fn keep(&self) -> Vec<bool> {
        self.bits.iter().map(|&b| !b).collect()
    }
}

/// Draws one Bernoulli(`detach_prob`) bit per step.
pub fn sample_mask(rng: &mut Rng, len: usize, detach_prob: f64) -> Result<DetachMask> {
    let bits = (0..len)
        .map(|_| rng.bernoulli(detach_prob))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(DetachMask { bits })
}

/// Runs the sequence and tags each cache with the mask's decision.
pub fn forward_sequence(
    p: &LstmParams,
    xs: &[Vector],
    s0: &LstmState,
    mask: Option<&DetachMask>,
) -> Result<(Vec<StepCache>, LstmState)> {
    forward_sequence_masked(p, xs, s0, mask, None)
}

/// Like [`forward_sequence`] with an additional cell-state mask.
pub fn forward_sequence_masked(
    p: &LstmParams,
    xs: &[Vector],
    s0: &LstmState,
    h_mask: Option<&DetachMask>,
    c_mask: Option<&DetachMask>,
) -> Result<(Vec<StepCache>, LstmState)> {
    for m in [h_mask, c_mask].into_iter().flatten() {
        if m.len() != xs.len() {
            return Err(LstmError::MaskLength {
                expected: xs.len(),
                got: m.len(),
            });
        }
    }
    let mut state = s0.clone();
    let mut caches = Vec::with_capacity(xs.len());
    for (t, x) in xs.iter().enumerate() {
        let (next, mut cache) = lstm_step(p, x, &state)?;
        cache.detached = h_mask.is_some_and(|m| m.is_detached(t));
        cache.cell_detached = c_mask.is_some_and(|m| m.is_detached(t));
        caches.push(cache);
        state = next;
    }
    Ok((caches, state))
}

/// Roll-out step over any [`Scalar`], used by the forward-mode oracles.
///
/// Parameters are read as constants except `seed`, which is lifted with
/// [`Scalar::variable`].
pub fn step_generic<S: Scalar>(
    p: &LstmParams,
    seed: Option<ParamSlot>,
    x: &[S],
    h_prev: &[S],
    c_prev: &[S],
) -> (Vec<S>, Vec<S>) {
    let n = p.hidden();
    let lift = |tensor: TensorId, index: usize, value: f64| -> S {
        match seed {
            Some(s) if s.tensor == tensor && s.index == index => S::variable(value),
            _ => S::constant(value),
        }
    };
    let pre = |gate: Gate, j: usize| -> S {
        let rid = TensorId::Weight(match gate {
            Gate::G => MatrixId::Gh,
            Gate::F => MatrixId::Fh,
            Gate::I => MatrixId::Ih,
            Gate::O => MatrixId::Oh,
        });
        let xid = TensorId::Weight(match gate {
            Gate::G => MatrixId::Gx,
            Gate::F => MatrixId::Fx,
            Gate::I => MatrixId::Ix,
            Gate::O => MatrixId::Ox,
        });
        let wr = p.recurrent(gate);
        let wx = p.input_weight(gate);
        let mut acc = lift(TensorId::Bias(gate), j, p.bias(gate)[j]);
        for (k, &hk) in h_prev.iter().enumerate() {
            acc = acc + lift(rid, j * n + k, wr[(j, k)]) * hk;
        }
        for (l, &xl) in x.iter().enumerate() {
            acc = acc + lift(xid, j * wx.cols() + l, wx[(j, l)]) * xl;
        }
        acc
    };
    let mut h = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    for j in 0..n {
        let g = pre(Gate::G, j).tanh();
        let f = pre(Gate::F, j).sigmoid();
        let i = pre(Gate::I, j).sigmoid();
        let o = pre(Gate::O, j).sigmoid();
        let cj = f * c_prev[j] + i * g;
        h.push(o * cj.tanh());
        c.push(cj);
    }
    (h, c)
}
