//! Reverse-mode backpropagation through time, plus two independent forward
//! oracles used to check it.
//!
//! A detached edge contributes its forward value and a zero Jacobian. In the
//! reverse pass that means: when `caches[t].detached` is set, nothing flows
//! from step `t`'s gate pre-activations back into `h_{t-1}`; the weight
//! gradients of step `t` still use the value of `h_{t-1}`. The same rule
//! applies to `c_{t-1}` when `caches[t].cell_detached` is set.

use thiserror::Error;

use crate::dual::{Dual, Scalar};
use crate::lstm::{self, DetachMask, LstmError, LstmParams, LstmState, ParamSlot, StepCache};
use crate::numerics::{NumericsError, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackpropError {
    #[error("{what}: expected {expected} entries, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Shape(#[from] NumericsError),
    #[error(transparent)]
    Lstm(#[from] LstmError),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

pub type Result<T> = std::result::Result<T, BackpropError>;

/// Gradient with respect to every parameter, laid out like the parameters.
pub type ParamGrads = LstmParams;

/// Upstream gradients: `dh[t]` is `∂ℓ/∂h_t` from the loss attached at step
/// `t` (zeros where none attaches). `dc_final` optionally seeds `∂ℓ/∂c_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub dh: Vec<Vector>,
    pub dc_final: Option<Vector>,
}

impl LossGrads {
    pub fn zeros(steps: usize, hidden: usize) -> Self {
        LossGrads {
            dh: vec![Vector::zeros(hidden); steps],
            dc_final: None,
        }
    }

    pub fn len(&self) -> usize {
        self.dh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dh.is_empty()
    }
}

/// Result of a reverse pass, including gradients into the initial state and
/// the number of multiply-accumulates performed.
#[derive(Debug, Clone, PartialEq)]
pub struct BpttOutput {
    pub grads: ParamGrads,
    pub dh0: Vector,
    pub dc0: Vector,
    pub macs: u64,
}

pub fn bptt(p: &LstmParams, caches: &[StepCache], lg: &LossGrads) -> Result<ParamGrads> {
    Ok(bptt_full(p, caches, lg)?.grads)
}

// Per-step MAC costs shared by `count_backward_flops` and the instrumented
// reverse pass.
fn elementwise_macs(n: usize) -> u64 {
    // dc (2n), do/df/di/dg (4n), gate derivatives (2n each, 8n), c carry-in (n),
    // tanh' (n).
    16 * n as u64
}

fn weight_grad_macs(n: usize, d: usize) -> u64 {
    (4 * n * (n + d)) as u64
}

fn recurrent_macs(n: usize) -> u64 {
    (4 * n * n) as u64
}

fn cell_carry_macs(n: usize) -> u64 {
    n as u64
}

/// Multiply-accumulates the reverse pass performs for these caches.
///
/// Every detached step skips the `W_*hᵀ δ` products into `h_{t-1}`, so the
/// count strictly decreases with each additional detached step.
pub fn count_backward_flops(caches: &[StepCache]) -> u64 {
    caches
        .iter()
        .map(|c| {
            let n = c.h.len();
            let d = c.x.len();
            let mut m = elementwise_macs(n) + weight_grad_macs(n, d);
            if !c.detached {
                m += recurrent_macs(n);
            }
            if !c.cell_detached {
                m += cell_carry_macs(n);
            }
            m
        })
        .sum()
}

pub fn bptt_full(p: &LstmParams, caches: &[StepCache], lg: &LossGrads) -> Result<BpttOutput> {
    if caches.len() != lg.len() {
        return Err(BackpropError::Length {
            what: "loss gradients vs caches",
            expected: caches.len(),
            got: lg.len(),
        });
    }
    let n = p.hidden();
    let d = p.input();
    let mut grads = p.zeros_like();
    let mut dh_next = Vector::zeros(n);
    let mut dc_next = lg.dc_final.clone().unwrap_or_else(|| Vector::zeros(n));
    let mut macs = 0u64;

    for (t, cache) in caches.iter().enumerate().rev() {
        let dh = lg.dh[t].add(&dh_next)?;
        let tanh_c = cache.c.map(f64::tanh);
        // ∂h/∂c = o ⊙ (1 - tanh²c)
        let mut dc = dc_next.clone();
        for j in 0..n {
            dc[j] += dh[j] * cache.o[j] * (1.0 - tanh_c[j] * tanh_c[j]);
        }
        let mut da = [Vector::zeros(n), Vector::zeros(n), Vector::zeros(n), Vector::zeros(n)];
        for j in 0..n {
            let (f, i, o, g) = (cache.f[j], cache.i[j], cache.o[j], cache.g[j]);
            da[0][j] = dc[j] * i * (1.0 - g * g);
            da[1][j] = dc[j] * cache.c_prev[j] * f * (1.0 - f);
            da[2][j] = dc[j] * g * i * (1.0 - i);
            da[3][j] = dh[j] * tanh_c[j] * o * (1.0 - o);
        }
        macs += elementwise_macs(n);

        for gate in lstm::Gate::ALL {
            let delta = &da[gate.index()];
            let (wh, wx, b) = match gate {
                lstm::Gate::G => (&mut grads.w_gh, &mut grads.w_gx, &mut grads.b_g),
                lstm::Gate::F => (&mut grads.w_fh, &mut grads.w_fx, &mut grads.b_f),
                lstm::Gate::I => (&mut grads.w_ih, &mut grads.w_ix, &mut grads.b_i),
                lstm::Gate::O => (&mut grads.w_oh, &mut grads.w_ox, &mut grads.b_o),
            };
            wh.add_outer(delta, &cache.h_prev, 1.0)?;
            wx.add_outer(delta, &cache.x, 1.0)?;
            *b = b.add(delta)?;
        }
        macs += weight_grad_macs(n, d);

        dh_next = if cache.detached {
            Vector::zeros(n)
        } else {
            let mut acc = Vector::zeros(n);
            for gate in lstm::Gate::ALL {
                acc = acc.add(&p.recurrent(gate).matvec_transposed(&da[gate.index()])?)?;
            }
            macs += recurrent_macs(n);
            acc
        };
        dc_next = if cache.cell_detached {
            Vector::zeros(n)
        } else {
            macs += cell_carry_macs(n);
            dc.hadamard(&cache.f)?
        };
    }

    Ok(BpttOutput {
        grads,
        dh0: dh_next,
        dc0: dc_next,
        macs,
    })
}

/// A scalar loss over the hidden trajectory and the final cell state that
/// can be evaluated on any [`Scalar`] and differentiated analytically.
pub trait SequenceLoss {
    fn value<S: Scalar>(&self, hs: &[Vec<S>], c_last: &[S]) -> S;
    /// `∂ℓ/∂h_t` for every step and `∂ℓ/∂c_T`, given the forward values.
    fn loss_grads(&self, hs: &[Vector], c_last: &Vector) -> LossGrads;
}

/// `ℓ = Σ_t Σ_j (a_tj h_tj + ½ b_tj h_tj²) + Σ_j r_j c_Tj`.
///
/// Linear and quadratic terms in `h` and a linear read-out of the final
/// cell: enough to probe every gradient path, and its analytic gradient is
/// trivial.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeLoss {
    pub linear: Vec<Vector>,
    pub quadratic: Vec<Vector>,
    pub cell: Vector,
}

impl ProbeLoss {
    pub fn zeros(steps: usize, hidden: usize) -> Self {
        ProbeLoss {
            linear: vec![Vector::zeros(hidden); steps],
            quadratic: vec![Vector::zeros(hidden); steps],
            cell: Vector::zeros(hidden),
        }
    }

    /// Random coefficients; roughly a third of the steps carry no loss.
    pub fn random(rng: &mut crate::numerics::Rng, steps: usize, hidden: usize) -> Self {
        let mut loss = Self::zeros(steps, hidden);
        for t in 0..steps {
            if t + 1 < steps && rng.below(3) == 0 {
                continue;
            }
            for j in 0..hidden {
                loss.linear[t][j] = rng.uniform_range(-1.0, 1.0);
                loss.quadratic[t][j] = rng.uniform_range(-1.0, 1.0);
            }
        }
        for j in 0..hidden {
            loss.cell[j] = rng.uniform_range(-0.5, 0.5);
        }
        loss
    }

    /// `ℓ = h_T[j]`.
    pub fn final_hidden(steps: usize, hidden: usize, j: usize) -> Self {
        let mut loss = Self::zeros(steps, hidden);
        loss.linear[steps - 1][j] = 1.0;
        loss
    }

    /// `ℓ = c_T[j]`.
    pub fn final_cell(steps: usize, hidden: usize, j: usize) -> Self {
        let mut loss = Self::zeros(steps, hidden);
        loss.cell[j] = 1.0;
        loss
    }

    /// The loss restricted to step `t` (no cell term).
    pub fn only_step(&self, t: usize) -> Self {
        let mut loss = Self::zeros(self.linear.len(), self.cell.len());
        loss.linear[t] = self.linear[t].clone();
        loss.quadratic[t] = self.quadratic[t].clone();
        loss
    }
}

impl SequenceLoss for ProbeLoss {
    fn value<S: Scalar>(&self, hs: &[Vec<S>], c_last: &[S]) -> S {
        let mut acc = S::constant(0.0);
        for (t, h) in hs.iter().enumerate() {
            for (j, &hj) in h.iter().enumerate() {
                let a = self.linear[t][j];
                let b = self.quadratic[t][j];
                if a != 0.0 {
                    acc = acc + S::constant(a) * hj;
                }
                if b != 0.0 {
                    acc = acc + S::constant(0.5 * b) * hj * hj;
                }
            }
        }
        for (j, &cj) in c_last.iter().enumerate() {
            if self.cell[j] != 0.0 {
                acc = acc + S::constant(self.cell[j]) * cj;
            }
        }
        acc
    }

    fn loss_grads(&self, hs: &[Vector], _c_last: &Vector) -> LossGrads {
        let dh = hs
            .iter()
            .enumerate()
            .map(|(t, h)| {
                Vector::new(
                    (0..h.len())
                        .map(|j| self.linear[t][j] + self.quadratic[t][j] * h[j])
                        .collect(),
                )
            })
            .collect();
        let has_cell = self.cell.iter().any(|&r| r != 0.0);
        LossGrads {
            dh,
            dc_final: has_cell.then(|| self.cell.clone()),
        }
    }
}

/// Forward pass and reverse pass for a [`SequenceLoss`] in one call.
pub fn loss_and_grads<L: SequenceLoss>(
    p: &LstmParams,
    xs: &[Vector],
    s0: &LstmState,
    h_mask: Option<&DetachMask>,
    c_mask: Option<&DetachMask>,
    loss: &L,
) -> Result<(f64, ParamGrads)> {
    let (caches, end) = lstm::forward_sequence_masked(p, xs, s0, h_mask, c_mask)?;
    let hs: Vec<Vector> = caches.iter().map(|c| c.h.clone()).collect();
    let hs_raw: Vec<Vec<f64>> = hs.iter().map(|h| h.as_slice().to_vec()).collect();
    let value = loss.value::<f64>(&hs_raw, end.c.as_slice());
    let lg = loss.loss_grads(&hs, &end.c);
    Ok((value, bptt(p, &caches, &lg)?))
}

fn check_masks(steps: usize, masks: [Option<&DetachMask>; 2]) -> Result<()> {
    for m in masks.into_iter().flatten() {
        if m.len() != steps {
            return Err(LstmError::MaskLength {
                expected: steps,
                got: m.len(),
            }
            .into());
        }
    }
    Ok(())
}

/// Generic roll-out where detached inputs pass through [`Scalar::detach`].
pub fn forward_generic<S: Scalar>(
    p: &LstmParams,
    seed: Option<ParamSlot>,
    xs: &[Vector],
    s0: &LstmState,
    h_mask: Option<&DetachMask>,
    c_mask: Option<&DetachMask>,
) -> (Vec<Vec<S>>, Vec<S>) {
    let mut h: Vec<S> = s0.h.iter().map(|&v| S::constant(v)).collect();
    let mut c: Vec<S> = s0.c.iter().map(|&v| S::constant(v)).collect();
    let mut hs = Vec::with_capacity(xs.len());
    for (t, x) in xs.iter().enumerate() {
        let xv: Vec<S> = x.iter().map(|&v| S::constant(v)).collect();
        let h_in: Vec<S> = if h_mask.is_some_and(|m| m.is_detached(t)) {
            h.iter().map(|v| v.detach()).collect()
        } else {
            h
        };
        let c_in: Vec<S> = if c_mask.is_some_and(|m| m.is_detached(t)) {
            c.iter().map(|v| v.detach()).collect()
        } else {
            c
        };
        let (h_new, c_new) = lstm::step_generic(p, seed, &xv, &h_in, &c_in);
        hs.push(h_new.clone());
        h = h_new;
        c = c_new;
    }
    (hs, c)
}

/// Exact per-parameter derivatives by forward-mode dual numbers, one pass
/// per scalar parameter. The tangent is zeroed at every detach point.
pub fn dual_number_grad<L: SequenceLoss>(
    p: &LstmParams,
    xs: &[Vector],
    s0: &LstmState,
    h_mask: Option<&DetachMask>,
    c_mask: Option<&DetachMask>,
    loss: &L,
) -> Result<ParamGrads> {
    check_masks(xs.len(), [h_mask, c_mask])?;
    let mut grads = p.zeros_like();
    for slot in p.slots() {
        let (hs, c_last) = forward_generic::<Dual>(p, Some(slot), xs, s0, h_mask, c_mask);
        grads.set(slot, loss.value(&hs, &c_last).du);
    }
    Ok(grads)
}

/// Derivative of a single parameter by dual numbers.
pub fn dual_number_partial<L: SequenceLoss>(
    p: &LstmParams,
    xs: &[Vector],
    s0: &LstmState,
    h_mask: Option<&DetachMask>,
    c_mask: Option<&DetachMask>,
    loss: &L,
    slot: ParamSlot,
) -> f64 {
    let (hs, c_last) = forward_generic::<Dual>(p, Some(slot), xs, s0, h_mask, c_mask);
    loss.value(&hs, &c_last).du
}

/// Central differences `(ℓ(w+ε) − ℓ(w−ε)) / 2ε` for every scalar parameter.
///
/// Stop-gradients are honored by feeding every detached edge the value it
/// carried in the unperturbed run. The perturbed function then agrees with
/// the true loss at `ε = 0` and its derivative there is the masked gradient.
pub fn finite_difference_grad<L: SequenceLoss>(
    p: &LstmParams,
    xs: &[Vector],
    s0: &LstmState,
    mask: Option<&DetachMask>,
    loss: &L,
    eps: f64,
) -> Result<ParamGrads> {
    finite_difference_grad_masked(p, xs, s0, mask, None, loss, eps)
}

pub fn finite_difference_grad_masked<L: SequenceLoss>(
    p: &LstmParams,
    xs: &[Vector],
    s0: &LstmState,
    h_mask: Option<&DetachMask>,
    c_mask: Option<&DetachMask>,
    loss: &L,
    eps: f64,
) -> Result<ParamGrads> {
    if !(eps > 0.0) {
        return Err(BackpropError::BadStep(eps));
    }
    check_masks(xs.len(), [h_mask, c_mask])?;
    let (base, _) = lstm::forward_sequence_masked(p, xs, s0, h_mask, c_mask)?;
    let eval = |q: &LstmParams| -> f64 {
        let mut h = s0.h.as_slice().to_vec();
        let mut c = s0.c.as_slice().to_vec();
        let mut hs = Vec::with_capacity(xs.len());
        for (t, x) in xs.iter().enumerate() {
            let h_in = if base[t].detached {
                base[t].h_prev.as_slice().to_vec()
            } else {
                h
            };
            let c_in = if base[t].cell_detached {
                base[t].c_prev.as_slice().to_vec()
            } else {
                c
            };
            let (hn, cn) = lstm::step_generic::<f64>(q, None, x.as_slice(), &h_in, &c_in);
            hs.push(hn.clone());
            h = hn;
            c = cn;
        }
        loss.value::<f64>(&hs, &c)
    };
    let mut grads = p.zeros_like();
    let mut q = p.clone();
    for slot in p.slots() {
        let w = p.get(slot);
        let d = central_difference(
            |v| {
                q.set(slot, v);
                eval(&q)
            },
            w,
            eps,
        );
        q.set(slot, w);
        grads.set(slot, d);
    }
    Ok(grads)
}

pub fn central_difference(mut f: impl FnMut(f64) -> f64, w: f64, eps: f64) -> f64 {
    let up = f(w + eps);
    let down = f(w - eps);
    (up - down) / (2.0 * eps)
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps near-zero components
/// from dominating.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`relative_error`] over all parameters and where it occurred.
pub fn max_relative_error(a: &ParamGrads, b: &ParamGrads, floor: f64) -> (f64, ParamSlot) {
    let mut worst = (0.0, a.slots()[0]);
    for slot in a.slots() {
        let e = relative_error(a.get(slot), b.get(slot), floor);
        if e > worst.0 || e.is_nan() {
            worst = (e, slot);
        }
    }
    worst
}

pub fn max_abs_difference(a: &ParamGrads, b: &ParamGrads) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
