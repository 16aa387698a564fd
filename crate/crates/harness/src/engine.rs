//! Mini-batch LSTM forward and backward passes on top of `dgemm`.
//!
//! The four gates are stacked in the order `g, f, i, o` so that one product
//! `H_{t-1} W_hᵀ + X_t W_xᵀ` yields all pre-activations of a step. Rows are
//! samples. Detached samples keep their forward values; their `∂/∂h_{t−1}`
//! (or `∂/∂c_{t−1}`) rows are dropped in the backward pass, and when every
//! sample of a step is detached the recurrent product is skipped entirely.

use hdetach_core::lstm::{DetachMask, Gate};
use hdetach_core::numerics::{sigmoid_scalar, Rng, Vector};
use hdetach_core::tasks::{PixelSequence, TokenSequence, COPY_VOCAB};
use hdetach_core::LstmParams;

use crate::model::Model;

/// Inputs and targets of a mini-batch laid out step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub steps: usize,
    pub input_dim: usize,
    /// `steps × size × input_dim`.
    pub inputs: Vec<f64>,
    /// Per step, either no loss or one class label per sample.
    pub targets: Vec<Option<Vec<u8>>>,
}

impl Batch {
    /// One-hot encoded copying sequences, with a target at every step.
    pub fn copying(seqs: &[&TokenSequence]) -> Batch {
        let size = seqs.len();
        let steps = seqs[0].len();
        let d = COPY_VOCAB;
        let mut inputs = vec![0.0; steps * size * d];
        let mut targets = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut labels = Vec::with_capacity(size);
            for (r, s) in seqs.iter().enumerate() {
                assert_eq!(s.len(), steps, "copying batch mixes sequence lengths");
                inputs[(t * size + r) * d + s.inputs[t] as usize] = 1.0;
                labels.push(s.targets[t]);
            }
            targets.push(Some(labels));
        }
        Batch {
            size,
            steps,
            input_dim: d,
            inputs,
            targets,
        }
    }

    /// One pixel per step with the label read at the final step.
    pub fn pixels(seqs: &[&PixelSequence]) -> Batch {
        let size = seqs.len();
        let steps = seqs[0].pixels.len();
        let mut inputs = vec![0.0; steps * size];
        for (r, s) in seqs.iter().enumerate() {
            assert_eq!(s.pixels.len(), steps, "pixel batch mixes sequence lengths");
            for (t, &v) in s.pixels.iter().enumerate() {
                inputs[t * size + r] = v;
            }
        }
        let mut targets = vec![None; steps];
        targets[steps - 1] = Some(seqs.iter().map(|s| s.label).collect());
        Batch {
            size,
            steps,
            input_dim: 1,
            inputs,
            targets,
        }
    }

    pub fn input_at(&self, t: usize) -> &[f64] {
        let w = self.size * self.input_dim;
        &self.inputs[t * w..(t + 1) * w]
    }

    /// The inputs of sample `r` as one vector per step.
    pub fn sample_inputs(&self, r: usize) -> Vec<Vector> {
        (0..self.steps)
            .map(|t| {
                let row = &self.input_at(t)[r * self.input_dim..(r + 1) * self.input_dim];
                Vector::new(row.to_vec())
            })
            .collect()
    }
}

/// Which samples are detached at each step: `h[t][r]` blocks `∂/∂h_{t−1}`
/// of sample `r` at step `t`, `c[t][r]` the same for the cell state.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMasks {
    pub h: Vec<Vec<bool>>,
    pub c: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskGranularity {
    /// One Bernoulli draw per step shared by the whole mini-batch.
    #[default]
    PerStep,
    /// Independent draws per step and sample.
    PerSample,
}

impl std::str::FromStr for MaskGranularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per-step" => Ok(MaskGranularity::PerStep),
            "per-sample" => Ok(MaskGranularity::PerSample),
            other => Err(format!("unknown mask granularity {other:?} (per-step, per-sample)")),
        }
    }
}

impl BatchMasks {
    pub fn none(steps: usize, size: usize) -> Self {
        BatchMasks {
            h: vec![vec![false; size]; steps],
            c: vec![vec![false; size]; steps],
        }
    }

    pub fn from_step_masks(h: &DetachMask, c: &DetachMask, size: usize) -> Self {
        BatchMasks {
            h: h.bits().iter().map(|&b| vec![b; size]).collect(),
            c: c.bits().iter().map(|&b| vec![b; size]).collect(),
        }
    }

    /// Draws detach decisions with probabilities `p_h` and `p_c`. A zero
    /// probability consumes no randomness.
    pub fn sample(
        rng: &mut Rng,
        steps: usize,
        size: usize,
        p_h: f64,
        p_c: f64,
        granularity: MaskGranularity,
    ) -> Self {
        let mut draw = |p: f64| -> Vec<Vec<bool>> {
            (0..steps)
                .map(|_| {
                    if p == 0.0 {
                        return vec![false; size];
                    }
                    match granularity {
                        MaskGranularity::PerStep => vec![rng.bernoulli(p).expect("probability validated"); size],
                        MaskGranularity::PerSample => {
                            (0..size).map(|_| rng.bernoulli(p).expect("probability validated")).collect()
                        }
                    }
                })
                .collect()
        };
        let h = draw(p_h);
        let c = draw(p_c);
        BatchMasks { h, c }
    }

    pub fn sample_h_mask(&self, r: usize) -> DetachMask {
        DetachMask::from_bits(self.h.iter().map(|row| row[r]).collect())
    }

    pub fn sample_c_mask(&self, r: usize) -> DetachMask {
        DetachMask::from_bits(self.c.iter().map(|row| row[r]).collect())
    }
}

/// `C ← α A B + β C` for row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= (m - 1) * ldc + n);
    // SAFETY: the asserts above keep every index the kernel touches inside
    // the three slices, and `c` is borrowed mutably so it cannot alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// LSTM weights restacked for the batched kernels.
struct Stacked {
    n: usize,
    d: usize,
    /// `4n × n`.
    w_h: Vec<f64>,
    /// `4n × d`.
    w_x: Vec<f64>,
    b: Vec<f64>,
}

impl Stacked {
    fn new(p: &LstmParams) -> Self {
        let (n, d) = (p.hidden(), p.input());
        let mut w_h = Vec::with_capacity(4 * n * n);
        let mut w_x = Vec::with_capacity(4 * n * d);
        let mut b = Vec::with_capacity(4 * n);
        for gate in Gate::ALL {
            w_h.extend_from_slice(p.recurrent(gate).as_slice());
            w_x.extend_from_slice(p.input_weight(gate).as_slice());
            b.extend_from_slice(p.bias(gate).as_slice());
        }
        Stacked { n, d, w_h, w_x, b }
    }
}

/// One step for all samples: writes activated gates (`size × 4n`), the new
/// cell state, `tanh(c)` and the new hidden state.
#[allow(clippy::too_many_arguments)]
fn step_forward(
    s: &Stacked,
    size: usize,
    h_prev: &[f64],
    c_prev: &[f64],
    x: &[f64],
    gates: &mut [f64],
    c: &mut [f64],
    tanh_c: &mut [f64],
    h: &mut [f64],
) {
    let n = s.n;
    let g4 = 4 * n;
    for r in 0..size {
        gates[r * g4..(r + 1) * g4].copy_from_slice(&s.b);
    }
    gemm(size, n, g4, h_prev, (n, 1), &s.w_h, (1, n), 1.0, gates, g4);
    gemm(size, s.d, g4, x, (s.d, 1), &s.w_x, (1, s.d), 1.0, gates, g4);
    for r in 0..size {
        let z = &mut gates[r * g4..(r + 1) * g4];
        for j in 0..n {
            let g = z[j].tanh();
            let f = sigmoid_scalar(z[n + j]);
            let i = sigmoid_scalar(z[2 * n + j]);
            let o = sigmoid_scalar(z[3 * n + j]);
            z[j] = g;
            z[n + j] = f;
            z[2 * n + j] = i;
            z[3 * n + j] = o;
            let k = r * n + j;
            let cv = f * c_prev[k] + i * g;
            let tc = cv.tanh();
            c[k] = cv;
            tanh_c[k] = tc;
            h[k] = o * tc;
        }
    }
}

/// Softmax cross-entropy of `logits` (`size × classes`) against `labels`.
/// Overwrites `logits` with probabilities; returns the summed loss and the
/// number of correct argmax predictions, and writes the predictions.
fn softmax_xent(logits: &mut [f64], classes: usize, labels: &[u8], preds: &mut [u8]) -> (f64, usize) {
    let mut loss = 0.0;
    let mut correct = 0;
    for (r, row) in logits.chunks_exact_mut(classes).enumerate() {
        let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
        for (k, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                arg = k;
            }
        }
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - best).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
        let y = labels[r] as usize;
        loss += -(row[y].max(f64::MIN_POSITIVE)).ln();
        preds[r] = arg as u8;
        if arg == y {
            correct += 1;
        }
    }
    (loss, correct)
}

fn head_logits(model: &Model, size: usize, h: &[f64], out: &mut [f64]) {
    let (k, n) = (model.classes(), model.hidden());
    for r in 0..size {
        out[r * k..(r + 1) * k].copy_from_slice(model.head.b.as_slice());
    }
    gemm(size, n, k, h, (n, 1), model.head.w.as_slice(), (1, n), 1.0, out, k);
}

/// Forward values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub size: usize,
    pub steps: usize,
    pub hidden: usize,
    /// `steps × size × 4n` activated gates `g, f, i, o`.
    pub gates: Vec<f64>,
    /// `(steps + 1) × size × n`, index 0 is the initial state.
    pub c: Vec<f64>,
    pub h: Vec<f64>,
    /// `steps × size × n`.
    pub tanh_c: Vec<f64>,
    /// Softmax outputs at steps with a target (`size × classes`).
    pub probs: Vec<Option<Vec<f64>>>,
}

impl Tape {
    fn state<'a>(&self, buf: &'a [f64], t: usize) -> &'a [f64] {
        let w = self.size * self.hidden;
        &buf[t * w..(t + 1) * w]
    }

    /// `h_t` for all samples (`t = 0` is the initial state).
    pub fn h_at(&self, t: usize) -> &[f64] {
        self.state(&self.h, t)
    }

    pub fn c_at(&self, t: usize) -> &[f64] {
        self.state(&self.c, t)
    }
}

/// Loss and accuracy bookkeeping of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardStats {
    /// Per-step cross-entropy summed over steps, averaged over samples.
    pub loss: f64,
    /// Per step with a target: predicted class per sample.
    pub predictions: Vec<Option<Vec<u8>>>,
}

/// Forward pass from a zero initial state. With `keep_tape` the activations
/// of every step are retained for [`backward`].
pub fn forward(model: &Model, batch: &Batch, keep_tape: bool) -> (ForwardStats, Option<Tape>) {
    let s = Stacked::new(&model.lstm);
    let (n, size, steps, k) = (model.hidden(), batch.size, batch.steps, model.classes());
    assert_eq!(batch.input_dim, s.d, "batch input width does not match the model");
    let w = size * n;
    let (mut tape_gates, mut tape_c, mut tape_h, mut tape_tc) = if keep_tape {
        (
            vec![0.0; steps * size * 4 * n],
            vec![0.0; (steps + 1) * w],
            vec![0.0; (steps + 1) * w],
            vec![0.0; steps * w],
        )
    } else {
        (Vec::new(), Vec::new(), Vec::new(), Vec::new())
    };
    let mut probs = Vec::new();
    let mut gates = vec![0.0; size * 4 * n];
    let (mut h_prev, mut c_prev) = (vec![0.0; w], vec![0.0; w]);
    let (mut h, mut c, mut tc) = (vec![0.0; w], vec![0.0; w], vec![0.0; w]);
    let mut logits = vec![0.0; size * k];
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(steps);
    for t in 0..steps {
        step_forward(&s, size, &h_prev, &c_prev, batch.input_at(t), &mut gates, &mut c, &mut tc, &mut h);
        if keep_tape {
            tape_gates[t * size * 4 * n..(t + 1) * size * 4 * n].copy_from_slice(&gates);
            tape_c[(t + 1) * w..(t + 2) * w].copy_from_slice(&c);
            tape_h[(t + 1) * w..(t + 2) * w].copy_from_slice(&h);
            tape_tc[t * w..(t + 1) * w].copy_from_slice(&tc);
        }
        match &batch.targets[t] {
            Some(labels) => {
                head_logits(model, size, &h, &mut logits);
                let mut preds = vec![0u8; size];
                let (l, _) = softmax_xent(&mut logits, k, labels, &mut preds);
                loss += l / size as f64;
                predictions.push(Some(preds));
                if keep_tape {
                    probs.push(Some(logits.clone()));
                }
            }
            None => {
                predictions.push(None);
                if keep_tape {
                    probs.push(None);
                }
            }
        }
        std::mem::swap(&mut h_prev, &mut h);
        std::mem::swap(&mut c_prev, &mut c);
    }
    let tape = keep_tape.then_some(Tape {
        size,
        steps,
        hidden: n,
        gates: tape_gates,
        c: tape_c,
        h: tape_h,
        tanh_c: tape_tc,
        probs,
    });
    (ForwardStats { loss, predictions }, tape)
}

/// Gradients of the batch loss and the multiply-accumulates spent on them.
#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: Model,
    /// Multiply-accumulates inside the LSTM recursion, counted like
    /// [`hdetach_core::backprop::count_backward_flops`] per sample.
    pub lstm_macs: u64,
    /// Multiply-accumulates of the output head.
    pub head_macs: u64,
}

impl Backward {
    pub fn macs(&self) -> u64 {
        self.lstm_macs + self.head_macs
    }
}

/// Exact gradient of the forward loss with the given detach masks.
pub fn backward(model: &Model, batch: &Batch, tape: &Tape, masks: &BatchMasks) -> Backward {
    let s = Stacked::new(&model.lstm);
    let (n, d, size, steps, k) = (s.n, s.d, batch.size, batch.steps, model.classes());
    let g4 = 4 * n;
    let w = size * n;
    assert_eq!(masks.h.len(), steps, "h mask length");
    assert_eq!(masks.c.len(), steps, "c mask length");

    let mut dw_h = vec![0.0; g4 * n];
    let mut dw_x = vec![0.0; g4 * d];
    let mut db = vec![0.0; g4];
    let mut dw_out = vec![0.0; k * n];
    let mut db_out = vec![0.0; k];

    let mut dh = vec![0.0; w];
    let mut dh_carry = vec![0.0; w];
    let mut dc_carry = vec![0.0; w];
    let mut dz = vec![0.0; size * g4];
    let mut dy = vec![0.0; size * k];
    let mut lstm_macs = 0u64;
    let mut head_macs = 0u64;
    let (nu, du, bu) = (n as u64, d as u64, size as u64);

    for t in (0..steps).rev() {
        dh.copy_from_slice(&dh_carry);
        let h_t = tape.h_at(t + 1);
        if let (Some(labels), Some(probs)) = (&batch.targets[t], &tape.probs[t]) {
            let inv = 1.0 / size as f64;
            for r in 0..size {
                for c in 0..k {
                    dy[r * k + c] = probs[r * k + c] * inv;
                }
                dy[r * k + labels[r] as usize] -= inv;
            }
            gemm(k, size, n, &dy, (1, k), h_t, (n, 1), 1.0, &mut dw_out, n);
            for r in 0..size {
                for c in 0..k {
                    db_out[c] += dy[r * k + c];
                }
            }
            gemm(size, k, n, &dy, (k, 1), model.head.w.as_slice(), (n, 1), 1.0, &mut dh, n);
            head_macs += 2 * bu * k as u64 * nu;
        }

        let gates = &tape.gates[t * size * g4..(t + 1) * size * g4];
        let c_prev = tape.c_at(t);
        let tc = &tape.tanh_c[t * w..(t + 1) * w];
        let mut cell_kept = 0u64;
        for r in 0..size {
            let z = &gates[r * g4..(r + 1) * g4];
            let dzr = &mut dz[r * g4..(r + 1) * g4];
            let keep_cell = !masks.c[t][r];
            cell_kept += keep_cell as u64;
            for j in 0..n {
                let (g, f, i, o) = (z[j], z[n + j], z[2 * n + j], z[3 * n + j]);
                let q = r * n + j;
                let dho = dh[q];
                let dc = dc_carry[q] + dho * o * (1.0 - tc[q] * tc[q]);
                dzr[j] = dc * i * (1.0 - g * g);
                dzr[n + j] = dc * c_prev[q] * f * (1.0 - f);
                dzr[2 * n + j] = dc * g * i * (1.0 - i);
                dzr[3 * n + j] = dho * tc[q] * o * (1.0 - o);
                dc_carry[q] = if keep_cell { dc * f } else { 0.0 };
            }
        }
        lstm_macs += 16 * nu * bu + cell_kept * nu;

        gemm(g4, size, n, &dz, (1, g4), tape.h_at(t), (n, 1), 1.0, &mut dw_h, n);
        gemm(g4, size, d, &dz, (1, g4), batch.input_at(t), (d, 1), 1.0, &mut dw_x, d);
        for r in 0..size {
            for (acc, v) in db.iter_mut().zip(&dz[r * g4..(r + 1) * g4]) {
                *acc += v;
            }
        }
        lstm_macs += 4 * nu * (nu + du) * bu;

        let detached = &masks.h[t];
        if detached.iter().all(|&b| b) {
            dh_carry.fill(0.0);
        } else {
            gemm(size, g4, n, &dz, (g4, 1), &s.w_h, (n, 1), 0.0, &mut dh_carry, n);
            for (r, &gone) in detached.iter().enumerate() {
                if gone {
                    dh_carry[r * n..(r + 1) * n].fill(0.0);
                }
            }
            lstm_macs += 4 * nu * nu * bu;
        }
    }

    let mut grads = model.zeros_like();
    for (gi, gate) in Gate::ALL.into_iter().enumerate() {
        let rows = gi * n..(gi + 1) * n;
        grads.lstm.weight_mut(recurrent_id(gate)).as_mut_slice().copy_from_slice(&dw_h[rows.start * n..rows.end * n]);
        grads.lstm.weight_mut(input_id(gate)).as_mut_slice().copy_from_slice(&dw_x[rows.start * d..rows.end * d]);
        grads.lstm.bias_mut(gate).as_mut_slice().copy_from_slice(&db[rows]);
    }
    grads.head.w.as_mut_slice().copy_from_slice(&dw_out);
    grads.head.b.as_mut_slice().copy_from_slice(&db_out);
    Backward {
        grads,
        lstm_macs,
        head_macs,
    }
}

fn recurrent_id(gate: Gate) -> hdetach_core::lstm::MatrixId {
    use hdetach_core::lstm::MatrixId;
    match gate {
        Gate::G => MatrixId::Gh,
        Gate::F => MatrixId::Fh,
        Gate::I => MatrixId::Ih,
        Gate::O => MatrixId::Oh,
    }
}

fn input_id(gate: Gate) -> hdetach_core::lstm::MatrixId {
    use hdetach_core::lstm::MatrixId;
    match gate {
        Gate::G => MatrixId::Gx,
        Gate::F => MatrixId::Fx,
        Gate::I => MatrixId::Ix,
        Gate::O => MatrixId::Ox,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_detached_step_skips_recurrent_product() {
        let mut rng = Rng::new(1);
        let model = Model::init(3, 1, 4, &mut rng).unwrap();
        let seqs: Vec<PixelSequence> = (0..2)
            .map(|l| PixelSequence {
                pixels: vec![0.1, 0.5, 0.9, 0.3],
                label: l,
                side: 2,
            })
            .collect();
        let refs: Vec<&PixelSequence> = seqs.iter().collect();
        let batch = Batch::pixels(&refs);
        let (_, tape) = forward(&model, &batch, true);
        let tape = tape.unwrap();
        let none = backward(&model, &batch, &tape, &BatchMasks::none(4, 2));
        let mut masks = BatchMasks::none(4, 2);
        masks.h[2] = vec![true, true];
        let one = backward(&model, &batch, &tape, &masks);
        assert_eq!(none.lstm_macs - one.lstm_macs, 4 * 9 * 2);
        masks.h[1] = vec![true, false];
        let mixed = backward(&model, &batch, &tape, &masks);
        assert_eq!(mixed.lstm_macs, one.lstm_macs);
        assert_eq!(none.head_macs, 2 * 2 * 4 * 3);
    }

    #[test]
    fn zero_probability_masks_consume_nothing() {
        let mut a = Rng::new(3);
        let b = a.clone();
        let m = BatchMasks::sample(&mut a, 10, 4, 0.0, 0.0, MaskGranularity::PerSample);
        assert_eq!(m, BatchMasks::none(10, 4));
        assert_eq!(a.clone().next_u64(), b.clone().next_u64());
        let per_step = BatchMasks::sample(&mut a, 50, 3, 0.5, 0.0, MaskGranularity::PerStep);
        assert!(per_step.h.iter().all(|row| row.iter().all(|&x| x == row[0])));
    }
}
