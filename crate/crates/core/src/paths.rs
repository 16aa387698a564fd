//! Forward recursion for the per-weight derivatives `z_t = (dc_t/dw, dh_t/dw, 1)`
//! split into a cell-state part `A_t` and a hidden-state part `B_t`:
//!
//! ```text
//!        ⎡ F_t   0  diag(k_t) ⎤         ⎡ 0  ψ_t  0 ⎤
//! A_t =  ⎢ F̃_t   0  diag(k̃_t) ⎥   B_t = ⎢ 0  ψ̃_t  0 ⎥   z_t = (A_t + B_t) z_{t-1}
//!        ⎣ 0     0  Id        ⎦         ⎣ 0  0    0 ⎦
//! ```
//!
//! `A_t` only reads `dc_{t-1}/dw` and depends on gates and states alone, so its
//! entries stay bounded. `B_t` only reads `dh_{t-1}/dw` and is linear in the
//! recurrent weights. Detaching `h_{t-1}` multiplies `B_t` by a keep indicator
//! `ξ_t ∈ {0, 1}`; in expectation that is `A_t + q B_t` with `q` the keep
//! probability.
//!
//! Everything here works per scalar weight and materializes `3n × 3n`
//! matrices. It is meant for verification-scale networks (n <= 4), not for
//! training.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::dual::{Dual, Scalar};
use crate::lstm::{self, Gate, LstmParams, MatrixId, ParamSlot, StepCache, TensorId};
use crate::numerics::{Matrix, NumericsError, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PathError {
    #[error("weight index {index} is outside {matrix} of shape {rows}x{cols}")]
    InvalidWeight {
        index: String,
        matrix: MatrixId,
        rows: usize,
        cols: usize,
    },
    #[error("cannot parse weight index {0:?} (expected e.g. \"fh:0:1\")")]
    BadWeightSpec(String),
    #[error("keep indicators: expected {expected} (one per step after the first), got {got}")]
    XiLength { expected: usize, got: usize },
    #[error("keep probability {0} is outside [0, 1]")]
    BadKeepProb(f64),
    #[error("empty sequence")]
    Empty,
    #[error(transparent)]
    Shape(#[from] NumericsError),
    #[error(transparent)]
    Lstm(#[from] lstm::LstmError),
}

pub type Result<T> = std::result::Result<T, PathError>;

/// A scalar entry `(W_*)_{row,col}` of one of the eight weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WeightIndex {
    pub matrix: MatrixId,
    pub row: usize,
    pub col: usize,
}

impl WeightIndex {
    pub fn new(matrix: MatrixId, row: usize, col: usize) -> Self {
        WeightIndex { matrix, row, col }
    }

    pub fn validate(&self, p: &LstmParams) -> Result<()> {
        let (rows, cols) = p.weight(self.matrix).shape();
        if self.row >= rows || self.col >= cols {
            return Err(PathError::InvalidWeight {
                index: self.to_string(),
                matrix: self.matrix,
                rows,
                cols,
            });
        }
        Ok(())
    }

    pub fn slot(&self, p: &LstmParams) -> ParamSlot {
        ParamSlot {
            tensor: TensorId::Weight(self.matrix),
            index: self.row * p.weight(self.matrix).cols() + self.col,
        }
    }

    /// Position of the selected column inside the concatenation `[h_{t-1}; x_t]`.
    pub fn concat_column(&self, hidden: usize) -> usize {
        if self.matrix.is_recurrent() {
            self.col
        } else {
            hidden + self.col
        }
    }

    /// Every scalar weight of `p`, matrix by matrix.
    pub fn all(p: &LstmParams) -> Vec<WeightIndex> {
        MatrixId::ALL
            .into_iter()
            .flat_map(|m| {
                let (rows, cols) = p.weight(m).shape();
                (0..rows).flat_map(move |r| (0..cols).map(move |c| WeightIndex::new(m, r, c)))
            })
            .collect()
    }
}

impl fmt::Display for WeightIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.matrix.name(), self.row, self.col)
    }
}

impl FromStr for WeightIndex {
    type Err = PathError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || PathError::BadWeightSpec(s.to_string());
        let mut parts = s.split(':');
        let matrix = parts.next().ok_or_else(bad)?.parse::<MatrixId>().map_err(|_| bad())?;
        let row = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let col = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(WeightIndex { matrix, row, col })
    }
}

/// The per-step symbols from which `A_t` and `B_t` are assembled.
///
/// Diagonal matrices are stored as their diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct NotationBlocks {
    /// `o ⊙ (1 − tanh² c_t)`
    pub delta_c: Vector,
    /// `o ⊙ (1 − o) ⊙ tanh c_t`
    pub delta_o: Vector,
    /// `f ⊙ (1 − f) ⊙ c_{t−1}`
    pub delta_f: Vector,
    /// `i ⊙ (1 − i) ⊙ g`
    pub delta_i: Vector,
    /// `(1 − g²) ⊙ i`
    pub delta_g: Vector,
    /// `Δ^f W_fh + Δ^g W_gh + Δ^i W_ih`
    pub psi: Matrix,
    /// `Δ^o W_oh + Δ^c ψ`
    pub psi_tilde: Matrix,
    pub k: Vector,
    pub k_tilde: Vector,
    /// diagonal of `F_t = diag(f_t)`
    pub f: Vector,
    /// diagonal of `F̃_t = Δ^c F_t`
    pub f_tilde: Vector,
}

impl NotationBlocks {
    pub fn from_cache(cache: &StepCache, p: &LstmParams, w: &WeightIndex) -> Result<Self> {
        w.validate(p)?;
        let n = p.hidden();
        let tanh_c = cache.c.map(f64::tanh);
        let per = |f: &dyn Fn(usize) -> f64| Vector::new((0..n).map(f).collect());
        let delta_c = per(&|j| cache.o[j] * (1.0 - tanh_c[j] * tanh_c[j]));
        let delta_o = per(&|j| cache.o[j] * (1.0 - cache.o[j]) * tanh_c[j]);
        let delta_f = per(&|j| cache.f[j] * (1.0 - cache.f[j]) * cache.c_prev[j]);
        let delta_i = per(&|j| cache.i[j] * (1.0 - cache.i[j]) * cache.g[j]);
        let delta_g = per(&|j| (1.0 - cache.g[j] * cache.g[j]) * cache.i[j]);

        let psi = p
            .w_fh
            .scale_rows(&delta_f)?
            .add(&p.w_gh.scale_rows(&delta_g)?)?
            .add(&p.w_ih.scale_rows(&delta_i)?)?;
        let psi_tilde = p.w_oh.scale_rows(&delta_o)?.add(&psi.scale_rows(&delta_c)?)?;

        // E^*(w)·[h_{t−1}, x_t] has a single nonzero entry, in row `w.row`.
        let concat = cache.h_prev.concat(&cache.x);
        let selected = concat[w.concat_column(n)];
        let selector = |gate: Gate| -> Vector {
            let mut e = Vector::zeros(n);
            if w.matrix.gate() == gate {
                e[w.row] = selected;
            }
            e
        };
        let k = delta_f
            .hadamard(&selector(Gate::F))?
            .add(&delta_g.hadamard(&selector(Gate::G))?)?
            .add(&delta_i.hadamard(&selector(Gate::I))?)?;
        let k_tilde = delta_o.hadamard(&selector(Gate::O))?.add(&delta_c.hadamard(&k)?)?;

        let f_tilde = delta_c.hadamard(&cache.f)?;
        Ok(NotationBlocks {
            delta_c,
            delta_o,
            delta_f,
            delta_i,
            delta_g,
            psi,
            psi_tilde,
            k,
            k_tilde,
            f: cache.f.clone(),
            f_tilde,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBlocks {
    pub a: Matrix,
    pub b: Matrix,
}

impl PathBlocks {
    /// `A + ξ B`.
    pub fn combined(&self, xi: f64) -> Result<Matrix> {
        Ok(self.a.add(&self.b.scale(xi))?)
    }
}

pub fn build_blocks(cache: &StepCache, p: &LstmParams, w: &WeightIndex) -> Result<PathBlocks> {
    let nb = NotationBlocks::from_cache(cache, p, w)?;
    let n = p.hidden();
    let mut a = Matrix::zeros(3 * n, 3 * n);
    a.set_block(0, 0, &Matrix::diag(&nb.f));
    a.set_block(0, 2 * n, &Matrix::diag(&nb.k));
    a.set_block(n, 0, &Matrix::diag(&nb.f_tilde));
    a.set_block(n, 2 * n, &Matrix::diag(&nb.k_tilde));
    a.set_block(2 * n, 2 * n, &Matrix::identity(n));
    let mut b = Matrix::zeros(3 * n, 3 * n);
    b.set_block(0, n, &nb.psi);
    b.set_block(n, n, &nb.psi_tilde);
    Ok(PathBlocks { a, b })
}

/// `(dc_t/dw, dh_t/dw, 1_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZVector {
    pub dc_dw: Vector,
    pub dh_dw: Vector,
    pub ones: Vector,
}

impl ZVector {
    pub fn stacked(&self) -> Vector {
        self.dc_dw.concat(&self.dh_dw).concat(&self.ones)
    }

    pub fn from_stacked(v: &Vector) -> Self {
        let n = v.len() / 3;
        let s = v.as_slice();
        ZVector {
            dc_dw: Vector::new(s[..n].to_vec()),
            dh_dw: Vector::new(s[n..2 * n].to_vec()),
            ones: Vector::new(s[2 * n..].to_vec()),
        }
    }

    /// The derivative blocks `(dc/dw, dh/dw)` without the constant block.
    pub fn derivatives(&self) -> Vector {
        self.dc_dw.concat(&self.dh_dw)
    }
}

/// `z_1` by differentiating the first step directly with dual numbers; the
/// initial state does not depend on `w`.
pub fn z1_direct(first: &StepCache, p: &LstmParams, w: &WeightIndex) -> Result<ZVector> {
    w.validate(p)?;
    let x: Vec<Dual> = first.x.iter().map(|&v| Dual::constant(v)).collect();
    let h0: Vec<Dual> = first.h_prev.iter().map(|&v| Dual::constant(v)).collect();
    let c0: Vec<Dual> = first.c_prev.iter().map(|&v| Dual::constant(v)).collect();
    let (h, c) = lstm::step_generic(p, Some(w.slot(p)), &x, &h0, &c0);
    Ok(ZVector {
        dc_dw: Vector::new(c.iter().map(|d| d.du).collect()),
        dh_dw: Vector::new(h.iter().map(|d| d.du).collect()),
        ones: Vector::ones(p.hidden()),
    })
}

/// `z_1, …, z_T`. With `xi = Some(ξ_2..ξ_T)` each `B_t` is multiplied by
/// `ξ_t` (the detached recursion); `None` is the full recursion.
pub fn z_recursion(
    caches: &[StepCache],
    p: &LstmParams,
    w: &WeightIndex,
    xi: Option<&[bool]>,
) -> Result<Vec<ZVector>> {
    let first = caches.first().ok_or(PathError::Empty)?;
    if let Some(xi) = xi {
        if xi.len() != caches.len() - 1 {
            return Err(PathError::XiLength {
                expected: caches.len() - 1,
                got: xi.len(),
            });
        }
    }
    let keep: Vec<f64> = match xi {
        Some(xi) => xi.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        None => vec![1.0; caches.len() - 1],
    };
    propagate(caches, p, w, &keep, z1_direct(first, p, w)?)
}

/// `Π_t (A_t + q B_t) z_1`, the expectation of the detached recursion when
/// every `ξ_t` is Bernoulli(`keep_prob`).
pub fn expected_z(caches: &[StepCache], p: &LstmParams, w: &WeightIndex, keep_prob: f64) -> Result<ZVector> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(PathError::BadKeepProb(keep_prob));
    }
    let first = caches.first().ok_or(PathError::Empty)?;
    let keep = vec![keep_prob; caches.len() - 1];
    let zs = propagate(caches, p, w, &keep, z1_direct(first, p, w)?)?;
    Ok(zs.into_iter().last().expect("non-empty"))
}

fn propagate(
    caches: &[StepCache],
    p: &LstmParams,
    w: &WeightIndex,
    keep: &[f64],
    z1: ZVector,
) -> Result<Vec<ZVector>> {
    let mut out = Vec::with_capacity(caches.len());
    let mut z = z1.stacked();
    out.push(z1);
    for (cache, &xi) in caches[1..].iter().zip(keep) {
        let blocks = build_blocks(cache, p, w)?;
        z = blocks.combined(xi)?.matvec(&z)?;
        out.push(ZVector::from_stacked(&z));
    }
    Ok(out)
}

/// One row of the cell-path / hidden-path decomposition at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRow {
    /// 1-based step.
    pub t: usize,
    /// `‖A_t ⋯ A_2 z_1‖` over the derivative blocks.
    pub norm_a_path: f64,
    /// `‖z_t − A_t ⋯ A_2 z_1‖`: everything that passed through some `B_s`.
    pub norm_b_path: f64,
    /// `norm_a_path / norm_b_path`; `None` while the B contribution is zero.
    pub ratio: Option<f64>,
    /// `max |B_t|` entry (0 at t = 1, where no `B` is applied).
    pub max_abs_b: f64,
    /// `max |A_t|` entry.
    pub max_abs_a: f64,
    /// Upper bound on `|A_t|` entries implied by gate ranges and cell growth.
    pub a_entry_bound: f64,
}

/// Bound on `|A_t|` entries: gates and `tanh` terms are at most 1 (their
/// derivative factors at most 1/4), `|c_{t−1}| <= max|c_0| + t − 1` and the
/// selected input entry is at most `max(1, |x_t|_∞)`.
pub fn a_entry_bound(c0_max: f64, t: usize, x: &Vector) -> f64 {
    let cell = c0_max + (t as f64 - 1.0);
    (1.0 + 0.25 * cell) * x.max_abs().max(1.0)
}

pub fn path_decomposition(caches: &[StepCache], p: &LstmParams, w: &WeightIndex) -> Result<Vec<PathRow>> {
    let first = caches.first().ok_or(PathError::Empty)?;
    let z1 = z1_direct(first, p, w)?;
    let c0_max = first.c_prev.max_abs();
    let mut full = z1.stacked();
    let mut a_only = full.clone();
    let mut rows = Vec::with_capacity(caches.len());
    let derivs = |v: &Vector| Vector::new(v.as_slice()[..2 * p.hidden()].to_vec());

    let first_blocks = build_blocks(first, p, w)?;
    rows.push(PathRow {
        t: 1,
        norm_a_path: derivs(&a_only).norm(),
        norm_b_path: 0.0,
        ratio: None,
        max_abs_b: 0.0,
        max_abs_a: first_blocks.a.max_abs(),
        a_entry_bound: a_entry_bound(c0_max, 1, &first.x),
    });
    for (s, cache) in caches.iter().enumerate().skip(1) {
        let blocks = build_blocks(cache, p, w)?;
        full = blocks.combined(1.0)?.matvec(&full)?;
        a_only = blocks.a.matvec(&a_only)?;
        let norm_a = derivs(&a_only).norm();
        let norm_b = derivs(&full).sub(&derivs(&a_only))?.norm();
        rows.push(PathRow {
            t: s + 1,
            norm_a_path: norm_a,
            norm_b_path: norm_b,
            ratio: (norm_b > 0.0).then(|| norm_a / norm_b),
            max_abs_b: blocks.b.max_abs(),
            max_abs_a: blocks.a.max_abs(),
            a_entry_bound: a_entry_bound(c0_max, s + 1, &cache.x),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm::{forward_sequence, init_params, InitScheme, LstmState};
    use crate::numerics::Rng;

    fn tiny(seed: u64, n: usize, d: usize, steps: usize) -> (LstmParams, Vec<StepCache>) {
        let mut rng = Rng::new(seed);
        let p = init_params(n, d, &mut rng, InitScheme::UniformXavier).unwrap();
        let xs: Vec<Vector> = (0..steps)
            .map(|_| Vector::new((0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect()))
            .collect();
        let s0 = LstmState {
            h: Vector::new((0..n).map(|_| rng.uniform_range(-0.5, 0.5)).collect()),
            c: Vector::new((0..n).map(|_| rng.uniform_range(-0.5, 0.5)).collect()),
        };
        let (caches, _) = forward_sequence(&p, &xs, &s0, None).unwrap();
        (p, caches)
    }

    #[test]
    fn zero_params_blocks() {
        let p = LstmParams::zeros(2, 1);
        let (caches, _) = forward_sequence(&p, &[Vector::new(vec![1.0])], &LstmState::zeros(2), None).unwrap();
        let nb = NotationBlocks::from_cache(&caches[0], &p, &WeightIndex::new(MatrixId::Fx, 0, 0)).unwrap();
        assert_eq!(nb.delta_c, Vector::filled(2, 0.5));
        assert_eq!(nb.delta_f, Vector::zeros(2));
        assert_eq!(nb.delta_o, Vector::zeros(2));
        assert_eq!(nb.delta_i, Vector::zeros(2));
        assert_eq!(nb.delta_g, Vector::filled(2, 0.5));
        assert_eq!(nb.f, Vector::filled(2, 0.5));
    }

    #[test]
    fn output_gate_input_weight_selects_single_row() {
        let (p, caches) = tiny(3, 3, 2, 2);
        let w = WeightIndex::new(MatrixId::Ox, 1, 0);
        let nb = NotationBlocks::from_cache(&caches[1], &p, &w).unwrap();
        assert_eq!(nb.k, Vector::zeros(3));
        for j in 0..3 {
            let expected = if j == 1 { nb.delta_o[1] * caches[1].x[0] } else { 0.0 };
            assert_eq!(nb.k_tilde[j], expected);
        }
    }

    #[test]
    fn block_sparsity_patterns() {
        let (p, caches) = tiny(4, 3, 2, 3);
        let n = 3;
        let blocks = build_blocks(&caches[2], &p, &WeightIndex::new(MatrixId::Gh, 2, 1)).unwrap();
        for r in 0..3 * n {
            for c in 0..3 * n {
                let in_middle = (n..2 * n).contains(&c) && r < 2 * n;
                if !in_middle {
                    assert_eq!(blocks.b[(r, c)], 0.0);
                }
                if (n..2 * n).contains(&c) {
                    assert_eq!(blocks.a[(r, c)], 0.0);
                }
            }
        }
        assert!(blocks.b.block(0, n, 2 * n, n).max_abs() > 0.0);
        assert_eq!(blocks.a.block(2 * n, 2 * n, n, n), Matrix::identity(n));
        assert_eq!(blocks.a.block(2 * n, 0, n, 2 * n), Matrix::zeros(n, 2 * n));
    }

    #[test]
    fn b_is_linear_in_recurrent_weights_given_gates() {
        let (p, caches) = tiny(5, 2, 1, 2);
        let w = WeightIndex::new(MatrixId::Ih, 0, 0);
        let b1 = build_blocks(&caches[1], &p, &w).unwrap().b;
        let mut p2 = p.clone();
        p2.scale_recurrent(3.0);
        // Same cache, scaled weights: the Δ terms are unchanged.
        let b3 = build_blocks(&caches[1], &p2, &w).unwrap().b;
        for (x, y) in b1.as_slice().iter().zip(b3.as_slice()) {
            assert!((3.0 * x - y).abs() < 1e-14);
        }
        let mut p0 = p.clone();
        p0.scale_recurrent(0.0);
        assert_eq!(build_blocks(&caches[1], &p0, &w).unwrap().b.max_abs(), 0.0);
    }

    #[test]
    fn z1_equals_k_terms() {
        let (p, caches) = tiny(6, 3, 2, 1);
        for w in WeightIndex::all(&p) {
            let z1 = z1_direct(&caches[0], &p, &w).unwrap();
            let nb = NotationBlocks::from_cache(&caches[0], &p, &w).unwrap();
            for j in 0..3 {
                assert!((z1.dc_dw[j] - nb.k[j]).abs() < 1e-14, "{w}");
                assert!((z1.dh_dw[j] - nb.k_tilde[j]).abs() < 1e-14, "{w}");
            }
        }
    }

    #[test]
    fn all_keep_indicators_reproduce_full_recursion() {
        let (p, caches) = tiny(7, 3, 2, 5);
        let w = WeightIndex::new(MatrixId::Fh, 1, 2);
        let full = z_recursion(&caches, &p, &w, None).unwrap();
        let kept = z_recursion(&caches, &p, &w, Some(&[true; 4])).unwrap();
        assert_eq!(full, kept);
        assert!(full.iter().all(|z| z.ones == Vector::ones(3)));
    }

    #[test]
    fn expected_z_endpoints() {
        let (p, caches) = tiny(8, 2, 2, 4);
        let w = WeightIndex::new(MatrixId::Oh, 0, 1);
        let full = z_recursion(&caches, &p, &w, None).unwrap();
        assert_eq!(expected_z(&caches, &p, &w, 1.0).unwrap(), full[3]);
        let none = z_recursion(&caches, &p, &w, Some(&[false; 3])).unwrap();
        assert_eq!(expected_z(&caches, &p, &w, 0.0).unwrap(), none[3]);
        assert!(expected_z(&caches, &p, &w, 1.5).is_err());
    }

    #[test]
    fn xi_length_is_checked() {
        let (p, caches) = tiny(8, 2, 2, 4);
        let w = WeightIndex::new(MatrixId::Oh, 0, 1);
        assert!(matches!(
            z_recursion(&caches, &p, &w, Some(&[true; 4])),
            Err(PathError::XiLength { expected: 3, got: 4 })
        ));
    }

    #[test]
    fn weight_index_parsing_and_validation() {
        let w: WeightIndex = "fh:1:0".parse().unwrap();
        assert_eq!(w, WeightIndex::new(MatrixId::Fh, 1, 0));
        assert_eq!(w.to_string().parse::<WeightIndex>().unwrap(), w);
        assert!("zz:0:0".parse::<WeightIndex>().is_err());
        assert!("fh:0".parse::<WeightIndex>().is_err());
        let p = LstmParams::zeros(2, 1);
        assert!(WeightIndex::new(MatrixId::Gx, 0, 1).validate(&p).is_err());
        assert!(WeightIndex::new(MatrixId::Gx, 1, 0).validate(&p).is_ok());
    }

    #[test]
    fn decomposition_edge_cases() {
        let (mut p, caches) = tiny(9, 2, 1, 1);
        let w = WeightIndex::new(MatrixId::Fh, 0, 0);
        let rows = path_decomposition(&caches, &p, &w).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].norm_b_path, 0.0);
        assert_eq!(rows[0].ratio, None);

        p.scale_recurrent(0.0);
        let xs: Vec<Vector> = (0..4).map(|t| Vector::new(vec![t as f64 - 1.5])).collect();
        let (caches, _) = forward_sequence(&p, &xs, &LstmState::zeros(2), None).unwrap();
        let rows = path_decomposition(&caches, &p, &WeightIndex::new(MatrixId::Fx, 1, 0)).unwrap();
        assert!(rows.iter().all(|r| r.norm_b_path == 0.0 && r.max_abs_b == 0.0));
    }

    #[test]
    fn a_entries_respect_bound() {
        for seed in 0..10 {
            let (mut p, _) = tiny(seed, 3, 2, 1);
            p.scale_recurrent(4.0);
            let mut rng = Rng::new(seed + 100);
            let xs: Vec<Vector> = (0..8)
                .map(|_| Vector::new(vec![rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0)]))
                .collect();
            let s0 = LstmState {
                h: Vector::zeros(3),
                c: Vector::new(vec![1.0, -2.0, 0.5]),
            };
            let (caches, _) = forward_sequence(&p, &xs, &s0, None).unwrap();
            for w in WeightIndex::all(&p) {
                for row in path_decomposition(&caches, &p, &w).unwrap() {
                    assert!(row.max_abs_a <= row.a_entry_bound, "{w} t={} {} > {}", row.t, row.max_abs_a, row.a_entry_bound);
                }
            }
        }
    }
}
