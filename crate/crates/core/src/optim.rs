//! ADAM and global gradient-norm clipping.

use thiserror::Error;

use crate::lstm::LstmParams;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("max_norm must be positive when clipping is enabled, got {0}")]
    BadMaxNorm(f64),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
}

pub type Result<T> = std::result::Result<T, OptimError>;

/// A collection of flat parameter tensors with a fixed order and shape.
///
/// Gradients are stored in the same type as the parameters they belong to.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn scale_all(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= s;
            }
        }
    }
}

impl ParamSet for LstmParams {
    fn tensors(&self) -> Vec<&[f64]> {
        LstmParams::tensors(self)
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        LstmParams::tensors_mut(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    pub enabled: bool,
    pub max_norm: f64,
}

impl ClipConfig {
    pub fn new(max_norm: f64) -> Result<Self> {
        if !(max_norm > 0.0 && max_norm.is_finite()) {
            return Err(OptimError::BadMaxNorm(max_norm));
        }
        Ok(ClipConfig {
            enabled: true,
            max_norm,
        })
    }

    pub fn disabled() -> Self {
        ClipConfig {
            enabled: false,
            max_norm: f64::INFINITY,
        }
    }
}

/// Rescales `g` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<P: ParamSet>(g: &mut P, cfg: ClipConfig) -> f64 {
    let norm = g.global_norm();
    if cfg.enabled && norm > cfg.max_norm {
        g.scale_all(cfg.max_norm / norm);
    }
    norm
}

/// Bias-corrected ADAM.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments shaped like `params`, with `beta1 = 0.9`,
    /// `beta2 = 0.999`, `epsilon = 1e-8`.
    pub fn new<P: ParamSet>(params: &P, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update `p ← p − lr·m̂/(√v̂ + ε)`.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let gs = grads.tensors();
        let mut ps = params.tensors_mut();
        if ps.len() != self.m.len() || gs.len() != self.m.len() {
            return Err(OptimError::Layout(format!(
                "state has {} tensors, params {}, grads {}",
                self.m.len(),
                ps.len(),
                gs.len()
            )));
        }
        for (k, ((p, g), m)) in ps.iter().zip(&gs).zip(&self.m).enumerate() {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(OptimError::Layout(format!(
                    "tensor {k}: state {}, params {}, grads {}",
                    m.len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in ps.iter_mut().zip(&gs).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
