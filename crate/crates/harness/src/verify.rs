//! Self-contained verification suites on tiny random networks.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use hdetach_core::backprop::{
    bptt, dual_number_grad, finite_difference_grad, loss_and_grads, max_relative_error, LossGrads, ProbeLoss,
};
use hdetach_core::lstm::{
    forward_sequence_masked, init_params, sample_mask, DetachMask, InitScheme, LstmState, MatrixId, StepCache,
};
use hdetach_core::numerics::{Rng, Vector};
use hdetach_core::paths::{expected_z, z_recursion, WeightIndex};
use hdetach_core::LstmParams;

use crate::config::RunConfig;
use crate::data::{build_dataset, Dataset};
use crate::train::{train_on, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Fd,
    Thm1,
    Thm2,
    Corollary,
    Flops,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Fd, Suite::Thm1, Suite::Thm2, Suite::Corollary, Suite::Flops];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Suite::Fd => "fd",
            Suite::Thm1 => "thm1",
            Suite::Thm2 => "thm2",
            Suite::Corollary => "corollary",
            Suite::Flops => "flops",
        };
        f.write_str(s)
    }
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.to_string() == s)
            .ok_or_else(|| format!("unknown suite {s:?} (fd, thm1, thm2, corollary, flops)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub error: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn within(name: impl Into<String>, error: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed: error < tolerance,
            error,
            tolerance,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub elapsed_secs: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "[{}] {} {}: error {:.3e} (tolerance {:.1e}) {}",
                if c.passed { "PASS" } else { "FAIL" },
                self.suite,
                c.name,
                c.error,
                c.tolerance,
                c.detail
            )?;
        }
        write!(
            f,
            "{}: {} of {} checks passed in {:.2}s",
            self.suite,
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len(),
            self.elapsed_secs
        )
    }
}

/// A random network, input sequence and initial state.
pub struct TinyNet {
    pub params: LstmParams,
    pub xs: Vec<Vector>,
    pub s0: LstmState,
}

impl TinyNet {
    pub fn random(rng: &mut Rng, n: usize, d: usize, steps: usize) -> Self {
        let params = init_params(n, d, rng, InitScheme::UniformXavier).expect("positive sizes");
        let xs = (0..steps)
            .map(|_| Vector::new((0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect()))
            .collect();
        let mut state = |len| Vector::new((0..len).map(|_| rng.uniform_range(-0.5, 0.5)).collect());
        let s0 = LstmState { h: state(n), c: state(n) };
        TinyNet { params, xs, s0 }
    }

    fn caches(&self, mask: Option<&DetachMask>) -> Vec<StepCache> {
        forward_sequence_masked(&self.params, &self.xs, &self.s0, mask, None)
            .expect("shapes are consistent")
            .0
    }
}

pub const FD_CONFIGS: usize = 20;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;
pub const THEOREM_TOLERANCE: f64 = 1e-8;
pub const XI_PATTERNS: usize = 10;
pub const COROLLARY_DRAWS: usize = 10_000;
pub const COROLLARY_SE: f64 = 3.0;

fn mask_name(kind: usize) -> &'static str {
    ["keep-all", "detach-all", "random"][kind]
}

/// BPTT against forward-mode dual numbers and against masked central
/// differences on `FD_CONFIGS` random configurations with `n ≤ 4`, `d ≤ 3`,
/// `T ≤ 6`.
pub fn verify_fd(seed: u64) -> Report {
    let started = Instant::now();
    let root = Rng::new(seed);
    let mut checks = Vec::new();
    for k in 0..FD_CONFIGS {
        let mut rng = root.derive(k as u64);
        let n = 1 + rng.below(4) as usize;
        let d = 1 + rng.below(3) as usize;
        let steps = 1 + rng.below(6) as usize;
        let net = TinyNet::random(&mut rng, n, d, steps);
        let kind = k % 3;
        let mask = match kind {
            0 => DetachMask::keep_all(steps),
            1 => DetachMask::detach_all(steps),
            _ => sample_mask(&mut rng, steps, 0.5).expect("valid probability"),
        };
        let loss = ProbeLoss::random(&mut rng, steps, n);
        let (_, analytic) =
            loss_and_grads(&net.params, &net.xs, &net.s0, Some(&mask), None, &loss).expect("shapes are consistent");
        let dual = dual_number_grad(&net.params, &net.xs, &net.s0, Some(&mask), None, &loss).expect("shapes");
        let fd = finite_difference_grad(&net.params, &net.xs, &net.s0, Some(&mask), &loss, FD_STEP).expect("shapes");
        let label = format!("config {k} (n={n} d={d} T={steps} mask={})", mask_name(kind));
        let (e, at) = max_relative_error(&analytic, &dual, REL_FLOOR);
        checks.push(Check::within(
            format!("{label} vs dual numbers"),
            e,
            FD_TOLERANCE,
            format!("worst at {}[{}]", LstmParams::tensor_name(at.tensor), at.index),
        ));
        let (e, at) = max_relative_error(&analytic, &fd, REL_FLOOR);
        checks.push(Check::within(
            format!("{label} vs central differences"),
            e,
            FD_TOLERANCE,
            format!("worst at {}[{}]", LstmParams::tensor_name(at.tensor), at.index),
        ));
    }
    Report {
        suite: Suite::Fd,
        checks,
        elapsed_secs: started.elapsed().as_secs_f64(),
    }
}

/// `(dc_t/dw, dh_t/dw)` for every weight and every `t`, each coordinate from
/// its own reverse pass over the first `t` steps. Indexed `[t][weight]`.
fn jacobians_by_bptt(p: &LstmParams, caches: &[StepCache], weights: &[WeightIndex]) -> Vec<Vec<Vector>> {
    let n = p.hidden();
    (1..=caches.len())
        .map(|t| {
            let prefix = &caches[..t];
            let mut cols = vec![vec![0.0; 2 * n]; weights.len()];
            for j in 0..2 * n {
                let mut lg = LossGrads::zeros(t, n);
                if j < n {
                    lg.dc_final = Some(Vector::one_hot(n, j));
                } else {
                    lg.dh[t - 1] = Vector::one_hot(n, j - n);
                }
                let g = bptt(p, prefix, &lg).expect("shapes are consistent");
                for (k, w) in weights.iter().enumerate() {
                    cols[k][j] = g.get(w.slot(p));
                }
            }
            cols.into_iter().map(Vector::new).collect()
        })
        .collect()
}

/// Largest `|z-recursion − reverse mode|` over all weights and steps, with
/// its location.
fn recursion_vs_bptt(net: &TinyNet, xi: Option<&[bool]>) -> (f64, String) {
    let mask = xi.map(|xi| {
        let mut bits = vec![false];
        bits.extend(xi.iter().map(|&keep| !keep));
        DetachMask::from_bits(bits)
    });
    let caches = net.caches(mask.as_ref());
    let weights = WeightIndex::all(&net.params);
    let jac = jacobians_by_bptt(&net.params, &caches, &weights);
    let mut worst = (0.0, String::from("-"));
    for (k, w) in weights.iter().enumerate() {
        let zs = z_recursion(&caches, &net.params, w, xi).expect("valid weight and pattern");
        for (t, z) in zs.iter().enumerate() {
            let err = z
                .derivatives()
                .iter()
                .zip(jac[t][k].iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if err > worst.0 || err.is_nan() {
                worst = (err, format!("weight {w} at t={}", t + 1));
            }
        }
    }
    worst
}

/// Full recursion against reverse mode, every weight, `n = 3, d = 2, T = 5`.
pub fn verify_thm1(seed: u64) -> Report {
    let started = Instant::now();
    let net = TinyNet::random(&mut Rng::new(seed), 3, 2, 5);
    let (err, at) = recursion_vs_bptt(&net, None);
    Report {
        suite: Suite::Thm1,
        checks: vec![Check::within("z_t vs BPTT Jacobian (all weights, all t)", err, THEOREM_TOLERANCE, at)],
        elapsed_secs: started.elapsed().as_secs_f64(),
    }
}

/// The recursion with `B_t` switched by random keep patterns against
/// reverse mode through the correspondingly detached forward pass.
pub fn verify_thm2(seed: u64) -> Report {
    let started = Instant::now();
    let root = Rng::new(seed);
    let net = TinyNet::random(&mut root.derive(0), 3, 2, 5);
    let mut rng = root.derive(1);
    let checks = (0..XI_PATTERNS)
        .map(|k| {
            let xi: Vec<bool> = (0..4).map(|_| rng.bernoulli(0.5).expect("valid probability")).collect();
            let (err, at) = recursion_vs_bptt(&net, Some(&xi));
            let pattern: String = xi.iter().map(|&b| if b { '1' } else { '0' }).collect();
            Check::within(format!("pattern {k} xi=[{pattern}]"), err, THEOREM_TOLERANCE, at)
        })
        .collect();
    Report {
        suite: Suite::Thm2,
        checks,
        elapsed_secs: started.elapsed().as_secs_f64(),
    }
}

/// Monte-Carlo mean of the detached recursion against its closed-form
/// expectation, `n = 2, T = 4`, weight `W_fh[0][1]`. The reported error is
/// the largest deviation in standard errors.
pub fn verify_corollary(seed: u64) -> Report {
    let started = Instant::now();
    let root = Rng::new(seed);
    let net = TinyNet::random(&mut root.derive(0), 2, 2, 4);
    let caches = net.caches(None);
    let w = WeightIndex::new(MatrixId::Fh, 0, 1);
    let mut checks = Vec::new();
    for (qi, q) in [0.25, 0.5, 0.75].into_iter().enumerate() {
        let mut rng = root.derive(1 + qi as u64);
        let dim = 2 * net.params.hidden();
        let (mut sum, mut sum_sq) = (vec![0.0; dim], vec![0.0; dim]);
        for _ in 0..COROLLARY_DRAWS {
            let xi: Vec<bool> = (0..3).map(|_| rng.bernoulli(q).expect("valid probability")).collect();
            let z = z_recursion(&caches, &net.params, &w, Some(&xi)).expect("valid pattern");
            for (j, v) in z.last().expect("non-empty").derivatives().iter().enumerate() {
                sum[j] += v;
                sum_sq[j] += v * v;
            }
        }
        let expected = expected_z(&caches, &net.params, &w, q).expect("valid keep probability").derivatives();
        let m = COROLLARY_DRAWS as f64;
        let mut worst = (0.0, 0);
        for j in 0..dim {
            let mean = sum[j] / m;
            let var = ((sum_sq[j] - m * mean * mean) / (m - 1.0)).max(0.0);
            let se = (var / m).sqrt();
            let dev = (mean - expected[j]).abs();
            let score = if se > 0.0 {
                dev / se
            } else if dev <= 1e-12 * (1.0 + expected[j].abs()) {
                0.0
            } else {
                f64::INFINITY
            };
            if score > worst.0 {
                worst = (score, j);
            }
        }
        checks.push(Check {
            name: format!("keep_prob {q}: sample mean vs expectation (weight {w})"),
            passed: worst.0 <= COROLLARY_SE,
            error: worst.0,
            tolerance: COROLLARY_SE,
            detail: format!("worst component {} in standard errors", worst.1),
        });
    }
    Report {
        suite: Suite::Corollary,
        checks,
        elapsed_secs: started.elapsed().as_secs_f64(),
    }
}

/// Per-batch backward multiply-accumulates of h-detach runs at detach
/// probability 0, 0.5 and 1 over the same batches.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopsComparison {
    pub vanilla: Vec<u64>,
    pub half: Vec<u64>,
    pub all: Vec<u64>,
}

impl FlopsComparison {
    pub fn mean(v: &[u64]) -> f64 {
        v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
    }

    pub fn midpoint(&self) -> f64 {
        (Self::mean(&self.vanilla) + Self::mean(&self.all)) / 2.0
    }

    /// `|mean(half) − midpoint| / midpoint`.
    pub fn midpoint_deviation(&self) -> f64 {
        (Self::mean(&self.half) - self.midpoint()).abs() / self.midpoint()
    }

    pub fn strictly_less_every_batch(&self) -> bool {
        self.half.len() == self.vanilla.len() && self.half.iter().zip(&self.vanilla).all(|(h, v)| h < v)
    }
}

/// Trains `batches` mini-batches at each detach probability (same data,
/// same batch order) and collects the instrumented counts.
pub fn compare_flops(base: &RunConfig, batches: usize) -> Result<FlopsComparison, TrainError> {
    let cfg = RunConfig {
        epochs: batches.div_ceil(base.train_size.div_ceil(base.batch)),
        stop_at: None,
        out_dir: None,
        ..base.clone()
    };
    let data: Dataset = build_dataset(&cfg)?;
    let run = |p: f64| -> Result<Vec<u64>, TrainError> {
        let cfg = RunConfig {
            detach_prob: p,
            ..cfg.clone()
        };
        let mut macs = train_on(&cfg, &data)?.batch_macs;
        macs.truncate(batches);
        Ok(macs)
    };
    Ok(FlopsComparison {
        vanilla: run(0.0)?,
        half: run(0.5)?,
        all: run(1.0)?,
    })
}

/// Small copying configuration used by the `flops` suite.
pub fn flops_suite_config(seed: u64) -> RunConfig {
    RunConfig {
        delay: 20,
        hidden_size: 16,
        batch: 10,
        train_size: 1_000,
        val_size: 10,
        seed,
        audit_every: 0,
        ..RunConfig::default()
    }
}

pub fn flops_report(cmp: &FlopsComparison) -> Vec<Check> {
    let below = cmp.half.iter().zip(&cmp.vanilla).filter(|(h, v)| h < v).count();
    vec![
        Check {
            name: format!("detach 0.5 below vanilla on every batch ({} batches)", cmp.vanilla.len()),
            passed: cmp.strictly_less_every_batch(),
            error: (cmp.vanilla.len() - below) as f64,
            tolerance: 1.0,
            detail: format!("{below} of {} batches strictly below", cmp.vanilla.len()),
        },
        Check::within(
            "mean within 10% of the all/no-detach midpoint",
            cmp.midpoint_deviation(),
            0.10,
            format!(
                "mean {:.4e}, midpoint {:.4e} (vanilla {:.4e}, all-detach {:.4e})",
                FlopsComparison::mean(&cmp.half),
                cmp.midpoint(),
                FlopsComparison::mean(&cmp.vanilla),
                FlopsComparison::mean(&cmp.all)
            ),
        ),
    ]
}

pub fn verify_flops(seed: u64) -> Result<Report, TrainError> {
    let started = Instant::now();
    let cmp = compare_flops(&flops_suite_config(seed), 100)?;
    Ok(Report {
        suite: Suite::Flops,
        checks: flops_report(&cmp),
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

pub fn verify(suite: Suite, seed: u64) -> Result<Report, TrainError> {
    Ok(match suite {
        Suite::Fd => verify_fd(seed),
        Suite::Thm1 => verify_thm1(seed),
        Suite::Thm2 => verify_thm2(seed),
        Suite::Corollary => verify_corollary(seed),
        Suite::Flops => verify_flops(seed)?,
    })
}
