//! Cell-path versus hidden-path gradient decomposition of a model under
//! rescaled recurrent weights.

use serde::Serialize;

use hdetach_core::lstm::{forward_sequence, LstmState};
use hdetach_core::numerics::{Rng, Vector};
use hdetach_core::paths::{path_decomposition, PathError, WeightIndex};
use hdetach_core::tasks::{gen_copying, COPY_VOCAB};
use hdetach_core::LstmParams;

/// One step of the decomposition at one recurrent-weight scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathReportRow {
    pub weight_scale: f64,
    pub t: usize,
    #[serde(rename = "norm_A_path")]
    pub norm_a_path: f64,
    #[serde(rename = "norm_B_path")]
    pub norm_b_path: f64,
    /// `norm_A_path / norm_B_path`; empty in the CSV while the hidden-path
    /// contribution is zero.
    pub ratio: Option<f64>,
    pub max_abs_b: f64,
    pub max_abs_a: f64,
    pub a_entry_bound: f64,
}

/// Summary of one scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSummary {
    pub weight_scale: f64,
    pub max_abs_b: f64,
    pub max_abs_a: f64,
    /// Whether every `max |A_t|` stays under its bound.
    pub a_within_bound: bool,
}

/// A one-hot copying sequence of the given delay, used as the probe input.
pub fn probe_inputs(delay: usize, seed: u64) -> Vec<Vector> {
    let seq = gen_copying(delay, 1, &mut Rng::new(seed))
        .expect("positive delay")
        .remove(0);
    seq.inputs.iter().map(|&tok| Vector::one_hot(COPY_VOCAB, tok as usize)).collect()
}

/// Runs the decomposition for weight `w` with the recurrent matrices of `p`
/// multiplied by each scale in turn, from a zero initial state.
pub fn path_report(
    p: &LstmParams,
    xs: &[Vector],
    w: &WeightIndex,
    scales: &[f64],
) -> Result<Vec<PathReportRow>, PathError> {
    w.validate(p)?;
    let mut out = Vec::new();
    for &s in scales {
        let mut scaled = p.clone();
        scaled.scale_recurrent(s);
        let (caches, _) = forward_sequence(&scaled, xs, &LstmState::zeros(p.hidden()), None)?;
        for r in path_decomposition(&caches, &scaled, w)? {
            out.push(PathReportRow {
                weight_scale: s,
                t: r.t,
                norm_a_path: r.norm_a_path,
                norm_b_path: r.norm_b_path,
                ratio: r.ratio,
                max_abs_b: r.max_abs_b,
                max_abs_a: r.max_abs_a,
                a_entry_bound: r.a_entry_bound,
            });
        }
    }
    Ok(out)
}

/// Per-scale maxima, in the order the scales first appear.
pub fn summarize(rows: &[PathReportRow]) -> Vec<ScaleSummary> {
    let mut out: Vec<ScaleSummary> = Vec::new();
    for r in rows {
        let within = r.max_abs_a <= r.a_entry_bound;
        match out.iter_mut().find(|s| s.weight_scale == r.weight_scale) {
            Some(s) => {
                s.max_abs_b = s.max_abs_b.max(r.max_abs_b);
                s.max_abs_a = s.max_abs_a.max(r.max_abs_a);
                s.a_within_bound &= within;
            }
            None => out.push(ScaleSummary {
                weight_scale: r.weight_scale,
                max_abs_b: r.max_abs_b,
                max_abs_a: r.max_abs_a,
                a_within_bound: within,
            }),
        }
    }
    out
}

pub fn path_report_csv(rows: &[PathReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use hdetach_core::lstm::{init_params, InitScheme, MatrixId};

    fn net() -> LstmParams {
        init_params(6, COPY_VOCAB, &mut Rng::new(2), InitScheme::UniformXavier).unwrap()
    }

    #[test]
    fn zero_scale_has_no_hidden_path() {
        let w = WeightIndex::new(MatrixId::Fh, 0, 1);
        let rows = path_report(&net(), &probe_inputs(5, 1), &w, &[0.0]).unwrap();
        assert_eq!(rows.len(), 5 + 20);
        assert!(rows.iter().all(|r| r.norm_b_path == 0.0 && r.max_abs_b == 0.0 && r.ratio.is_none()));
    }

    #[test]
    fn single_step_has_empty_ratio() {
        let w = WeightIndex::new(MatrixId::Ix, 1, 2);
        let xs = probe_inputs(5, 1);
        let rows = path_report(&net(), &xs[..1], &w, &[1.0, 2.0]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.ratio.is_none()));
        let csv = path_report_csv(&rows);
        assert!(csv.starts_with("weight_scale,t,norm_A_path,norm_B_path,ratio,"));
        assert!(csv.lines().nth(1).unwrap().contains(",0.0,,"));
    }

    #[test]
    fn larger_scales_enlarge_b() {
        let w = WeightIndex::new(MatrixId::Fh, 0, 1);
        let rows = path_report(&net(), &probe_inputs(10, 3), &w, &[1.0, 2.0, 4.0]).unwrap();
        let s = summarize(&rows);
        assert_eq!(s.len(), 3);
        assert!(s.windows(2).all(|p| p[1].max_abs_b > p[0].max_abs_b), "{s:?}");
        assert!(s.iter().all(|x| x.a_within_bound));
    }

    #[test]
    fn invalid_weight_is_rejected() {
        let w = WeightIndex::new(MatrixId::Fh, 0, 99);
        assert!(path_report(&net(), &probe_inputs(5, 1), &w, &[1.0]).is_err());
    }
}
