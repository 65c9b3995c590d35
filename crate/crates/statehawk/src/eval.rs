//! State alignment, classification and forecast metrics, Welch's t-test.

use itertools::Itertools;
use pathfinding::kuhn_munkres::kuhn_munkres;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{Error, Result};

const EXHAUSTIVE_MAX: usize = 6;

fn counts(pred: &[usize], truth: &[usize], m: usize) -> Result<Vec<Vec<i64>>> {
    if pred.len() != truth.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = vec![vec![0i64; m]; m];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= m || t >= m {
            return Err(Error::Argument(format!("label outside 0..{m}")));
        }
        c[p][t] += 1;
    }
    Ok(c)
}

/// Permutation `perm` (predicted label `p` maps to `perm[p]`) maximizing
/// agreement with `truth`. Exhaustive search prefers the identity on ties.
pub fn align_states(pred: &[usize], truth: &[usize], m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::Argument("alignment needs at least one state".into()));
    }
    let c = counts(pred, truth, m)?;
    if m <= EXHAUSTIVE_MAX {
        let mut best = (0..m).collect::<Vec<_>>();
        let mut best_score = -1;
        for perm in (0..m).permutations(m) {
            let score: i64 = perm.iter().enumerate().map(|(p, &t)| c[p][t]).sum();
            if score > best_score {
                best_score = score;
                best = perm;
            }
        }
        return Ok(best);
    }
    let weights = pathfinding::matrix::Matrix::from_vec(m, m, c.concat())
        .map_err(|e| Error::Argument(e.to_string()))?;
    Ok(kuhn_munkres(&weights).1)
}

pub fn apply_alignment(pred: &[usize], perm: &[usize]) -> Vec<usize> {
    pred.iter().map(|&p| perm[p]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// States missing from the truth; they count as zero in the macro means.
    pub absent: Vec<usize>,
}

/// Accuracy plus macro-averaged precision, recall and F1 over `m` states.
pub fn classification_metrics(pred: &[usize], truth: &[usize], m: usize) -> Result<Classification> {
    let c = counts(pred, truth, m)?;
    let n = pred.len();
    if n == 0 {
        return Err(Error::Argument("no labels to score".into()));
    }
    let correct: i64 = (0..m).map(|k| c[k][k]).sum();
    let mut absent = Vec::new();
    let (mut prec, mut rec, mut f1) = (0.0, 0.0, 0.0);
    for k in 0..m {
        let tp = c[k][k] as f64;
        let predicted: i64 = c[k].iter().sum();
        let actual: i64 = (0..m).map(|p| c[p][k]).sum();
        if actual == 0 {
            absent.push(k);
            continue;
        }
        let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let r = tp / actual as f64;
        prec += p;
        rec += r;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let mf = m as f64;
    Ok(Classification {
        accuracy: correct as f64 / n as f64,
        precision: prec / mf,
        recall: rec / mf,
        f1: f1 / mf,
        absent,
    })
}

/// Binary metrics with `positive` as the positive class.
pub fn binary_metrics(pred: &[usize], truth: &[usize], positive: usize) -> Result<Classification> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Argument("binary metrics need equal nonempty labels".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    let mut correct = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        let (pp, tt) = (p == positive, t == positive);
        correct += usize::from(pp == tt);
        match (pp, tt) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Classification {
        accuracy: correct as f64 / pred.len() as f64,
        precision,
        recall,
        f1,
        absent: if tp + fn_ == 0.0 { vec![positive] } else { Vec::new() },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub mae: f64,
    pub mse: f64,
}

pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<Regression> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Argument(format!(
            "{} forecasts for {} values",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let (abs, sq) = pred
        .iter()
        .zip(truth)
        .fold((0.0, 0.0), |(a, s), (p, t)| (a + (p - t).abs(), s + (p - t) * (p - t)));
    Ok(Regression {
        mae: abs / n,
        mse: sq / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Welch {
    pub t: f64,
    pub dof: f64,
    /// Two-sided.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<Welch> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Argument("each group needs at least 2 samples".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let (t, p) = if ma == mb {
            (0.0, 1.0)
        } else {
            ((ma - mb).signum() * f64::INFINITY, 0.0)
        };
        return Ok(Welch {
            t,
            dof: (a.len() + b.len() - 2) as f64,
            p,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2
        / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Argument(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(Welch { t, dof, p })
}

/// Anomalous at `t` iff any variable is anomalous there.
pub fn integrate_states(per_variable: &[Vec<usize>], anomalous: usize) -> Result<Vec<usize>> {
    let Some(first) = per_variable.first() else {
        return Ok(Vec::new());
    };
    if per_variable.iter().any(|s| s.len() != first.len()) {
        return Err(Error::Argument("state series differ in length".into()));
    }
    Ok((0..first.len())
        .map(|t| {
            if per_variable.iter().any(|s| s[t] == anomalous) {
                anomalous
            } else {
                first[t]
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarMetrics {
    pub name: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mae: f64,
    pub mse: f64,
    /// Learned state `k` is reported as true state `alignment[k]`.
    pub alignment: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub per_variable: Vec<VarMetrics>,
    /// Pooled over all (step, variable) pairs.
    pub aggregate: VarMetrics,
}

/// Decoded states and forecasts of one variable in original units.
pub struct VarEvaluation<'a> {
    pub name: &'a str,
    pub states: &'a [usize],
    pub truth_states: Option<&'a [usize]>,
    pub forecasts: &'a [f64],
    pub values: &'a [f64],
}

/// Aligns on `align_range` and scores on `score_range`.
pub fn evaluate(
    model: &str,
    vars: &[VarEvaluation<'_>],
    m: usize,
    align_range: std::ops::Range<usize>,
    score_range: std::ops::Range<usize>,
) -> Result<MetricsReport> {
    let mut per_variable = Vec::with_capacity(vars.len());
    let (mut all_pred, mut all_truth) = (Vec::new(), Vec::new());
    let (mut all_fc, mut all_val) = (Vec::new(), Vec::new());
    for v in vars {
        let reg = regression_metrics(
            &v.forecasts[score_range.clone()],
            &v.values[score_range.clone()],
        )?;
        all_fc.extend_from_slice(&v.forecasts[score_range.clone()]);
        all_val.extend_from_slice(&v.values[score_range.clone()]);
        let (cls, alignment) = match v.truth_states {
            Some(truth) => {
                let perm = align_states(
                    &v.states[align_range.clone()],
                    &truth[align_range.clone()],
                    m,
                )?;
                let aligned = apply_alignment(&v.states[score_range.clone()], &perm);
                let cls = classification_metrics(&aligned, &truth[score_range.clone()], m)?;
                all_pred.extend(aligned);
                all_truth.extend_from_slice(&truth[score_range.clone()]);
                (Some(cls), perm)
            }
            None => (None, (0..m).collect()),
        };
        per_variable.push(var_metrics(v.name, cls.as_ref(), reg, alignment));
    }
    let cls = if all_truth.is_empty() {
        None
    } else {
        Some(classification_metrics(&all_pred, &all_truth, m)?)
    };
    let reg = regression_metrics(&all_fc, &all_val)?;
    Ok(MetricsReport {
        model: model.to_string(),
        per_variable,
        aggregate: var_metrics("all", cls.as_ref(), reg, Vec::new()),
    })
}

fn var_metrics(
    name: &str,
    cls: Option<&Classification>,
    reg: Regression,
    alignment: Vec<usize>,
) -> VarMetrics {
    let pick = |f: fn(&Classification) -> f64| cls.map(f).unwrap_or(f64::NAN);
    VarMetrics {
        name: name.to_string(),
        accuracy: pick(|c| c.accuracy),
        precision: pick(|c| c.precision),
        recall: pick(|c| c.recall),
        f1: pick(|c| c.f1),
        mae: reg.mae,
        mse: reg.mse,
        alignment,
    }
}

impl MetricsReport {
    /// Human-readable table with two-decimal percentages.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>8} {:>9} {:>8} {:>8} {:>8} {:>8}\n",
            self.model, "acc%", "prec%", "rec%", "f1%", "MAE", "MSE"
        );
        for v in self.per_variable.iter().chain(std::iter::once(&self.aggregate)) {
            out += &format!(
                "{:<12} {:>8.2} {:>9.2} {:>8.2} {:>8.2} {:>8.4} {:>8.4}\n",
                v.name,
                100.0 * v.accuracy,
                100.0 * v.precision,
                100.0 * v.recall,
                100.0 * v.f1,
                v.mae,
                v.mse
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alignment_cases() {
        let truth = [0, 0, 1, 1, 2];
        assert_eq!(align_states(&truth, &truth, 3).unwrap(), vec![0, 1, 2]);
        let swapped = [1, 1, 0, 0, 2];
        let perm = align_states(&swapped, &truth, 3).unwrap();
        assert_eq!(perm, vec![1, 0, 2]);
        assert_eq!(apply_alignment(&swapped, &perm), truth);
        let perm = align_states(&[0, 0, 0, 0], &[0, 1, 0, 1], 2).unwrap();
        let acc = classification_metrics(&apply_alignment(&[0; 4], &perm), &[0, 1, 0, 1], 2)
            .unwrap()
            .accuracy;
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn assignment_solver_above_exhaustive_limit() {
        let m = 8;
        let truth: Vec<usize> = (0..80).map(|t| t % m).collect();
        let pred: Vec<usize> = truth.iter().map(|s| (s + 3) % m).collect();
        let perm = align_states(&pred, &truth, m).unwrap();
        assert_eq!(apply_alignment(&pred, &perm), truth);
    }

    #[test]
    fn confusion_arithmetic() {
        let c = classification_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(c.accuracy, 0.75);
        assert!((c.precision - 5.0 / 6.0).abs() < 1e-15);
        let perfect = classification_metrics(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(
            (perfect.accuracy, perfect.precision, perfect.recall, perfect.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
        let missing = classification_metrics(&[0, 0], &[0, 0], 2).unwrap();
        assert_eq!(missing.absent, vec![1]);
    }

    #[test]
    fn constant_normal_scores_zero_on_anomalies() {
        let c = binary_metrics(&[0; 6], &[0, 0, 1, 0, 1, 0], 1).unwrap();
        assert_eq!((c.precision, c.recall, c.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn regression_cases() {
        assert_eq!(
            regression_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            Regression { mae: 0.0, mse: 0.0 }
        );
        assert_eq!(
            regression_metrics(&[1.0, -1.0], &[0.0, 0.0]).unwrap(),
            Regression { mae: 1.0, mse: 1.0 }
        );
        assert_eq!(
            regression_metrics(&[3.0, 4.0], &[0.0, 0.0]).unwrap(),
            Regression {
                mae: 3.5,
                mse: 12.5
            }
        );
    }

    #[test]
    fn welch_textbook_and_edges() {
        let w = welch_t_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((w.t + 3.674).abs() < 1e-3);
        assert!((w.dof - 4.0).abs() < 1e-12);
        assert!((w.p - 0.0213).abs() < 1e-3);
        let same = welch_t_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));
        let twin = welch_t_test(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!((twin.t, twin.p), (0.0, 1.0));
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn integration_is_an_or() {
        let a = vec![0, 0, 0, 0, 0, 1];
        let b = vec![0, 0, 0, 0, 0, 0];
        assert_eq!(integrate_states(&[b.clone(), b.clone()], 1).unwrap(), b);
        let mut c = b.clone();
        c[5] = 1;
        assert_eq!(integrate_states(&[a.clone(), b.clone()], 1).unwrap(), c);
        assert_eq!(integrate_states(&[a.clone()], 1).unwrap(), a);
    }
}
