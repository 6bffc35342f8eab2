//! Evaluation metrics: APRF, Cohen's kappa, paired t-tests, leave-one-out
//! ablation and the per-context results table.

mod ablation;
pub mod special;
mod table;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parse::DiseaseLabel;
use crate::vote::{ClassificationVerdict, VoteError};

pub use ablation::{
    ablation_leave_one_out, score_ensemble, score_member, AblationReport, AblationRow, SampleBallot, TaskScores,
};
pub use table::{build_results_table, format_results_table, results_to_jsonl, ResultsRow, Task, MVP_ROW};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {0} samples")]
    TooFewSamples(usize),
    #[error("chance agreement is 1; kappa is undefined")]
    DegenerateDistribution,
    #[error("differences have zero variance; t is undefined")]
    ZeroVariance,
    #[error("ablation needs at least two ensemble members")]
    EnsembleTooSmall,
    #[error("no classes given")]
    NoClasses,
    #[error(transparent)]
    Vote(#[from] VoteError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AprfScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

impl AprfScores {
    pub const PERFECT: Self = Self {
        accuracy: 1.0,
        precision: 1.0,
        recall: 1.0,
        f_score: 1.0,
    };

    pub fn as_array(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f_score]
    }
}

fn ratio_f(num: f64, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy plus macro-averaged precision, recall and F over `classes`.
///
/// Macro averages run over the classes that occur in `gold` or
/// `predictions`. Among those, a class never predicted contributes 0 to
/// precision and one never in gold contributes 0 to recall. F is the
/// harmonic mean of the macro values.
pub fn aprf<L: PartialEq>(predictions: &[L], gold: &[L], classes: &[L]) -> Result<AprfScores, EvalError> {
    if predictions.len() != gold.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), gold.len()));
    }
    if gold.is_empty() {
        return Err(EvalError::TooFewSamples(1));
    }
    if classes.is_empty() {
        return Err(EvalError::NoClasses);
    }
    let pairs = || predictions.iter().zip(gold);
    let correct = pairs().filter(|(p, g)| p == g).count();
    let (mut p_sum, mut r_sum, mut seen) = (0.0, 0.0, 0usize);
    for c in classes {
        if !gold.contains(c) && !predictions.contains(c) {
            continue;
        }
        seen += 1;
        let tp = pairs().filter(|(p, g)| *p == c && *g == c).count();
        let predicted = predictions.iter().filter(|p| *p == c).count();
        let actual = gold.iter().filter(|g| *g == c).count();
        p_sum += ratio(tp, predicted);
        r_sum += ratio(tp, actual);
    }
    let precision = ratio_f(p_sum, seen);
    let recall = ratio_f(r_sum, seen);
    let f_score = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(AprfScores {
        accuracy: ratio(correct, gold.len()),
        precision,
        recall,
        f_score,
    })
}

/// Collapses a (possibly tied) classification verdict to one label for
/// scoring: the gold label when it is among the tied maxima, otherwise the
/// smallest label in the set.
pub fn resolve_classification(verdict: &ClassificationVerdict, gold: &DiseaseLabel) -> DiseaseLabel {
    if verdict.contains(gold) {
        gold.clone()
    } else {
        verdict.argmax_set.iter().next().cloned().unwrap_or(DiseaseLabel::Other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub p_o: f64,
    pub p_e: f64,
    pub kappa: f64,
}

/// Cohen's kappa between two annotators labeling the same samples.
pub fn cohens_kappa<L: Ord>(labels_a: &[L], labels_b: &[L]) -> Result<KappaResult, EvalError> {
    if labels_a.len() != labels_b.len() {
        return Err(EvalError::LengthMismatch(labels_a.len(), labels_b.len()));
    }
    if labels_a.is_empty() {
        return Err(EvalError::TooFewSamples(1));
    }
    let n = labels_a.len() as f64;
    let agree = labels_a.iter().zip(labels_b).filter(|(a, b)| a == b).count();
    let mut marginals: BTreeMap<&L, (usize, usize)> = BTreeMap::new();
    for (a, b) in labels_a.iter().zip(labels_b) {
        marginals.entry(a).or_default().0 += 1;
        marginals.entry(b).or_default().1 += 1;
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = marginals.values().map(|(ca, cb)| (*ca as f64 / n) * (*cb as f64 / n)).sum();
    if p_e >= 1.0 {
        return Err(EvalError::DegenerateDistribution);
    }
    Ok(KappaResult {
        p_o,
        p_e,
        kappa: (p_o - p_e) / (1.0 - p_e),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: usize,
    /// Two-tailed.
    pub p_value: f64,
    pub mean_difference: f64,
}

impl TTestResult {
    pub fn significant_at(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Paired two-tailed t-test on `xs[i] - ys[i]`.
pub fn paired_t_test(xs: &[f64], ys: &[f64]) -> Result<TTestResult, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(EvalError::TooFewSamples(2));
    }
    let diffs: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    if diffs.iter().all(|d| *d == diffs[0]) {
        return Err(EvalError::ZeroVariance);
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    let t = mean / (sd / n.sqrt());
    let df = diffs.len() - 1;
    Ok(TTestResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: special::student_t_two_tailed(t, df as f64),
        mean_difference: mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Confusion-matrix oracle written independently of `aprf`.
    fn confusion_oracle(pred: &[usize], gold: &[usize], k: usize) -> [f64; 4] {
        let mut m = vec![vec![0usize; k]; k];
        for (p, g) in pred.iter().zip(gold) {
            m[*g][*p] += 1;
        }
        let total: usize = m.iter().flatten().sum();
        let diag: usize = (0..k).map(|i| m[i][i]).sum();
        let mut ps = 0.0;
        let mut rs = 0.0;
        let mut present = 0;
        #[allow(clippy::needless_range_loop)]
        for c in 0..k {
            let col: usize = (0..k).map(|g| m[g][c]).sum();
            let row: usize = m[c].iter().sum();
            if col + row == 0 {
                continue;
            }
            present += 1;
            ps += if col == 0 { 0.0 } else { m[c][c] as f64 / col as f64 };
            rs += if row == 0 { 0.0 } else { m[c][c] as f64 / row as f64 };
        }
        let (p, r) = (ps / present as f64, rs / present as f64);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        [diag as f64 / total as f64, p, r, f]
    }

    #[test]
    fn perfect_predictor() {
        let g = ["a", "b", "c", "a"];
        assert_eq!(aprf(&g, &g, &["a", "b", "c"]).unwrap(), AprfScores::PERFECT);
        // a configured class that never occurs does not drag the averages down
        assert_eq!(aprf(&g, &g, &["a", "b", "c", "other"]).unwrap(), AprfScores::PERFECT);
    }

    #[test]
    fn binary_confusion_example() {
        // TP=3 FP=1 FN=2 TN=4 with 1 = yes
        let gold = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let pred = [1, 1, 1, 0, 0, 1, 0, 0, 0, 0];
        let s = aprf(&pred, &gold, &[0, 1]).unwrap();
        let oracle = confusion_oracle(&pred.map(|x| x as usize), &gold.map(|x| x as usize), 2);
        assert!((s.accuracy - 0.7).abs() < 1e-15);
        for (a, b) in s.as_array().iter().zip(oracle) {
            assert!((a - b).abs() < 1e-15);
        }
        // hand arithmetic: P = (3/4 + 4/6)/2, R = (3/5 + 4/5)/2
        assert!((s.precision - (0.75 + 4.0 / 6.0) / 2.0).abs() < 1e-15);
        assert!((s.recall - 0.7).abs() < 1e-15);
    }

    #[test]
    fn aprf_errors() {
        assert_eq!(aprf(&[1], &[1, 2], &[1, 2]), Err(EvalError::LengthMismatch(1, 2)));
        assert_eq!(aprf::<i32>(&[], &[], &[1]), Err(EvalError::TooFewSamples(1)));
        assert_eq!(aprf(&[1], &[1], &[]), Err(EvalError::NoClasses));
        let s = aprf(&[0, 0], &[1, 1], &[0, 1]).unwrap();
        assert_eq!(s.as_array(), [0.0; 4]);
    }

    proptest! {
        #[test]
        fn aprf_matches_confusion_oracle(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..100)) {
            let (pred, gold): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let s = aprf(&pred, &gold, &[0, 1, 2, 3, 4]).unwrap();
            for (a, b) in s.as_array().iter().zip(confusion_oracle(&pred, &gold, 5)) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn kappa_examples() {
        let a = [0, 1, 1, 0, 1];
        let k = cohens_kappa(&a, &a).unwrap();
        assert_eq!(k.kappa, 1.0);
        // p_o = 0.9, p_e = 0.5: 20 samples, marginals 10/10 on both sides, one swap pair
        let x: Vec<u8> = (0..20).map(|i| u8::from(i < 10)).collect();
        let mut y = x.clone();
        y.swap(0, 19);
        let k = cohens_kappa(&x, &y).unwrap();
        assert!((k.p_o - 0.9).abs() < 1e-15 && (k.p_e - 0.5).abs() < 1e-15);
        assert!((k.kappa - 0.8).abs() < 1e-12);
        assert_eq!(cohens_kappa(&[1, 1], &[1, 1]), Err(EvalError::DegenerateDistribution));
        assert_eq!(cohens_kappa(&[1], &[1, 1]), Err(EvalError::LengthMismatch(1, 2)));
    }

    proptest! {
        #[test]
        fn kappa_bounds(pairs in prop::collection::vec((0u8..3, 0u8..3), 2..60)) {
            let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            if let Ok(k) = cohens_kappa(&a, &b) {
                prop_assert!(k.kappa <= 1.0 + 1e-12);
                prop_assert_eq!(k.kappa == 1.0, k.p_o == 1.0);
                if (k.p_o - k.p_e).abs() < 1e-15 {
                    prop_assert!(k.kappa.abs() < 1e-12);
                }
            }
        }
    }

    /// Two-tailed tail mass of the t density by composite Simpson on
    /// u in (0, 1] with t = |t0| / u, which maps [|t0|, inf) onto a finite range.
    fn t_tail_by_quadrature(t0: f64, df: f64) -> f64 {
        let norm = (special::ln_gamma((df + 1.0) / 2.0) - special::ln_gamma(df / 2.0)).exp() / (df * std::f64::consts::PI).sqrt();
        let density = |t: f64| norm * (1.0 + t * t / df).powf(-(df + 1.0) / 2.0);
        let g = |u: f64| if u == 0.0 { 0.0 } else { density(t0 / u) * t0 / (u * u) };
        let n = 200_000;
        let h = 1.0 / n as f64;
        let mut s = g(0.0) + g(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * g(i as f64 * h);
        }
        2.0 * s * h / 3.0
    }

    #[test]
    fn t_test_reference_example() {
        let r = paired_t_test(&[2.0, 4.0, 6.0, 8.0], &[1.0, 3.0, 5.0, 9.0]).unwrap();
        assert_eq!(r.t_statistic, 1.0);
        assert_eq!(r.degrees_of_freedom, 3);
        let oracle = t_tail_by_quadrature(1.0, 3.0);
        assert!((r.p_value - oracle).abs() < 1e-9, "{} vs {oracle}", r.p_value);
        assert!((r.p_value - 0.3910).abs() < 5e-4);
    }

    #[test]
    fn t_test_errors_and_symmetry() {
        assert_eq!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]), Err(EvalError::ZeroVariance));
        assert_eq!(paired_t_test(&[0.1, 0.1, 0.1], &[0.0, 0.0, 0.0]), Err(EvalError::ZeroVariance));
        assert_eq!(paired_t_test(&[1.0], &[2.0]), Err(EvalError::TooFewSamples(2)));
        let a = paired_t_test(&[1.0, 5.0, 2.0, 8.0], &[0.0, 1.0, 3.0, 2.0]).unwrap();
        let b = paired_t_test(&[0.0, 1.0, 3.0, 2.0], &[1.0, 5.0, 2.0, 8.0]).unwrap();
        assert_eq!(a.t_statistic, -b.t_statistic);
        assert_eq!(a.p_value, b.p_value);
    }

    #[test]
    fn tiny_p_values_keep_precision() {
        for &(t, df) in &[(8.0, 255.0), (6.0, 30.0), (12.0, 100.0)] {
            let p = special::student_t_two_tailed(t, df);
            let q = t_tail_by_quadrature(t, df);
            assert!(((p - q) / q).abs() < 1e-6, "t={t} df={df}: {p} vs {q}");
        }
    }

    proptest! {
        #[test]
        fn t_test_scale_invariance(d in prop::collection::vec(-50i32..50, 3..40), k in -6i32..6, c in 0.01f64..100.0) {
            let xs: Vec<f64> = d.iter().map(|&v| v as f64).collect();
            let zeros = vec![0.0; xs.len()];
            prop_assume!(xs.iter().any(|x| *x != xs[0]));
            let base = paired_t_test(&xs, &zeros).unwrap();
            let pow2 = 2f64.powi(k);
            let scaled: Vec<f64> = xs.iter().map(|x| x * pow2).collect();
            let exact = paired_t_test(&scaled, &zeros).unwrap();
            prop_assert_eq!(base.t_statistic, exact.t_statistic);
            prop_assert_eq!(base.p_value, exact.p_value);
            let general: Vec<f64> = xs.iter().map(|x| x * c).collect();
            let approx = paired_t_test(&general, &zeros).unwrap();
            prop_assert!((approx.t_statistic - base.t_statistic).abs() <= 1e-9 * base.t_statistic.abs().max(1.0));
        }

        #[test]
        fn t_test_symmetry(pairs in prop::collection::vec((-100i32..100, -100i32..100), 2..40)) {
            let xs: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let ys: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            if let Ok(a) = paired_t_test(&xs, &ys) {
                let b = paired_t_test(&ys, &xs).unwrap();
                prop_assert_eq!(a.t_statistic, -b.t_statistic);
                prop_assert_eq!(a.p_value, b.p_value);
            }
        }

        #[test]
        fn p_value_decreases_with_abs_t(t1 in 0.0f64..20.0, dt in 0.001f64..5.0, df in 1usize..300) {
            let p1 = special::student_t_two_tailed(t1, df as f64);
            let p2 = special::student_t_two_tailed(-(t1 + dt), df as f64);
            prop_assert!(p2 <= p1);
            prop_assert!((0.0..=1.0).contains(&p1));
        }
    }
}
