//! Evaluation metrics, prior-shift correction, class balancing and the
//! mutual-information accounting for uniformly noisy labels.
//!
//! Classes are zero-based in code. `threshold_class` arguments follow the
//! user-facing 1-based grade numbering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_THRESHOLD_CLASS: usize = 3;
pub const DEFAULT_TARGET_SENS: f64 = 0.97;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax differs from the truth.
pub fn kclass_error(preds: &Tensor, truths: &[usize]) -> Result<f64> {
    if preds.rows() != truths.len() {
        return Err(Error::Dimension(format!("{} predictions but {} truths", preds.rows(), truths.len())));
    }
    if truths.is_empty() {
        return Err(Error::UndefinedMetric("k-class error of an empty set".into()));
    }
    let k = preds.row_len();
    let mut wrong = 0usize;
    for (i, &t) in truths.iter().enumerate() {
        if t >= k {
            return Err(Error::Contract(format!("truth {} outside 1..={k}", t + 1)));
        }
        if argmax(preds.row(i)) != t {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / truths.len() as f64)
}

/// Probability mass on classes `threshold_class..=K` (1-based).
pub fn binary_collapse(pred: &[f64], threshold_class: usize) -> Result<f64> {
    if threshold_class < 2 || threshold_class > pred.len() {
        return Err(Error::Contract(format!(
            "threshold class {threshold_class} outside 2..={}",
            pred.len()
        )));
    }
    Ok(pred[threshold_class - 1..].iter().sum())
}

fn check_binary(scores: &[f64], truths: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != truths.len() {
        return Err(Error::Dimension(format!("{} scores but {} truths", scores.len(), truths.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let pos = truths.iter().filter(|&&t| t).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC metrics need both classes present".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via midranks (Mann–Whitney form).
pub fn roc_auc(scores: &[f64], truths: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, truths)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&o| truths[o]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC points `(fpr, tpr)` from the strictest threshold down, starting at
/// `(0, 0)`; one point per distinct score.
pub fn roc_points(scores: &[f64], truths: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_binary(scores, truths)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truths[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// Specificity at the first ROC point (strictest threshold) reaching the
/// target sensitivity, interpolating the false-positive rate linearly from the
/// previous point.
pub fn spec_at_sens(scores: &[f64], truths: &[bool], target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Contract(format!("target sensitivity {target} outside [0, 1]")));
    }
    let pts = roc_points(scores, truths)?;
    for w in pts.windows(2) {
        let ((f0, t0), (f1, t1)) = (w[0], w[1]);
        if t1 >= target {
            let fpr = if t0 >= target { f0 } else { f0 + (target - t0) * (f1 - f0) / (t1 - t0) };
            return Ok(1.0 - fpr);
        }
    }
    Ok(0.0)
}

fn check_positive(q: &[f64], what: &str) -> Result<()> {
    if let Some(c) = q.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Contract(format!("{what} has non-positive entry at class {}", c + 1)));
    }
    Ok(())
}

/// `logit_c + log(q_eval(c) / q_train(c))`.
pub fn log_prior_correction(logits: &[f64], q_train: &[f64], q_eval: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != q_train.len() || logits.len() != q_eval.len() {
        return Err(Error::Dimension("logits and class distributions differ in length".into()));
    }
    check_positive(q_train, "training class distribution")?;
    check_positive(q_eval, "evaluation class distribution")?;
    Ok(logits.iter().zip(q_train).zip(q_eval).map(|((z, t), e)| z + (e / t).ln()).collect())
}

/// `α_c = 1 / (K·q(c))`.
pub fn class_balance_weights(q: &[f64]) -> Result<Vec<f64>> {
    check_positive(q, "class distribution")?;
    let k = q.len() as f64;
    Ok(q.iter().map(|v| 1.0 / (k * v)).collect())
}

/// Class proportions of zero-based labels.
pub fn class_distribution(labels: &[usize], k: usize) -> Vec<f64> {
    let mut q = vec![0.0; k];
    labels.iter().for_each(|&l| q[l] += 1.0);
    let n = labels.len().max(1) as f64;
    q.iter_mut().for_each(|v| *v /= n);
    q
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Mutual information in nats between the truth (uniform over `k`) and a label
/// that is correct with probability `a` and otherwise uniform over the other
/// `k − 1` classes.
pub fn mutual_info_noisy(k: usize, a: f64) -> Result<f64> {
    if k < 2 {
        return Err(Error::Contract("need at least two classes".into()));
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Contract(format!("accuracy {a} outside [0, 1]")));
    }
    let kf = k as f64;
    Ok(xlogy(a, kf * a) + xlogy(1.0 - a, kf * (1.0 - a) / (kf - 1.0)))
}

/// `round(N·I_noisy / I_perfect)`.
pub fn equivalent_clean_count(n: u64, i_noisy: f64, i_perfect: f64) -> Result<u64> {
    if !(i_perfect > 0.0) || i_noisy < 0.0 {
        return Err(Error::Contract("informations must satisfy I_perfect > 0, I_noisy ≥ 0".into()));
    }
    Ok((n as f64 * i_noisy / i_perfect).round() as u64)
}

/// Metrics of one evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub kclass_error: f64,
    /// Undefined when the collapsed truths contain a single class.
    pub binary_auc: Option<f64>,
    pub binary_error: f64,
    pub spec_at_sens: Option<f64>,
}

/// Evaluates probability rows against zero-based truths.
pub fn evaluate(preds: &Tensor, truths: &[usize], threshold_class: usize, target_sens: f64) -> Result<Metrics> {
    let kclass_error = kclass_error(preds, truths)?;
    let mut scores = Vec::with_capacity(truths.len());
    for i in 0..preds.rows() {
        scores.push(binary_collapse(preds.row(i), threshold_class)?);
    }
    let bin: Vec<bool> = truths.iter().map(|&t| t + 1 >= threshold_class).collect();
    let wrong = scores.iter().zip(&bin).filter(|(s, b)| (**s >= 0.5) != **b).count();
    let (binary_auc, spec) = match roc_auc(&scores, &bin) {
        Ok(auc) => (Some(auc), Some(spec_at_sens(&scores, &bin, target_sens)?)),
        Err(Error::UndefinedMetric(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(Metrics {
        kclass_error,
        binary_auc,
        binary_error: wrong as f64 / truths.len() as f64,
        spec_at_sens: spec,
    })
}

/// Per-replicate metrics and their arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub replicates: Vec<Metrics>,
    pub mean: Metrics,
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for x in v {
        sum += x?;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    pub fn from_replicates(replicates: Vec<Metrics>) -> Result<Self> {
        if replicates.is_empty() {
            return Err(Error::Contract("report needs at least one replicate".into()));
        }
        let n = replicates.len() as f64;
        let mean = Metrics {
            kclass_error: replicates.iter().map(|m| m.kclass_error).sum::<f64>() / n,
            binary_auc: mean_opt(replicates.iter().map(|m| m.binary_auc)),
            binary_error: replicates.iter().map(|m| m.binary_error).sum::<f64>() / n,
            spec_at_sens: mean_opt(replicates.iter().map(|m| m.spec_at_sens)),
        };
        Ok(Self { replicates, mean })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn pairwise_auc(scores: &[f64], truths: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if truths[i] && !truths[j] {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn kclass_fixtures() {
        let p = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(kclass_error(&p, &[0, 2]).unwrap(), 0.0);
        let u = Tensor::filled(&[4, 5], 0.2);
        assert_eq!(kclass_error(&u, &[0; 4]).unwrap(), 0.0);
        let p = Tensor::from_rows(&[
            vec![0.1, 0.7, 0.2],
            vec![0.5, 0.3, 0.2],
            vec![0.3, 0.3, 0.4],
            vec![0.4, 0.4, 0.2],
        ])
        .unwrap();
        assert_eq!(kclass_error(&p, &[1, 1, 2, 1]).unwrap(), 0.5);
        assert!(kclass_error(&p, &[1]).is_err());
    }

    #[test]
    fn binary_collapse_fixtures() {
        assert_eq!(binary_collapse(&[0.0, 0.0, 0.0, 0.0, 1.0], 3).unwrap(), 1.0);
        assert_eq!(binary_collapse(&[1.0, 0.0, 0.0, 0.0, 0.0], 3).unwrap(), 0.0);
        assert!((binary_collapse(&[0.2; 5], 3).unwrap() - 0.6).abs() < 1e-15);
        assert!(binary_collapse(&[0.2; 5], 1).is_err());
    }

    #[test]
    fn auc_fixtures() {
        let s = [0.9, 0.8, 0.7, 0.3, 0.2, 0.1];
        let t = [true, true, true, false, false, false];
        assert_eq!(roc_auc(&s, &t).unwrap(), 1.0);
        assert_eq!(spec_at_sens(&s, &t, 0.97).unwrap(), 1.0);
        // hand case: one inversion and one tie out of 9 pairs
        let s = [0.9, 0.6, 0.4, 0.6, 0.5, 0.1];
        let t = [true, true, true, false, false, false];
        assert!((roc_auc(&s, &t).unwrap() - (7.0 - 0.5) / 9.0).abs() < 1e-15);
        assert!(matches!(roc_auc(&s, &[true; 6]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn spec_at_sens_fixtures() {
        // positives at 0.9, 0.6, 0.4; negatives at 0.6, 0.5, 0.1
        let s = [0.9, 0.6, 0.4, 0.6, 0.5, 0.1];
        let t = [true, true, true, false, false, false];
        // ROC: (0,0) (0,1/3) (1/3,2/3) (2/3,2/3) (2/3,1) (1,1)
        assert!((spec_at_sens(&s, &t, 1.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // target 0.5 lies between (0,1/3) and (1/3,2/3): fpr = 1/6
        assert!((spec_at_sens(&s, &t, 0.5).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        // exactly on a point
        assert!((spec_at_sens(&s, &t, 2.0 / 3.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((spec_at_sens(&s, &t, 0.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut r = rng::stream(5, &[]);
        for _ in 0..100 {
            let n = r.random_range(2..30);
            let mut t: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
            t[0] = true;
            t[1] = false;
            let s: Vec<f64> = (0..n).map(|_| (r.random_range(0..8) as f64) / 8.0).collect();
            assert!((roc_auc(&s, &t).unwrap() - pairwise_auc(&s, &t)).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_scores_have_half_auc() {
        let mut r = rng::stream(6, &[]);
        let t: Vec<bool> = (0..20000).map(|_| r.random_bool(0.3)).collect();
        let s: Vec<f64> = (0..20000).map(|_| r.random::<f64>()).collect();
        assert!((roc_auc(&s, &t).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn prior_correction_fixtures() {
        let z = [0.3, -1.0, 2.0];
        let q = [0.2, 0.3, 0.5];
        assert_eq!(log_prior_correction(&z, &q, &q).unwrap(), z.to_vec());
        let c = log_prior_correction(&[0.0, 0.0], &[0.5103, 0.4897], &[0.7269, 0.2731]).unwrap();
        assert!((c[0] - 0.3538).abs() < 1e-4);
        assert!(matches!(log_prior_correction(&z, &[0.5, 0.0, 0.5], &q), Err(Error::Contract(m)) if m.contains("class 2")));

        // correction then softmax equals reweighting the softmax output
        let qe = [0.5, 0.1, 0.4];
        let p = crate::numerics::softmax_vec(&z).unwrap();
        let pc = crate::numerics::softmax_vec(&log_prior_correction(&z, &q, &qe).unwrap()).unwrap();
        let w: Vec<f64> = (0..3).map(|c| p[c] * qe[c] / q[c]).collect();
        let s: f64 = w.iter().sum();
        for c in 0..3 {
            assert!((pc[c] - w[c] / s).abs() < 1e-15);
        }
    }

    #[test]
    fn class_balance_fixtures() {
        assert_eq!(class_balance_weights(&[0.25; 4]).unwrap(), vec![1.0; 4]);
        let a = class_balance_weights(&[0.8, 0.2]).unwrap();
        assert!((a[0] - 0.625).abs() < 1e-15 && (a[1] - 2.5).abs() < 1e-15);
        assert!(class_balance_weights(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn mutual_information_values() {
        assert!((mutual_info_noisy(10, 0.2).unwrap() - 0.0444).abs() < 1e-3);
        assert!((mutual_info_noisy(10, 1.0).unwrap() - 2.3026).abs() < 1e-4);
        assert!(mutual_info_noisy(10, 0.1).unwrap().abs() < 1e-15);
        assert_eq!(equivalent_clean_count(60000, 0.044, 2.3).unwrap(), 1148);
        assert!(mutual_info_noisy(10, 1.5).is_err());
    }

    #[test]
    fn mutual_information_grouping_agrees() {
        // H(label) − H(label | truth) with both entropies summed term by term
        for &a in &[0.1, 0.2, 0.35, 0.5, 0.9, 1.0] {
            let k = 10.0f64;
            let off = (1.0 - a) / (k - 1.0);
            let h_cond = -(xlogy(a, a) + (k - 1.0) * xlogy(off, off));
            let direct = k.ln() - h_cond;
            assert!((mutual_info_noisy(10, a).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn report_mean() {
        let m = |e: f64, auc: Option<f64>| Metrics { kclass_error: e, binary_auc: auc, binary_error: e / 2.0, spec_at_sens: auc };
        let r = MetricsReport::from_replicates(vec![m(0.1, Some(0.9)), m(0.2, Some(0.8)), m(0.3, Some(0.7))]).unwrap();
        assert!((r.mean.kclass_error - 0.2).abs() < 1e-12);
        assert!((r.mean.binary_auc.unwrap() - 0.8).abs() < 1e-12);
        let r = MetricsReport::from_replicates(vec![m(0.1, None), m(0.2, Some(0.8))]).unwrap();
        assert_eq!(r.mean.binary_auc, None);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(seed in 0u64..100_000) {
            let mut r = rng::stream(seed, &[]);
            let n = r.random_range(4..40);
            let mut t: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
            t[0] = true;
            t[1] = false;
            let s: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0f64).round()).collect();
            let s2: Vec<f64> = s.iter().map(|v| (2.0 * v).exp() + 1.0).collect();
            prop_assert!((roc_auc(&s, &t).unwrap() - roc_auc(&s2, &t).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn mutual_info_increasing(i in 0usize..90) {
            let a0 = 0.1 + 0.01 * i as f64;
            let lo = mutual_info_noisy(10, a0).unwrap();
            let hi = mutual_info_noisy(10, a0 + 0.01).unwrap();
            prop_assert!(lo >= 0.0 && hi > lo);
        }

        #[test]
        fn correction_composes(z in prop::collection::vec(-5.0f64..5.0, 4),
                               a in prop::collection::vec(0.05f64..1.0, 4),
                               b in prop::collection::vec(0.05f64..1.0, 4),
                               c in prop::collection::vec(0.05f64..1.0, 4)) {
            let via = log_prior_correction(&log_prior_correction(&z, &a, &b).unwrap(), &b, &c).unwrap();
            let direct = log_prior_correction(&z, &a, &c).unwrap();
            for (x, y) in via.iter().zip(direct) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn balance_weights_normalize(q in prop::collection::vec(0.01f64..1.0, 2..8)) {
            let s: f64 = q.iter().sum();
            let q: Vec<f64> = q.iter().map(|v| v / s).collect();
            let a = class_balance_weights(&q).unwrap();
            prop_assert!((q.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
