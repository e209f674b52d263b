//! Noise-adaptation losses for the per-annotator heads.
//!
//! A head's softmax output `p` is read as the clean-class prediction; the
//! annotator's label is scored against `q = θᵀp`, the implied distribution of
//! reported labels. `θ` is either shared by every annotator (estimated from
//! individual-vs-mean opinions) or a per-annotator symmetric matrix built from
//! a scalar reliability.

use serde::{Deserialize, Serialize};

use crate::em::ConfusionMatrix;
use crate::error::{Error, Result};
use crate::heads::{target_distribution, AnnotationRecord, AnnotationSet, HeadBank, LossOptions};
use crate::metrics::argmax;
use crate::numerics::loss::{check_simplex, cross_entropy_unchecked, entropy, softmax_backward, softmax_vec, LOG_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoisePrior {
    SharedAsymmetric { theta: ConfusionMatrix },
    /// One reliability per head.
    PerAnnotatorSymmetric { classes: usize, reliabilities: Vec<f64> },
}

impl NoisePrior {
    pub fn theta_for(&self, head: usize) -> Result<ConfusionMatrix> {
        match self {
            Self::SharedAsymmetric { theta } => Ok(theta.clone()),
            Self::PerAnnotatorSymmetric { classes, reliabilities } => reliabilities
                .get(head)
                .map(|&r| ConfusionMatrix::symmetric(*classes, r))
                .ok_or_else(|| Error::Mapping(format!("no reliability for head {head}"))),
        }
    }

    /// Confusion matrix of every head, in head order.
    pub fn thetas(&self, heads: usize) -> Result<Vec<ConfusionMatrix>> {
        (0..heads).map(|h| self.theta_for(h)).collect()
    }
}

/// Per-annotator symmetric confusions with diagonal `r` clamped to `[1/K, 1]`.
pub fn symmetric_theta_from_reliability(reliabilities: &[f64], classes: usize) -> Result<NoisePrior> {
    if classes < 2 {
        return Err(Error::Contract("need at least two classes".into()));
    }
    let floor = 1.0 / classes as f64;
    let reliabilities = reliabilities
        .iter()
        .map(|&r| {
            if r.is_nan() {
                Err(Error::Numeric("NaN reliability".into()))
            } else {
                Ok(r.clamp(floor, 1.0))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NoisePrior::PerAnnotatorSymmetric { classes, reliabilities })
}

/// Shared confusion between the mean opinion and individual opinions.
///
/// Per annotator, rows are indexed by the argmax of the example's mean
/// opinion and columns by the annotator's argmax label; count matrices are
/// row-normalized and then averaged over annotators with any labels. An
/// annotator's empty row is replaced by the average of that row over the
/// annotators that have data for it, or by the identity row if none do.
pub fn estimate_shared_theta(set: &AnnotationSet) -> Result<ConfusionMatrix> {
    let k = set.classes();
    let labeled = set.label_counts().iter().filter(|&&c| c > 0).count();
    if labeled < 2 {
        return Err(Error::Contract("shared noise estimate needs at least two annotators".into()));
    }
    let mut counts = vec![vec![0.0; k * k]; set.annotators()];
    for i in 0..set.len() {
        let recs = set.records(i);
        if recs.is_empty() {
            continue;
        }
        let t = argmax(&target_distribution(recs)?);
        for r in recs {
            counts[r.annotator][t * k + argmax(&r.distribution)] += 1.0;
        }
    }
    let active: Vec<&Vec<f64>> = counts.iter().filter(|c| c.iter().any(|&v| v > 0.0)).collect();

    // normalized rows, None where an annotator has no data for that row
    let rows: Vec<Vec<Option<Vec<f64>>>> = active
        .iter()
        .map(|c| {
            (0..k)
                .map(|t| {
                    let row = &c[t * k..(t + 1) * k];
                    let s: f64 = row.iter().sum();
                    (s > 0.0).then(|| row.iter().map(|v| v / s).collect())
                })
                .collect()
        })
        .collect();
    let mut backoff = Vec::with_capacity(k);
    for t in 0..k {
        let have: Vec<&Vec<f64>> = rows.iter().filter_map(|r| r[t].as_ref()).collect();
        if have.is_empty() {
            let mut id = vec![0.0; k];
            id[t] = 1.0;
            backoff.push(id);
        } else {
            let mut m = vec![0.0; k];
            for h in &have {
                m.iter_mut().zip(h.iter()).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|v| *v /= have.len() as f64);
            backoff.push(m);
        }
    }
    let mut theta = vec![0.0; k * k];
    for r in &rows {
        for t in 0..k {
            let row = r[t].as_ref().unwrap_or(&backoff[t]);
            theta[t * k..(t + 1) * k].iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    theta.iter_mut().for_each(|v| *v /= rows.len() as f64);
    ConfusionMatrix::new(k, theta)
}

/// `CE(label, θᵀp)`.
pub fn noise_adapted_loss(p: &[f64], label: &[f64], theta: &ConfusionMatrix) -> Result<f64> {
    if p.len() != theta.classes() || label.len() != theta.classes() {
        return Err(Error::Dimension("noise loss inputs disagree on the number of classes".into()));
    }
    check_simplex(p, "clean prediction")?;
    check_simplex(label, "observed label")?;
    Ok(cross_entropy_unchecked(label, &theta.observed(p)))
}

/// Noise-adapted loss of one head from its logits, adding the logit gradient
/// into `dz`. The confidence penalty acts on the clean prediction.
pub fn noise_adapted_loss_grad(
    logits: &[f64],
    label: &[f64],
    theta: &ConfusionMatrix,
    opts: &LossOptions,
    dz: &mut [f64],
) -> Result<f64> {
    let k = theta.classes();
    let p = softmax_vec(logits)?;
    let q = theta.observed(&p);
    let weight = opts.target_weight(label);
    let mut loss = weight * cross_entropy_unchecked(label, &q);
    let mut gq = vec![0.0; k];
    for c in 0..k {
        if label[c] != 0.0 && q[c] >= LOG_EPS {
            gq[c] = -weight * label[c] / q[c];
        }
    }
    let mut gp = vec![0.0; k];
    for (l, g) in gp.iter_mut().enumerate() {
        *g = theta.row(l).iter().zip(&gq).map(|(a, b)| a * b).sum();
    }
    let beta = opts.entropy_weight;
    if beta > 0.0 {
        loss -= beta * entropy(&p);
        for (g, &pv) in gp.iter_mut().zip(&p) {
            if pv > 0.0 {
                *g += beta * (pv.ln() + 1.0);
            }
        }
    }
    softmax_backward(&p, &gp, dz);
    Ok(loss)
}

/// Masked per-annotator noise-adapted loss for one example, summed over the
/// records; `thetas[h]` is head `h`'s confusion.
pub fn dn_noise_loss_grad(
    bank: &HeadBank,
    logits_row: &[f64],
    records: &[&AnnotationRecord],
    thetas: &[ConfusionMatrix],
    opts: &LossOptions,
    dlogits: &mut [f64],
) -> Result<f64> {
    let k = bank.classes();
    let mut total = 0.0;
    for r in records {
        let h = bank.head_for(r.annotator)?;
        let span = h * k..(h + 1) * k;
        total += noise_adapted_loss_grad(&logits_row[span.clone()], &r.distribution, &thetas[h], opts, &mut dlogits[span])?;
    }
    Ok(total)
}
