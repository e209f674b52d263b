//! Output heads over the shared hidden vector.
//!
//! `HeadMode::Bn` has a single softmax head trained on the mean annotator
//! opinion. `HeadMode::Dn` has one softmax head per annotator (after rare
//! annotators are lumped into a composite head); only the heads of annotators
//! who labeled an example receive loss, and evaluation averages all heads.
//!
//! All heads are stored in one packed affine map: `heads.w` is
//! `[H × heads·K]` and `heads.b` is `[heads·K]`, with head `j` owning columns
//! `j·K .. (j+1)·K`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::glorot_matrix;
use crate::error::{Error, Result};
use crate::numerics::loss::{check_simplex, cross_entropy_unchecked, softmax_ce_grad, softmax_into};
use crate::numerics::ops::{affine, affine_backward};
use crate::numerics::{ParamGroup, ParamSet, Tensor};

pub const HEAD_WEIGHTS: &str = "heads.w";
pub const HEAD_BIAS: &str = "heads.b";

/// One annotator's (possibly repeated) grading of one example, collapsed into a
/// normalized label histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub example: usize,
    pub annotator: usize,
    pub distribution: Vec<f64>,
    pub grade_count: u32,
}

impl AnnotationRecord {
    /// Builds a record from raw zero-based grades.
    pub fn from_grades(example: usize, annotator: usize, grades: &[usize], classes: usize) -> Result<Self> {
        let mut counts = vec![0u32; classes];
        for &g in grades {
            if g >= classes {
                return Err(Error::Contract(format!("grade {} outside 1..={classes}", g + 1)));
            }
            counts[g] += 1;
        }
        Self::from_counts(example, annotator, &counts)
    }

    /// Builds a record from per-class grade counts.
    pub fn from_counts(example: usize, annotator: usize, counts: &[u32]) -> Result<Self> {
        let total: u32 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Contract(format!(
                "annotator {annotator} has no grades for example {example}"
            )));
        }
        Ok(Self {
            example,
            annotator,
            distribution: counts.iter().map(|&c| c as f64 / total as f64).collect(),
            grade_count: total,
        })
    }

    pub fn one_hot(example: usize, annotator: usize, class: usize, classes: usize) -> Result<Self> {
        Self::from_grades(example, annotator, &[class], classes)
    }

    /// Per-class grade counts, `distribution · grade_count`.
    pub fn counts(&self) -> Vec<f64> {
        self.distribution.iter().map(|p| p * self.grade_count as f64).collect()
    }
}

/// Unweighted mean of the annotators' label distributions for one example.
pub fn target_distribution<'a, I>(records: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a AnnotationRecord>,
{
    let mut sum: Option<Vec<f64>> = None;
    let mut n = 0usize;
    for r in records {
        let acc = sum.get_or_insert_with(|| vec![0.0; r.distribution.len()]);
        if acc.len() != r.distribution.len() {
            return Err(Error::Dimension("records disagree on the number of classes".into()));
        }
        acc.iter_mut().zip(&r.distribution).for_each(|(a, p)| *a += p);
        n += 1;
    }
    let mut t = sum.ok_or_else(|| Error::Contract("target of an example with no annotations".into()))?;
    t.iter_mut().for_each(|v| *v /= n as f64);
    Ok(t)
}

/// Annotation records grouped by example, with dense zero-based example and
/// annotator indices.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    classes: usize,
    annotators: usize,
    by_example: Vec<Vec<AnnotationRecord>>,
}

impl AnnotationSet {
    /// Checks that every record sits in its own example's group, names a known
    /// annotator, carries a `classes`-long distribution and that no annotator
    /// appears twice for one example.
    pub fn new(classes: usize, annotators: usize, by_example: Vec<Vec<AnnotationRecord>>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Contract("need at least two classes".into()));
        }
        for (i, recs) in by_example.iter().enumerate() {
            let mut seen = Vec::with_capacity(recs.len());
            for r in recs {
                if r.example != i {
                    return Err(Error::Contract(format!("record for example {} filed under {i}", r.example)));
                }
                if r.annotator >= annotators {
                    return Err(Error::Mapping(format!("annotator index {} out of range", r.annotator)));
                }
                if r.distribution.len() != classes {
                    return Err(Error::Dimension(format!(
                        "record has {} classes, expected {classes}",
                        r.distribution.len()
                    )));
                }
                check_simplex(&r.distribution, "label distribution")?;
                if seen.contains(&r.annotator) {
                    return Err(Error::Contract(format!("annotator {} appears twice on example {i}", r.annotator)));
                }
                seen.push(r.annotator);
            }
        }
        Ok(Self { classes, annotators, by_example })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn annotators(&self) -> usize {
        self.annotators
    }

    pub fn len(&self) -> usize {
        self.by_example.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_example.is_empty()
    }

    pub fn records(&self, example: usize) -> &[AnnotationRecord] {
        &self.by_example[example]
    }

    pub fn by_example(&self) -> &[Vec<AnnotationRecord>] {
        &self.by_example
    }

    pub fn iter(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.by_example.iter().flatten()
    }

    /// Number of examples each annotator labeled.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.annotators];
        self.iter().for_each(|r| c[r.annotator] += 1);
        c
    }

    /// Keeps only the given examples, renumbering them `0..idx.len()`.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let by_example = idx
            .iter()
            .enumerate()
            .map(|(new, &old)| {
                self.by_example[old].iter().map(|r| AnnotationRecord { example: new, ..r.clone() }).collect()
            })
            .collect();
        Self { classes: self.classes, annotators: self.annotators, by_example }
    }

    /// Rewrites annotator indices through `map` (e.g. annotator → head), merging
    /// records that land on the same new index by pooling their grade counts.
    pub fn remap_annotators(&self, map: &[usize]) -> Result<Self> {
        let annotators = map.iter().max().map_or(0, |m| m + 1);
        let mut by_example = Vec::with_capacity(self.by_example.len());
        for recs in &self.by_example {
            let mut merged: Vec<(usize, Vec<f64>)> = Vec::new();
            for r in recs {
                let to = *map
                    .get(r.annotator)
                    .ok_or_else(|| Error::Mapping(format!("annotator index {} has no mapping", r.annotator)))?;
                let counts = r.counts();
                match merged.iter_mut().find(|(a, _)| *a == to) {
                    Some((_, c)) => c.iter_mut().zip(&counts).for_each(|(x, y)| *x += y),
                    None => merged.push((to, counts)),
                }
            }
            let out = merged
                .into_iter()
                .map(|(a, c)| {
                    let total: f64 = c.iter().sum();
                    AnnotationRecord {
                        example: recs[0].example,
                        annotator: a,
                        distribution: c.iter().map(|v| v / total).collect(),
                        grade_count: total.round() as u32,
                    }
                })
                .collect();
            by_example.push(out);
        }
        Self::new(self.classes, annotators, by_example)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Bn,
    Dn,
}

/// Loss modifiers shared by every head loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossOptions {
    /// Confidence-penalty weight β; adds `−β·H(p)` per trained prediction.
    pub entropy_weight: f64,
    /// Optional per-class weights α (mean class balancing); the weight of a
    /// soft target `t` is `Σ_c t_c α_c`.
    pub class_weights: Option<Vec<f64>>,
}

impl LossOptions {
    pub fn target_weight(&self, target: &[f64]) -> f64 {
        match &self.class_weights {
            Some(a) => target.iter().zip(a).map(|(t, w)| t * w).sum(),
            None => 1.0,
        }
    }
}

/// Layout of the output heads and the annotator → head assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadBank {
    mode: HeadMode,
    hidden: usize,
    classes: usize,
    num_heads: usize,
    head_of: Vec<usize>,
}

impl HeadBank {
    pub fn bn(hidden: usize, classes: usize) -> Self {
        Self { mode: HeadMode::Bn, hidden, classes, num_heads: 1, head_of: Vec::new() }
    }

    /// One head per distinct entry of `head_of`; `head_of[a]` is annotator
    /// `a`'s head. Head indices must be `0..num_heads` without gaps.
    pub fn dn(hidden: usize, classes: usize, head_of: Vec<usize>) -> Result<Self> {
        let num_heads = head_of.iter().max().map_or(0, |m| m + 1);
        if num_heads == 0 {
            return Err(Error::Contract("doctor net needs at least one annotator".into()));
        }
        let mut used = vec![false; num_heads];
        head_of.iter().for_each(|&h| used[h] = true);
        if used.iter().any(|u| !u) {
            return Err(Error::Contract("head indices must be contiguous".into()));
        }
        Ok(Self { mode: HeadMode::Dn, hidden, classes, num_heads, head_of })
    }

    pub fn mode(&self) -> HeadMode {
        self.mode
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn head_of(&self) -> &[usize] {
        &self.head_of
    }

    pub fn head_for(&self, annotator: usize) -> Result<usize> {
        match self.mode {
            HeadMode::Bn => Ok(0),
            HeadMode::Dn => self
                .head_of
                .get(annotator)
                .copied()
                .ok_or_else(|| Error::Mapping(format!("annotator index {annotator} has no head"))),
        }
    }

    pub fn init_params(&self, params: &mut ParamSet, group: ParamGroup, rng: &mut impl Rng) {
        let width = self.num_heads * self.classes;
        params.insert(HEAD_WEIGHTS, glorot_matrix(self.hidden, width, rng), group);
        params.insert(HEAD_BIAS, Tensor::zeros(&[width]), group);
    }

    /// Logits of every head: `[N × heads·K]`.
    pub fn logits(&self, params: &ParamSet, hidden: &Tensor) -> Result<Tensor> {
        affine(hidden, params.value(HEAD_WEIGHTS)?, params.value(HEAD_BIAS)?)
    }

    /// Accumulates head gradients and returns `dL/dh`.
    pub fn backward(&self, params: &mut ParamSet, hidden: &Tensor, dlogits: &Tensor) -> Result<Tensor> {
        let w = params.value(HEAD_WEIGHTS)?.clone();
        let g = affine_backward(hidden, &w, dlogits)?;
        params.accumulate_grad(HEAD_WEIGHTS, &g.w)?;
        params.accumulate_grad(HEAD_BIAS, &g.b)?;
        Ok(g.x)
    }

    /// Softmax of every head for one example: `[heads × K]`.
    pub fn head_probs(&self, logits_row: &[f64]) -> Result<Tensor> {
        let mut out = vec![0.0; logits_row.len()];
        for (src, dst) in logits_row.chunks(self.classes).zip(out.chunks_mut(self.classes)) {
            softmax_into(src, dst)?;
        }
        Tensor::new(&[self.num_heads, self.classes], out)
    }

    /// Evaluation prediction from one example's logits: the single head (BN)
    /// or the unweighted mean of all head predictions (DN).
    pub fn eval_from_logits(&self, logits_row: &[f64]) -> Result<Vec<f64>> {
        let probs = self.head_probs(logits_row)?;
        Ok(mean_rows(&probs))
    }

    /// Evaluation predictions for a batch of hidden vectors: `[N × K]`.
    pub fn eval(&self, params: &ParamSet, hidden: &Tensor) -> Result<Tensor> {
        let logits = self.logits(params, hidden)?;
        let mut out = Vec::with_capacity(hidden.rows() * self.classes);
        for i in 0..logits.rows() {
            out.extend(self.eval_from_logits(logits.row(i))?);
        }
        Tensor::new(&[hidden.rows(), self.classes], out)
    }
}

pub(crate) fn mean_rows(t: &Tensor) -> Vec<f64> {
    let k = t.row_len();
    let mut m = vec![0.0; k];
    for i in 0..t.rows() {
        m.iter_mut().zip(t.row(i)).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|v| *v /= t.rows() as f64);
    m
}

/// Single-head loss from logits: `w·CE(target, softmax(z)) − β·H(softmax(z))`.
/// Adds the logit gradient into `dlogits`.
pub fn bn_loss_grad(logits: &[f64], target: &[f64], opts: &LossOptions, dlogits: &mut [f64]) -> Result<f64> {
    let p = crate::numerics::softmax_vec(logits)?;
    Ok(softmax_ce_grad(&p, target, opts.target_weight(target), opts.entropy_weight, dlogits))
}

/// Masked per-annotator loss for one example: `Σ_{records} CE(l_i, p_head(i))`
/// plus the entropy penalty on each trained head. Heads without records get
/// exactly zero gradient.
pub fn dn_loss_grad(
    bank: &HeadBank,
    logits_row: &[f64],
    records: &[&AnnotationRecord],
    opts: &LossOptions,
    dlogits: &mut [f64],
) -> Result<f64> {
    let k = bank.classes;
    let mut total = 0.0;
    for r in records {
        let h = bank.head_for(r.annotator)?;
        let span = h * k..(h + 1) * k;
        total += bn_loss_grad(&logits_row[span.clone()], &r.distribution, opts, &mut dlogits[span])?;
    }
    Ok(total)
}

fn single_row(hidden: &Tensor) -> Result<Tensor> {
    let h = hidden.len();
    hidden.clone().reshape(&[1, h])
}

/// BN loss for one example's hidden vector.
pub fn bn_loss(bank: &HeadBank, params: &ParamSet, hidden: &Tensor, target: &[f64]) -> Result<f64> {
    check_simplex(target, "target")?;
    let logits = bank.logits(params, &single_row(hidden)?)?;
    let p = crate::numerics::softmax_vec(&logits.row(0)[..bank.classes])?;
    Ok(cross_entropy_unchecked(target, &p))
}

/// DN loss for one example's hidden vector and its annotation records.
pub fn dn_loss(bank: &HeadBank, params: &ParamSet, hidden: &Tensor, records: &[&AnnotationRecord]) -> Result<f64> {
    let logits = bank.logits(params, &single_row(hidden)?)?;
    let mut scratch = vec![0.0; logits.len()];
    dn_loss_grad(bank, logits.row(0), records, &LossOptions::default(), &mut scratch)
}

/// DN evaluation for one example: mean of all head predictions.
pub fn dn_eval(bank: &HeadBank, params: &ParamSet, hidden: &Tensor) -> Result<Vec<f64>> {
    let logits = bank.logits(params, &single_row(hidden)?)?;
    bank.eval_from_logits(logits.row(0))
}
