//! Phase-2 averaging weights over frozen annotator heads.
//!
//! Averaging logits are produced either as a free vector (WDN), an affine map
//! of the hidden vector (IWDN), or an affine map through a width-3 linear
//! bottleneck (BIWDN). During training the prediction for an example uses only
//! heads of annotators who did not label it, with their weights renormalized;
//! evaluation uses the full weighted average.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, glorot_matrix};
use crate::error::{Error, Result};
use crate::heads::{AnnotationRecord, HeadBank, LossOptions, mean_rows, target_distribution};
use crate::numerics::loss::{entropy, softmax_into, LOG_EPS};
use crate::numerics::ops::{affine, affine_backward};
use crate::numerics::{ParamGroup, ParamSet, Tensor};

pub const AVG_LOGITS: &str = "avg.logits";
pub const AVG_W: &str = "avg.w";
pub const AVG_B: &str = "avg.b";
pub const AVG_W1: &str = "avg.w1";
pub const AVG_B1: &str = "avg.b1";
pub const AVG_W2: &str = "avg.w2";
pub const AVG_B2: &str = "avg.b2";

pub const DEFAULT_BOTTLENECK: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingMode {
    Wdn,
    Iwdn,
    Biwdn,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    #[default]
    Labels,
    ModelPredictions,
}

/// Shape of the averaging network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averaging {
    pub mode: WeightingMode,
    pub heads: usize,
    pub hidden: usize,
    pub bottleneck: usize,
}

impl Averaging {
    pub fn new(mode: WeightingMode, heads: usize, hidden: usize) -> Self {
        Self { mode, heads, hidden, bottleneck: DEFAULT_BOTTLENECK }
    }

    /// Zero logits (uniform weights). For BIWDN the first map is random so the
    /// product has a nonzero gradient; its output still starts at uniform.
    pub fn init_params(&self, params: &mut ParamSet, group: ParamGroup, rng: &mut impl Rng) {
        let a = self.heads;
        match self.mode {
            WeightingMode::Wdn => params.insert(AVG_LOGITS, Tensor::zeros(&[a]), group),
            WeightingMode::Iwdn => {
                params.insert(AVG_W, Tensor::zeros(&[self.hidden, a]), group);
                params.insert(AVG_B, Tensor::zeros(&[a]), group);
            }
            WeightingMode::Biwdn => {
                params.insert(AVG_W1, glorot_matrix(self.hidden, self.bottleneck, rng), group);
                params.insert(AVG_B1, Tensor::zeros(&[self.bottleneck]), group);
                params.insert(AVG_W2, Tensor::zeros(&[self.bottleneck, a]), group);
                params.insert(AVG_B2, Tensor::zeros(&[a]), group);
            }
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self.mode {
            WeightingMode::Wdn => &[AVG_LOGITS],
            WeightingMode::Iwdn => &[AVG_W, AVG_B],
            WeightingMode::Biwdn => &[AVG_W1, AVG_B1, AVG_W2, AVG_B2],
        }
    }

    /// Averaging logits for a batch of hidden vectors: `[N × A]`.
    pub fn logits(&self, params: &ParamSet, hidden: &Tensor) -> Result<Tensor> {
        let n = hidden.rows();
        match self.mode {
            WeightingMode::Wdn => {
                let l = params.value(AVG_LOGITS)?;
                let mut out = Vec::with_capacity(n * self.heads);
                (0..n).for_each(|_| out.extend_from_slice(l.data()));
                Tensor::new(&[n, self.heads], out)
            }
            WeightingMode::Iwdn => affine(hidden, params.value(AVG_W)?, params.value(AVG_B)?),
            WeightingMode::Biwdn => {
                let z = affine(hidden, params.value(AVG_W1)?, params.value(AVG_B1)?)?;
                affine(&z, params.value(AVG_W2)?, params.value(AVG_B2)?)
            }
        }
    }

    /// Accumulates parameter gradients from `dL/dlogits`.
    pub fn backward(&self, params: &mut ParamSet, hidden: &Tensor, dlogits: &Tensor) -> Result<()> {
        match self.mode {
            WeightingMode::Wdn => {
                let mut g = vec![0.0; self.heads];
                for i in 0..dlogits.rows() {
                    g.iter_mut().zip(dlogits.row(i)).for_each(|(a, b)| *a += b);
                }
                params.accumulate_grad(AVG_LOGITS, &Tensor::vector(g))
            }
            WeightingMode::Iwdn => {
                let w = params.value(AVG_W)?.clone();
                let g = affine_backward(hidden, &w, dlogits)?;
                params.accumulate_grad(AVG_W, &g.w)?;
                params.accumulate_grad(AVG_B, &g.b)
            }
            WeightingMode::Biwdn => {
                let z = affine(hidden, params.value(AVG_W1)?, params.value(AVG_B1)?)?;
                let w2 = params.value(AVG_W2)?.clone();
                let g2 = affine_backward(&z, &w2, dlogits)?;
                params.accumulate_grad(AVG_W2, &g2.w)?;
                params.accumulate_grad(AVG_B2, &g2.b)?;
                let w1 = params.value(AVG_W1)?.clone();
                let g1 = affine_backward(hidden, &w1, &g2.x)?;
                params.accumulate_grad(AVG_W1, &g1.w)?;
                params.accumulate_grad(AVG_B1, &g1.b)
            }
        }
    }
}

/// Simplex averaging weights for one example. IWDN and BIWDN need `h`.
pub fn averaging_weights(avg: &Averaging, params: &ParamSet, h: Option<&[f64]>) -> Result<Vec<f64>> {
    let hidden = match (avg.mode, h) {
        (WeightingMode::Wdn, _) => Tensor::zeros(&[1, avg.hidden.max(1)]),
        (_, Some(h)) => Tensor::new(&[1, h.len()], h.to_vec())?,
        (_, None) => {
            return Err(Error::Contract("input-dependent weighting needs the hidden vector".into()))
        }
    };
    let logits = avg.logits(params, &hidden)?;
    let mut w = vec![0.0; avg.heads];
    softmax_into(logits.row(0), &mut w)?;
    Ok(w)
}

/// Cached output of the frozen doctor net for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenExample {
    /// Head predictions, `[A × K]`.
    pub probs: Tensor,
    pub hidden: Vec<f64>,
    /// Sorted distinct head indices of the annotators who labeled the example.
    pub labelers: Vec<usize>,
    /// Mean of the labelers' distributions.
    pub target: Vec<f64>,
}

impl FrozenExample {
    pub fn covers_all_heads(&self) -> bool {
        self.labelers.len() >= self.probs.rows()
    }

    /// Phase-2 target: the label mean, or the mean of the labelers' own head
    /// predictions.
    pub fn phase2_target(&self, mode: TargetMode) -> Result<Vec<f64>> {
        match mode {
            TargetMode::Labels => Ok(self.target.clone()),
            TargetMode::ModelPredictions => {
                if self.labelers.is_empty() {
                    return Err(Error::Contract("example has no labelers".into()));
                }
                let sel = self.probs.select_rows(&self.labelers);
                Ok(mean_rows(&sel))
            }
        }
    }
}

/// Frozen head predictions and hidden vectors for a whole split.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPredictions {
    pub heads: usize,
    pub classes: usize,
    pub hidden: usize,
    pub examples: Vec<FrozenExample>,
}

impl FrozenPredictions {
    /// Runs the frozen backbone and heads over `features` once. `records[i]`
    /// are the annotations of example `i`.
    pub fn compute(
        backbone: &BackboneSpec,
        bank: &HeadBank,
        params: &ParamSet,
        features: &Tensor,
        records: &[Vec<AnnotationRecord>],
        batch: usize,
    ) -> Result<Self> {
        if features.rows() != records.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} annotation groups",
                features.rows(),
                records.len()
            )));
        }
        let mut examples = Vec::with_capacity(records.len());
        let idx: Vec<usize> = (0..features.rows()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let x = features.select_rows(chunk);
            let h = backbone.forward(params, &x)?;
            let logits = bank.logits(params, &h)?;
            for (r, &i) in chunk.iter().enumerate() {
                let mut labelers = records[i]
                    .iter()
                    .map(|rec| bank.head_for(rec.annotator))
                    .collect::<Result<Vec<_>>>()?;
                labelers.sort_unstable();
                labelers.dedup();
                examples.push(FrozenExample {
                    probs: bank.head_probs(logits.row(r))?,
                    hidden: h.row(r).to_vec(),
                    labelers,
                    target: target_distribution(&records[i])?,
                });
            }
        }
        Ok(Self { heads: bank.num_heads(), classes: bank.classes(), hidden: bank.hidden(), examples })
    }

    /// Number of examples phase 2 cannot train on because every head labeled them.
    pub fn skipped(&self) -> usize {
        self.examples.iter().filter(|e| e.covers_all_heads()).count()
    }

    pub fn hidden_batch(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.hidden);
        for &i in idx {
            data.extend_from_slice(&self.examples[i].hidden);
        }
        Tensor::new(&[idx.len(), self.hidden], data)
    }
}

fn complement(heads: usize, labelers: &[usize]) -> Vec<usize> {
    (0..heads).filter(|j| labelers.binary_search(j).is_err()).collect()
}

/// `Σ_{j∉I} w_j p_j / Σ_{j∉I} w_j`.
pub fn phase2_train_prediction(probs: &Tensor, labelers: &[usize], weights: &[f64]) -> Result<Vec<f64>> {
    let held = complement(probs.rows(), labelers);
    if held.is_empty() {
        return Err(Error::Contract("every head labeled this example; no held-out predictor".into()));
    }
    let mass: f64 = held.iter().map(|&j| weights[j]).sum();
    let mut out = vec![0.0; probs.row_len()];
    for &j in &held {
        let s = weights[j] / mass;
        out.iter_mut().zip(probs.row(j)).for_each(|(o, p)| *o += s * p);
    }
    Ok(out)
}

/// `Σ_j w_j p_j` over all heads.
pub fn weighted_eval(probs: &Tensor, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != probs.rows() {
        return Err(Error::Dimension(format!("{} weights for {} heads", weights.len(), probs.rows())));
    }
    let mut out = vec![0.0; probs.row_len()];
    for (j, &w) in weights.iter().enumerate() {
        out.iter_mut().zip(probs.row(j)).for_each(|(o, p)| *o += w * p);
    }
    Ok(out)
}

/// Phase-2 loss for one example from its averaging logits, adding
/// `dL/dlogits` into `dlogits`. Logits of labeling heads get exactly zero.
pub fn phase2_loss_grad(
    ex: &FrozenExample,
    logits: &[f64],
    target: &[f64],
    opts: &LossOptions,
    dlogits: &mut [f64],
) -> Result<f64> {
    let held = complement(ex.probs.rows(), &ex.labelers);
    if held.is_empty() {
        return Err(Error::Contract("every head labeled this example; no held-out predictor".into()));
    }
    let sub: Vec<f64> = held.iter().map(|&j| logits[j]).collect();
    let mut u = vec![0.0; held.len()];
    if held.len() == 1 {
        u[0] = 1.0;
    } else {
        softmax_into(&sub, &mut u)?;
    }
    let k = ex.probs.row_len();
    let mut pred = vec![0.0; k];
    for (&j, &uj) in held.iter().zip(&u) {
        pred.iter_mut().zip(ex.probs.row(j)).for_each(|(o, p)| *o += uj * p);
    }

    let weight = opts.target_weight(target);
    let beta = opts.entropy_weight;
    let mut loss = 0.0;
    let mut g = vec![0.0; k];
    for c in 0..k {
        if target[c] != 0.0 {
            loss -= weight * target[c] * pred[c].max(LOG_EPS).ln();
            if pred[c] >= LOG_EPS {
                g[c] -= weight * target[c] / pred[c];
            }
        }
        if beta > 0.0 && pred[c] > 0.0 {
            g[c] += beta * (pred[c].ln() + 1.0);
        }
    }
    if beta > 0.0 {
        loss -= beta * entropy(&pred);
    }
    let g_pred: f64 = g.iter().zip(&pred).map(|(a, b)| a * b).sum();
    for (&j, &uj) in held.iter().zip(&u) {
        let g_j: f64 = g.iter().zip(ex.probs.row(j)).map(|(a, b)| a * b).sum();
        dlogits[j] += uj * (g_j - g_pred);
    }
    Ok(loss)
}

/// Phase-2 loss for one example.
pub fn phase2_loss(avg: &Averaging, params: &ParamSet, ex: &FrozenExample, mode: TargetMode) -> Result<f64> {
    let hidden = Tensor::new(&[1, ex.hidden.len()], ex.hidden.clone())?;
    let logits = avg.logits(params, &hidden)?;
    let target = ex.phase2_target(mode)?;
    let mut scratch = vec![0.0; avg.heads];
    phase2_loss_grad(ex, logits.row(0), &target, &LossOptions::default(), &mut scratch)
}

/// Mean phase-2 loss over the trainable examples of a minibatch, accumulating
/// the averaging-parameter gradients. Returns `(mean loss, examples used)`;
/// examples covering every head are skipped.
pub fn phase2_batch_loss_grad(
    avg: &Averaging,
    params: &mut ParamSet,
    frozen: &FrozenPredictions,
    idx: &[usize],
    mode: TargetMode,
    opts: &LossOptions,
) -> Result<(f64, usize)> {
    let used: Vec<usize> = idx.iter().copied().filter(|&i| !frozen.examples[i].covers_all_heads()).collect();
    if used.is_empty() {
        return Ok((0.0, 0));
    }
    let hidden = frozen.hidden_batch(&used)?;
    let logits = avg.logits(params, &hidden)?;
    let mut d = Tensor::zeros(logits.shape());
    let scale = 1.0 / used.len() as f64;
    let mut total = 0.0;
    for (r, &i) in used.iter().enumerate() {
        let ex = &frozen.examples[i];
        let target = ex.phase2_target(mode)?;
        total += phase2_loss_grad(ex, logits.row(r), &target, opts, d.row_mut(r))?;
    }
    d.scale(scale);
    avg.backward(params, &hidden, &d)?;
    Ok((total * scale, used.len()))
}

/// Weighted evaluation predictions for a set of frozen examples: `[N × K]`.
pub fn weighted_eval_batch(avg: &Averaging, params: &ParamSet, frozen: &FrozenPredictions) -> Result<Tensor> {
    let idx: Vec<usize> = (0..frozen.examples.len()).collect();
    let hidden = frozen.hidden_batch(&idx)?;
    let logits = avg.logits(params, &hidden)?;
    let mut out = Vec::with_capacity(idx.len() * frozen.classes);
    let mut w = vec![0.0; avg.heads];
    for (r, ex) in frozen.examples.iter().enumerate() {
        softmax_into(logits.row(r), &mut w)?;
        out.extend(weighted_eval(&ex.probs, &w)?);
    }
    Tensor::new(&[idx.len(), frozen.classes], out)
}
