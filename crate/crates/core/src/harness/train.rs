//! Two-phase training driver.
//!
//! Phase 1 trains a backbone with BN or DN heads (optionally through a noise
//! model). Phase 2 freezes a finished DN replicate and learns averaging
//! weights over its heads from cached head predictions.
//!
//! Minibatch order is a function of the seed and the step number only: step
//! `s` takes batch `s mod B` of epoch `s div B`, where `B` is the number of
//! full batches per epoch and each epoch is a fresh permutation. Dropout
//! masks come from a per-step stream. A checkpoint taken at any step
//! therefore resumes to the same trajectory.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, ModelKind, PriorCorrection, Selection, SplitMode};
use super::data::{self, hash_split, id_hash_unit, Dataset, IngestSummary, Split};
use crate::backbone::BackboneSpec;
use crate::em::{em_fit, reliabilities, ConfusionMatrix, EmConfig};
use crate::error::{Error, Result};
use crate::heads::{bn_loss_grad, dn_loss_grad, target_distribution, AnnotationRecord, AnnotationSet, HeadBank, LossOptions, HeadMode};
use crate::metrics::{argmax, class_balance_weights, class_distribution, evaluate, log_prior_correction, Metrics};
use crate::noise::{dn_noise_loss_grad, estimate_shared_theta, symmetric_theta_from_reliability, NoisePrior};
use crate::numerics::{ema_update, softmax_vec, Adam, ParamGroup, ParamSet, Tensor};
use crate::rng::{self, domain};
use crate::weighting::{
    phase2_batch_loss_grad, weighted_eval_batch, Averaging, FrozenExample, FrozenPredictions,
};

/// Parameter prefixes frozen during phase 2.
pub const FROZEN_PREFIXES: [&str; 2] = ["backbone.", "heads."];

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

pub fn replicate_dir(run: &Path, replicate: usize) -> PathBuf {
    run.join(format!("replicate-{replicate}"))
}

pub fn replicate_seed(seed: u64, replicate: usize) -> u64 {
    rng::derive_seed(seed, &[domain::REPLICATE, replicate as u64])
}

#[derive(Debug, Clone)]
pub struct SplitData {
    pub ids: Vec<String>,
    pub features: Tensor,
    pub annotations: AnnotationSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    /// Ground-truth grades.
    Truth,
    /// Argmax of the mean annotation (no truth supplied).
    Labels,
}

#[derive(Debug, Clone)]
pub struct EvalData {
    pub ids: Vec<String>,
    pub features: Tensor,
    pub truth: Vec<usize>,
    pub reference: Reference,
}

/// Ingested data split into train, validation and test.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub summary: IngestSummary,
    pub classes: usize,
    pub heads: usize,
    pub train: SplitData,
    pub val: SplitData,
    pub test: EvalData,
}

fn label_argmax(set: &AnnotationSet) -> Result<Vec<usize>> {
    set.by_example().iter().map(|r| Ok(argmax(&target_distribution(r)?))).collect()
}

fn split_data(ds: &Dataset, idx: &[usize]) -> SplitData {
    SplitData {
        ids: idx.iter().map(|&i| ds.ids[i].clone()).collect(),
        features: ds.features.select_rows(idx),
        annotations: ds.annotations.subset(idx),
    }
}

impl Prepared {
    /// Splits an ingested dataset. `test` holds separate held-out files in
    /// holdout mode.
    pub fn from_dataset(
        ds: Dataset,
        summary: IngestSummary,
        mode: SplitMode,
        val_fraction: f64,
        test: Option<(Vec<String>, Tensor, Vec<usize>)>,
    ) -> Result<Self> {
        let annotated: Vec<usize> = (0..ds.ids.len()).filter(|&i| !ds.annotations.records(i).is_empty()).collect();
        let (train_idx, val_idx, test_data);
        match mode {
            SplitMode::Hash => {
                let of = |s: Split| -> Vec<usize> {
                    annotated.iter().copied().filter(|&i| hash_split(&ds.ids[i]) == s).collect()
                };
                train_idx = of(Split::Train);
                val_idx = of(Split::Val);
                test_data = match &ds.truth {
                    Some(truth) => {
                        let idx: Vec<usize> =
                            (0..ds.ids.len()).filter(|&i| hash_split(&ds.ids[i]) == Split::Test).collect();
                        EvalData {
                            ids: idx.iter().map(|&i| ds.ids[i].clone()).collect(),
                            features: ds.features.select_rows(&idx),
                            truth: idx.iter().map(|&i| truth[i]).collect(),
                            reference: Reference::Truth,
                        }
                    }
                    None => {
                        let s = split_data(&ds, &of(Split::Test));
                        EvalData {
                            truth: label_argmax(&s.annotations)?,
                            ids: s.ids,
                            features: s.features,
                            reference: Reference::Labels,
                        }
                    }
                };
            }
            SplitMode::Holdout => {
                let (ids, features, truth) =
                    test.ok_or_else(|| Error::Config("holdout split needs a test set".into()))?;
                let (v, t): (Vec<usize>, Vec<usize>) =
                    annotated.iter().partition(|&&i| id_hash_unit(&ds.ids[i]) < val_fraction);
                train_idx = t;
                val_idx = v;
                test_data = EvalData { ids, features, truth, reference: Reference::Truth };
            }
        }
        if train_idx.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        if test_data.truth.is_empty() {
            return Err(Error::Config("test split is empty".into()));
        }
        Ok(Self {
            classes: ds.annotations.classes(),
            heads: ds.annotations.annotators(),
            train: split_data(&ds, &train_idx),
            val: split_data(&ds, &val_idx),
            test: test_data,
            summary,
        })
    }
}

/// Reads and splits the data named by a config.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let d = &cfg.data;
    let (ds, summary) = data::ingest(
        &d.features,
        d.annotations.as_deref(),
        d.labels.as_deref(),
        d.truth.as_deref(),
        d.classes,
        cfg.model.lump_threshold,
    )?;
    if ds.features.row_len() != cfg.backbone.input_dim() {
        return Err(Error::Config(format!(
            "features have {} values per row, backbone expects {}",
            ds.features.row_len(),
            cfg.backbone.input_dim()
        )));
    }
    let test = match d.split {
        SplitMode::Hash => None,
        SplitMode::Holdout => {
            let f = d.test_features.as_deref().ok_or_else(|| Error::Config("missing data.test_features".into()))?;
            let t = d.test_truth.as_deref().ok_or_else(|| Error::Config("missing data.test_truth".into()))?;
            Some(data::read_eval_set(f, t, d.classes)?)
        }
    };
    Prepared::from_dataset(ds, summary, d.split, d.val_fraction, test)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub best_score: Option<f64>,
    pub best_step: u64,
    pub evals_since_best: u64,
    pub stopped_early: bool,
    pub completed: bool,
    /// Loss accumulated since the last evaluation.
    pub loss_sum: f64,
    pub loss_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub train_loss: f64,
    pub val_kclass_error: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub replicate: usize,
    pub seed: u64,
    pub backbone: BackboneSpec,
    pub heads: usize,
    pub classes: usize,
    pub noise: Option<NoisePrior>,
    pub averaging: Option<Averaging>,
    /// Class distribution of the training targets.
    pub q_train: Vec<f64>,
    /// Checksum of the frozen backbone and heads (phase 2).
    pub frozen_checksum: Option<String>,
    pub state: TrainerState,
    pub history: Vec<EvalPoint>,
}

/// Parameters a finished run evaluates with: the best validation snapshot,
/// else the EMA shadow, else the live parameters.
pub fn selected_params(ck: &Checkpoint) -> &ParamSet {
    ck.best.as_ref().or(ck.ema.as_ref()).unwrap_or(&ck.params)
}

pub fn read_meta(ck: &Checkpoint) -> Result<CheckpointMeta> {
    serde_json::from_str(&ck.meta).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))
}

enum Objective {
    Targets(Vec<Vec<f64>>),
    Masked,
    Noise(Vec<ConfusionMatrix>),
}

struct Phase1 {
    bank: HeadBank,
    objective: Objective,
}

struct Phase2 {
    bank: HeadBank,
    avg: Averaging,
    train: FrozenPredictions,
    val: FrozenPredictions,
    test: FrozenPredictions,
}

enum Model {
    Phase1(Phase1),
    Phase2(Phase2),
}

struct Schedule {
    lr: f64,
    steps: u64,
    batch: usize,
    eval_every: u64,
}

/// One replicate's training run.
pub struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Prepared,
    replicate: usize,
    seed: u64,
    backbone: BackboneSpec,
    model: Model,
    params: ParamSet,
    ema: Option<ParamSet>,
    best: Option<ParamSet>,
    state: TrainerState,
    history: Vec<EvalPoint>,
    opts: LossOptions,
    noise: Option<NoisePrior>,
    q_train: Vec<f64>,
    frozen_checksum: Option<String>,
    schedule: Schedule,
    order: Option<(u64, Vec<usize>)>,
}

fn dn_bank(hidden: usize, classes: usize, heads: usize) -> Result<HeadBank> {
    HeadBank::dn(hidden, classes, (0..heads).collect())
}

fn mean_of(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut q = vec![0.0; k];
    for r in rows {
        q.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    let n = rows.len().max(1) as f64;
    q.iter_mut().for_each(|v| *v /= n);
    q
}

fn label_targets(set: &AnnotationSet) -> Result<Vec<Vec<f64>>> {
    set.by_example().iter().map(|r| target_distribution(r)).collect()
}

/// Head predictions and hidden vectors for evaluation (no labelers).
fn head_outputs(backbone: &BackboneSpec, bank: &HeadBank, params: &ParamSet, x: &Tensor, batch: usize) -> Result<FrozenPredictions> {
    let mut examples = Vec::with_capacity(x.rows());
    let idx: Vec<usize> = (0..x.rows()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let h = backbone.forward(params, &x.select_rows(chunk))?;
        let logits = bank.logits(params, &h)?;
        for r in 0..chunk.len() {
            examples.push(FrozenExample {
                probs: bank.head_probs(logits.row(r))?,
                hidden: h.row(r).to_vec(),
                labelers: Vec::new(),
                target: Vec::new(),
            });
        }
    }
    Ok(FrozenPredictions { heads: bank.num_heads(), classes: bank.classes(), hidden: bank.hidden(), examples })
}

fn phase1_predict(backbone: &BackboneSpec, bank: &HeadBank, params: &ParamSet, x: &Tensor, batch: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(x.rows() * bank.classes());
    let idx: Vec<usize> = (0..x.rows()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let h = backbone.forward(params, &x.select_rows(chunk))?;
        out.extend_from_slice(bank.eval(params, &h)?.data());
    }
    Tensor::new(&[x.rows(), bank.classes()], out)
}

/// `softmax(log P + log(q_eval/q_train))` row by row.
pub fn correct_predictions(preds: &Tensor, q_train: &[f64], q_eval: &[f64]) -> Result<Tensor> {
    let mut out = Vec::with_capacity(preds.len());
    for i in 0..preds.rows() {
        let logp: Vec<f64> = preds.row(i).iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect();
        out.extend(softmax_vec(&log_prior_correction(&logp, q_train, q_eval)?)?);
    }
    Tensor::new(preds.shape(), out)
}

fn dn_checkpoint_path(cfg: &ExperimentConfig, replicate: usize) -> Result<PathBuf> {
    let run = cfg
        .phase2
        .dn_run
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} needs phase2.dn_run", cfg.model.kind.name())))?;
    Ok(replicate_dir(run, replicate).join(CHECKPOINT_FILE))
}

impl<'a> Trainer<'a> {
    /// Fresh trainer for replicate `replicate`.
    pub fn new(cfg: &'a ExperimentConfig, data: &'a Prepared, replicate: usize) -> Result<Self> {
        let seed = replicate_seed(cfg.experiment.seed, replicate);
        let mut init = rng::stream(seed, &[domain::INIT]);
        let reg = &cfg.regularization;
        let k = data.classes;
        if cfg.model.kind.is_phase2() {
            let path = dn_checkpoint_path(cfg, replicate)?;
            if !path.exists() {
                return Err(Error::Config(format!("missing doctor-net checkpoint {}", path.display())));
            }
            let dn = Checkpoint::load(&path)?;
            let meta = read_meta(&dn)?;
            if !meta.state.completed {
                return Err(Error::Config(format!("doctor-net run {} has not finished", path.display())));
            }
            if meta.kind.is_bn() || meta.kind.is_phase2() {
                return Err(Error::Config(format!("{} is a {} checkpoint, not a doctor net", path.display(), meta.kind.name())));
            }
            if meta.heads != data.heads || meta.classes != k || meta.backbone != cfg.backbone {
                return Err(Error::Config(format!(
                    "doctor-net checkpoint {} does not match this data/backbone ({} heads, {} classes)",
                    path.display(),
                    meta.heads,
                    meta.classes
                )));
            }
            let mut params = ParamSet::new();
            let frozen = ParamGroup { trainable: false, ..ParamGroup::default() };
            for (name, p) in selected_params(&dn).iter() {
                params.insert(name, p.value.clone(), frozen);
            }
            let mut avg = Averaging::new(cfg.model.kind.weighting().unwrap(), data.heads, cfg.backbone.hidden_dim());
            avg.bottleneck = cfg.model.bottleneck;
            let group = ParamGroup { lr_scale: 1.0, l1: reg.l1, l2: reg.l2, trainable: true };
            avg.init_params(&mut params, group, &mut init);
            let checksum = params.checksum(&FROZEN_PREFIXES);
            let mut t = Self::assemble(cfg, data, replicate, seed, params, None, None, meta.noise.clone())?;
            t.model = t.build_phase2(avg, None)?;
            t.frozen_checksum = Some(checksum);
            return Ok(t);
        }
        let mut params = ParamSet::new();
        let bb = ParamGroup { lr_scale: 1.0, l1: reg.l1, l2: reg.l2, trainable: true };
        let hd = ParamGroup { lr_scale: cfg.optim.head_lr_ratio, ..bb };
        cfg.backbone.init_params(&mut params, bb, &mut init);
        let bank = if cfg.model.kind.is_bn() {
            HeadBank::bn(cfg.backbone.hidden_dim(), k)
        } else {
            dn_bank(cfg.backbone.hidden_dim(), k, data.heads)?
        };
        bank.init_params(&mut params, hd, &mut init);
        let noise = match cfg.model.kind {
            ModelKind::DnMnih => Some(NoisePrior::SharedAsymmetric { theta: estimate_shared_theta(&data.train.annotations)? }),
            ModelKind::DnSym => {
                let em = em_fit(&data.train.annotations, &EmConfig::default())?;
                Some(symmetric_theta_from_reliability(&reliabilities(&em), k)?)
            }
            _ => None,
        };
        Self::assemble(cfg, data, replicate, seed, params, None, None, noise)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: &'a ExperimentConfig,
        data: &'a Prepared,
        replicate: usize,
        seed: u64,
        params: ParamSet,
        best: Option<ParamSet>,
        ema: Option<ParamSet>,
        noise: Option<NoisePrior>,
    ) -> Result<Self> {
        let k = data.classes;
        let kind = cfg.model.kind;
        let hidden = cfg.backbone.hidden_dim();
        let (model, q_train) = if kind.is_phase2() {
            // placeholder until the caller installs the phase-2 model
            let bank = dn_bank(hidden, k, data.heads)?;
            let empty = FrozenPredictions { heads: data.heads, classes: k, hidden, examples: Vec::new() };
            let avg = Averaging::new(kind.weighting().unwrap(), data.heads, hidden);
            let m = Model::Phase2(Phase2 { bank, avg, train: empty.clone(), val: empty.clone(), test: empty });
            (m, mean_of(&label_targets(&data.train.annotations)?, k))
        } else {
            let (bank, objective, targets) = match kind {
                ModelKind::Bn => {
                    let t = label_targets(&data.train.annotations)?;
                    (HeadBank::bn(hidden, k), Objective::Targets(t.clone()), t)
                }
                ModelKind::BnWel => {
                    let em = em_fit(&data.train.annotations, &EmConfig::default())?;
                    let t = em.posteriors;
                    (HeadBank::bn(hidden, k), Objective::Targets(t.clone()), t)
                }
                _ => {
                    let obj = match &noise {
                        Some(n) => Objective::Noise(n.thetas(data.heads)?),
                        None => Objective::Masked,
                    };
                    (dn_bank(hidden, k, data.heads)?, obj, label_targets(&data.train.annotations)?)
                }
            };
            (Model::Phase1(Phase1 { bank, objective }), mean_of(&targets, k))
        };
        let reg = &cfg.regularization;
        let class_weights = if reg.class_balance {
            Some(class_balance_weights(&q_train).map_err(|e| Error::Config(format!("class balance: {e}")))?)
        } else {
            None
        };
        let schedule = if kind.is_phase2() {
            let p = &cfg.phase2;
            Schedule { lr: p.lr, steps: p.steps, batch: p.batch_size, eval_every: p.eval_every }
        } else {
            let o = &cfg.optim;
            Schedule { lr: o.lr, steps: o.steps, batch: o.batch_size, eval_every: o.eval_every }
        };
        let ema = match ema {
            Some(e) => Some(e),
            None if reg.ema_decay > 0.0 => Some(params.clone()),
            None => None,
        };
        Ok(Self {
            cfg,
            data,
            replicate,
            seed,
            backbone: cfg.backbone.clone(),
            model,
            params,
            ema,
            best,
            state: TrainerState::default(),
            history: Vec::new(),
            opts: LossOptions { entropy_weight: reg.entropy_weight, class_weights },
            noise,
            q_train,
            frozen_checksum: None,
            schedule,
            order: None,
        })
    }

    fn build_phase2(&self, avg: Averaging, cached: Option<FrozenPredictions>) -> Result<Model> {
        let bank = dn_bank(self.backbone.hidden_dim(), self.data.classes, self.data.heads)?;
        let eb = self.cfg.optim.eval_batch;
        let train = match cached {
            Some(c) => c,
            None => FrozenPredictions::compute(
                &self.backbone,
                &bank,
                &self.params,
                &self.data.train.features,
                self.data.train.annotations.by_example(),
                eb,
            )?,
        };
        if train.skipped() == train.examples.len() {
            return Err(Error::Config("every training example was labeled by all heads; phase 2 has nothing to learn".into()));
        }
        let val = head_outputs(&self.backbone, &bank, &self.params, &self.data.val.features, eb)?;
        let test = head_outputs(&self.backbone, &bank, &self.params, &self.data.test.features, eb)?;
        Ok(Model::Phase2(Phase2 { bank, avg, train, val, test }))
    }

    /// Continues from a checkpoint written under the same config.
    pub fn resume(cfg: &'a ExperimentConfig, data: &'a Prepared, ck: Checkpoint) -> Result<Self> {
        ck.expect_hash(&cfg.hash())?;
        let meta = read_meta(&ck)?;
        if meta.kind != cfg.model.kind || meta.heads != data.heads || meta.classes != data.classes {
            return Err(Error::Checkpoint("checkpoint does not match the configured model or data".into()));
        }
        let Checkpoint { params, ema, best, frozen, .. } = ck;
        let mut t = Self::assemble(cfg, data, meta.replicate, meta.seed, params, best, ema, meta.noise.clone())?;
        if let Some(avg) = meta.averaging.clone() {
            t.model = t.build_phase2(avg, frozen)?;
            let now = t.params.checksum(&FROZEN_PREFIXES);
            if meta.frozen_checksum.as_deref() != Some(now.as_str()) {
                return Err(Error::Checkpoint("frozen parameters changed since phase 2 started".into()));
            }
            t.frozen_checksum = meta.frozen_checksum;
        }
        t.q_train = meta.q_train;
        t.state = meta.state;
        t.history = meta.history;
        Ok(t)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.params.step()
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn history(&self) -> &[EvalPoint] {
        &self.history
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.steps
    }

    pub fn q_train(&self) -> &[f64] {
        &self.q_train
    }

    /// Examples phase 2 skips because every head labeled them.
    pub fn phase2_skipped(&self) -> Option<usize> {
        match &self.model {
            Model::Phase2(p) => Some(p.train.skipped()),
            Model::Phase1(_) => None,
        }
    }

    pub fn frozen_checksum(&self) -> Option<&str> {
        self.frozen_checksum.as_deref()
    }

    fn train_len(&self) -> usize {
        match &self.model {
            Model::Phase1(_) => self.data.train.features.rows(),
            Model::Phase2(p) => p.train.examples.len(),
        }
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.train_len();
        let b = self.schedule.batch.min(n);
        let per_epoch = (n / b) as u64;
        let epoch = step / per_epoch;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng::stream(self.seed, &[domain::EPOCH, epoch]));
            self.order = Some((epoch, perm));
        }
        let start = (step % per_epoch) as usize * b;
        self.order.as_ref().unwrap().1[start..start + b].to_vec()
    }

    /// One optimizer step; returns the minibatch objective.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.params.step();
        self.step_inner(step).map_err(|e| match e {
            Error::Numeric(m) if !m.contains(" at step ") => {
                Error::Numeric(format!("{m} at step {step} (replicate {})", self.replicate))
            }
            other => other,
        })
    }

    fn step_inner(&mut self, step: u64) -> Result<f64> {
        let idx = self.batch_indices(step);
        self.params.zero_grad();
        let loss = match &self.model {
            Model::Phase1(m) => {
                let x = self.data.train.features.select_rows(&idx);
                let keep = 1.0 - self.cfg.regularization.dropout;
                let mut drop = rng::stream(self.seed, &[domain::DROPOUT, step]);
                let (h, cache) = self.backbone.forward_train(&self.params, &x, keep, &mut drop)?;
                let logits = m.bank.logits(&self.params, &h)?;
                let mut d = Tensor::zeros(logits.shape());
                let mut total = 0.0;
                for (r, &i) in idx.iter().enumerate() {
                    let recs: Vec<&AnnotationRecord> = self.data.train.annotations.records(i).iter().collect();
                    total += match &m.objective {
                        Objective::Targets(t) => bn_loss_grad(logits.row(r), &t[i], &self.opts, d.row_mut(r))?,
                        Objective::Masked => dn_loss_grad(&m.bank, logits.row(r), &recs, &self.opts, d.row_mut(r))?,
                        Objective::Noise(th) => {
                            dn_noise_loss_grad(&m.bank, logits.row(r), &recs, th, &self.opts, d.row_mut(r))?
                        }
                    };
                }
                let scale = 1.0 / idx.len() as f64;
                d.scale(scale);
                let dh = m.bank.backward(&mut self.params, &h, &d)?;
                self.backbone.backward(&mut self.params, &cache, &dh)?;
                total * scale
            }
            Model::Phase2(m) => {
                let mode = self.cfg.model.target_mode;
                phase2_batch_loss_grad(&m.avg, &mut self.params, &m.train, &idx, mode, &self.opts)?.0
            }
        };
        let loss = loss + self.params.apply_weight_decay();
        if !loss.is_finite() {
            let ids: Vec<&str> = match &self.model {
                Model::Phase1(_) => idx.iter().take(8).map(|&i| self.data.train.ids[i].as_str()).collect(),
                Model::Phase2(_) => Vec::new(),
            };
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at step {step} (replicate {}, lr {}, batch starts {ids:?})",
                self.replicate, self.schedule.lr
            )));
        }
        Adam::new(self.schedule.lr).step(&mut self.params)?;
        if let Some(ema) = self.ema.as_mut() {
            ema_update(ema, &self.params, self.cfg.regularization.ema_decay)?;
        }
        if let Some(sum) = &self.frozen_checksum {
            if &self.params.checksum(&FROZEN_PREFIXES) != sum {
                return Err(Error::Contract(format!("frozen parameters changed at phase-2 step {}", step + 1)));
            }
        }
        self.state.loss_sum += loss;
        self.state.loss_steps += 1;
        Ok(loss)
    }

    fn eval_params(&self) -> &ParamSet {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    fn predict_val(&self, params: &ParamSet) -> Result<Tensor> {
        match &self.model {
            Model::Phase1(m) => {
                phase1_predict(&self.backbone, &m.bank, params, &self.data.val.features, self.cfg.optim.eval_batch)
            }
            Model::Phase2(m) => weighted_eval_batch(&m.avg, params, &m.val),
        }
    }

    /// Evaluates on validation and updates the best snapshot and patience.
    pub fn evaluate_validation(&mut self) -> Result<()> {
        let step = self.params.step();
        let train_loss = self.state.loss_sum / self.state.loss_steps.max(1) as f64;
        self.state.loss_sum = 0.0;
        self.state.loss_steps = 0;
        if self.data.val.features.rows() == 0 {
            self.best = Some(self.eval_params().clone());
            self.state.best_step = step;
            return Ok(());
        }
        let preds = self.predict_val(self.eval_params())?;
        let reference = label_argmax(&self.data.val.annotations)?;
        let e = &self.cfg.experiment;
        let m = evaluate(&preds, &reference, e.threshold_class, e.target_sens)?;
        let score = match e.select_on {
            Selection::Kclass => m.kclass_error,
            Selection::Auc => {
                1.0 - m.binary_auc.ok_or_else(|| Error::UndefinedMetric("validation AUC needs both binary classes".into()))?
            }
        };
        self.history.push(EvalPoint { step, train_loss, val_kclass_error: m.kclass_error, val_auc: m.binary_auc });
        if self.state.best_score.is_none_or(|b| score < b) {
            self.state.best_score = Some(score);
            self.state.best_step = step;
            self.state.evals_since_best = 0;
            self.best = Some(self.eval_params().clone());
        } else {
            self.state.evals_since_best += 1;
            let p = self.cfg.optim.patience;
            if p > 0 && self.state.evals_since_best >= p {
                self.state.stopped_early = true;
                self.state.completed = true;
            }
        }
        Ok(())
    }

    /// Trains until the schedule ends, patience runs out, or the step counter
    /// reaches `stop_at`. `on_eval` is called after each evaluation (used to
    /// write rolling checkpoints).
    pub fn run(&mut self, stop_at: Option<u64>, mut on_eval: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while !self.state.completed {
            let s = self.params.step();
            if stop_at.is_some_and(|limit| s >= limit) {
                break;
            }
            self.step()?;
            let s = s + 1;
            let last = s >= self.schedule.steps;
            if s % self.schedule.eval_every == 0 || last {
                self.evaluate_validation()?;
                if last {
                    self.state.completed = true;
                }
                on_eval(self)?;
            }
        }
        Ok(())
    }

    /// Test-set predictions of the selected parameters, without prior
    /// correction.
    pub fn predict_test(&self) -> Result<Tensor> {
        let params = self.best.as_ref().unwrap_or(self.eval_params());
        match &self.model {
            Model::Phase1(m) => {
                phase1_predict(&self.backbone, &m.bank, params, &self.data.test.features, self.cfg.optim.eval_batch)
            }
            Model::Phase2(m) => weighted_eval_batch(&m.avg, params, &m.test),
        }
    }

    /// Evaluation prior for log-prior correction, if enabled.
    pub fn eval_prior(&self) -> Option<Vec<f64>> {
        let c = &self.cfg.calibration;
        match c.prior_correction {
            PriorCorrection::None => None,
            PriorCorrection::Known => Some(class_distribution(&self.data.test.truth, self.data.classes)),
            PriorCorrection::Explicit => Some(c.eval_prior.clone()),
        }
    }

    pub fn test_metrics(&self) -> Result<Metrics> {
        self.metrics_for(self.predict_test()?)
    }

    /// Metrics of uncorrected test predictions, applying the configured
    /// prior correction first.
    pub fn metrics_for(&self, mut preds: Tensor) -> Result<Metrics> {
        if let Some(q) = self.eval_prior() {
            preds = correct_predictions(&preds, &self.q_train, &q)?;
        }
        let e = &self.cfg.experiment;
        evaluate(&preds, &self.data.test.truth, e.threshold_class, e.target_sens)
    }

    pub fn meta(&self) -> CheckpointMeta {
        let averaging = match &self.model {
            Model::Phase2(p) => Some(p.avg.clone()),
            Model::Phase1(_) => None,
        };
        let bank = match &self.model {
            Model::Phase1(m) => &m.bank,
            Model::Phase2(m) => &m.bank,
        };
        CheckpointMeta {
            kind: self.cfg.model.kind,
            replicate: self.replicate,
            seed: self.seed,
            backbone: self.backbone.clone(),
            heads: if bank.mode() == HeadMode::Bn { self.data.heads } else { bank.num_heads() },
            classes: self.data.classes,
            noise: self.noise.clone(),
            averaging,
            q_train: self.q_train.clone(),
            frozen_checksum: self.frozen_checksum.clone(),
            state: self.state.clone(),
            history: self.history.clone(),
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let frozen = match &self.model {
            Model::Phase2(p) if self.cfg.phase2.cache_in_checkpoint => Some(p.train.clone()),
            _ => None,
        };
        Ok(Checkpoint {
            config_hash: self.cfg.hash(),
            meta: serde_json::to_string(&self.meta())?,
            params: self.params.clone(),
            ema: self.ema.clone(),
            best: self.best.clone(),
            frozen,
        })
    }
}

/// Summary of one finished replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateInfo {
    pub replicate: usize,
    pub seed: u64,
    pub steps: u64,
    pub best_step: u64,
    pub stopped_early: bool,
    pub best_val_score: Option<f64>,
    pub backbone_checksum: String,
    pub heads_checksum: String,
    pub phase2_skipped: Option<usize>,
    pub q_train: Vec<f64>,
    pub q_eval: Option<Vec<f64>>,
    pub test: Metrics,
    pub history: Vec<EvalPoint>,
}

#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub info: ReplicateInfo,
    pub checkpoint: Checkpoint,
    /// Uncorrected test-set predictions of the selected parameters.
    pub test_predictions: Tensor,
}

/// Options that change how a run executes but not what it computes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from `replicate-r/checkpoint.ckpt` under the output directory
    /// when present.
    pub resume: bool,
    /// Interrupt each replicate once its step counter reaches this value.
    pub stop_at: Option<u64>,
    /// Parallel replicate workers; 0 reads `CROWDNET_WORKERS` (default 1).
    pub workers: usize,
}

pub fn worker_count(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    std::env::var("CROWDNET_WORKERS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Trains (or resumes) one replicate. Rolling checkpoints are written to
/// `out/checkpoint.ckpt` after every evaluation when `out` is given.
pub fn train_replicate(
    cfg: &ExperimentConfig,
    data: &Prepared,
    replicate: usize,
    out: Option<&Path>,
    opts: &RunOptions,
) -> Result<ReplicateResult> {
    let ck_path = out.map(|d| d.join(CHECKPOINT_FILE));
    let mut trainer = match &ck_path {
        Some(p) if opts.resume && p.exists() => Trainer::resume(cfg, data, Checkpoint::load(p)?)?,
        _ => Trainer::new(cfg, data, replicate)?,
    };
    trainer.run(opts.stop_at, |t| match &ck_path {
        Some(p) => t.checkpoint()?.save(p),
        None => Ok(()),
    })?;
    let checkpoint = trainer.checkpoint()?;
    if let Some(p) = &ck_path {
        checkpoint.save(p)?;
    }
    let chosen = selected_params(&checkpoint);
    let test_predictions = trainer.predict_test()?;
    let info = ReplicateInfo {
        replicate,
        seed: trainer.seed,
        steps: trainer.step_count(),
        best_step: trainer.state.best_step,
        stopped_early: trainer.state.stopped_early,
        best_val_score: trainer.state.best_score,
        backbone_checksum: chosen.checksum(&["backbone."]),
        heads_checksum: chosen.checksum(&["heads."]),
        phase2_skipped: trainer.phase2_skipped(),
        q_train: trainer.q_train.clone(),
        q_eval: trainer.eval_prior(),
        test: trainer.metrics_for(test_predictions.clone())?,
        history: trainer.history.clone(),
    };
    Ok(ReplicateResult { info, checkpoint, test_predictions })
}

/// Runs replicates `0..R`, in parallel when more than one worker is allowed.
/// Results are in replicate order regardless of scheduling.
pub fn run_replicates(cfg: &ExperimentConfig, data: &Prepared, out: Option<&Path>, opts: &RunOptions) -> Result<Vec<ReplicateResult>> {
    let r = cfg.experiment.replicates;
    let workers = worker_count(opts.workers).min(r);
    let run_one = |i: usize| {
        let dir = out.map(|d| replicate_dir(d, i));
        train_replicate(cfg, data, i, dir.as_deref(), opts)
    };
    if workers <= 1 {
        return (0..r).map(run_one).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<ReplicateResult>>> = (0..r).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= r {
                    break;
                }
                let res = run_one(i);
                results.lock().unwrap()[i] = Some(res);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every replicate ran")).collect()
}
