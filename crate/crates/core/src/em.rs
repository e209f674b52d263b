//! Batch EM for per-annotator confusion matrices and posterior labels.
//!
//! Each annotator `a` has a row-stochastic `θ_a(t, l) = p(report l | truth t)`.
//! The E-step computes per-example posteriors over the true class in log space;
//! the M-step re-estimates every `θ_a` from posterior-weighted label counts with
//! additive smoothing, and the class prior from the mean posterior.
//!
//! With smoothing `α`, the M-step is a MAP update and the quantity that cannot
//! decrease is `log p(labels | θ, prior) + α·Σ_a Σ_{t,l} log θ_a(t, l)`; that is
//! what [`EmState::log_likelihood`] tracks. The raw data term is kept in
//! [`EmState::data_log_likelihood`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{target_distribution, AnnotationSet};
use crate::metrics::argmax;

/// Row-stochastic `K × K` matrix, row = true class, column = reported class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    data: Vec<f64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize, data: Vec<f64>) -> Result<Self> {
        if k < 2 || data.len() != k * k {
            return Err(Error::Dimension(format!("confusion matrix needs {k}×{k} entries, got {}", data.len())));
        }
        let m = Self { k, data };
        m.validate()?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows.len(), rows.concat())
    }

    pub fn identity(k: usize) -> Self {
        Self::symmetric(k, 1.0)
    }

    pub fn uniform(k: usize) -> Self {
        Self { k, data: vec![1.0 / k as f64; k * k] }
    }

    /// Diagonal `r`, off-diagonal `(1 − r)/(K − 1)`. At `r = 1/K` the rows are
    /// exactly uniform.
    pub fn symmetric(k: usize, r: f64) -> Self {
        if r == 1.0 / k as f64 {
            return Self::uniform(k);
        }
        let off = (1.0 - r) / (k - 1) as f64;
        let mut data = vec![off; k * k];
        (0..k).for_each(|t| data[t * k + t] = r);
        Self { k, data }
    }

    pub fn validate(&self) -> Result<()> {
        for t in 0..self.k {
            let row = self.row(t);
            let s: f64 = row.iter().sum();
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("confusion row {t} is not on the simplex: {row:?}")));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.k..(t + 1) * self.k]
    }

    pub fn at(&self, t: usize, l: usize) -> f64 {
        self.data[t * self.k + l]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.k).map(|t| self.row(t).to_vec()).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// `q(l') = Σ_l θ(l, l')·p(l)`.
    pub fn observed(&self, p: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.k];
        for (l, &pl) in p.iter().enumerate() {
            q.iter_mut().zip(self.row(l)).for_each(|(qv, th)| *qv += th * pl);
        }
        q
    }

    /// Conjugates by a class permutation: entry `(σ(t), σ(l))` of the result is
    /// entry `(t, l)` of `self`.
    pub fn permute_classes(&self, sigma: &[usize]) -> Self {
        let k = self.k;
        let mut data = vec![0.0; k * k];
        for t in 0..k {
            for l in 0..k {
                data[sigma[t] * k + sigma[l]] = self.at(t, l);
            }
        }
        Self { k, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Pseudo-count added to every confusion cell in the M-step.
    pub smoothing: f64,
    pub max_iters: usize,
    pub tol: f64,
}

pub const DEFAULT_SMOOTHING: f64 = 0.01;

impl Default for EmConfig {
    fn default() -> Self {
        Self { smoothing: DEFAULT_SMOOTHING, max_iters: 100, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmState {
    pub thetas: Vec<ConfusionMatrix>,
    pub prior: Vec<f64>,
    pub posteriors: Vec<Vec<f64>>,
    /// Penalized objective; `−∞` before the first step.
    pub log_likelihood: f64,
    pub data_log_likelihood: f64,
    pub iteration: usize,
    /// Objective after every step so far.
    pub history: Vec<f64>,
}

pub const INIT_DIAGONAL: f64 = 0.8;

/// Soft-vote posteriors, `0.8`-diagonal confusions and the global label
/// frequencies as prior.
pub fn em_init(set: &AnnotationSet) -> Result<EmState> {
    if set.is_empty() {
        return Err(Error::Contract("EM needs at least one example".into()));
    }
    let k = set.classes();
    let mut posteriors = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        posteriors.push(target_distribution(set.records(i))?);
    }
    let mut prior = vec![0.0; k];
    let mut total = 0.0;
    for r in set.iter() {
        for (p, c) in prior.iter_mut().zip(r.counts()) {
            *p += c;
            total += c;
        }
    }
    prior.iter_mut().for_each(|p| *p /= total);
    Ok(EmState {
        thetas: vec![ConfusionMatrix::symmetric(k, INIT_DIAGONAL); set.annotators()],
        prior,
        posteriors,
        log_likelihood: f64::NEG_INFINITY,
        data_log_likelihood: f64::NEG_INFINITY,
        iteration: 0,
        history: Vec::new(),
    })
}

fn m_step(set: &AnnotationSet, posteriors: &[Vec<f64>], alpha: f64) -> Result<(Vec<ConfusionMatrix>, Vec<f64>)> {
    let k = set.classes();
    let mut counts = vec![vec![0.0; k * k]; set.annotators()];
    for (i, post) in posteriors.iter().enumerate() {
        for r in set.records(i) {
            let c = &mut counts[r.annotator];
            let n = r.counts();
            for (t, &pt) in post.iter().enumerate() {
                if pt == 0.0 {
                    continue;
                }
                for (l, &nl) in n.iter().enumerate() {
                    c[t * k + l] += pt * nl;
                }
            }
        }
    }
    let mut thetas = Vec::with_capacity(counts.len());
    for mut c in counts {
        for t in 0..k {
            let row = &mut c[t * k..(t + 1) * k];
            let total: f64 = row.iter().sum::<f64>() + alpha * k as f64;
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v = (*v + alpha) / total);
            } else {
                row.iter_mut().for_each(|v| *v = 1.0 / k as f64);
            }
        }
        thetas.push(ConfusionMatrix { k, data: c });
    }
    let mut prior = vec![0.0; k];
    for post in posteriors {
        prior.iter_mut().zip(post).for_each(|(a, b)| *a += b);
    }
    prior.iter_mut().for_each(|p| *p /= posteriors.len() as f64);
    Ok((thetas, prior))
}

/// Posteriors under fixed parameters and the data log-likelihood.
fn e_step(set: &AnnotationSet, thetas: &[ConfusionMatrix], prior: &[f64]) -> Result<(Vec<Vec<f64>>, f64)> {
    let k = set.classes();
    let log_prior: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
    let mut posteriors = Vec::with_capacity(set.len());
    let mut ll = 0.0;
    for i in 0..set.len() {
        let mut s = log_prior.clone();
        for r in set.records(i) {
            let th = &thetas[r.annotator];
            let n = r.counts();
            for (t, st) in s.iter_mut().enumerate() {
                for (l, &nl) in n.iter().enumerate() {
                    if nl != 0.0 {
                        *st += nl * th.at(t, l).ln();
                    }
                }
            }
        }
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numeric(format!("example {i} has zero likelihood under every class")));
        }
        let z: f64 = s.iter().map(|v| (v - max).exp()).sum();
        ll += max + z.ln();
        posteriors.push(s.iter().map(|v| (v - max).exp() / z).collect::<Vec<f64>>());
        debug_assert_eq!(posteriors[i].len(), k);
    }
    Ok((posteriors, ll))
}

fn penalty(thetas: &[ConfusionMatrix], alpha: f64) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    alpha * thetas.iter().flat_map(|t| t.data.iter()).map(|v| v.ln()).sum::<f64>()
}

/// One M-step from the current posteriors followed by one E-step.
pub fn em_step(state: &EmState, set: &AnnotationSet, config: &EmConfig) -> Result<EmState> {
    if config.smoothing < 0.0 {
        return Err(Error::Config(format!("EM smoothing must be non-negative, got {}", config.smoothing)));
    }
    let (thetas, prior) = m_step(set, &state.posteriors, config.smoothing)?;
    let (posteriors, data_ll) = e_step(set, &thetas, &prior)?;
    let objective = data_ll + penalty(&thetas, config.smoothing);
    let mut history = state.history.clone();
    history.push(objective);
    Ok(EmState {
        thetas,
        prior,
        posteriors,
        log_likelihood: objective,
        data_log_likelihood: data_ll,
        iteration: state.iteration + 1,
        history,
    })
}

/// Iterates [`em_step`] until the objective gain is at most `tol` or
/// `max_iters` steps have run.
pub fn em_fit(set: &AnnotationSet, config: &EmConfig) -> Result<EmState> {
    let mut state = em_init(set)?;
    for _ in 0..config.max_iters {
        let next = em_step(&state, set, config)?;
        let gain = next.log_likelihood - state.log_likelihood;
        state = next;
        if gain <= config.tol {
            break;
        }
    }
    Ok(state)
}

/// `Σ_t prior(t)·θ(t, t)`.
pub fn reliability(theta: &ConfusionMatrix, prior: &[f64]) -> f64 {
    prior.iter().enumerate().map(|(t, p)| p * theta.at(t, t)).sum()
}

pub fn reliabilities(state: &EmState) -> Vec<f64> {
    state.thetas.iter().map(|t| reliability(t, &state.prior)).collect()
}

pub fn posterior_labels(state: &EmState) -> &[Vec<f64>] {
    &state.posteriors
}

/// Argmax of pooled grade counts per example; ties go to the lowest class.
pub fn majority_vote(set: &AnnotationSet) -> Vec<usize> {
    (0..set.len())
        .map(|i| {
            let mut c = vec![0.0; set.classes()];
            for r in set.records(i) {
                c.iter_mut().zip(r.counts()).for_each(|(a, b)| *a += b);
            }
            argmax(&c)
        })
        .collect()
}
