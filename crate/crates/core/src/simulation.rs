//! Ground-truth-controlled data: uniform label corruption, annotator pools
//! with planted confusion matrices, annotation sampling and Gaussian-cluster
//! features.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Beta, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::em::ConfusionMatrix;
use crate::error::{Error, Result};
use crate::heads::{target_distribution, AnnotationRecord, AnnotationSet};
use crate::metrics::argmax;
use crate::numerics::Tensor;
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub rho: f64,
    pub seed: u64,
    pub classes: usize,
}

/// With probability `rho`, replaces each label by one of the other `K − 1`
/// classes chosen uniformly.
pub fn corrupt_labels(truth: &[usize], plan: &CorruptionPlan) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&plan.rho) {
        return Err(Error::Contract(format!("flip probability {} outside [0, 1]", plan.rho)));
    }
    let k = plan.classes;
    if k < 2 {
        return Err(Error::Contract("need at least two classes".into()));
    }
    let mut r = rng::stream(plan.seed, &[domain::CORRUPT]);
    truth
        .iter()
        .map(|&t| {
            if t >= k {
                return Err(Error::Contract(format!("label {} outside 1..={k}", t + 1)));
            }
            if r.random_bool(plan.rho) {
                let o = r.random_range(0..k - 1);
                Ok(if o >= t { o + 1 } else { o })
            } else {
                Ok(t)
            }
        })
        .collect()
}

/// How planted confusion matrices are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "recipe", rename_all = "kebab-case")]
pub enum PoolRecipe {
    Identity,
    /// Every annotator symmetric with the same diagonal.
    Symmetric { reliability: f64 },
    /// Symmetric, diagonals evenly spaced from `low` (annotator 0) to `high`.
    SymmetricRange { low: f64, high: f64 },
    /// Symmetric, diagonals drawn uniformly from `[low, high]`.
    UniformDiagonal { low: f64, high: f64 },
    /// Symmetric, diagonals `low + (high − low)·Beta(a, b)`.
    BetaDiagonal { a: f64, b: f64, low: f64, high: f64 },
    /// Diagonals evenly spaced from `low` to `high`; the error mass goes to
    /// adjacent grades in proportion `decay^(|l − t| − 1)`.
    OrdinalRange { low: f64, high: f64, decay: f64 },
    Explicit { matrices: Vec<ConfusionMatrix> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub annotators: usize,
    pub classes: usize,
    pub recipe: PoolRecipe,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorPool {
    pub classes: usize,
    pub thetas: Vec<ConfusionMatrix>,
}

fn check_unit(v: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{what} {v} outside [0, 1]")));
    }
    Ok(())
}

fn ordinal(k: usize, r: f64, decay: f64) -> Result<ConfusionMatrix> {
    let mut rows = Vec::with_capacity(k);
    for t in 0..k {
        let w: Vec<f64> = (0..k)
            .map(|l| if l == t { 0.0 } else { decay.powi(l.abs_diff(t) as i32 - 1) })
            .collect();
        let s: f64 = w.iter().sum();
        let mut row: Vec<f64> = w.iter().map(|v| (1.0 - r) * v / s).collect();
        row[t] = r;
        rows.push(row);
    }
    ConfusionMatrix::from_rows(&rows)
}

fn spaced(low: f64, high: f64, a: usize, i: usize) -> f64 {
    if a == 1 {
        (low + high) / 2.0
    } else {
        low + (high - low) * i as f64 / (a - 1) as f64
    }
}

pub fn make_pool(spec: &PoolSpec) -> Result<AnnotatorPool> {
    let (a, k) = (spec.annotators, spec.classes);
    if a == 0 || k < 2 {
        return Err(Error::Config("pool needs at least one annotator and two classes".into()));
    }
    let mut r = rng::stream(spec.seed, &[domain::POOL]);
    let thetas = match &spec.recipe {
        PoolRecipe::Identity => vec![ConfusionMatrix::identity(k); a],
        PoolRecipe::Symmetric { reliability } => {
            check_unit(*reliability, "reliability")?;
            vec![ConfusionMatrix::symmetric(k, *reliability); a]
        }
        PoolRecipe::SymmetricRange { low, high } => {
            check_unit(*low, "low")?;
            check_unit(*high, "high")?;
            (0..a).map(|i| ConfusionMatrix::symmetric(k, spaced(*low, *high, a, i))).collect()
        }
        PoolRecipe::UniformDiagonal { low, high } => {
            check_unit(*low, "low")?;
            check_unit(*high, "high")?;
            if low > high {
                return Err(Error::Config("low above high".into()));
            }
            (0..a).map(|_| ConfusionMatrix::symmetric(k, r.random_range(*low..=*high))).collect()
        }
        PoolRecipe::BetaDiagonal { a: alpha, b: beta, low, high } => {
            check_unit(*low, "low")?;
            check_unit(*high, "high")?;
            let d = Beta::new(*alpha, *beta).map_err(|e| Error::Config(format!("beta recipe: {e}")))?;
            (0..a).map(|_| ConfusionMatrix::symmetric(k, low + (high - low) * d.sample(&mut r))).collect()
        }
        PoolRecipe::OrdinalRange { low, high, decay } => {
            check_unit(*low, "low")?;
            check_unit(*high, "high")?;
            if !(*decay > 0.0) {
                return Err(Error::Config("ordinal decay must be positive".into()));
            }
            (0..a).map(|i| ordinal(k, spaced(*low, *high, a, i), *decay)).collect::<Result<_>>()?
        }
        PoolRecipe::Explicit { matrices } => {
            if matrices.len() != a {
                return Err(Error::Config(format!("{} explicit matrices for {a} annotators", matrices.len())));
            }
            for m in matrices {
                if m.classes() != k {
                    return Err(Error::Config("explicit matrix has the wrong number of classes".into()));
                }
                m.validate()?;
            }
            matrices.clone()
        }
    };
    Ok(AnnotatorPool { classes: k, thetas })
}

/// Sampling plan for [`annotate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPlan {
    /// Distinct annotators per example.
    pub per_example: usize,
    /// Relative selection weights; empty means uniform.
    #[serde(default)]
    pub coverage: Vec<f64>,
    /// Chance that a record receives a second grade from the same annotator.
    #[serde(default)]
    pub repeat_prob: f64,
    pub seed: u64,
}

/// Draws `per_example` distinct annotators per example (weighted by coverage,
/// without replacement); each reports a label from its confusion row for the
/// true class.
pub fn annotate(pool: &AnnotatorPool, truth: &[usize], plan: &AnnotationPlan) -> Result<AnnotationSet> {
    let a = pool.thetas.len();
    let k = pool.classes;
    let m = plan.per_example;
    if m == 0 || m > a {
        return Err(Error::Config(format!("labels per example {m} outside 1..={a}")));
    }
    let coverage = if plan.coverage.is_empty() { vec![1.0; a] } else { plan.coverage.clone() };
    if coverage.len() != a || coverage.iter().any(|&c| !(c >= 0.0) || !c.is_finite()) {
        return Err(Error::Config("coverage needs one non-negative weight per annotator".into()));
    }
    if coverage.iter().filter(|&&c| c > 0.0).count() < m {
        return Err(Error::Config(format!("fewer than {m} annotators have positive coverage")));
    }
    check_unit(plan.repeat_prob, "repeat probability")?;
    let rows: Vec<Vec<WeightedIndex<f64>>> = pool
        .thetas
        .iter()
        .map(|th| {
            (0..k)
                .map(|t| WeightedIndex::new(th.row(t)).map_err(|e| Error::Config(format!("confusion row: {e}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let ids: Vec<usize> = (0..a).collect();
    let mut by_example = Vec::with_capacity(truth.len());
    for (i, &t) in truth.iter().enumerate() {
        if t >= k {
            return Err(Error::Contract(format!("truth {} outside 1..={k}", t + 1)));
        }
        let mut r = rng::stream(plan.seed, &[domain::ANNOTATE, i as u64]);
        let chosen: Vec<usize> = ids
            .choose_multiple_weighted(&mut r, m, |&j| coverage[j])
            .map_err(|e| Error::Config(format!("coverage: {e}")))?
            .copied()
            .collect();
        let mut recs = Vec::with_capacity(m);
        for j in chosen {
            let mut grades = vec![rows[j][t].sample(&mut r)];
            if plan.repeat_prob > 0.0 && r.random_bool(plan.repeat_prob) {
                grades.push(rows[j][t].sample(&mut r));
            }
            recs.push(AnnotationRecord::from_grades(i, j, &grades, k)?);
        }
        by_example.push(recs);
    }
    AnnotationSet::new(k, a, by_example)
}

/// Inter-annotator agreement on argmax labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    /// `[a][b]` = (agreements, co-labeled examples) for `a < b`.
    pub pairwise: Vec<Vec<(u64, u64)>>,
    /// Agreements over all co-labeled pairs divided by their number.
    pub pooled: Option<f64>,
    /// Per annotator, agreement with the argmax of the example's mean opinion.
    pub vs_mean: Vec<Option<f64>>,
}

pub fn agreement_stats(set: &AnnotationSet) -> Result<AgreementStats> {
    let a = set.annotators();
    let mut pairwise = vec![vec![(0u64, 0u64); a]; a];
    let mut vs = vec![(0u64, 0u64); a];
    for i in 0..set.len() {
        let recs = set.records(i);
        if recs.is_empty() {
            continue;
        }
        let labels: Vec<(usize, usize)> = recs.iter().map(|r| (r.annotator, argmax(&r.distribution))).collect();
        for (x, &(ax, lx)) in labels.iter().enumerate() {
            for &(ay, ly) in &labels[x + 1..] {
                let (lo, hi) = (ax.min(ay), ax.max(ay));
                pairwise[lo][hi].1 += 1;
                if lx == ly {
                    pairwise[lo][hi].0 += 1;
                }
            }
        }
        let mean = argmax(&target_distribution(recs)?);
        for &(ax, lx) in &labels {
            vs[ax].1 += 1;
            if lx == mean {
                vs[ax].0 += 1;
            }
        }
    }
    let (agree, total) = pairwise.iter().flatten().fold((0, 0), |(s, n), &(x, y)| (s + x, n + y));
    Ok(AgreementStats {
        pairwise,
        pooled: (total > 0).then(|| agree as f64 / total as f64),
        vs_mean: vs.iter().map(|&(x, n)| (n > 0).then(|| x as f64 / n as f64)).collect(),
    })
}

/// Gaussian clusters: class means are `separation · N(0, I)` draws and
/// features are mean plus unit Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub dim: usize,
    pub separation: f64,
}

pub fn class_means(spec: &FeatureSpec, classes: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[domain::FEATURES, 0]);
    let data = (0..classes * spec.dim).map(|_| spec.separation * r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(&[classes, spec.dim], data).expect("class means shape")
}

/// Features for the given classes. `stream` distinguishes independent draws
/// (e.g. train and shifted evaluation sets) that share class means.
pub fn sample_features(means: &Tensor, truth: &[usize], seed: u64, stream: u64) -> Result<Tensor> {
    let d = means.row_len();
    let mut r = rng::stream(seed, &[domain::FEATURES, 1, stream]);
    let mut data = Vec::with_capacity(truth.len() * d);
    for &t in truth {
        if t >= means.rows() {
            return Err(Error::Contract(format!("class {} outside 1..={}", t + 1, means.rows())));
        }
        data.extend(means.row(t).iter().map(|mu| mu + r.sample::<f64, _>(StandardNormal)));
    }
    Tensor::new(&[truth.len(), d], data)
}

pub fn sample_truth(n: usize, prior: &[f64], seed: u64, stream: u64) -> Result<Vec<usize>> {
    let w = WeightedIndex::new(prior).map_err(|e| Error::Config(format!("class prior: {e}")))?;
    let mut r = rng::stream(seed, &[domain::TRUTH, stream]);
    Ok((0..n).map(|_| w.sample(&mut r)).collect())
}

/// Everything needed to generate a synthetic multi-annotator dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub examples: usize,
    pub classes: usize,
    /// Class prior of the truth; empty means uniform.
    #[serde(default)]
    pub prior: Vec<f64>,
    pub features: FeatureSpec,
    pub pool: PoolSpec,
    pub annotation: AnnotationPlan,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub features: Tensor,
    pub truth: Vec<usize>,
    pub annotations: AnnotationSet,
    pub pool: AnnotatorPool,
    pub means: Tensor,
}

pub fn simulate_dataset(spec: &SimulationSpec) -> Result<SimulatedDataset> {
    if spec.pool.classes != spec.classes {
        return Err(Error::Config("pool and dataset disagree on the number of classes".into()));
    }
    let prior = if spec.prior.is_empty() { vec![1.0; spec.classes] } else { spec.prior.clone() };
    if prior.len() != spec.classes {
        return Err(Error::Config("class prior has the wrong length".into()));
    }
    let truth = sample_truth(spec.examples, &prior, spec.seed, 0)?;
    let means = class_means(&spec.features, spec.classes, spec.seed);
    let features = sample_features(&means, &truth, spec.seed, 0)?;
    let pool = make_pool(&spec.pool)?;
    let annotations = annotate(&pool, &truth, &spec.annotation)?;
    Ok(SimulatedDataset { features, truth, annotations, pool, means })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(recipe: PoolRecipe, a: usize, k: usize) -> AnnotatorPool {
        make_pool(&PoolSpec { annotators: a, classes: k, recipe, seed: 1 }).unwrap()
    }

    fn plan(m: usize, seed: u64) -> AnnotationPlan {
        AnnotationPlan { per_example: m, coverage: vec![], repeat_prob: 0.0, seed }
    }

    #[test]
    fn corruption_extremes() {
        let truth: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        let p = |rho| CorruptionPlan { rho, seed: 3, classes: 10 };
        assert_eq!(corrupt_labels(&truth, &p(0.0)).unwrap(), truth);
        let all = corrupt_labels(&truth, &p(1.0)).unwrap();
        assert!(all.iter().zip(&truth).all(|(a, b)| a != b && *a < 10));
        assert!(corrupt_labels(&truth, &p(1.5)).is_err());
        assert_eq!(corrupt_labels(&truth, &p(0.5)).unwrap(), corrupt_labels(&truth, &p(0.5)).unwrap());
    }

    #[test]
    fn corruption_statistics() {
        let n = 100_000;
        let truth: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let out = corrupt_labels(&truth, &CorruptionPlan { rho: 0.5, seed: 11, classes: 10 }).unwrap();
        let flips = out.iter().zip(&truth).filter(|(a, b)| a != b).count();
        let sd = (n as f64 * 0.25).sqrt();
        assert!((flips as f64 - n as f64 * 0.5).abs() < 3.0 * sd, "{flips}");
        // offsets (o − t) mod K of flipped labels are uniform over 1..=9
        let mut c = [0.0f64; 9];
        for (o, t) in out.iter().zip(&truth) {
            if o != t {
                c[(o + 10 - t) % 10 - 1] += 1.0;
            }
        }
        let e = flips as f64 / 9.0;
        let chi2: f64 = c.iter().map(|x| (x - e).powi(2) / e).sum();
        // chi-square 0.99 quantile with 8 degrees of freedom
        assert!(chi2 < 20.09, "{chi2}");
    }

    #[test]
    fn pool_recipes() {
        assert!(pool(PoolRecipe::Identity, 3, 4).thetas.iter().all(|t| *t == ConfusionMatrix::identity(4)));
        let p = pool(PoolRecipe::Symmetric { reliability: 0.6 }, 2, 5);
        let sym = crate::noise::symmetric_theta_from_reliability(&[0.6], 5).unwrap().theta_for(0).unwrap();
        assert!(p.thetas.iter().all(|t| *t == sym));
        let p = pool(PoolRecipe::SymmetricRange { low: 0.55, high: 0.95 }, 5, 5);
        assert!((p.thetas[0].at(0, 0) - 0.55).abs() < 1e-15 && (p.thetas[4].at(1, 1) - 0.95).abs() < 1e-15);
        let p = pool(PoolRecipe::OrdinalRange { low: 0.6, high: 0.6, decay: 0.5 }, 1, 5);
        // row 0: errors 1, .5, .25, .125 of 0.4
        assert!((p.thetas[0].at(0, 1) - 0.4 / 1.875).abs() < 1e-15);
        assert!((p.thetas[0].at(2, 1) - p.thetas[0].at(2, 3)).abs() < 1e-15);
        assert!(make_pool(&PoolSpec { annotators: 2, classes: 3, recipe: PoolRecipe::Symmetric { reliability: 1.2 }, seed: 0 }).is_err());
    }

    #[test]
    fn beta_recipe_mean() {
        let a = 4000;
        let p = pool(PoolRecipe::BetaDiagonal { a: 2.0, b: 5.0, low: 0.5, high: 1.0 }, a, 3);
        let d: Vec<f64> = p.thetas.iter().map(|t| t.at(0, 0)).collect();
        let mean = d.iter().sum::<f64>() / a as f64;
        let expect = 0.5 + 0.5 * 2.0 / 7.0;
        let var_beta = 2.0 * 5.0 / (49.0 * 8.0);
        let sd = 0.5 * (var_beta / a as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * sd, "{mean} vs {expect}");
    }

    #[test]
    fn identity_pool_annotations() {
        let truth: Vec<usize> = (0..50).map(|i| i % 4).collect();
        let p = pool(PoolRecipe::Identity, 4, 4);
        let s = annotate(&p, &truth, &plan(4, 2)).unwrap();
        for i in 0..50 {
            assert_eq!(s.records(i).len(), 4);
            assert!(s.records(i).iter().all(|r| argmax(&r.distribution) == truth[i] && r.distribution[truth[i]] == 1.0));
        }
        let st = agreement_stats(&s).unwrap();
        assert_eq!(st.pooled, Some(1.0));
    }

    #[test]
    fn annotators_distinct_and_repeat_opt_in() {
        let truth: Vec<usize> = (0..500).map(|i| i % 3).collect();
        let p = pool(PoolRecipe::Symmetric { reliability: 0.7 }, 6, 3);
        let s = annotate(&p, &truth, &plan(3, 4)).unwrap();
        assert!(s.iter().all(|r| r.grade_count == 1));
        let rp = AnnotationPlan { repeat_prob: 0.5, ..plan(3, 4) };
        let s = annotate(&p, &truth, &rp).unwrap();
        let repeats = s.iter().filter(|r| r.grade_count == 2).count();
        assert!(repeats > 600 && repeats < 900, "{repeats}");
        assert!(annotate(&p, &truth, &plan(7, 0)).is_err());
        let zero = AnnotationPlan { coverage: vec![0.0; 6], ..plan(1, 0) };
        assert!(annotate(&p, &truth, &zero).is_err());
    }

    #[test]
    fn coverage_weights_respected() {
        let truth = vec![0usize; 4000];
        let p = pool(PoolRecipe::Identity, 3, 2);
        let cov = AnnotationPlan { coverage: vec![1.0, 3.0, 0.0], ..plan(1, 5) };
        let s = annotate(&p, &truth, &cov).unwrap();
        let c = s.label_counts();
        assert_eq!(c[2], 0);
        assert!((c[1] as f64 / 4000.0 - 0.75).abs() < 0.03, "{c:?}");
    }

    #[test]
    fn empirical_confusion_matches_planted() {
        let n = 20000;
        let truth = sample_truth(n, &[1.0; 5], 6, 0).unwrap();
        let p = pool(PoolRecipe::UniformDiagonal { low: 0.5, high: 0.9 }, 10, 5);
        let s = annotate(&p, &truth, &plan(3, 7)).unwrap();
        let mut counts = vec![vec![0.0; 25]; 10];
        for i in 0..n {
            for r in s.records(i) {
                counts[r.annotator][truth[i] * 5 + argmax(&r.distribution)] += 1.0;
            }
        }
        for (j, c) in counts.iter().enumerate() {
            let total: f64 = c.iter().sum();
            assert!(total >= 2000.0);
            for t in 0..5 {
                let row: f64 = c[t * 5..(t + 1) * 5].iter().sum();
                for l in 0..5 {
                    assert!((c[t * 5 + l] / row - p.thetas[j].at(t, l)).abs() < 0.05);
                }
            }
        }
    }

    #[test]
    fn random_annotators_agree_at_chance() {
        let truth = sample_truth(20000, &[1.0; 4], 8, 0).unwrap();
        let p = pool(PoolRecipe::Symmetric { reliability: 0.25 }, 5, 4);
        let s = annotate(&p, &truth, &plan(2, 9)).unwrap();
        let st = agreement_stats(&s).unwrap();
        assert!((st.pooled.unwrap() - 0.25).abs() < 0.02);
    }

    #[test]
    fn agreement_matches_direct_count() {
        let truth = sample_truth(300, &[1.0; 3], 10, 0).unwrap();
        let p = pool(PoolRecipe::SymmetricRange { low: 0.4, high: 0.9 }, 4, 3);
        let s = annotate(&p, &truth, &plan(3, 11)).unwrap();
        let st = agreement_stats(&s).unwrap();
        for x in 0..4 {
            for y in x + 1..4 {
                let (mut ag, mut co) = (0, 0);
                for i in 0..s.len() {
                    let lx = s.records(i).iter().find(|r| r.annotator == x);
                    let ly = s.records(i).iter().find(|r| r.annotator == y);
                    if let (Some(a), Some(b)) = (lx, ly) {
                        co += 1;
                        if argmax(&a.distribution) == argmax(&b.distribution) {
                            ag += 1;
                        }
                    }
                }
                assert_eq!(st.pairwise[x][y], (ag, co));
            }
        }
    }

    #[test]
    fn simulation_is_reproducible() {
        let spec = SimulationSpec {
            examples: 200,
            classes: 3,
            prior: vec![],
            features: FeatureSpec { dim: 4, separation: 1.0 },
            pool: PoolSpec { annotators: 5, classes: 3, recipe: PoolRecipe::UniformDiagonal { low: 0.5, high: 0.9 }, seed: 1 },
            annotation: plan(2, 2),
            seed: 3,
        };
        let a = simulate_dataset(&spec).unwrap();
        let b = simulate_dataset(&spec).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.annotations, b.annotations);
    }
}
