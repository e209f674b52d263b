//! Acceptance checks. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero if any criterion fails.
//!
//! `CROWDNET_ACCEPTANCE=1,3,7` runs a subset. The MNIST criterion reads the
//! IDX files from `MNIST_DIR` (default `data/mnist` at the workspace root);
//! `CROWDNET_SKIP_MNIST=1` skips it explicitly.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crowdnet_core::backbone::BackboneSpec;
use crowdnet_core::em::{em_fit, majority_vote, ConfusionMatrix, EmConfig};
use crowdnet_core::harness::config::{ExperimentConfig, SplitMode};
use crowdnet_core::harness::data::{
    annotations_to_jsonl, features_to_text, labels_bytes, read_labels, write_file, Dataset, IngestSummary, LabelFormat,
    LabelTable,
};
use crowdnet_core::harness::report::{run_experiment, METRICS_FILE};
use crowdnet_core::harness::train::{
    prepare, replicate_dir, train_replicate, Prepared, RunOptions, Trainer, CHECKPOINT_FILE, FROZEN_PREFIXES,
};
use crowdnet_core::heads::{bn_loss, bn_loss_grad, dn_loss, dn_loss_grad, AnnotationRecord, HeadBank, LossOptions, HEAD_BIAS, HEAD_WEIGHTS};
use crowdnet_core::metrics::{binary_collapse, kclass_error, mutual_info_noisy, equivalent_clean_count, roc_auc, spec_at_sens};
use crowdnet_core::noise::{noise_adapted_loss, noise_adapted_loss_grad};
use crowdnet_core::numerics::loss::entropy_penalty_grad;
use crowdnet_core::numerics::{confidence_penalty, cross_entropy, grad_check, softmax, softmax_vec, ParamGroup, ParamSet, Tensor};
use crowdnet_core::rng;
use crowdnet_core::simulation::{
    annotate, corrupt_labels, make_pool, sample_features, sample_truth, simulate_dataset, AnnotationPlan, CorruptionPlan,
    FeatureSpec, PoolRecipe, PoolSpec, SimulationSpec,
};
use crowdnet_core::weighting::{
    phase2_batch_loss_grad, Averaging, FrozenExample, FrozenPredictions, TargetMode, WeightingMode,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn main() {
    let only: Option<Vec<usize>> = std::env::var("CROWDNET_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "mutual information", c1_mutual_information),
        (2, "MNIST noisy-teacher trend", c2_mnist),
        (3, "gradient integrity", c3_gradients),
        (4, "freeze and masking contracts", c4_contracts),
        (5, "EM recovery", c5_em),
        (6, "model ladder", c6_ladder),
        (7, "noise-model reductions", c7_noise_reductions),
        (8, "log prior correction", c8_prior_correction),
        (9, "metric oracles", c9_metrics),
        (10, "determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if detail.starts_with("skipped") {
            println!("SKIP criterion {n} ({name}): {detail}");
            continue;
        }
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("{tag} criterion {n} ({name}): {detail} [{:.1}s]", t.elapsed().as_secs_f64());
        if !ok {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn se(v: &[f64]) -> f64 {
    let m = mean(v);
    let n = v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) / n).sqrt()
}

fn simplex(r: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| r.random_range(0.02..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_theta(r: &mut ChaCha8Rng, k: usize) -> ConfusionMatrix {
    let rows: Vec<Vec<f64>> = (0..k).map(|_| simplex(r, k)).collect();
    ConfusionMatrix::from_rows(&rows).unwrap()
}

// ---------------------------------------------------------------- 1

fn c1_mutual_information() -> Outcome {
    let noisy = mutual_info_noisy(10, 0.2).unwrap();
    let perfect = mutual_info_noisy(10, 1.0).unwrap();
    // the published count uses the informations rounded to 0.044 and 2.3
    let eq = equivalent_clean_count(60000, 0.044, 2.3).unwrap();
    let ok = (noisy - 0.0444).abs() <= 1e-3 && (perfect - 2.3026).abs() <= 1e-4 && eq.abs_diff(1148) <= 1;
    (ok, format!("mi(10,0.2)={noisy:.5} mi(10,1)={perfect:.5} equivalent={eq}"))
}

// ---------------------------------------------------------------- 2

const MNIST_BUDGET_SECS: f64 = 1800.0;

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn mnist_config(dir: &Path, labels: &Path) -> ExperimentConfig {
    let cfg = format!(
        r#"
[model]
kind = "bn"
[backbone]
kind = "smallconv"
height = 28
width = 28
channels = 1
[optim]
lr = 0.001
batch_size = 64
steps = 6000
eval_every = 1000
[data]
classes = 10
features = "{}"
labels = "{}"
split = "holdout"
test_features = "{}"
test_truth = "{}"
[experiment]
seed = 1
threshold_class = 6
"#,
        dir.join("train-images-idx3-ubyte").display(),
        labels.display(),
        dir.join("t10k-images-idx3-ubyte").display(),
        dir.join("t10k-labels-idx1-ubyte").display(),
    );
    ExperimentConfig::from_toml(&cfg).unwrap()
}

fn c2_mnist() -> Outcome {
    if std::env::var("CROWDNET_SKIP_MNIST").is_ok_and(|v| v == "1") {
        return (true, "skipped by CROWDNET_SKIP_MNIST=1".into());
    }
    let dir = mnist_dir();
    let train_labels = dir.join("train-labels-idx1-ubyte");
    if !train_labels.exists() {
        return (false, format!("MNIST not found in {} (run scripts/fetch-mnist.sh)", dir.display()));
    }
    let tmp = tempfile::tempdir().unwrap();
    let clean = read_labels(&train_labels, 10).unwrap();
    let mut errs = Vec::new();
    let mut worst_time: f64 = 0.0;
    for rho in [0.0, 0.5, 0.8, 0.95] {
        let t = Instant::now();
        let mut table = clean.clone();
        table.classes = corrupt_labels(&clean.classes, &CorruptionPlan { rho, seed: 1, classes: 10 }).unwrap();
        let path = tmp.path().join(format!("labels-{rho}.idx"));
        write_file(&path, &labels_bytes(&table).unwrap()).unwrap();
        let cfg = mnist_config(&dir, &path);
        let data = prepare(&cfg).unwrap();
        let res = train_replicate(&cfg, &data, 0, None, &RunOptions::default()).unwrap();
        errs.push(res.info.test.kclass_error);
        worst_time = worst_time.max(t.elapsed().as_secs_f64());
        eprintln!("  mnist rho={rho}: test error {:.4} ({:.0}s)", res.info.test.kclass_error, t.elapsed().as_secs_f64());
    }
    let ok = errs[0] <= 0.02
        && errs[1] <= 0.045
        && errs[2] <= 0.13
        && errs[3] >= 5.0 * errs[1]
        && worst_time <= MNIST_BUDGET_SECS;
    (
        ok,
        format!(
            "errors clean={:.4} rho0.5={:.4} rho0.8={:.4} rho0.95={:.4} (ratio {:.1}x); slowest run {worst_time:.0}s",
            errs[0],
            errs[1],
            errs[2],
            errs[3],
            errs[3] / errs[1]
        ),
    )
}

// ---------------------------------------------------------------- 3

const GRAD_TOL: f64 = 1e-4;
const INSTANCES: u64 = 5;

fn mlp_setup(seed: u64, bank: &HeadBank) -> (BackboneSpec, ParamSet, Tensor) {
    let spec = BackboneSpec::Mlp { input: 4, hidden: vec![bank.hidden()] };
    let mut ps = ParamSet::new();
    let mut r = rng::stream(seed, &[77]);
    spec.init_params(&mut ps, ParamGroup::default(), &mut r);
    bank.init_params(&mut ps, ParamGroup::default(), &mut r);
    let x = random_tensor(&mut r, &[3, 4]);
    (spec, ps, x)
}

fn heads_loss<F>(spec: &BackboneSpec, bank: &HeadBank, p: &mut ParamSet, x: &Tensor, mut row_loss: F) -> crowdnet_core::Result<f64>
where
    F: FnMut(usize, &[f64], &mut [f64]) -> crowdnet_core::Result<f64>,
{
    let (h, cache) = spec.forward_train(p, x, 1.0, &mut rng::stream(0, &[]))?;
    let logits = bank.logits(p, &h)?;
    let mut d = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for i in 0..logits.rows() {
        total += row_loss(i, logits.row(i), d.row_mut(i))?;
    }
    let dh = bank.backward(p, &h, &d)?;
    spec.backward(p, &cache, &dh)?;
    Ok(total)
}

fn frozen_example(r: &mut ChaCha8Rng, heads: usize, classes: usize, hidden: usize) -> FrozenExample {
    let n_lab = r.random_range(1..heads);
    let mut labelers: Vec<usize> = rand::seq::index::sample(r, heads, n_lab).into_vec();
    labelers.sort_unstable();
    let probs: Vec<f64> = (0..heads).flat_map(|_| simplex(r, classes)).collect();
    FrozenExample {
        probs: Tensor::new(&[heads, classes], probs).unwrap(),
        hidden: (0..hidden).map(|_| r.random_range(-1.0..1.0)).collect(),
        labelers,
        target: simplex(r, classes),
    }
}

fn c3_gradients() -> Outcome {
    let mut worst = vec![0.0f64; 7];
    let names = ["bn_loss", "dn_loss", "phase2 wdn", "phase2 iwdn", "phase2 biwdn", "noise_adapted_loss", "confidence penalty"];
    for s in 0..INSTANCES {
        let mut r = rng::stream(s, &[1234]);

        // bn: backbone + single head, soft targets
        let bank = HeadBank::bn(5, 4);
        let (spec, mut ps, x) = mlp_setup(s, &bank);
        let targets: Vec<Vec<f64>> = (0..3).map(|_| simplex(&mut r, 4)).collect();
        let e = grad_check(
            &mut ps,
            |p| heads_loss(&spec, &bank, p, &x, |i, z, d| bn_loss_grad(z, &targets[i], &LossOptions::default(), d)),
            1e-5,
            s,
        )
        .unwrap();
        worst[0] = worst[0].max(e);
        // the fused gradient path reports the same value as the plain loss
        let h = spec.forward(&ps, &x).unwrap();
        let direct: f64 = (0..3).map(|i| bn_loss(&bank, &ps, &Tensor::vector(h.row(i).to_vec()), &targets[i]).unwrap()).sum();
        let fused = heads_loss(&spec, &bank, &mut ps.clone(), &x, |i, z, d| bn_loss_grad(z, &targets[i], &LossOptions::default(), d)).unwrap();
        assert!((direct - fused).abs() < 1e-12);

        // dn: backbone + five heads, masked records
        let bank = HeadBank::dn(5, 4, vec![0, 1, 2, 3, 4]).unwrap();
        let (spec, mut ps, x) = mlp_setup(s + 100, &bank);
        let recs: Vec<Vec<AnnotationRecord>> = (0..3)
            .map(|i| {
                let who = rand::seq::index::sample(&mut r, 5, 2).into_vec();
                who.into_iter()
                    .map(|a| AnnotationRecord { example: i, annotator: a, distribution: simplex(&mut r, 4), grade_count: 1 })
                    .collect()
            })
            .collect();
        let e = grad_check(
            &mut ps,
            |p| {
                heads_loss(&spec, &bank, p, &x, |i, z, d| {
                    let refs: Vec<&AnnotationRecord> = recs[i].iter().collect();
                    dn_loss_grad(&bank, z, &refs, &LossOptions::default(), d)
                })
            },
            1e-5,
            s,
        )
        .unwrap();
        worst[1] = worst[1].max(e);
        let h = spec.forward(&ps, &x).unwrap();
        let refs: Vec<&AnnotationRecord> = recs[0].iter().collect();
        let direct = dn_loss(&bank, &ps, &Tensor::vector(h.row(0).to_vec()), &refs).unwrap();
        assert!(direct.is_finite());

        // phase 2, each weighting mode
        for (m, mode) in [WeightingMode::Wdn, WeightingMode::Iwdn, WeightingMode::Biwdn].into_iter().enumerate() {
            let avg = Averaging::new(mode, 6, 4);
            let mut ps = ParamSet::new();
            avg.init_params(&mut ps, ParamGroup::default(), &mut r);
            // move away from the uniform start
            for name in avg.param_names() {
                ps.value_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.5..0.5));
            }
            let frozen = FrozenPredictions {
                heads: 6,
                classes: 3,
                hidden: 4,
                examples: (0..4).map(|_| frozen_example(&mut r, 6, 3, 4)).collect(),
            };
            let e = grad_check(
                &mut ps,
                |p| Ok(phase2_batch_loss_grad(&avg, p, &frozen, &[0, 1, 2, 3], TargetMode::Labels, &LossOptions::default())?.0),
                1e-5,
                s,
            )
            .unwrap();
            worst[2 + m] = worst[2 + m].max(e);
        }

        // noise-adapted loss on raw logits
        let k = 5;
        let theta = random_theta(&mut r, k);
        let label = simplex(&mut r, k);
        let mut ps = ParamSet::new();
        ps.insert("z", random_tensor(&mut r, &[k]), ParamGroup::default());
        let e = grad_check(
            &mut ps,
            |p| {
                let z = p.value("z")?.clone();
                let mut dz = vec![0.0; k];
                let l = noise_adapted_loss_grad(z.data(), &label, &theta, &LossOptions::default(), &mut dz)?;
                p.accumulate_grad("z", &Tensor::vector(dz))?;
                Ok(l)
            },
            1e-5,
            s,
        )
        .unwrap();
        worst[5] = worst[5].max(e);
        let z = ps.value("z").unwrap().clone();
        let mut scratch = vec![0.0; k];
        let fused = noise_adapted_loss_grad(z.data(), &label, &theta, &LossOptions::default(), &mut scratch).unwrap();
        assert!((fused - noise_adapted_loss(&softmax_vec(z.data()).unwrap(), &label, &theta).unwrap()).abs() < 1e-12);

        // confidence penalty on a batch of logits
        let beta = r.random_range(0.05..1.0);
        let mut ps = ParamSet::new();
        ps.insert("z", random_tensor(&mut r, &[3, k]), ParamGroup::default());
        let e = grad_check(
            &mut ps,
            |p| {
                let z = p.value("z")?.clone();
                let mut dz = Tensor::zeros(z.shape());
                let mut l = 0.0;
                for i in 0..3 {
                    l += entropy_penalty_grad(&softmax_vec(z.row(i))?, beta, dz.row_mut(i));
                }
                p.accumulate_grad("z", &dz)?;
                Ok(l)
            },
            1e-5,
            s,
        )
        .unwrap();
        worst[6] = worst[6].max(e);
        let z = ps.value("z").unwrap().clone();
        let mut scratch = vec![0.0; k];
        let fused: f64 = (0..3).map(|i| entropy_penalty_grad(&softmax_vec(z.row(i)).unwrap(), beta, &mut scratch)).sum();
        assert!((fused - confidence_penalty(&softmax(&z).unwrap(), beta).unwrap()).abs() < 1e-12);
    }
    let ok = worst.iter().all(|&e| e < GRAD_TOL);
    let detail: Vec<String> = names.iter().zip(&worst).map(|(n, e)| format!("{n}={e:.1e}")).collect();
    (ok, format!("max relative error over {INSTANCES} instances each: {}", detail.join(", ")))
}

// ---------------------------------------------------------------- 4

fn synthetic(seed: u64, n: usize, dim: usize, sep: f64, recipe: PoolRecipe, coverage: Vec<f64>, test: Option<(usize, Vec<f64>)>) -> Prepared {
    let spec = SimulationSpec {
        examples: n,
        classes: 5,
        prior: vec![],
        features: FeatureSpec { dim, separation: sep },
        pool: PoolSpec { annotators: 10, classes: 5, recipe, seed },
        annotation: AnnotationPlan { per_example: 3, coverage, repeat_prob: 0.0, seed },
        seed,
    };
    let sim = simulate_dataset(&spec).unwrap();
    let ids: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
    let ds = Dataset { ids, features: sim.features, annotations: sim.annotations, truth: Some(sim.truth) };
    let summary = IngestSummary {
        examples: n,
        annotated_examples: n,
        annotator_ids: (0..10).map(|a| format!("a{a}")).collect(),
        annotator_counts: vec![0; 10],
        head_of: (0..10).collect(),
        heads: 10,
        lumped: 0,
        class_distribution: vec![0.2; 5],
    };
    let test = test.map(|(nt, prior)| {
        let tt = sample_truth(nt, &prior, seed, 1).unwrap();
        let tx = sample_features(&sim.means, &tt, seed, 1).unwrap();
        ((0..nt).map(|i| format!("t{i}")).collect(), tx, tt)
    });
    Prepared::from_dataset(ds, summary, SplitMode::Holdout, 0.1, test).unwrap()
}

fn ladder_config(kind: &str, dim: usize, seed: u64, dn_run: &Path, extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!(
        r#"
[model]
kind = "{kind}"
[backbone]
kind = "mlp"
input = {dim}
hidden = [32]
[optim]
lr = 0.003
batch_size = 64
steps = 3000
eval_every = 250
head_lr_ratio = 1.0
[data]
classes = 5
features = "unused"
annotations = "unused"
[phase2]
dn_run = "{}"
steps = 1500
lr = 0.01
eval_every = 100
[experiment]
seed = {seed}
{extra}
"#,
        dn_run.display()
    ))
    .unwrap()
}

fn c4_contracts() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dn_run = tmp.path().join("dn");
    let data = synthetic(3, 2000, 10, 1.0, PoolRecipe::SymmetricRange { low: 0.55, high: 0.95 }, vec![], Some((500, vec![1.0; 5])));
    let dn = ladder_config("dn", 10, 3, &dn_run, "");
    let res = train_replicate(&dn, &data, 0, Some(&replicate_dir(&dn_run, 0)), &RunOptions::default()).unwrap();
    let dn_sum = crowdnet_core::harness::train::selected_params(&res.checkpoint).checksum(&FROZEN_PREFIXES);

    let mut steps_checked = 0;
    let mut freeze_ok = true;
    for kind in ["wdn", "iwdn", "biwdn"] {
        let cfg = ladder_config(kind, 10, 3, &dn_run, "");
        let mut t = Trainer::new(&cfg, &data, 0).unwrap();
        let before = t.params().checksum(&FROZEN_PREFIXES);
        freeze_ok &= before == dn_sum;
        let avg_before = t.params().checksum(&["avg."]);
        for _ in 0..150 {
            t.step().unwrap();
            freeze_ok &= t.params().checksum(&FROZEN_PREFIXES) == before;
            steps_checked += 1;
        }
        // the averaging parameters did train
        freeze_ok &= t.params().checksum(&["avg."]) != avg_before;
    }

    // masking: moving any unlabeled head leaves the dn loss bit-identical
    let mut mask_ok = true;
    let mut perturbations = 0;
    for s in 0..INSTANCES {
        let mut r = rng::stream(s, &[4321]);
        let (heads, k, hid) = (6, 4, 5);
        let bank = HeadBank::dn(hid, k, (0..heads).collect()).unwrap();
        let mut ps = ParamSet::new();
        bank.init_params(&mut ps, ParamGroup::default(), &mut r);
        let h = random_tensor(&mut r, &[hid]);
        let labelers = rand::seq::index::sample(&mut r, heads, 2).into_vec();
        let recs: Vec<AnnotationRecord> = labelers
            .iter()
            .map(|&a| AnnotationRecord { example: 0, annotator: a, distribution: simplex(&mut r, k), grade_count: 1 })
            .collect();
        let refs: Vec<&AnnotationRecord> = recs.iter().collect();
        let base = dn_loss(&bank, &ps, &h, &refs).unwrap();
        for j in (0..heads).filter(|j| !labelers.contains(j)) {
            for delta in [1e-6, -1e-3, 0.5, 7.0] {
                let mut q = ps.clone();
                let w = q.value_mut(HEAD_WEIGHTS).unwrap();
                let cols = w.row_len();
                for row in 0..hid {
                    for c in j * k..(j + 1) * k {
                        w.data_mut()[row * cols + c] += delta;
                    }
                }
                for c in j * k..(j + 1) * k {
                    q.value_mut(HEAD_BIAS).unwrap().data_mut()[c] -= delta;
                }
                mask_ok &= dn_loss(&bank, &q, &h, &refs).unwrap() == base;
                perturbations += 1;
            }
        }
    }
    (
        freeze_ok && mask_ok,
        format!(
            "frozen checksum constant over {steps_checked} phase-2 steps (3 modes x 150): {freeze_ok}; \
             {perturbations} unlabeled-head perturbations with identical loss: {mask_ok}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn c5_em() -> Outcome {
    let t = Instant::now();
    let seed = 4;
    let (a, k, n) = (10, 5, 2000);
    let pool = make_pool(&PoolSpec {
        annotators: a,
        classes: k,
        recipe: PoolRecipe::UniformDiagonal { low: 0.98, high: 0.995 },
        seed,
    })
    .unwrap();
    let truth = sample_truth(n, &vec![1.0; k], seed, 0).unwrap();
    let set = annotate(&pool, &truth, &AnnotationPlan { per_example: 3, coverage: vec![], repeat_prob: 0.0, seed }).unwrap();
    let state = em_fit(&set, &EmConfig::default()).unwrap();
    let max_err = pool.thetas.iter().zip(&state.thetas).map(|(p, f)| p.max_abs_diff(f)).fold(0.0, f64::max);
    let post_acc = state
        .posteriors
        .iter()
        .zip(&truth)
        .filter(|(p, &t)| crowdnet_core::metrics::argmax(p) == t)
        .count() as f64
        / n as f64;
    let mv_acc = majority_vote(&set).iter().zip(&truth).filter(|(m, t)| m == t).count() as f64 / n as f64;
    // float reassociation may cost a few ulps once EM has converged
    let monotone = state.history.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs());
    let secs = t.elapsed().as_secs_f64();
    let ok = max_err <= 0.05 && post_acc >= mv_acc && monotone && secs <= 60.0;
    (
        ok,
        format!(
            "max |theta - planted| = {max_err:.4}; posterior accuracy {post_acc:.4} vs majority vote {mv_acc:.4}; \
             objective non-decreasing over {} iterations: {monotone}; {secs:.1}s",
            state.history.len()
        ),
    )
}

// ---------------------------------------------------------------- 6

const LADDER_SEEDS: u64 = 10;

fn c6_ladder() -> Outcome {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let recipe = PoolRecipe::OrdinalRange { low: 0.55, high: 0.95, decay: 0.3 };
    // more reliable annotators also label more
    let coverage: Vec<f64> = (1..=10).map(f64::from).collect();
    let (mut bn, mut dn, mut wdn) = (vec![], vec![], vec![]);
    for seed in 0..LADDER_SEEDS {
        let data = synthetic(seed, 10000, 200, 0.2, recipe.clone(), coverage.clone(), Some((20000, vec![1.0; 5])));
        let dn_run = tmp.path().join(format!("{seed}/dn"));
        for (kind, out) in [("bn", &mut bn), ("dn", &mut dn), ("wdn", &mut wdn)] {
            let cfg = ladder_config(kind, 200, seed, &dn_run, "");
            let dir = tmp.path().join(format!("{seed}/{kind}"));
            let res = train_replicate(&cfg, &data, 0, Some(&replicate_dir(&dir, 0)), &RunOptions::default()).unwrap();
            out.push(res.info.test.kclass_error);
        }
    }
    let d1: Vec<f64> = bn.iter().zip(&dn).map(|(a, b)| a - b).collect();
    let d2: Vec<f64> = dn.iter().zip(&wdn).map(|(a, b)| a - b).collect();
    let secs = t.elapsed().as_secs_f64();
    let ok = mean(&d1) > se(&d1) && mean(&d2) > se(&d2) && secs <= 1200.0;
    (
        ok,
        format!(
            "{LADDER_SEEDS} seeds: BN {:.4}, DN {:.4}, WDN {:.4}; BN-DN {:.4} (SE {:.4}), DN-WDN {:.4} (SE {:.4}); {secs:.0}s",
            mean(&bn),
            mean(&dn),
            mean(&wdn),
            mean(&d1),
            se(&d1),
            mean(&d2),
            se(&d2)
        ),
    )
}

// ---------------------------------------------------------------- 7

fn c7_noise_reductions() -> Outcome {
    let mut r = rng::stream(7, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = r.random_range(2..=10);
        let p = simplex(&mut r, k);
        let l = simplex(&mut r, k);
        let a = noise_adapted_loss(&p, &l, &ConfusionMatrix::identity(k)).unwrap();
        let b = cross_entropy(&l, &p).unwrap();
        worst = worst.max((a - b).abs());
    }
    let mut uniform = true;
    for k in 2..=20 {
        let th = ConfusionMatrix::symmetric(k, 1.0 / k as f64);
        uniform &= th.data().iter().all(|&v| v == 1.0 / k as f64);
    }
    (worst < 1e-12 && uniform, format!("max |noise loss - CE| = {worst:.1e} over 1000 cases; r=1/K rows exactly uniform for K=2..20: {uniform}"))
}

// ---------------------------------------------------------------- 8

fn c8_prior_correction() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    // eval prior: most of class 1's mass moved to class 4
    let shifted = vec![0.04, 0.2, 0.2, 0.36, 0.2];
    let (mut raw, mut corrected) = (vec![], vec![]);
    for seed in 0..5 {
        let data = synthetic(seed, 10000, 10, 1.0, PoolRecipe::SymmetricRange { low: 0.55, high: 0.95 }, vec![], Some((20000, shifted.clone())));
        let cfg = ladder_config("bn", 10, seed, &tmp.path().join("none"), "[calibration]\nprior_correction = \"known\"");
        let res = train_replicate(&cfg, &data, 0, None, &RunOptions::default()).unwrap();
        raw.push(kclass_error(&res.test_predictions, &data.test.truth).unwrap());
        corrected.push(res.info.test.kclass_error);
    }
    let ok = mean(&corrected) < mean(&raw);
    (ok, format!("5 seeds: uncorrected {:.4}, corrected {:.4}", mean(&raw), mean(&corrected)))
}

// ---------------------------------------------------------------- 9

fn auc_oracle(s: &[f64], t: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if t[i] && !t[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn c9_metrics() -> Outcome {
    let mut r = rng::stream(9, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(2..40);
        // coarse scores force ties
        let s: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..8u8)) / 8.0).collect();
        let mut t: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        t[0] = true;
        t[1] = false;
        worst = worst.max((roc_auc(&s, &t).unwrap() - auc_oracle(&s, &t)).abs());
    }
    let preds = Tensor::new(&[4, 3], vec![0.7, 0.2, 0.1, 0.1, 0.3, 0.6, 0.4, 0.4, 0.2, 0.2, 0.5, 0.3]).unwrap();
    // row 1 predicts class 3 and row 2 ties to class 1; both are wrong
    let kc = kclass_error(&preds, &[0, 1, 1, 1]).unwrap() == 0.5;
    let bc = (binary_collapse(&[0.1, 0.2, 0.3, 0.15, 0.25], 3).unwrap() - 0.7).abs() < 1e-15
        && binary_collapse(&[0.1, 0.2, 0.3, 0.15, 0.25], 5).unwrap() == 0.25;
    let s = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2];
    let t = [true, true, false, true, false, false, true, false];
    let tied_s = [0.9, 0.5, 0.5, 0.1];
    let tied_t = [true, true, false, false];
    // ROC of the first fixture: (0,.25) (0,.5) (.25,.5) (.25,.75) (.5,.75) (.75,.75) (.75,1) (1,1)
    let ss = spec_at_sens(&s, &t, 0.75).unwrap() == 0.75
        && spec_at_sens(&s, &t, 0.97).unwrap() == 0.25
        && spec_at_sens(&s, &t, 0.5).unwrap() == 1.0
        // tie group spans (0,.5) -> (.5,1); 75% sensitivity interpolates to fpr .25
        && spec_at_sens(&tied_s, &tied_t, 0.75).unwrap() == 0.75
        && roc_auc(&tied_s, &tied_t).unwrap() == 0.875;
    (
        worst < 1e-12 && kc && bc && ss,
        format!("max |auc - pairwise oracle| = {worst:.1e} over 100 cases; kclass {kc}, binary_collapse {bc}, spec_at_sens {ss}"),
    )
}

// ---------------------------------------------------------------- 10

fn c10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = SimulationSpec {
        examples: 1500,
        classes: 5,
        prior: vec![],
        features: FeatureSpec { dim: 8, separation: 1.0 },
        pool: PoolSpec { annotators: 6, classes: 5, recipe: PoolRecipe::SymmetricRange { low: 0.6, high: 0.9 }, seed: 10 },
        annotation: AnnotationPlan { per_example: 2, coverage: vec![], repeat_prob: 0.2, seed: 10 },
        seed: 10,
    };
    let sim = simulate_dataset(&spec).unwrap();
    let ids: Vec<String> = (0..1500).map(|i| format!("x{i:04}")).collect();
    let ann: Vec<String> = (0..6).map(|a| format!("a{a}")).collect();
    write_file(&root.join("f.txt"), features_to_text(&ids, &sim.features).as_bytes()).unwrap();
    write_file(&root.join("a.jsonl"), annotations_to_jsonl(&sim.annotations, &ids, &ann).unwrap().as_bytes()).unwrap();
    let truth = LabelTable { ids: ids.clone(), classes: sim.truth.clone(), format: LabelFormat::Text };
    write_file(&root.join("t.txt"), &labels_bytes(&truth).unwrap()).unwrap();

    let mut same = true;
    let mut compared = 0;
    for kind in ["dn", "wdn"] {
        let cfg_text = format!(
            r#"
[model]
kind = "{kind}"
lump_threshold = 100
[backbone]
kind = "mlp"
input = 8
hidden = [16, 8]
[optim]
steps = 300
eval_every = 100
[regularization]
dropout = 0.2
ema_decay = 0.99
entropy_weight = 0.05
[data]
classes = 5
features = "f.txt"
annotations = "a.jsonl"
truth = "t.txt"
[phase2]
dn_run = "dn-a"
steps = 200
eval_every = 50
[experiment]
seed = 11
replicates = 2
"#
        );
        write_file(&root.join(format!("{kind}.toml")), cfg_text.as_bytes()).unwrap();
        let mut outcomes = Vec::new();
        for run in ["a", "b"] {
            let mut cfg = ExperimentConfig::load(&root.join(format!("{kind}.toml"))).unwrap();
            cfg.experiment.output_dir = Some(root.join(format!("{kind}-{run}")));
            outcomes.push(run_experiment(&cfg, &RunOptions::default()).unwrap());
        }
        let read = |run: &str, f: &str| std::fs::read(root.join(format!("{kind}-{run}")).join(f)).unwrap();
        same &= read("a", METRICS_FILE) == read("b", METRICS_FILE);
        compared += 1;
        for r in 0..2 {
            let f = format!("replicate-{r}/{CHECKPOINT_FILE}");
            same &= read("a", &f) == read("b", &f);
            same &= outcomes[0].checkpoints[r].to_bytes() == outcomes[1].checkpoints[r].to_bytes();
            compared += 1;
        }
    }
    (same, format!("{compared} metrics/checkpoint files compared across repeated dn and wdn runs; byte-identical: {same}"))
}
