use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crowdnet_core::em::{em_fit, majority_vote, reliabilities, EmConfig, DEFAULT_SMOOTHING};
use crowdnet_core::error::{Error, Result};
use crowdnet_core::harness::config::ExperimentConfig;
use crowdnet_core::harness::data::{
    annotations_to_jsonl, features_to_text, labels_bytes, read_annotations, read_features, read_labels, write_file,
    LabelFormat, LabelTable,
};
use crowdnet_core::harness::report::{run_prepared, summarize_runs, to_json_pretty};
use crowdnet_core::harness::train::{correct_predictions, prepare, RunOptions};
use crowdnet_core::heads::{AnnotationRecord, AnnotationSet};
use crowdnet_core::metrics::{
    class_distribution, equivalent_clean_count, evaluate, mutual_info_noisy, DEFAULT_TARGET_SENS,
    DEFAULT_THRESHOLD_CLASS,
};
use crowdnet_core::simulation::{
    agreement_stats, corrupt_labels, sample_features, sample_truth, simulate_dataset, CorruptionPlan, SimulationSpec,
};

#[derive(Parser)]
#[command(name = "crowdnet", version, about = "Train and evaluate classifiers from multiple noisy annotators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-annotator dataset from a JSON spec.
    Simulate(SimulateArgs),
    /// Flip labels uniformly to another class with probability rho.
    Corrupt(CorruptArgs),
    /// Fit per-annotator confusion matrices by expectation-maximization.
    Em(EmArgs),
    /// Information carried by a noisy label and its clean-label equivalent.
    Mi(MiArgs),
    /// Score a predictions file against truth labels.
    Evaluate(EvaluateArgs),
    /// Tabulate the metrics of finished run directories.
    Report(ReportArgs),
    /// Train every replicate of an experiment config.
    Train(TrainArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write an independent clean test set of this many examples.
    #[arg(long, default_value_t = 0)]
    test_examples: usize,
}

#[derive(Args)]
struct CorruptArgs {
    /// IDX or text labels.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = DEFAULT_SMOOTHING)]
    smoothing: f64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MiArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    accuracy: f64,
    #[arg(long, default_value_t = 60000)]
    n: u64,
    /// Round both informations to this many significant figures before the
    /// ratio; 0 keeps them exact.
    #[arg(long, default_value_t = 2)]
    sig_figs: u32,
}

#[derive(Args)]
struct EvaluateArgs {
    /// `id<TAB>p1 p2 ...` rows.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD_CLASS)]
    threshold_class: usize,
    #[arg(long, default_value_t = DEFAULT_TARGET_SENS)]
    target_sens: f64,
    /// Training class distribution, comma separated; enables prior correction.
    #[arg(long)]
    q_train: Option<String>,
    /// Evaluation class distribution; defaults to the truth distribution.
    #[arg(long)]
    q_eval: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides experiment.output_dir.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    resume: bool,
    /// Stop each replicate once its step counter reaches this value.
    #[arg(long)]
    stop_at: Option<u64>,
    /// Parallel replicate workers (default: CROWDNET_WORKERS or 1).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

fn padded_ids(prefix: &str, n: usize) -> Vec<String> {
    let w = n.saturating_sub(1).to_string().len();
    (0..n).map(|i| format!("{prefix}{i:0w$}")).collect()
}

fn labels_text(ids: &[String], classes: &[usize]) -> Result<Vec<u8>> {
    labels_bytes(&LabelTable { ids: ids.to_vec(), classes: classes.to_vec(), format: LabelFormat::Text })
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec).map_err(|e| Error::io(&a.spec, e))?;
    let spec: SimulationSpec = serde_json::from_str(&text)?;
    let sim = simulate_dataset(&spec)?;
    let ex = padded_ids("e", spec.examples);
    let ann = padded_ids("a", spec.pool.annotators);
    write_file(&a.out.join("features.txt"), features_to_text(&ex, &sim.features).as_bytes())?;
    write_file(&a.out.join("annotations.jsonl"), annotations_to_jsonl(&sim.annotations, &ex, &ann)?.as_bytes())?;
    write_file(&a.out.join("truth.txt"), &labels_text(&ex, &sim.truth)?)?;
    let thetas: BTreeMap<&str, Vec<Vec<f64>>> = ann.iter().map(String::as_str).zip(sim.pool.thetas.iter().map(|t| t.rows())).collect();
    write_file(&a.out.join("pool.json"), to_json_pretty(&thetas)?.as_bytes())?;
    let agree = agreement_stats(&sim.annotations)?;
    write_file(&a.out.join("agreement.json"), to_json_pretty(&agree)?.as_bytes())?;
    if a.test_examples > 0 {
        let prior = if spec.prior.is_empty() { vec![1.0; spec.classes] } else { spec.prior.clone() };
        let tt = sample_truth(a.test_examples, &prior, spec.seed, 1)?;
        let tx = sample_features(&sim.means, &tt, spec.seed, 1)?;
        let ids = padded_ids("t", a.test_examples);
        write_file(&a.out.join("test_features.txt"), features_to_text(&ids, &tx).as_bytes())?;
        write_file(&a.out.join("test_truth.txt"), &labels_text(&ids, &tt)?)?;
    }
    match agree.pooled {
        Some(p) => println!("simulated {} examples, {} annotators, pooled agreement {p:.4}", spec.examples, ann.len()),
        None => println!("simulated {} examples, {} annotators", spec.examples, ann.len()),
    }
    Ok(())
}

fn corrupt(a: &CorruptArgs) -> Result<()> {
    let mut table = read_labels(&a.labels, a.classes)?;
    let plan = CorruptionPlan { rho: a.rho, seed: a.seed, classes: a.classes };
    let flipped = corrupt_labels(&table.classes, &plan)?;
    let changed = flipped.iter().zip(&table.classes).filter(|(x, y)| x != y).count();
    table.classes = flipped;
    write_file(&a.out, &labels_bytes(&table)?)?;
    println!("flipped {changed} of {} labels", table.classes.len());
    Ok(())
}

fn em(a: &EmArgs) -> Result<()> {
    let raw = read_annotations(&a.annotations, a.classes)?;
    let mut ex_ids: Vec<&str> = raw.iter().map(|r| r.example_id.as_str()).collect();
    ex_ids.sort();
    ex_ids.dedup();
    let mut ann_ids: Vec<&str> = raw.iter().map(|r| r.annotator_id.as_str()).collect();
    ann_ids.sort();
    ann_ids.dedup();
    let mut cells: BTreeMap<(usize, usize), Vec<u32>> = BTreeMap::new();
    for r in &raw {
        let e = ex_ids.binary_search(&r.example_id.as_str()).expect("collected id");
        let j = ann_ids.binary_search(&r.annotator_id.as_str()).expect("collected id");
        cells.entry((e, j)).or_insert_with(|| vec![0; a.classes])[r.grade - 1] += r.count;
    }
    let mut by_example = vec![Vec::new(); ex_ids.len()];
    for ((e, j), counts) in cells {
        by_example[e].push(AnnotationRecord::from_counts(e, j, &counts)?);
    }
    let set = AnnotationSet::new(a.classes, ann_ids.len(), by_example)?;
    let cfg = EmConfig { smoothing: a.smoothing, max_iters: a.max_iters, tol: a.tol };
    let state = em_fit(&set, &cfg)?;

    let mut rel = String::from("annotator_id\treliability");
    for t in 1..=a.classes {
        rel.push_str(&format!("\ttheta_{t}_{t}"));
    }
    rel.push('\n');
    for ((id, r), th) in ann_ids.iter().zip(reliabilities(&state)).zip(&state.thetas) {
        rel.push_str(&format!("{id}\t{r}"));
        for t in 0..a.classes {
            rel.push_str(&format!("\t{}", th.at(t, t)));
        }
        rel.push('\n');
    }
    write_file(&a.out.join("reliabilities.tsv"), rel.as_bytes())?;

    let mv = majority_vote(&set);
    let mut post = String::from("example_id\tposterior\tmajority\n");
    for ((id, p), m) in ex_ids.iter().zip(&state.posteriors).zip(&mv) {
        let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        post.push_str(&format!("{id}\t{}\t{}\n", row.join(" "), m + 1));
    }
    write_file(&a.out.join("posteriors.tsv"), post.as_bytes())?;

    let thetas: BTreeMap<&str, Vec<Vec<f64>>> = ann_ids.iter().copied().zip(state.thetas.iter().map(|t| t.rows())).collect();
    let summary = serde_json::json!({
        "iterations": state.iteration,
        "log_likelihood": state.log_likelihood,
        "data_log_likelihood": state.data_log_likelihood,
        "history": state.history,
        "prior": state.prior,
        "thetas": thetas,
    });
    write_file(&a.out.join("em.json"), to_json_pretty(&summary)?.as_bytes())?;
    println!(
        "em: {} examples, {} annotators, {} iterations, log-likelihood {:.6}",
        ex_ids.len(),
        ann_ids.len(),
        state.iteration,
        state.data_log_likelihood
    );
    Ok(())
}

fn round_sig(x: f64, sig: u32) -> f64 {
    if sig == 0 || x == 0.0 || !x.is_finite() {
        return x;
    }
    let mag = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(sig as i32 - 1 - mag);
    (x * scale).round() / scale
}

fn mi(a: &MiArgs) -> Result<()> {
    let noisy = mutual_info_noisy(a.classes, a.accuracy)?;
    let perfect = mutual_info_noisy(a.classes, 1.0)?;
    let eq = equivalent_clean_count(a.n, round_sig(noisy, a.sig_figs), round_sig(perfect, a.sig_figs))?;
    println!("mi_nats\t{noisy:.4}");
    println!("perfect_nats\t{perfect:.4}");
    println!("equivalent_clean\t{eq}");
    Ok(())
}

fn parse_dist(s: &str, k: usize) -> Result<Vec<f64>> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad probability {x:?}"))))
        .collect::<Result<Vec<f64>>>()?;
    if v.len() != k {
        return Err(Error::Config(format!("class distribution has {} entries, expected {k}", v.len())));
    }
    Ok(v)
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let preds = read_features(&a.predictions)?;
    if preds.values.row_len() != a.classes {
        return Err(Error::Dimension(format!("predictions have {} columns, expected {}", preds.values.row_len(), a.classes)));
    }
    let table = read_labels(&a.truth, a.classes)?;
    let pos: BTreeMap<&str, usize> = table.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let truth = preds
        .ids
        .iter()
        .map(|id| {
            pos.get(id.as_str())
                .map(|&i| table.classes[i])
                .ok_or_else(|| Error::Mapping(format!("no truth for example {id:?}")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut p = preds.values;
    if let Some(qt) = &a.q_train {
        let q_train = parse_dist(qt, a.classes)?;
        let q_eval = match &a.q_eval {
            Some(s) => parse_dist(s, a.classes)?,
            None => class_distribution(&truth, a.classes),
        };
        p = correct_predictions(&p, &q_train, &q_eval)?;
    } else if a.q_eval.is_some() {
        return Err(Error::Config("--q-eval needs --q-train".into()));
    }
    let m = evaluate(&p, &truth, a.threshold_class, a.target_sens)?;
    let json = to_json_pretty(&m)?;
    if let Some(out) = &a.out {
        write_file(out, json.as_bytes())?;
    }
    print!("{json}");
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(d) = &a.output_dir {
        cfg.experiment.output_dir = Some(d.clone());
    }
    let opts = RunOptions { resume: a.resume, stop_at: a.stop_at, workers: a.workers };
    let data = prepare(&cfg)?;
    println!("{}", data.summary);
    println!(
        "split: train={} val={} test={}",
        data.train.features.rows(),
        data.val.features.rows(),
        data.test.truth.len()
    );
    let outcome = run_prepared(&cfg, &data, &opts)?;
    for r in &outcome.report.replicates {
        println!(
            "replicate {}: steps={} best_step={} kclass_error={:.4}",
            r.replicate, r.steps, r.best_step, r.test.kclass_error
        );
    }
    let m = &outcome.report.metrics.mean;
    println!("mean kclass_error={:.4} binary_error={:.4}", m.kclass_error, m.binary_error);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Corrupt(a) => corrupt(&a),
        Command::Em(a) => em(&a),
        Command::Mi(a) => mi(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Report(a) => {
            print!("{}", summarize_runs(&a.runs)?);
            Ok(())
        }
        Command::Train(a) => train(&a),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} {}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
