//! Experiment driver and report files.
//!
//! A run directory holds `metrics.json` (the [`MetricsReport`]),
//! `report.json` (resolved config, ingest summary and per-replicate details)
//! and one `replicate-r/` directory per replicate with `checkpoint.ckpt` and
//! `test_predictions.txt`. Nothing time-dependent is written.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::data::{features_to_text, write_file, IngestSummary};
use super::train::{prepare, replicate_dir, run_replicates, Prepared, Reference, ReplicateInfo, RunOptions};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "test_predictions.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub ingest: IngestSummary,
    pub train_examples: usize,
    pub val_examples: usize,
    pub test_examples: usize,
    pub test_reference: Reference,
    pub replicates: Vec<ReplicateInfo>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: RunReport,
    pub checkpoints: Vec<Checkpoint>,
}

pub fn to_json_pretty<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// Trains every replicate of `cfg` on already prepared data.
pub fn run_prepared(cfg: &ExperimentConfig, data: &Prepared, opts: &RunOptions) -> Result<ExperimentOutcome> {
    let out = cfg.experiment.output_dir.as_deref();
    let results = run_replicates(cfg, data, out, opts)?;
    let metrics = MetricsReport::from_replicates(results.iter().map(|r| r.info.test.clone()).collect())?;
    let report = RunReport {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        ingest: data.summary.clone(),
        train_examples: data.train.features.rows(),
        val_examples: data.val.features.rows(),
        test_examples: data.test.truth.len(),
        test_reference: data.test.reference,
        replicates: results.iter().map(|r| r.info.clone()).collect(),
        metrics,
    };
    if let Some(dir) = out {
        write_file(&dir.join(METRICS_FILE), to_json_pretty(&report.metrics)?.as_bytes())?;
        write_file(&dir.join(REPORT_FILE), to_json_pretty(&report)?.as_bytes())?;
        for (r, res) in results.iter().enumerate() {
            let text = features_to_text(&data.test.ids, &res.test_predictions);
            write_file(&replicate_dir(dir, r).join(PREDICTIONS_FILE), text.as_bytes())?;
        }
    }
    let checkpoints: Vec<Checkpoint> = results.into_iter().map(|r| r.checkpoint).collect();
    Ok(ExperimentOutcome { report, checkpoints })
}

/// Ingests the configured data and runs all replicates.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    let data = prepare(cfg)?;
    run_prepared(cfg, &data, opts)
}

pub fn load_report(run: &Path) -> Result<RunReport> {
    let p = run.join(REPORT_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Mean and standard error of the mean.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Tab-separated comparison table of several run directories.
pub fn summarize_runs(runs: &[PathBuf]) -> Result<String> {
    let mut s = String::from("run\tkind\treplicates\tkclass_error\tkclass_se\tbinary_auc\tbinary_error\tspec_at_sens\n");
    for run in runs {
        let r = load_report(run)?;
        let errs: Vec<f64> = r.metrics.replicates.iter().map(|m| m.kclass_error).collect();
        let (mean, se) = mean_se(&errs);
        let m = &r.metrics.mean;
        s.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\t{}\t{}\t{:.4}\t{}\n",
            run.display(),
            r.config.model.kind.name(),
            errs.len(),
            mean,
            if se.is_nan() { "-".into() } else { format!("{se:.4}") },
            fmt_opt(m.binary_auc),
            m.binary_error,
            fmt_opt(m.spec_at_sens),
        ));
    }
    Ok(s)
}
