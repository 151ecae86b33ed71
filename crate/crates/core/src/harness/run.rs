//! Experiment orchestration: one directory per run, one subdirectory per seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::{load_config, render_config, ExperimentConfig, RunMode};
use super::metrics::{csv_err, fmt_f64, write_csv, write_jsonl, METRICS_CSV, METRICS_FILE};
use crate::error::{Error, Result};
use crate::gessl::{train_baseline_with, train_with, GesslConfig, MetricsRecord};
use crate::models::{embed, ParameterSet, PiKind};
use crate::sigma::{knn_eval, linear_probe, sigma_measure, OracleLabeler, ProbeConfig, SigmaReport};
use crate::taskgen::{make_episode, Dataset, TaskBatch};

pub const CHECKPOINT_FILE: &str = "checkpoint.gssl";
pub const CONFIG_FILE: &str = "config.txt";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const COMPARISON_CSV: &str = "comparison.csv";

/// Task streams of the σ suite never collide with training streams.
pub const EVAL_MASTER: u64 = 0x5EED_E7A1;

/// Tasks scored by σ: `count` tasks of size `n` drawn from the eval stream.
pub fn eval_suite(dataset: &Dataset, config: &GesslConfig, count: usize, n: usize) -> Result<Vec<TaskBatch>> {
    make_episode(
        dataset,
        EVAL_MASTER,
        0,
        count,
        n,
        config.views,
        &config.augmentation,
    )
}

pub fn sigma_on_suite(params: &ParameterSet, pi: PiKind, suite: &[TaskBatch]) -> Result<SigmaReport> {
    sigma_measure(params, pi, suite, &OracleLabeler::from_tasks(suite))
}

/// Linear probe and k-NN accuracy of frozen embeddings against true labels.
pub fn probe_accuracies(params: &ParameterSet, dataset: &Dataset, probe: &ProbeConfig) -> Result<(f64, f64)> {
    let labels = dataset
        .true_labels
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("dataset `{}` has no labels to probe", dataset.name)))?;
    let features = embed(params, &dataset.features)?;
    Ok((
        linear_probe(&features, labels, probe)?,
        knn_eval(&features, labels, probe.k)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mode: String,
    pub probe_acc: Option<f64>,
    pub knn_acc: Option<f64>,
    pub sigma_mean: f64,
    pub final_inner_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub seeds: Vec<SeedSummary>,
    pub mean_probe_acc: Option<f64>,
    pub mean_knn_acc: Option<f64>,
    pub mean_sigma: f64,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Probe (when labels exist) and σ of one parameter set.
pub fn evaluate(
    params: &ParameterSet,
    dataset: &Dataset,
    exp: &ExperimentConfig,
    suite: &[TaskBatch],
) -> Result<(Option<f64>, Option<f64>, f64)> {
    let (probe, knn) = if dataset.true_labels.is_some() {
        let (p, k) = probe_accuracies(params, dataset, &exp.probe)?;
        (Some(p), Some(k))
    } else {
        (None, None)
    };
    let sigma = sigma_on_suite(params, exp.gessl.pi_kind, suite)?.per_sample_mean;
    Ok((probe, knn, sigma))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Trains one seed in `exp.mode` and writes its artifacts under `dir`.
pub fn run_seed(exp: &ExperimentConfig, dataset: &Dataset, seed: u64, dir: &Path) -> Result<SeedSummary> {
    create_dir(dir)?;
    let config = exp.run_config(seed);
    let suite = eval_suite(dataset, &config, exp.eval_tasks, config.n)?;
    let mut hook = |rec: &mut MetricsRecord, params: &ParameterSet| -> Result<()> {
        if exp.eval_every > 0 && rec.step % exp.eval_every as u64 == 0 {
            let (probe, _, sigma) = evaluate(params, dataset, exp, &suite)?;
            rec.probe_acc = probe;
            rec.sigma_mean = Some(sigma);
        }
        Ok(())
    };
    let outcome = match exp.mode {
        RunMode::Gessl => train_with(dataset, &config, &mut hook)?,
        RunMode::BaselineSsl => train_baseline_with(dataset, &config, &mut hook)?,
    };
    write_jsonl(&dir.join(METRICS_FILE), &outcome.metrics)?;
    write_csv(&dir.join(METRICS_CSV), &outcome.metrics)?;
    save_checkpoint(&outcome.params, &dir.join(CHECKPOINT_FILE))?;
    let (probe_acc, knn_acc, sigma_mean) = evaluate(&outcome.params, dataset, exp, &suite)?;
    Ok(SeedSummary {
        seed,
        mode: exp.mode.name().into(),
        probe_acc,
        knn_acc,
        sigma_mean,
        final_inner_loss: outcome.metrics.last().map(|r| r.inner_loss_mean),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    let path = dir.join(SUMMARY_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["seed", "mode", "probe_acc", "knn_acc", "sigma_mean", "final_inner_loss"])
        .map_err(|e| csv_err(&path, e))?;
    for s in &summary.seeds {
        w.write_record([
            s.seed.to_string(),
            s.mode.clone(),
            opt(s.probe_acc),
            opt(s.knn_acc),
            fmt_f64(s.sigma_mean),
            opt(s.final_inner_loss),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.write_record([
        "mean".into(),
        summary.mode.clone(),
        opt(summary.mean_probe_acc),
        opt(summary.mean_knn_acc),
        fmt_f64(summary.mean_sigma),
        String::new(),
    ])
    .map_err(|e| csv_err(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    let json = dir.join(SUMMARY_JSON);
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
}

/// Runs every configured seed into `out_dir/seed-{s}` and writes the summary.
pub fn run_config(exp: &ExperimentConfig) -> Result<RunSummary> {
    exp.validate()?;
    let dataset = exp.data.load()?;
    create_dir(&exp.out_dir)?;
    let cfg_path = exp.out_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, render_config(exp)).map_err(|e| Error::io(&cfg_path, e))?;
    let seeds = exp
        .seeds
        .iter()
        .map(|&s| run_seed(exp, &dataset, s, &exp.out_dir.join(format!("seed-{s}"))))
        .collect::<Result<Vec<_>>>()?;
    let summary = RunSummary {
        mode: exp.mode.name().into(),
        mean_probe_acc: mean_of(seeds.iter().map(|s| s.probe_acc)),
        mean_knn_acc: mean_of(seeds.iter().map(|s| s.knn_acc)),
        mean_sigma: seeds.iter().map(|s| s.sigma_mean).sum::<f64>() / seeds.len() as f64,
        seeds,
    };
    write_summary(&exp.out_dir, &summary)?;
    Ok(summary)
}

/// Loads the config file and runs it; returns the artifacts directory.
pub fn run_experiment(config_path: &Path) -> Result<PathBuf> {
    let exp = load_config(config_path)?;
    run_config(&exp)?;
    Ok(exp.out_dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub gessl: RunSummary,
    pub baseline: RunSummary,
}

impl Comparison {
    /// GeSSL mean minus baseline mean, for probe and k-NN accuracy.
    pub fn mean_gaps(&self) -> Option<(f64, f64)> {
        Some((
            self.gessl.mean_probe_acc? - self.baseline.mean_probe_acc?,
            self.gessl.mean_knn_acc? - self.baseline.mean_knn_acc?,
        ))
    }
}

/// Runs both modes on the same seeds under `out_dir/{gessl,baseline_ssl}`
/// and writes a per-seed table to `out_dir/comparison.csv`.
pub fn compare(exp: &ExperimentConfig) -> Result<Comparison> {
    let arm = |mode: RunMode| {
        let mut e = exp.clone();
        e.mode = mode;
        e.out_dir = exp.out_dir.join(mode.name());
        run_config(&e)
    };
    let cmp = Comparison {
        gessl: arm(RunMode::Gessl)?,
        baseline: arm(RunMode::BaselineSsl)?,
    };
    let path = exp.out_dir.join(COMPARISON_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record([
        "seed",
        "gessl_probe",
        "baseline_probe",
        "gessl_knn",
        "baseline_knn",
        "gessl_sigma",
        "baseline_sigma",
    ])
    .map_err(|e| csv_err(&path, e))?;
    let mut rows: Vec<[String; 7]> = cmp
        .gessl
        .seeds
        .iter()
        .zip(&cmp.baseline.seeds)
        .map(|(g, b)| {
            [
                g.seed.to_string(),
                opt(g.probe_acc),
                opt(b.probe_acc),
                opt(g.knn_acc),
                opt(b.knn_acc),
                fmt_f64(g.sigma_mean),
                fmt_f64(b.sigma_mean),
            ]
        })
        .collect();
    rows.push([
        "mean".into(),
        opt(cmp.gessl.mean_probe_acc),
        opt(cmp.baseline.mean_probe_acc),
        opt(cmp.gessl.mean_knn_acc),
        opt(cmp.baseline.mean_knn_acc),
        fmt_f64(cmp.gessl.mean_sigma),
        fmt_f64(cmp.baseline.mean_sigma),
    ]);
    for r in &rows {
        w.write_record(r).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(cmp)
}
