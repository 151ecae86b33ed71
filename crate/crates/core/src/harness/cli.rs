//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::bench::{run_bench, summarize, write_bench_csv, BENCH_MAX_DIM, BENCH_PROBLEMS, BENCH_SEED};
use super::checkpoint::load_checkpoint;
use super::config::load_config;
use super::run::{compare, eval_suite, probe_accuracies, run_config, sigma_on_suite};
use crate::error::Result;
use crate::gradcheck::{op_suite, REL_FLOOR};
use crate::sigma::{radar_rows, write_radar_csv};
use crate::taskgen::{generate_synthetic, save_raw_dataset, SyntheticSpec};

/// Gradient tolerance of the `gradcheck` subcommand.
pub const GRADCHECK_TOL: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "gessl", about = "Bi-level self-supervised learning at desk scale", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every configured seed and write artifacts to out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run both gessl and baseline_ssl on the same seeds.
        #[arg(long)]
        compare: bool,
    },
    /// Linear probe and k-NN accuracy of a checkpoint's frozen embeddings.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Sigma of one or more checkpoints on sampled task suites.
    Sigma {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        /// Write normalized radar-plot rows here.
        #[arg(long)]
        radar: Option<PathBuf>,
    },
    /// Hypergradient error and cost of each strategy on quadratic problems.
    HypergradBench {
        #[arg(long, default_value = "hypergrad_bench.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = BENCH_SEED)]
        seed: u64,
        #[arg(long, default_value_t = BENCH_PROBLEMS)]
        problems: usize,
        #[arg(long, default_value_t = BENCH_MAX_DIM)]
        max_dim: usize,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Write a synthetic blob dataset in the raw format.
    GenData {
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        center_scale: f64,
        #[arg(long, default_value_t = 1.0)]
        within_sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the subcommand. Returns 0 on
/// success, 1 on a failed run or check, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn model_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(parent) if stem == "checkpoint" => parent.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Train { config, compare: both } => {
            let exp = load_config(&config)?;
            if both {
                let cmp = compare(&exp)?;
                for (g, b) in cmp.gessl.seeds.iter().zip(&cmp.baseline.seeds) {
                    println!(
                        "seed {}: probe gessl {:?} baseline {:?}, knn gessl {:?} baseline {:?}",
                        g.seed, g.probe_acc, b.probe_acc, g.knn_acc, b.knn_acc
                    );
                }
                if let Some((dp, dk)) = cmp.mean_gaps() {
                    println!("mean gap (gessl - baseline): probe {dp:+.4}, knn {dk:+.4}");
                }
            } else {
                let s = run_config(&exp)?;
                println!(
                    "{}: mean probe {:?}, mean knn {:?}, mean sigma {:.6}",
                    s.mode, s.mean_probe_acc, s.mean_knn_acc, s.mean_sigma
                );
            }
            println!("artifacts in {}", exp.out_dir.display());
            Ok(true)
        }
        Command::Probe { checkpoint, config } => {
            let exp = load_config(&config)?;
            let params = load_checkpoint(&checkpoint)?;
            let (probe, knn) = probe_accuracies(&params, &exp.data.load()?, &exp.probe)?;
            println!("linear_probe {probe:.6}");
            println!("knn{} {knn:.6}", exp.probe.k);
            Ok(true)
        }
        Command::Sigma {
            checkpoint,
            config,
            radar,
        } => {
            let exp = load_config(&config)?;
            let dataset = exp.data.load()?;
            let n = exp.gessl.n;
            let mut sizes = vec![n];
            if n / 2 >= 2 {
                sizes.insert(0, n / 2);
            }
            let mut entries = Vec::new();
            for size in sizes {
                let suite = eval_suite(&dataset, &exp.gessl, exp.eval_tasks, size)?;
                let suite_name = format!("n{size}");
                for path in &checkpoint {
                    let params = load_checkpoint(path)?;
                    let rep = sigma_on_suite(&params, exp.gessl.pi_kind, &suite)?;
                    println!(
                        "{} {suite_name}: sigma_total {:.6} sigma_mean {:.6}",
                        model_name(path),
                        rep.total,
                        rep.per_sample_mean
                    );
                    entries.push((model_name(path), suite_name.clone(), rep));
                }
            }
            if let Some(out) = radar {
                write_radar_csv(&out, &radar_rows(&entries))?;
                println!("radar rows in {}", out.display());
            }
            Ok(true)
        }
        Command::HypergradBench {
            out,
            seed,
            problems,
            max_dim,
        } => {
            let rows = run_bench(seed, problems, max_dim)?;
            write_bench_csv(&out, &rows)?;
            println!("{:<9} {:<12} {:>12} {:>12} {:>12}", "family", "strategy", "max_err", "mean_err", "inner_evals");
            for s in summarize(&rows) {
                println!(
                    "{:<9} {:<12} {:>12.3e} {:>12.3e} {:>12.1}",
                    s.family, s.strategy, s.max_rel_err, s.mean_rel_err, s.mean_inner_evals
                );
            }
            println!("rows in {}", out.display());
            Ok(true)
        }
        Command::Gradcheck { seed, trials } => {
            let checks = op_suite(seed, trials, 1e-5)?;
            let mut ok = true;
            for c in &checks {
                let pass = c.passed(GRADCHECK_TOL);
                ok &= pass;
                println!(
                    "{} {:<16} trials {:>4} max_rel_err {:.3e}",
                    if pass { "ok  " } else { "FAIL" },
                    c.name,
                    c.trials,
                    c.max_rel_err
                );
            }
            println!("tolerance {GRADCHECK_TOL:e}, relative floor {REL_FLOOR:e}");
            Ok(ok)
        }
        Command::GenData {
            classes,
            per_class,
            dim,
            seed,
            center_scale,
            within_sigma,
            out,
        } => {
            let spec = SyntheticSpec {
                classes,
                per_class,
                dim,
                center_scale,
                within_sigma,
            };
            let ds = generate_synthetic(&spec, seed)?;
            save_raw_dataset(&ds, &out)?;
            println!("{} rows x {} features in {}", ds.len(), ds.dim(), out.display());
            Ok(true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["gessl", "frobnicate"]), 2);
        assert_eq!(run(["gessl", "gradcheck", "--bogus"]), 2);
        assert_eq!(run(["gessl"]), 2);
    }

    #[test]
    fn gradcheck_passes() {
        assert_eq!(run(["gessl", "gradcheck", "--trials", "3"]), 0);
    }

    #[test]
    fn missing_config_is_a_runtime_failure() {
        assert_eq!(run(["gessl", "train", "--config", "/nonexistent/x.cfg"]), 1);
    }

    #[test]
    fn checkpoint_names() {
        assert_eq!(model_name(Path::new("runs/seed-0/checkpoint.gssl")), "seed-0");
        assert_eq!(model_name(Path::new("a/b/model.gssl")), "model");
    }
}
