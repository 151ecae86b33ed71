//! Hypergradient accuracy versus cost on the quadratic oracle families.

use std::path::Path;
use serde::{Deserialize, Serialize};

use super::metrics::{csv_err, fmt_f64};
use crate::error::{Error, Result};
use crate::gessl::stopwatch;
use crate::hypergrad::{
    family_theta, hypergrad, quadratic_family, quadratic_oracle, rel_err, Counted, FamilyKind, HypergradKind,
    QuadraticBilevel,
};

pub const BENCH_SEED: u64 = 2024;
pub const BENCH_PROBLEMS: usize = 50;
pub const BENCH_MAX_DIM: usize = 16;
pub const NEUMANN_TERMS: usize = 200;
pub const FD_EPSILON_REL: f64 = 1e-3;

/// The family the accuracy thresholds are stated on, then a harder one.
pub fn bench_families() -> Vec<(&'static str, FamilyKind)> {
    vec![
        ("proximal", FamilyKind::Proximal { spread: 0.04 }),
        ("spectrum", FamilyKind::Spectrum { lo: 0.5, hi: 4.0 }),
    ]
}

/// Settings of every strategy for one problem. Neumann uses `eta = 0.9 /
/// lambda_max`, CG gets `d` iterations.
pub fn strategies_for(p: &QuadraticBilevel) -> Vec<HypergradKind> {
    vec![
        HypergradKind::ItdUnrolled,
        HypergradKind::AidNeumann {
            terms: NEUMANN_TERMS,
            eta: 0.9 / p.eig_max,
        },
        HypergradKind::AidCg {
            iters: p.dim(),
            tol: 1e-300,
        },
        HypergradKind::AidFd {
            epsilon_rel: FD_EPSILON_REL,
        },
        HypergradKind::Lookahead {
            alpha_la: 0.5,
            sync_period: 5,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub family: String,
    pub strategy: String,
    pub problem: usize,
    pub dim: usize,
    pub rel_err: f64,
    pub inner_evals: usize,
    pub outer_evals: usize,
    pub wall_us: u64,
}

pub fn run_bench(seed: u64, problems: usize, max_dim: usize) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (name, kind) in bench_families() {
        for (i, p) in quadratic_family(seed, problems, max_dim, kind).iter().enumerate() {
            let theta = family_theta(seed, i, p.dim());
            let exact = quadratic_oracle(&p.a, &p.b, &p.c, &theta)?;
            for strategy in strategies_for(p) {
                let counted = Counted::new(p);
                let clock = stopwatch();
                let g = hypergrad(&counted, &theta, strategy)?;
                let wall_us = clock.map_or(0, |t| t.elapsed().as_micros() as u64);
                rows.push(BenchRow {
                    family: name.into(),
                    strategy: strategy.name().into(),
                    problem: i,
                    dim: p.dim(),
                    rel_err: rel_err(&g, &exact),
                    inner_evals: counted.inner_evals(),
                    outer_evals: counted.outer_evals(),
                    wall_us,
                });
            }
        }
    }
    Ok(rows)
}

/// Per family and strategy: worst and mean error, mean evaluation count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub family: String,
    pub strategy: String,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub mean_inner_evals: f64,
}

pub fn summarize(rows: &[BenchRow]) -> Vec<BenchSummary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.family.clone(), r.strategy.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(family, strategy)| {
            let sel: Vec<&BenchRow> = rows
                .iter()
                .filter(|r| r.family == family && r.strategy == strategy)
                .collect();
            let n = sel.len() as f64;
            BenchSummary {
                max_rel_err: sel.iter().map(|r| r.rel_err).fold(0.0, f64::max),
                mean_rel_err: sel.iter().map(|r| r.rel_err).sum::<f64>() / n,
                mean_inner_evals: sel.iter().map(|r| r.inner_evals as f64).sum::<f64>() / n,
                family,
                strategy,
            }
        })
        .collect()
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "family",
        "strategy",
        "problem",
        "dim",
        "rel_err",
        "inner_evals",
        "outer_evals",
        "wall_us",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.family.clone(),
            r.strategy.clone(),
            r.problem.to_string(),
            r.dim.to_string(),
            fmt_f64(r.rel_err),
            r.inner_evals.to_string(),
            r.outer_evals.to_string(),
            r.wall_us.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_cover_every_pair_and_costs_order() {
        let rows = run_bench(1, 4, 6).unwrap();
        assert_eq!(rows.len(), 2 * 4 * 5);
        let s = summarize(&rows);
        assert_eq!(s.len(), 10);
        let cost = |f: &str, st: &str| {
            s.iter()
                .find(|x| x.family == f && x.strategy == st)
                .unwrap()
                .mean_inner_evals
        };
        // Neumann pays for its 200 products, the first-order path for none
        assert!(cost("proximal", "aid_neumann") > cost("proximal", "aid_cg"));
        assert!(cost("proximal", "lookahead") < cost("proximal", "aid_fd"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        write_bench_csv(&path, &rows).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap().lines().count(), rows.len() + 1);
    }
}
