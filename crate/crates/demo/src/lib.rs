//! Browser bindings: hypergradient error bars, a KL explorer and a small
//! training run, each returning JSON for the page to draw.

use gessl::gessl::{train, train_baseline, GesslConfig};
use gessl::harness::bench::strategies_for;
use gessl::harness::run::probe_accuracies;
use gessl::hypergrad::{family_theta, hypergrad, quadratic_family, quadratic_oracle, rel_err, Counted, FamilyKind};
use gessl::sigma::{kl_divergence, ProbeConfig};
use gessl::taskgen::{generate_synthetic, SyntheticSpec};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Per-strategy relative error and gradient-evaluation count on a seeded
/// family of quadratic bi-level problems. `lo`/`hi` bound the spectrum of
/// the inner Hessian.
#[wasm_bindgen]
pub fn hypergrad_errors(seed: u32, problems: u32, lo: f64, hi: f64) -> Result<String, JsValue> {
    if !(lo > 0.0 && hi >= lo) {
        return Err(js_err("spectrum needs 0 < lo <= hi"));
    }
    let family = quadratic_family(seed as u64, problems.clamp(1, 100) as usize, 12, FamilyKind::Spectrum { lo, hi });
    let mut rows: Vec<(String, Vec<f64>, Vec<usize>)> = Vec::new();
    for (i, p) in family.iter().enumerate() {
        let theta = family_theta(seed as u64, i, p.dim());
        let exact = quadratic_oracle(&p.a, &p.b, &p.c, &theta).map_err(js_err)?;
        for kind in strategies_for(p) {
            let counted = Counted::new(p);
            let g = hypergrad(&counted, &theta, kind).map_err(js_err)?;
            let name = kind.name().to_string();
            let slot = match rows.iter().position(|r| r.0 == name) {
                Some(j) => j,
                None => {
                    rows.push((name, Vec::new(), Vec::new()));
                    rows.len() - 1
                }
            };
            rows[slot].1.push(rel_err(&g, &exact));
            rows[slot].2.push(counted.inner_evals());
        }
    }
    let out: Vec<_> = rows
        .into_iter()
        .map(|(name, errs, evals)| {
            json!({
                "strategy": name,
                "errors": errs,
                "mean_evals": evals.iter().sum::<usize>() as f64 / evals.len() as f64,
            })
        })
        .collect();
    Ok(json!({ "strategies": out }).to_string())
}

fn parse_dist(text: &str) -> Result<Vec<f64>, JsValue> {
    let v: Vec<f64> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| js_err(format!("not a number: {s}"))))
        .collect::<Result<_, _>>()?;
    let sum: f64 = v.iter().sum();
    if v.is_empty() || v.iter().any(|x| *x < 0.0) || !(sum > 0.0) {
        return Err(js_err("need non-negative weights with a positive sum"));
    }
    Ok(v.iter().map(|x| x / sum).collect())
}

/// KL(target || current) after normalizing both weight lists.
#[wasm_bindgen]
pub fn kl_explore(target: &str, current: &str) -> Result<String, JsValue> {
    let p = parse_dist(target)?;
    let q = parse_dist(current)?;
    if p.len() != q.len() {
        return Err(js_err(format!("lengths differ: {} vs {}", p.len(), q.len())));
    }
    let kl = kl_divergence(&p, &q).map_err(js_err)?;
    let terms: Vec<f64> = p
        .iter()
        .zip(&q)
        .map(|(a, b)| if *a == 0.0 { 0.0 } else { a * (a / b.max(1e-12)).ln() })
        .collect();
    Ok(json!({ "target": p, "current": q, "kl": kl, "terms": terms }).to_string())
}

/// Trains a small encoder on 4-class blobs and reports the per-episode
/// losses plus final probe accuracies. `mode` is `gessl` or `baseline`.
#[wasm_bindgen]
pub fn train_curve(seed: u32, episodes: u32, beta: f64, mode: &str) -> Result<String, JsValue> {
    let spec = SyntheticSpec {
        classes: 4,
        per_class: 40,
        dim: 8,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, 1).map_err(js_err)?;
    let config = GesslConfig {
        master_seed: seed as u64,
        episodes: episodes.min(200) as usize,
        beta,
        baseline_lr: beta,
        m: 4,
        n: 8,
        hidden_dims: vec![16],
        embed_dim: 8,
        proj_dim: 4,
        ..GesslConfig::default()
    };
    let outcome = match mode {
        "gessl" => train(&data, &config),
        "baseline" => train_baseline(&data, &config),
        other => return Err(js_err(format!("unknown mode {other}"))),
    }
    .map_err(js_err)?;
    let probe = ProbeConfig {
        epochs: 100,
        ..ProbeConfig::default()
    };
    let (probe_acc, knn_acc) = probe_accuracies(&outcome.params, &data, &probe).map_err(js_err)?;
    let inner: Vec<f64> = outcome.metrics.iter().map(|r| r.inner_loss_mean).collect();
    let distill: Vec<Option<f64>> = outcome.metrics.iter().map(|r| r.distill_loss).collect();
    Ok(json!({
        "inner_loss": inner,
        "distill_loss": distill,
        "probe_acc": probe_acc,
        "knn_acc": knn_acc,
    })
    .to_string())
}
