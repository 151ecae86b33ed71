//! Universality measurements and downstream probes.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gessl::{inner_adapt, pi_distributions, PROB_FLOOR};
use crate::losses::LossKind;
use crate::models::{ParameterSet, PiKind};
use crate::taskgen::TaskBatch;
use crate::tensor::{softmax_rows, Tensor};

const SUM_TOL: f64 = 1e-9;

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution(format!("{what} is empty")));
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidDistribution(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidDistribution(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// `sum_i p_i ln(p_i / max(q_i, 1e-12))`, skipping `p_i = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidDistribution(format!(
            "length mismatch {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(PROB_FLOOR)).ln())
        .sum())
}

/// Ground-truth class of every sample of every task.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleLabeler {
    labels: Vec<Vec<usize>>,
    classes: Vec<usize>,
}

impl OracleLabeler {
    pub fn new(labels: Vec<Vec<usize>>, classes: Vec<usize>) -> Result<Self> {
        if labels.len() != classes.len() {
            return Err(Error::invalid("one class count per task is required"));
        }
        for (t, (ls, &n)) in labels.iter().zip(&classes).enumerate() {
            if let Some(&bad) = ls.iter().find(|&&l| l >= n) {
                return Err(Error::invalid(format!("task {t}: label {bad} outside 0..{n}")));
            }
        }
        Ok(OracleLabeler { labels, classes })
    }

    /// The pseudo-labels of each task as its oracle.
    pub fn from_tasks(tasks: &[TaskBatch]) -> Self {
        OracleLabeler {
            labels: tasks.iter().map(|t| t.pseudo_labels.clone()).collect(),
            classes: tasks.iter().map(|t| t.n_classes).collect(),
        }
    }

    pub fn tasks(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self, task: usize) -> &[usize] {
        &self.labels[task]
    }

    /// One-hot rows for `task`.
    pub fn one_hot(&self, task: usize) -> Tensor {
        let n = self.classes[task];
        let ls = &self.labels[task];
        let mut t = Tensor::zeros(&[ls.len(), n]);
        for (i, &l) in ls.iter().enumerate() {
            t.data_mut()[i * n + l] = 1.0;
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaReport {
    pub per_task_sigma: Vec<f64>,
    pub total: f64,
    pub per_sample_mean: f64,
    pub tasks: usize,
    pub samples: usize,
}

/// Sum of `KL(one-hot truth || prediction)` over every sample of every task,
/// given the predicted distributions per task.
pub fn sigma_from_distributions(predictions: &[Tensor], oracle: &OracleLabeler) -> Result<SigmaReport> {
    if predictions.len() != oracle.tasks() {
        return Err(Error::invalid(format!(
            "oracle covers {} tasks, got predictions for {}",
            oracle.tasks(),
            predictions.len()
        )));
    }
    let mut per_task_sigma = Vec::with_capacity(predictions.len());
    let mut samples = 0;
    for (t, pred) in predictions.iter().enumerate() {
        let truth = oracle.one_hot(t);
        if pred.shape() != truth.shape() {
            return Err(Error::invalid(format!(
                "task {t}: oracle shape {:?}, predictions {:?}",
                truth.shape(),
                pred.shape()
            )));
        }
        let mut s = 0.0;
        for r in 0..pred.rows() {
            s += kl_divergence(truth.row(r), pred.row(r))?;
        }
        samples += pred.rows();
        per_task_sigma.push(s);
    }
    let total: f64 = per_task_sigma.iter().sum();
    Ok(SigmaReport {
        tasks: per_task_sigma.len(),
        per_sample_mean: if samples == 0 { 0.0 } else { total / samples as f64 },
        per_task_sigma,
        total,
        samples,
    })
}

/// σ of `model` under `pi` on `tasks`.
pub fn sigma_measure(
    model: &ParameterSet,
    pi: PiKind,
    tasks: &[TaskBatch],
    oracle: &OracleLabeler,
) -> Result<SigmaReport> {
    let preds = tasks
        .iter()
        .map(|t| pi_distributions(model, t, pi))
        .collect::<Result<Vec<_>>>()?;
    sigma_from_distributions(&preds, oracle)
}

/// Mean log-probability assigned to the oracle class.
pub fn mean_true_log_prob(predictions: &[Tensor], oracle: &OracleLabeler) -> Result<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for (t, pred) in predictions.iter().enumerate() {
        for (r, &l) in oracle.labels(t).iter().enumerate() {
            s += pred.at(r, l).max(PROB_FLOOR).ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no samples"));
    }
    Ok(s / n as f64)
}

fn argmax(row: &[f64]) -> usize {
    // first maximum wins, so ties go to the smallest class
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Accuracy of `pi` on every task after one inner step from `model`.
pub fn one_step_accuracy(
    model: &ParameterSet,
    tasks: &[TaskBatch],
    alpha: f64,
    loss: LossKind,
    pi: PiKind,
) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for task in tasks {
        let adapted = inner_adapt(model, task, 1, alpha, loss)?;
        let probs = pi_distributions(&adapted, task, pi)?;
        for (r, &l) in task.pseudo_labels.iter().enumerate() {
            hit += usize::from(argmax(probs.row(r)) == l);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("empty task suite"));
    }
    Ok(hit as f64 / n as f64)
}

/// `acc_a / acc_b`.
pub fn accuracy_ratio(acc_a: f64, acc_b: f64) -> Result<f64> {
    if acc_b == 0.0 {
        return Err(Error::invalid("reference accuracy is zero"));
    }
    Ok(acc_a / acc_b)
}

/// Ratio of the one-step-adapted accuracies of two models on the same suite.
pub fn universality_ratio(
    model_a: &ParameterSet,
    model_b: &ParameterSet,
    tasks: &[TaskBatch],
    alpha: f64,
    loss: LossKind,
    pi: PiKind,
) -> Result<f64> {
    accuracy_ratio(
        one_step_accuracy(model_a, tasks, alpha, loss, pi)?,
        one_step_accuracy(model_b, tasks, alpha, loss, pi)?,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub k: usize,
    /// Keys the train/held-out split.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            lr: 0.5,
            l2: 1e-4,
            k: 5,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.k < 1 || !(self.lr > 0.0) || self.l2 < 0.0 {
            return Err(Error::invalid(format!("probe settings out of range: {self:?}")));
        }
        Ok(())
    }
}

/// A key that depends on a sample's content only, so orderings derived from
/// it ignore the order samples arrive in.
fn content_key(seed: u64, row: &[f64], label: usize) -> u64 {
    let mut h = DefaultHasher::new();
    seed.hash(&mut h);
    for v in row {
        v.to_bits().hash(&mut h);
    }
    label.hash(&mut h);
    h.finish()
}

fn canonical_order(features: &Tensor, labels: &[usize], seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    let keys: Vec<u64> = idx
        .iter()
        .map(|&i| content_key(seed, features.row(i), labels[i]))
        .collect();
    idx.sort_by(|&a, &b| {
        keys[a]
            .cmp(&keys[b])
            .then(labels[a].cmp(&labels[b]))
            .then_with(|| {
                let (ra, rb) = (features.row(a), features.row(b));
                ra.iter()
                    .zip(rb)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    idx
}

/// A fifth of every class (the first members in `order`) is held out.
fn stratified_split(order: &[usize], labels: &[usize], classes: usize) -> (Vec<usize>, Vec<usize>) {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let mut quota: Vec<usize> = counts.iter().map(|c| c / 5).collect();
    if quota.iter().all(|&q| q == 0) {
        let largest = (0..classes).rev().max_by_key(|&c| counts[c]).unwrap_or(0);
        quota[largest] = 1;
    }
    let (mut test, mut train) = (Vec::new(), Vec::new());
    for &i in order {
        let q = &mut quota[labels[i]];
        if *q > 0 {
            *q -= 1;
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (test, train)
}

fn check_labelled(features: &Tensor, labels: &[usize]) -> Result<usize> {
    if features.shape().len() != 2 || features.rows() != labels.len() {
        return Err(Error::shape(
            "probe",
            format!("features {:?} vs {} labels", features.shape(), labels.len()),
        ));
    }
    Ok(labels.iter().max().map_or(0, |m| m + 1))
}

/// Held-out accuracy of softmax regression trained by full-batch gradient
/// descent on standardized features, with a deterministic 80/20 split.
pub fn linear_probe(features: &Tensor, labels: &[usize], probe: &ProbeConfig) -> Result<f64> {
    probe.validate()?;
    let classes = check_labelled(features, labels)?;
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid("linear probe needs at least two classes"));
    }
    let n = labels.len();
    if n < 2 {
        return Err(Error::invalid("linear probe needs at least two samples"));
    }
    let (test, train) = stratified_split(&canonical_order(features, labels, probe.seed), labels, classes);
    let (test, train) = (test.as_slice(), train.as_slice());
    let d = features.cols();

    let mut mean = vec![0.0; d];
    for &i in train {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut std = vec![0.0; d];
    for &i in train {
        for ((s, v), m) in std.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    std.iter_mut()
        .for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-12));
    let standardize = |i: usize| -> Vec<f64> {
        features
            .row(i)
            .iter()
            .zip(&mean)
            .zip(&std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| standardize(i)).collect();
    let ys: Vec<usize> = train.iter().map(|&i| labels[i]).collect();

    let mut w = vec![0.0; d * classes];
    let mut b = vec![0.0; classes];
    let inv = 1.0 / xs.len() as f64;
    for _ in 0..probe.epochs {
        let mut gw = vec![0.0; d * classes];
        let mut gb = vec![0.0; classes];
        for (x, &y) in xs.iter().zip(&ys) {
            let logits: Vec<f64> = (0..classes)
                .map(|c| b[c] + (0..d).map(|j| x[j] * w[j * classes + c]).sum::<f64>())
                .collect();
            let p = softmax_rows(&Tensor::matrix(1, classes, logits)?);
            for c in 0..classes {
                let e = p.data()[c] - f64::from(u8::from(c == y));
                gb[c] += e;
                for j in 0..d {
                    gw[j * classes + c] += e * x[j];
                }
            }
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= probe.lr * (g * inv + probe.l2 * *wi);
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= probe.lr * g * inv;
        }
    }
    let hits = test
        .iter()
        .filter(|&&i| {
            let x = standardize(i);
            let logits: Vec<f64> = (0..classes)
                .map(|c| b[c] + (0..d).map(|j| x[j] * w[j * classes + c]).sum::<f64>())
                .collect();
            argmax(&logits) == labels[i]
        })
        .count();
    Ok(hits as f64 / test.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Leave-one-out `k`-nearest-neighbour accuracy under cosine similarity.
///
/// Vote ties go to the smallest class; similarity ties are ordered by sample
/// content so the result does not depend on sample order.
pub fn knn_eval(features: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let classes = check_labelled(features, labels)?;
    let n = labels.len();
    if k < 1 || n <= k {
        return Err(Error::invalid(format!("k-NN needs 1 <= k < n, got k={k}, n={n}")));
    }
    let order = canonical_order(features, labels, 0);
    let mut rank = vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let mut hits = 0;
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (cosine(features.row(i), features.row(j)), j))
            .collect();
        others.sort_by(|a, b| b.0.total_cmp(&a.0).then(rank[a.1].cmp(&rank[b.1])));
        let mut votes = vec![0usize; classes];
        for &(_, j) in &others[..k] {
            votes[labels[j]] += 1;
        }
        let mut best = 0;
        for c in 1..classes {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        hits += usize::from(best == labels[i]);
    }
    Ok(hits as f64 / n as f64)
}

/// One row of the radar-plot export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarRow {
    pub model: String,
    pub task_suite: String,
    pub sigma_total: f64,
    pub sigma_mean: f64,
    /// Min-max normalized `sigma_mean` among rows of the same suite.
    pub normalized: f64,
}

/// Builds rows from `(model, suite, report)` triples, normalizing within
/// each suite. A suite whose models all score the same normalizes to 0.
pub fn radar_rows(entries: &[(String, String, SigmaReport)]) -> Vec<RadarRow> {
    entries
        .iter()
        .map(|(model, suite, rep)| {
            let peers = entries.iter().filter(|(_, s, _)| s == suite).map(|(_, _, r)| r.per_sample_mean);
            let lo = peers.clone().fold(f64::INFINITY, f64::min);
            let hi = peers.fold(f64::NEG_INFINITY, f64::max);
            RadarRow {
                model: model.clone(),
                task_suite: suite.clone(),
                sigma_total: rep.total,
                sigma_mean: rep.per_sample_mean,
                normalized: if hi > lo { (rep.per_sample_mean - lo) / (hi - lo) } else { 0.0 },
            }
        })
        .collect()
}

pub fn write_radar_csv(path: &Path, rows: &[RadarRow]) -> Result<()> {
    let mut out = String::from("model,task_suite,sigma_total,sigma_mean,normalized\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.16e},{:.16e},{:.16e}\n",
            r.model, r.task_suite, r.sigma_total, r.sigma_mean, r.normalized
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
