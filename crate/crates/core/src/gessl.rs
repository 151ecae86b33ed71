//! The bi-level trainer.
//!
//! Every task adapts a copy of the shared parameters `theta` with `K` plain
//! SSL steps, keeps going for `lambda` more steps to obtain a frozen target
//! distribution, and scores the `K`-step model against that target. The outer
//! update follows the hypergradient of the summed scores.
//!
//! For the implicit strategies the lower level is read as the proximal
//! problem `l(phi) + |phi - theta|^2 / (2 rho)` with `rho = alpha * K`, whose
//! minimizer the `K` descent steps approximate. Its curvature in `phi` is
//! `H_l + I / rho`, so `rho` is also the scalar inverse curvature handed to
//! the finite-difference strategy.

use std::time::Instant;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergrad::{self, BilevelProblem, HypergradKind};
use crate::losses::{task_loss, LossKind};
use crate::models::{
    clone_snapshot, encode, init_encoder, pi_linear, pi_prototype, sgd_step, Bound,
    EncoderConfig, LinearHead, OptimState, ParameterSet, PiKind, Snapshot, SnapshotTag,
};
use crate::taskgen::{make_episode, AugmentationSpec, Dataset, TaskBatch};
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on target row sums.
const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistillKind {
    #[default]
    Kl,
    Mse,
    CrossEntropy,
}

impl DistillKind {
    pub fn name(&self) -> &'static str {
        match self {
            DistillKind::Kl => "kl",
            DistillKind::Mse => "mse",
            DistillKind::CrossEntropy => "cross_entropy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GesslConfig {
    pub k: usize,
    pub lambda_extra: usize,
    pub m: usize,
    pub alpha: f64,
    pub beta: f64,
    pub loss: LossKind,
    pub pi_kind: PiKind,
    pub hypergrad: HypergradKind,
    pub distill_kind: DistillKind,
    pub outer_momentum: f64,
    pub outer_weight_decay: f64,
    pub n: usize,
    pub views: usize,
    pub episodes: usize,
    pub master_seed: u64,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub augmentation: AugmentationSpec,
    /// Step size of the equal-budget SSL baseline.
    pub baseline_lr: f64,
}

impl Default for GesslConfig {
    fn default() -> Self {
        GesslConfig {
            k: 1,
            lambda_extra: 10,
            m: 8,
            alpha: 1e-2,
            beta: 1e-2,
            loss: LossKind::default(),
            pi_kind: PiKind::default(),
            hypergrad: HypergradKind::default(),
            distill_kind: DistillKind::Kl,
            outer_momentum: 0.9,
            outer_weight_decay: 1e-4,
            n: 16,
            views: 2,
            episodes: 50,
            master_seed: 0,
            hidden_dims: vec![64, 64],
            embed_dim: 32,
            proj_dim: 16,
            augmentation: AugmentationSpec::default(),
            baseline_lr: 1e-2,
        }
    }
}

impl GesslConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.lambda_extra < 1 {
            return bad(format!("lambda must be >= 1, got {}", self.lambda_extra));
        }
        if self.m < 1 {
            return bad(format!("tasks per outer step must be >= 1, got {}", self.m));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) || !(self.baseline_lr >= 0.0) {
            return bad(format!(
                "learning rates must be >= 0 (alpha {}, beta {}, baseline {})",
                self.alpha, self.beta, self.baseline_lr
            ));
        }
        if self.n < 2 {
            return bad(format!("task size must be >= 2, got {}", self.n));
        }
        if let PiKind::Prototype { tau } = self.pi_kind {
            if !(tau > 0.0) {
                return bad(format!("prototype temperature must be > 0, got {tau}"));
            }
        }
        self.loss.validate()?;
        self.hypergrad.validate()?;
        self.augmentation.validate()?;
        if let HypergradKind::ItdUnrolled = self.hypergrad {
            if self.k > hypergrad::ITD_MAX_STEPS {
                return bad(format!(
                    "ITD supports at most {} inner steps, got {}",
                    hypergrad::ITD_MAX_STEPS,
                    self.k
                ));
            }
        }
        OptimState::new(&ParameterSet::new(), self.outer_momentum, self.outer_weight_decay)?;
        self.encoder(1).validate()
    }

    pub fn encoder(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            embed_dim: self.embed_dim,
            proj_dim: self.proj_dim,
        }
    }

    /// Inner-loss gradient evaluations spent per outer step.
    pub fn inner_budget(&self) -> usize {
        self.m * (self.k + self.lambda_extra)
    }
}

/// Class probabilities of `pi` over a task's views.
pub fn pi_forward<'t>(params: &Bound<'t>, task: &TaskBatch, pi: PiKind) -> Result<Var<'t>> {
    let tape = params.var("proj.weight")?.tape();
    let emb = encode(params, tape.constant(task.views.clone()))?;
    match pi {
        PiKind::Prototype { tau } => pi_prototype(emb, &task.pseudo_labels, task.n_classes, tau),
        PiKind::Linear { seed } => {
            let head = LinearHead::seeded(emb.shape()[1], task.n_classes, seed ^ task.key.digest());
            pi_linear(&head, emb)
        }
    }
}

/// Untracked [`pi_forward`].
pub fn pi_distributions(params: &ParameterSet, task: &TaskBatch, pi: PiKind) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    Ok(pi_forward(&bound, task, pi)?.value())
}

/// Value and gradient of the inner SSL loss.
pub fn loss_and_grad(
    params: &ParameterSet,
    task: &TaskBatch,
    loss: LossKind,
) -> Result<(f64, ParameterSet)> {
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let l = task_loss(&bound, task, loss)?;
    let value = l.item();
    if !value.is_finite() {
        return Err(Error::NonFinite("inner loss".into()));
    }
    Ok((value, bound.gradients(&tape, l)?))
}

/// `steps` plain gradient steps on the task's SSL loss, with the loss seen
/// before each step.
pub fn inner_adapt_traced(
    f_theta: &ParameterSet,
    task: &TaskBatch,
    steps: usize,
    alpha: f64,
    loss: LossKind,
) -> Result<(Vec<ParameterSet>, Vec<f64>)> {
    let mut iterates = vec![f_theta.clone()];
    let mut trace = Vec::with_capacity(steps);
    let mut state = OptimState::plain(f_theta);
    for _ in 0..steps {
        let current = iterates.last().expect("non-empty");
        let (value, grads) = loss_and_grad(current, task, loss)?;
        trace.push(value);
        let next = sgd_step(current, &grads, alpha, &mut state)?;
        iterates.push(next);
    }
    Ok((iterates, trace))
}

pub fn inner_adapt(
    f_theta: &ParameterSet,
    task: &TaskBatch,
    steps: usize,
    alpha: f64,
    loss: LossKind,
) -> Result<ParameterSet> {
    Ok(inner_adapt_traced(f_theta, task, steps, alpha, loss)?
        .0
        .pop()
        .expect("non-empty"))
}

#[derive(Clone, Debug)]
pub struct TaskAdaptResult {
    pub snapshot_k: Snapshot,
    pub snapshot_k_plus_lambda: Snapshot,
    /// `[(N*A) x N]`, detached.
    pub target_distributions: Tensor,
    pub inner_loss_trace: Vec<f64>,
}

/// Continues `lambda_extra` plain steps from `f_k` and freezes `pi` at the
/// result. `k_trace` is the loss trace of the phase that produced `f_k`.
pub fn build_target(
    f_k: &ParameterSet,
    k_trace: &[f64],
    task: &TaskBatch,
    lambda_extra: usize,
    alpha: f64,
    loss: LossKind,
    pi: PiKind,
) -> Result<TaskAdaptResult> {
    if lambda_extra < 1 {
        return Err(Error::invalid("lambda must be >= 1"));
    }
    let (mut iterates, trace) = inner_adapt_traced(f_k, task, lambda_extra, alpha, loss)?;
    let f_kl = iterates.pop().expect("non-empty");
    let target = pi_distributions(&f_kl, task, pi)?;
    let mut inner_loss_trace = k_trace.to_vec();
    inner_loss_trace.extend(trace);
    Ok(TaskAdaptResult {
        snapshot_k: clone_snapshot(f_k, SnapshotTag::InnerK),
        snapshot_k_plus_lambda: clone_snapshot(&f_kl, SnapshotTag::InnerKPlusLambda),
        target_distributions: target,
        inner_loss_trace,
    })
}

fn check_target(target: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if target.shape() != [rows, cols] {
        return Err(Error::InvalidDistribution(format!(
            "target shape {:?}, expected [{rows}, {cols}]",
            target.shape()
        )));
    }
    for r in 0..rows {
        let row = target.row(r);
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidDistribution(format!("target row {r} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidDistribution(format!("target row {r} sums to {s}")));
        }
    }
    Ok(())
}

/// Distillation loss of distributions `q` against a fixed `target`.
///
/// `kl` is `sum_x sum_j t ln(t / max(q, 1e-12))` with `0 ln 0 = 0`.
pub fn distill_from_probs<'t>(q: Var<'t>, target: &Tensor, kind: DistillKind) -> Result<Var<'t>> {
    let shape = q.shape();
    check_target(target, shape[0], shape[1])?;
    let tape = q.tape();
    let t = tape.constant(target.clone());
    match kind {
        DistillKind::Kl => {
            let log_t = target.map(|p| if p > 0.0 { p.ln() } else { 0.0 });
            let log_q = q.clamp_min(PROB_FLOOR)?.log()?;
            tape.constant(log_t).sub(log_q)?.mul(t)?.sum()
        }
        DistillKind::Mse => {
            let d = q.sub(t)?;
            d.mul(d)?.mean()
        }
        DistillKind::CrossEntropy => q
            .clamp_min(PROB_FLOOR)?
            .log()?
            .mul(t)?
            .sum()?
            .scale(-1.0),
    }
}

pub fn distill_var<'t>(
    params: &Bound<'t>,
    task: &TaskBatch,
    target: &Tensor,
    pi: PiKind,
    kind: DistillKind,
) -> Result<Var<'t>> {
    distill_from_probs(pi_forward(params, task, pi)?, target, kind)
}

pub fn distill_loss(
    f_current: &ParameterSet,
    task: &TaskBatch,
    target: &Tensor,
    pi: PiKind,
    kind: DistillKind,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = f_current.bind(&tape, false);
    Ok(distill_var(&bound, task, target, pi, kind)?.item())
}

/// Value and parameter gradient of [`distill_loss`].
pub fn distill_value_and_grad(
    f_current: &ParameterSet,
    task: &TaskBatch,
    target: &Tensor,
    pi: PiKind,
    kind: DistillKind,
) -> Result<(f64, ParameterSet)> {
    let tape = Tape::new();
    let bound = f_current.bind(&tape, true);
    let l = distill_var(&bound, task, target, pi, kind)?;
    let value = l.item();
    if !value.is_finite() {
        return Err(Error::NonFinite("distillation loss".into()));
    }
    Ok((value, bound.gradients(&tape, l)?))
}

/// One task of the outer objective, seen as a bi-level problem over flat
/// parameter vectors.
pub struct TaskProblem<'a> {
    pub layout: &'a ParameterSet,
    pub task: &'a TaskBatch,
    pub target: &'a Tensor,
    pub steps: usize,
    pub alpha: f64,
    pub loss: LossKind,
    pub pi: PiKind,
    pub distill: DistillKind,
}

impl TaskProblem<'_> {
    fn rho(&self) -> f64 {
        self.alpha * self.steps as f64
    }

    fn ssl_grad(&self, phi: &[f64]) -> Result<Vec<f64>> {
        let params = self.layout.with_flat(phi)?;
        Ok(loss_and_grad(&params, self.task, self.loss)?.1.flatten())
    }
}

impl BilevelProblem for TaskProblem<'_> {
    fn inner_dim(&self) -> usize {
        self.layout.numel()
    }
    fn inner_steps(&self) -> usize {
        self.steps
    }
    fn inner_lr(&self) -> f64 {
        self.alpha
    }
    fn inner_init(&self, theta: &[f64]) -> Vec<f64> {
        theta.to_vec()
    }
    fn init_is_theta(&self) -> bool {
        true
    }
    fn inner_grad(&self, phi: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        let rho = self.rho();
        let g = self.ssl_grad(phi)?;
        Ok(g.iter()
            .zip(phi.iter().zip(theta))
            .map(|(gv, (p, t))| gv + (p - t) / rho)
            .collect())
    }
    fn inner_grad_theta(&self, phi: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        let rho = self.rho();
        Ok(phi.iter().zip(theta).map(|(p, t)| (t - p) / rho).collect())
    }
    fn step_grad(&self, phi: &[f64], _theta: &[f64]) -> Result<Vec<f64>> {
        self.ssl_grad(phi)
    }
    fn step_grad_theta(&self, _phi: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; theta.len()])
    }
    fn outer_value(&self, phi: &[f64], _theta: &[f64]) -> Result<f64> {
        distill_loss(&self.layout.with_flat(phi)?, self.task, self.target, self.pi, self.distill)
    }
    fn outer_grad(&self, phi: &[f64], theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let params = self.layout.with_flat(phi)?;
        let (_, g) = distill_value_and_grad(&params, self.task, self.target, self.pi, self.distill)?;
        Ok((g.flatten(), vec![0.0; theta.len()]))
    }
    fn inverse_curvature(&self) -> f64 {
        self.rho()
    }
}

/// What one task contributes to an outer step.
#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub adapt: TaskAdaptResult,
    /// Distillation loss of the `K`-step model.
    pub distill_loss: f64,
    pub hypergrad: Vec<f64>,
}

/// Inner adaptation, target construction and the task's hypergradient.
pub fn task_pipeline(theta: &ParameterSet, task: &TaskBatch, config: &GesslConfig) -> Result<TaskOutcome> {
    let (iterates, k_trace) = inner_adapt_traced(theta, task, config.k, config.alpha, config.loss)?;
    let f_k = iterates.last().expect("non-empty");
    let adapt = build_target(
        f_k,
        &k_trace,
        task,
        config.lambda_extra,
        config.alpha,
        config.loss,
        config.pi_kind,
    )?;
    let problem = TaskProblem {
        layout: theta,
        task,
        target: &adapt.target_distributions,
        steps: config.k,
        alpha: config.alpha,
        loss: config.loss,
        pi: config.pi_kind,
        distill: config.distill_kind,
    };
    let flat_theta = theta.flatten();
    let traj: Vec<Vec<f64>> = iterates.iter().map(ParameterSet::flatten).collect();
    let phi_k = traj.last().expect("non-empty");
    let distill_loss = problem.outer_value(phi_k, &flat_theta)?;
    // without inner movement phi_K = theta and the first-order gradient is exact
    let hypergrad = if problem.rho() == 0.0 {
        hypergrad::first_order_at(&problem, phi_k, &flat_theta)?
    } else {
        hypergrad::hypergrad_from_trajectory(&problem, &flat_theta, &traj, config.hypergrad)?
    };
    Ok(TaskOutcome {
        adapt,
        distill_loss,
        hypergrad,
    })
}

fn run_tasks(theta: &ParameterSet, tasks: &[TaskBatch], config: &GesslConfig) -> Result<Vec<TaskOutcome>> {
    #[cfg(feature = "parallel")]
    let out: Vec<Result<TaskOutcome>> = tasks.par_iter().map(|t| task_pipeline(theta, t, config)).collect();
    #[cfg(not(feature = "parallel"))]
    let out: Vec<Result<TaskOutcome>> = tasks.iter().map(|t| task_pipeline(theta, t, config)).collect();
    out.into_iter().collect()
}

/// Optimizer memory carried across outer steps.
#[derive(Clone, Debug)]
pub struct OuterState {
    pub optim: OptimState,
    /// Slow weights of the lookahead strategy.
    pub slow: Option<ParameterSet>,
    pub steps_taken: usize,
}

impl OuterState {
    pub fn new(theta: &ParameterSet, config: &GesslConfig) -> Result<Self> {
        Ok(OuterState {
            optim: OptimState::new(theta, config.outer_momentum, config.outer_weight_decay)?,
            slow: match config.hypergrad {
                HypergradKind::Lookahead { .. } => Some(theta.clone()),
                _ => None,
            },
            steps_taken: 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub inner_loss_mean: f64,
    pub distill_loss: f64,
    pub outer_grad_norm: f64,
    /// Sum of the per-task distillation losses before the step.
    pub objective: f64,
}

/// One outer update over `tasks`, accumulated in task order.
pub fn outer_step(
    theta: &ParameterSet,
    tasks: &[TaskBatch],
    config: &GesslConfig,
    state: &mut OuterState,
) -> Result<(ParameterSet, StepMetrics)> {
    if tasks.is_empty() {
        return Err(Error::invalid("outer step needs at least one task"));
    }
    let outcomes = run_tasks(theta, tasks, config)?;
    let mut total = vec![0.0; theta.numel()];
    let mut objective = 0.0;
    let mut inner_sum = 0.0;
    let mut inner_count = 0usize;
    for o in &outcomes {
        for (acc, g) in total.iter_mut().zip(&o.hypergrad) {
            *acc += g;
        }
        objective += o.distill_loss;
        inner_sum += o.adapt.inner_loss_trace.iter().sum::<f64>();
        inner_count += o.adapt.inner_loss_trace.len();
    }
    let grads = theta.with_flat(&total)?;
    let mut next = sgd_step(theta, &grads, config.beta, &mut state.optim)?;
    state.steps_taken += 1;
    if let (HypergradKind::Lookahead { alpha_la, sync_period }, Some(slow)) =
        (config.hypergrad, state.slow.as_mut())
    {
        if state.steps_taken % sync_period == 0 {
            *slow = hypergrad::lookahead_update(slow, &next, alpha_la)?;
            next = slow.clone();
        }
    }
    let metrics = StepMetrics {
        inner_loss_mean: if inner_count > 0 { inner_sum / inner_count as f64 } else { 0.0 },
        distill_loss: objective / outcomes.len() as f64,
        outer_grad_norm: hypergrad::norm(&total),
        objective,
    };
    Ok((next, metrics))
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub episode: u64,
    pub inner_loss_mean: f64,
    /// Mean per-task distillation loss; absent for the SSL baseline.
    pub distill_loss: Option<f64>,
    pub outer_grad_norm: f64,
    pub probe_acc: Option<f64>,
    pub sigma_mean: Option<f64>,
    pub seed: u64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub metrics: Vec<MetricsRecord>,
}

/// Hook called with each record (before it is stored) and the parameters
/// after that step.
pub type EvalHook<'a> = dyn FnMut(&mut MetricsRecord, &ParameterSet) -> Result<()> + 'a;

/// Start of a wall-clock measurement; `None` where the platform has no clock.
pub(crate) fn stopwatch() -> Option<Instant> {
    if cfg!(target_arch = "wasm32") {
        None
    } else {
        Some(Instant::now())
    }
}

pub(crate) fn elapsed_ms(start: Option<Instant>) -> u64 {
    start.map_or(0, |t| t.elapsed().as_millis() as u64)
}

fn check_dataset(dataset: &Dataset, config: &GesslConfig) -> Result<()> {
    if config.n > dataset.len() {
        return Err(Error::invalid(format!(
            "task size {} exceeds the {} dataset rows",
            config.n,
            dataset.len()
        )));
    }
    Ok(())
}

/// Trains from freshly initialized parameters seeded by `master_seed`.
pub fn train(dataset: &Dataset, config: &GesslConfig) -> Result<TrainOutcome> {
    train_with(dataset, config, &mut |_, _| Ok(()))
}

pub fn train_with(dataset: &Dataset, config: &GesslConfig, hook: &mut EvalHook<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(dataset, config)?;
    let mut theta = init_encoder(&config.encoder(dataset.dim()), config.master_seed)?;
    let mut state = OuterState::new(&theta, config)?;
    let mut metrics = Vec::with_capacity(config.episodes);
    for e in 0..config.episodes {
        let clock = stopwatch();
        let tasks = make_episode(
            dataset,
            config.master_seed,
            e as u64,
            config.m,
            config.n,
            config.views,
            &config.augmentation,
        )?;
        let (next, m) = outer_step(&theta, &tasks, config, &mut state)?;
        theta = next;
        let mut rec = MetricsRecord {
            step: e as u64 + 1,
            episode: e as u64,
            inner_loss_mean: m.inner_loss_mean,
            distill_loss: Some(m.distill_loss),
            outer_grad_norm: m.outer_grad_norm,
            probe_acc: None,
            sigma_mean: None,
            seed: config.master_seed,
            wall_ms: 0,
        };
        hook(&mut rec, &theta)?;
        rec.wall_ms = elapsed_ms(clock);
        metrics.push(rec);
    }
    Ok(TrainOutcome { params: theta, metrics })
}

/// Conventional SSL on the same task streams: one optimizer step per task
/// visit, cycling the episode's tasks until the episode's inner-gradient
/// budget of GeSSL is spent.
pub fn train_baseline(dataset: &Dataset, config: &GesslConfig) -> Result<TrainOutcome> {
    train_baseline_with(dataset, config, &mut |_, _| Ok(()))
}

pub fn train_baseline_with(
    dataset: &Dataset,
    config: &GesslConfig,
    hook: &mut EvalHook<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(dataset, config)?;
    let mut theta = init_encoder(&config.encoder(dataset.dim()), config.master_seed)?;
    let mut optim = OptimState::new(&theta, config.outer_momentum, config.outer_weight_decay)?;
    let mut metrics = Vec::with_capacity(config.episodes);
    for e in 0..config.episodes {
        let clock = stopwatch();
        let tasks = make_episode(
            dataset,
            config.master_seed,
            e as u64,
            config.m,
            config.n,
            config.views,
            &config.augmentation,
        )?;
        let budget = config.inner_budget();
        let (mut loss_sum, mut norm_sum) = (0.0, 0.0);
        for s in 0..budget {
            let (value, grads) = loss_and_grad(&theta, &tasks[s % tasks.len()], config.loss)?;
            loss_sum += value;
            norm_sum += hypergrad::norm(&grads.flatten());
            theta = sgd_step(&theta, &grads, config.baseline_lr, &mut optim)?;
        }
        let mut rec = MetricsRecord {
            step: e as u64 + 1,
            episode: e as u64,
            inner_loss_mean: loss_sum / budget as f64,
            distill_loss: None,
            outer_grad_norm: norm_sum / budget as f64,
            probe_acc: None,
            sigma_mean: None,
            seed: config.master_seed,
            wall_ms: 0,
        };
        hook(&mut rec, &theta)?;
        rec.wall_ms = elapsed_ms(clock);
        metrics.push(rec);
    }
    Ok(TrainOutcome { params: theta, metrics })
}

/// One row of [`theorem_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremRow {
    pub alpha: f64,
    pub beta: f64,
    /// Share of outer steps whose objective did not increase.
    pub fraction: f64,
    /// Mean change of the objective per step.
    pub mean_delta: f64,
    pub steps: usize,
}

pub const THEOREM_STEPS: usize = 50;
pub const THEOREM_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Small-step monotonicity of the outer objective.
///
/// Each step scores the objective at `theta`, moves `theta` by a plain
/// (momentum-free, undecayed) hypergradient step and rescores with the same
/// tasks and the same frozen targets.
pub fn theorem_check(
    dataset: &Dataset,
    base: &GesslConfig,
    lr_grid: &[(f64, f64)],
    seeds: &[u64],
    steps: usize,
) -> Result<Vec<TheoremRow>> {
    lr_grid
        .iter()
        .map(|&(alpha, beta)| {
            let config = GesslConfig {
                alpha,
                beta,
                outer_momentum: 0.0,
                outer_weight_decay: 0.0,
                ..base.clone()
            };
            config.validate()?;
            check_dataset(dataset, &config)?;
            let (mut kept, mut total, mut delta_sum) = (0usize, 0usize, 0.0);
            for &seed in seeds {
                let mut theta = init_encoder(&config.encoder(dataset.dim()), seed)?;
                for t in 0..steps {
                    let tasks = make_episode(
                        dataset,
                        seed,
                        t as u64,
                        config.m,
                        config.n,
                        config.views,
                        &config.augmentation,
                    )?;
                    let outcomes = run_tasks(&theta, &tasks, &config)?;
                    let mut grad = vec![0.0; theta.numel()];
                    let mut before = 0.0;
                    for o in &outcomes {
                        before += o.distill_loss;
                        for (acc, g) in grad.iter_mut().zip(&o.hypergrad) {
                            *acc += g;
                        }
                    }
                    let mut state = OptimState::plain(&theta);
                    theta = sgd_step(&theta, &theta.with_flat(&grad)?, beta, &mut state)?;
                    let mut after = 0.0;
                    for (task, o) in tasks.iter().zip(&outcomes) {
                        let f_k = inner_adapt(&theta, task, config.k, alpha, config.loss)?;
                        after += distill_loss(
                            &f_k,
                            task,
                            &o.adapt.target_distributions,
                            config.pi_kind,
                            config.distill_kind,
                        )?;
                    }
                    if after <= before {
                        kept += 1;
                    }
                    total += 1;
                    delta_sum += after - before;
                }
            }
            Ok(TheoremRow {
                alpha,
                beta,
                fraction: if total == 0 { 1.0 } else { kept as f64 / total as f64 },
                mean_delta: if total == 0 { 0.0 } else { delta_sum / total as f64 },
                steps: total,
            })
        })
        .collect()
}
