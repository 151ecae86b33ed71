//! Hypergradients of bi-level problems.
//!
//! The upper level owns `theta`, the lower level `phi`. The lower problem is
//! solved by `inner_steps` of plain gradient descent and every strategy then
//! estimates `d F(phi*(theta), theta) / d theta`:
//!
//! * ITD differentiates backwards through the stored descent trajectory.
//! * AID applies the implicit function theorem,
//!   `dF/dtheta = F_theta - L_{theta phi} H^{-1} F_phi`, with `H^{-1} F_phi`
//!   from a truncated Neumann series, conjugate gradient, or a scalar
//!   inverse-curvature (finite-difference variant).
//!
//! All second-order products are central differences of first-order
//! gradients, so the differentiation record only ever runs first order.

use std::cell::Cell;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParameterSet;
use crate::rng::{Purpose, StreamKey};

/// Maximum unroll length for [`hypergrad_itd`].
pub const ITD_MAX_STEPS: usize = 20;

pub trait BilevelProblem {
    fn inner_dim(&self) -> usize;

    fn inner_steps(&self) -> usize;

    fn inner_lr(&self) -> f64;

    /// Starting point of the inner descent.
    fn inner_init(&self, theta: &[f64]) -> Vec<f64>;

    /// True when the inner descent starts at `theta` itself, which adds a
    /// direct path from the start point to the hypergradient.
    fn init_is_theta(&self) -> bool {
        false
    }

    /// `grad_phi L(phi, theta)` of the lower objective whose stationary point
    /// the implicit strategies assume.
    fn inner_grad(&self, phi: &[f64], theta: &[f64]) -> Result<Vec<f64>>;

    /// `grad_theta L(phi, theta)`.
    fn inner_grad_theta(&self, phi: &[f64], theta: &[f64]) -> Result<Vec<f64>>;

    /// Gradient followed by the descent itself. Defaults to [`inner_grad`](Self::inner_grad).
    fn step_grad(&self, phi: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.inner_grad(phi, theta)
    }

    /// `grad_theta` of the descent objective. Defaults to [`inner_grad_theta`](Self::inner_grad_theta).
    fn step_grad_theta(&self, phi: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.inner_grad_theta(phi, theta)
    }

    fn outer_value(&self, phi: &[f64], theta: &[f64]) -> Result<f64>;

    /// `(grad_phi F, grad_theta F)`.
    fn outer_grad(&self, phi: &[f64], theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;

    /// Scalar stand-in for the inverse inner Hessian used by the
    /// finite-difference strategy.
    fn inverse_curvature(&self) -> f64 {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum HypergradKind {
    ItdUnrolled,
    AidNeumann { terms: usize, eta: f64 },
    AidCg { iters: usize, tol: f64 },
    AidFd { epsilon_rel: f64 },
    Lookahead { alpha_la: f64, sync_period: usize },
}

impl Default for HypergradKind {
    fn default() -> Self {
        HypergradKind::AidFd { epsilon_rel: 1e-3 }
    }
}

impl HypergradKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            HypergradKind::ItdUnrolled => true,
            HypergradKind::AidNeumann { terms, eta } => terms >= 1 && eta > 0.0,
            HypergradKind::AidCg { iters, tol } => iters >= 1 && tol > 0.0,
            HypergradKind::AidFd { epsilon_rel } => epsilon_rel > 0.0,
            HypergradKind::Lookahead {
                alpha_la,
                sync_period,
            } => (0.0..=1.0).contains(&alpha_la) && sync_period >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("hypergradient settings out of range: {self:?}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HypergradKind::ItdUnrolled => "itd",
            HypergradKind::AidNeumann { .. } => "aid_neumann",
            HypergradKind::AidCg { .. } => "aid_cg",
            HypergradKind::AidFd { .. } => "aid_fd",
            HypergradKind::Lookahead { .. } => "lookahead",
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(yv, xv)| yv + alpha * xv).collect()
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Central-difference directional derivative of `grad` along `v`:
/// `[grad(x + r v) - grad(x - r v)] / 2r`, `r = 1e-4 (1 + |x|) / (1 + |v|)`.
pub fn directional_fd<G>(grad: G, x: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let nv = norm(v);
    if nv == 0.0 {
        return Ok(vec![0.0; grad_len(&grad, x, v)?]);
    }
    let r = 1e-4 * (1.0 + norm(x)) / (1.0 + nv);
    let plus = grad(&axpy(r, v, x))?;
    let minus = grad(&axpy(-r, v, x))?;
    Ok(plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) / (2.0 * r))
        .collect())
}

fn grad_len<G>(grad: &G, x: &[f64], _v: &[f64]) -> Result<usize>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    // zero direction: the output length is whatever the gradient returns
    Ok(grad(x)?.len())
}

/// Hessian-vector product `grad^2_phi L(phi, theta) v` by central differences.
pub fn hvp<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &[f64],
    theta: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    if norm(v) == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    directional_fd(|p| problem.inner_grad(p, theta), phi, v)
}

/// Mixed product `(d/dphi grad_theta L) v` by central differences.
pub fn cross_product<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &[f64],
    theta: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    if norm(v) == 0.0 {
        return Ok(vec![0.0; theta.len()]);
    }
    directional_fd(|p| problem.inner_grad_theta(p, theta), phi, v)
}

/// Runs the inner descent, returning every iterate `phi_0 .. phi_T`.
pub fn unroll<P: BilevelProblem + ?Sized>(problem: &P, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut phi = problem.inner_init(theta);
    let mut traj = Vec::with_capacity(problem.inner_steps() + 1);
    traj.push(phi.clone());
    for _ in 0..problem.inner_steps() {
        let g = problem.step_grad(&phi, theta)?;
        phi = axpy(-problem.inner_lr(), &g, &phi);
        check_finite(&phi, "inner iterate")?;
        traj.push(phi.clone());
    }
    Ok(traj)
}

/// Reverse-mode derivative through the stored descent trajectory.
pub fn itd_from_trajectory<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    traj: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let steps = traj.len().saturating_sub(1);
    if steps > ITD_MAX_STEPS {
        return Err(Error::invalid(format!(
            "ITD unroll of {steps} steps exceeds the cap of {ITD_MAX_STEPS}"
        )));
    }
    let last = traj.last().ok_or_else(|| Error::invalid("empty trajectory"))?;
    let (mut adj, mut g) = problem.outer_grad(last, theta)?;
    let lr = problem.inner_lr();
    for phi in traj[..steps].iter().rev() {
        if norm(&adj) == 0.0 {
            break;
        }
        let cross = directional_fd(|p| problem.step_grad_theta(p, theta), phi, &adj)?;
        g = axpy(-lr, &cross, &g);
        let h = directional_fd(|p| problem.step_grad(p, theta), phi, &adj)?;
        adj = axpy(-lr, &h, &adj);
    }
    if problem.init_is_theta() {
        g = axpy(1.0, &adj, &g);
    }
    check_finite(&g, "ITD hypergradient")?;
    Ok(g)
}

pub fn hypergrad_itd<P: BilevelProblem + ?Sized>(problem: &P, theta: &[f64]) -> Result<Vec<f64>> {
    if problem.inner_steps() > ITD_MAX_STEPS {
        return Err(Error::invalid(format!(
            "ITD unroll of {} steps exceeds the cap of {ITD_MAX_STEPS}",
            problem.inner_steps()
        )));
    }
    let traj = unroll(problem, theta)?;
    itd_from_trajectory(problem, theta, &traj)
}

/// `F_theta - (L_{theta phi}) w` for an approximate `w = H^{-1} F_phi`,
/// plus the start-point path when the descent starts at `theta`.
fn implicit_combine<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &[f64],
    theta: &[f64],
    g_theta: &[f64],
    w: &[f64],
) -> Result<Vec<f64>> {
    let cross = cross_product(problem, phi, theta, w)?;
    let g = axpy(-1.0, &cross, g_theta);
    check_finite(&g, "implicit hypergradient")?;
    Ok(g)
}

/// `eta * sum_{k<terms} (I - eta H)^k v`.
pub fn neumann_solve<H>(hvp_fn: H, v: &[f64], terms: usize, eta: f64) -> Result<Vec<f64>>
where
    H: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut p = v.to_vec();
    let mut acc = v.to_vec();
    for _ in 1..terms {
        let hp = hvp_fn(&p)?;
        p = axpy(-eta, &hp, &p);
        acc = axpy(1.0, &p, &acc);
    }
    let w: Vec<f64> = acc.iter().map(|x| eta * x).collect();
    check_finite(&w, "Neumann series")?;
    Ok(w)
}

pub fn aid_neumann_at<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &[f64],
    theta: &[f64],
    terms: usize,
    eta: f64,
) -> Result<Vec<f64>> {
    let (g_phi, g_theta) = problem.outer_grad(phi, theta)?;
    let w = neumann_solve(|v| hvp(problem, phi, theta, v), &g_phi, terms, eta)?;
    implicit_combine(problem, phi, theta, &g_theta, &w)
}

pub fn hypergrad_aid_neumann<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    terms: usize,
    eta: f64,
) -> Result<Vec<f64>> {
    let phi = unroll(problem, theta)?.pop().expect("non-empty");
    aid_neumann_at(problem, &phi, theta, terms, eta)
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    /// Residual norm before the first and after every iteration.
    pub residuals: Vec<f64>,
}

/// Conjugate gradient on `H x = b`, starting from zero.
pub fn cg_solve<H>(hvp_fn: H, b: &[f64], iters: usize, tol: f64) -> Result<CgOutcome>
where
    H: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut residuals = vec![rr.sqrt()];
    for _ in 0..iters {
        if rr.sqrt() <= tol {
            break;
        }
        let hp = hvp_fn(&p)?;
        let php = dot(&p, &hp);
        if !php.is_finite() || php <= 0.0 {
            if !php.is_finite() {
                return Err(Error::NonFinite("CG curvature".into()));
            }
            break;
        }
        let alpha = rr / php;
        x = axpy(alpha, &p, &x);
        r = axpy(-alpha, &hp, &r);
        let rr_next = dot(&r, &r);
        if !rr_next.is_finite() {
            return Err(Error::NonFinite("CG residual".into()));
        }
        residuals.push(rr_next.sqrt());
        p = axpy(rr_next / rr, &p, &r);
        rr = rr_next;
    }
    Ok(CgOutcome {
        solution: x,
        residuals,
    })
}

pub fn aid_cg_at<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &[f64],
    theta: &[f64],
    iters: usize,
    tol: f64,
) -> Result<Vec<f64>> {
    let (g_phi, g_theta) = problem.outer_grad(phi, theta)?;
    let w = cg_solve(|v| hvp(problem, phi, theta, v), &g_phi, iters, tol)?.solution;
    implicit_combine(problem, phi, theta, &g_theta, &w)
}

pub fn hypergrad_aid_cg<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    iters: usize,
    tol: f64,
) -> Result<Vec<f64>> {
    let phi = unroll(problem, theta)?.pop().expect("non-empty");
    aid_cg_at(problem, &phi, theta, iters, tol)
}

/// `F_theta - c [grad_theta L(phi + e v) - grad_theta L(phi - e v)] / 2e`
/// with `v = F_phi`, `e = epsilon_rel / (1 + |v|)` and `c` the problem's
/// inverse curvature.
pub fn aid_fd_at<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &[f64],
    theta: &[f64],
    epsilon_rel: f64,
) -> Result<Vec<f64>> {
    let (v, g_theta) = problem.outer_grad(phi, theta)?;
    let nv = norm(&v);
    if !nv.is_finite() {
        return Err(Error::NonFinite("outer gradient in AID-FD".into()));
    }
    if nv == 0.0 {
        return Ok(g_theta);
    }
    let eps = epsilon_rel / (1.0 + nv);
    let plus = problem.inner_grad_theta(&axpy(eps, &v, phi), theta)?;
    let minus = problem.inner_grad_theta(&axpy(-eps, &v, phi), theta)?;
    let c = problem.inverse_curvature();
    let g: Vec<f64> = g_theta
        .iter()
        .zip(plus.iter().zip(&minus))
        .map(|(gt, (p, m))| gt - c * (p - m) / (2.0 * eps))
        .collect();
    check_finite(&g, "AID-FD hypergradient")?;
    Ok(g)
}

pub fn hypergrad_aid_fd<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    epsilon_rel: f64,
) -> Result<Vec<f64>> {
    let phi = unroll(problem, theta)?.pop().expect("non-empty");
    aid_fd_at(problem, &phi, theta, epsilon_rel)
}

/// Gradient with every second-order path dropped: `F_theta`, plus `F_phi`
/// when the descent starts at `theta`. This is what the fast weights follow
/// under the lookahead strategy.
pub fn first_order_at<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &[f64],
    theta: &[f64],
) -> Result<Vec<f64>> {
    let (g_phi, g_theta) = problem.outer_grad(phi, theta)?;
    Ok(if problem.init_is_theta() {
        axpy(1.0, &g_phi, &g_theta)
    } else {
        g_theta
    })
}

/// Dispatches on `kind`, given an already computed trajectory.
pub fn hypergrad_from_trajectory<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    traj: &[Vec<f64>],
    kind: HypergradKind,
) -> Result<Vec<f64>> {
    let phi = traj.last().ok_or_else(|| Error::invalid("empty trajectory"))?;
    match kind {
        HypergradKind::ItdUnrolled => itd_from_trajectory(problem, theta, traj),
        HypergradKind::AidNeumann { terms, eta } => aid_neumann_at(problem, phi, theta, terms, eta),
        HypergradKind::AidCg { iters, tol } => aid_cg_at(problem, phi, theta, iters, tol),
        HypergradKind::AidFd { epsilon_rel } => aid_fd_at(problem, phi, theta, epsilon_rel),
        HypergradKind::Lookahead { .. } => first_order_at(problem, phi, theta),
    }
}

pub fn hypergrad<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    kind: HypergradKind,
) -> Result<Vec<f64>> {
    kind.validate()?;
    let traj = unroll(problem, theta)?;
    hypergrad_from_trajectory(problem, theta, &traj, kind)
}

/// `slow + alpha (fast - slow)`.
pub fn lookahead_update(
    slow: &ParameterSet,
    fast: &ParameterSet,
    alpha_la: f64,
) -> Result<ParameterSet> {
    slow.check_same_layout(fast)?;
    if !(0.0..=1.0).contains(&alpha_la) {
        return Err(Error::invalid(format!("lookahead alpha must be in [0,1], got {alpha_la}")));
    }
    let s = slow.flatten();
    let f = fast.flatten();
    let mixed: Vec<f64> = s
        .iter()
        .zip(&f)
        .map(|(sv, fv)| if alpha_la == 1.0 { *fv } else { sv + alpha_la * (fv - sv) })
        .collect();
    slow.with_flat(&mixed)
}

/// Wraps a problem and counts first-order gradient evaluations.
pub struct Counted<'a, P: ?Sized> {
    inner: &'a P,
    inner_evals: Cell<usize>,
    outer_evals: Cell<usize>,
}

impl<'a, P: BilevelProblem + ?Sized> Counted<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        Counted {
            inner,
            inner_evals: Cell::new(0),
            outer_evals: Cell::new(0),
        }
    }

    /// Inner gradient evaluations (either partial counts as one).
    pub fn inner_evals(&self) -> usize {
        self.inner_evals.get()
    }

    pub fn outer_evals(&self) -> usize {
        self.outer_evals.get()
    }

    fn tick(&self) {
        self.inner_evals.set(self.inner_evals.get() + 1);
    }
}

impl<P: BilevelProblem + ?Sized> BilevelProblem for Counted<'_, P> {
    fn inner_dim(&self) -> usize {
        self.inner.inner_dim()
    }
    fn inner_steps(&self) -> usize {
        self.inner.inner_steps()
    }
    fn inner_lr(&self) -> f64 {
        self.inner.inner_lr()
    }
    fn inner_init(&self, theta: &[f64]) -> Vec<f64> {
        self.inner.inner_init(theta)
    }
    fn init_is_theta(&self) -> bool {
        self.inner.init_is_theta()
    }
    fn inner_grad(&self, phi: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.tick();
        self.inner.inner_grad(phi, theta)
    }
    fn inner_grad_theta(&self, phi: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.tick();
        self.inner.inner_grad_theta(phi, theta)
    }
    fn step_grad(&self, phi: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.tick();
        self.inner.step_grad(phi, theta)
    }
    fn step_grad_theta(&self, phi: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.tick();
        self.inner.step_grad_theta(phi, theta)
    }
    fn outer_value(&self, phi: &[f64], theta: &[f64]) -> Result<f64> {
        self.inner.outer_value(phi, theta)
    }
    fn outer_grad(&self, phi: &[f64], theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.outer_evals.set(self.outer_evals.get() + 1);
        self.inner.outer_grad(phi, theta)
    }
    fn inverse_curvature(&self) -> f64 {
        self.inner.inverse_curvature()
    }
}

/// Dense symmetric matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SymMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::shape("matrix", format!("{} values for {n}x{n}", data.len())));
        }
        Ok(SymMatrix { n, data })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in values.iter().enumerate() {
            data[i * n + i] = *v;
        }
        SymMatrix { n, data }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks(self.n)
            .map(|row| dot(row, v))
            .collect()
    }
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve_dense(a: &SymMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.n;
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .expect("non-empty");
        if m[piv * n + col].abs() <= 1e-13 * scale {
            return Err(Error::invalid("matrix is singular"));
        }
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
            x.swap(col, piv);
        }
        for row in col + 1..n {
            let f = m[row * n + col] / m[col * n + col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= f * m[col * n + k];
            }
            x[row] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let s: f64 = (col + 1..n).map(|k| m[col * n + k] * x[k]).sum();
        x[col] = (x[col] - s) / m[col * n + col];
    }
    Ok(x)
}

/// `L = 1/2 (phi - theta)^T A (phi - theta) + b^T phi`, `F = 1/2 |phi - c|^2`.
#[derive(Clone, Debug)]
pub struct QuadraticBilevel {
    pub a: SymMatrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub phi0: Vec<f64>,
    pub steps: usize,
    pub lr: f64,
    /// Known spectrum bounds of `A`, when the constructor knows them.
    pub eig_min: f64,
    pub eig_max: f64,
}

impl QuadraticBilevel {
    pub fn dim(&self) -> usize {
        self.b.len()
    }
}

impl BilevelProblem for QuadraticBilevel {
    fn inner_dim(&self) -> usize {
        self.dim()
    }
    fn inner_steps(&self) -> usize {
        self.steps
    }
    fn inner_lr(&self) -> f64 {
        self.lr
    }
    fn inner_init(&self, _theta: &[f64]) -> Vec<f64> {
        self.phi0.clone()
    }
    fn inner_grad(&self, phi: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        let d: Vec<f64> = phi.iter().zip(theta).map(|(p, t)| p - t).collect();
        Ok(axpy(1.0, &self.b, &self.a.apply(&d)))
    }
    fn inner_grad_theta(&self, phi: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        let d: Vec<f64> = phi.iter().zip(theta).map(|(p, t)| t - p).collect();
        Ok(self.a.apply(&d))
    }
    fn outer_value(&self, phi: &[f64], _theta: &[f64]) -> Result<f64> {
        Ok(0.5 * phi.iter().zip(&self.c).map(|(p, c)| (p - c).powi(2)).sum::<f64>())
    }
    fn outer_grad(&self, phi: &[f64], theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            phi.iter().zip(&self.c).map(|(p, c)| p - c).collect(),
            vec![0.0; theta.len()],
        ))
    }
}

/// Exact hypergradient of [`QuadraticBilevel`]: `phi* = theta - A^{-1} b`,
/// `dF/dtheta = phi* - c`.
pub fn quadratic_oracle(a: &SymMatrix, b: &[f64], c: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    let shift = solve_dense(a, b)?;
    Ok(theta
        .iter()
        .zip(&shift)
        .zip(c)
        .map(|((t, s), cv)| t - s - cv)
        .collect())
}

/// How the random SPD matrices of a problem family are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FamilyKind {
    /// `A = I + H`, `H` PSD with spectral norm at most `spread`: an inner
    /// problem dominated by a unit proximal term.
    Proximal { spread: f64 },
    /// Eigenvalues drawn uniformly from `[lo, hi]`.
    Spectrum { lo: f64, hi: f64 },
}

fn random_orthogonal(n: usize, rng: &mut crate::rng::Stream) -> Vec<Vec<f64>> {
    // Gram-Schmidt on a Gaussian matrix
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for u in &q {
            let p = dot(&v, u);
            v = axpy(-p, u, &v);
        }
        let nv = norm(&v);
        if nv > 1e-8 {
            q.push(v.iter().map(|x| x / nv).collect());
        }
    }
    q
}

fn spd_with_spectrum(eigs: &[f64], rng: &mut crate::rng::Stream) -> SymMatrix {
    let n = eigs.len();
    let q = random_orthogonal(n, rng);
    let mut data = vec![0.0; n * n];
    for (k, lam) in eigs.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] += lam * q[k][i] * q[k][j];
            }
        }
    }
    // exact symmetry
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (data[i * n + j] + data[j * n + i]);
            data[i * n + j] = s;
            data[j * n + i] = s;
        }
    }
    SymMatrix { n, data }
}

/// Seeded family of `count` quadratic bi-level problems with `2 <= d <= max_dim`.
///
/// Each problem uses the step size `2 / (eig_min + eig_max)` and enough
/// steps (capped at [`ITD_MAX_STEPS`]) to drive the inner error below 1e-12
/// when the conditioning allows it.
pub fn quadratic_family(seed: u64, count: usize, max_dim: usize, kind: FamilyKind) -> Vec<QuadraticBilevel> {
    (0..count)
        .map(|i| {
            let mut rng = StreamKey::new(seed, Purpose::Oracle).task(i as u64).stream();
            let d = rng.random_range(2..=max_dim.max(2));
            let eigs: Vec<f64> = match kind {
                FamilyKind::Proximal { spread } => (0..d).map(|_| 1.0 + spread * rng.random::<f64>()).collect(),
                FamilyKind::Spectrum { lo, hi } => (0..d).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect(),
            };
            let a = spd_with_spectrum(&eigs, &mut rng);
            let eig_min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
            let eig_max = eigs.iter().cloned().fold(0.0, f64::max);
            let gauss = |rng: &mut crate::rng::Stream| -> Vec<f64> {
                (0..d).map(|_| StandardNormal.sample(rng)).collect()
            };
            let b = gauss(&mut rng);
            let c = gauss(&mut rng);
            let phi0 = gauss(&mut rng);
            let lr = 2.0 / (eig_min + eig_max);
            let rate = (eig_max - eig_min) / (eig_max + eig_min);
            let steps = if rate <= 0.0 {
                1
            } else {
                ((1e-12f64.ln() / rate.ln()).ceil() as usize).clamp(1, ITD_MAX_STEPS)
            };
            QuadraticBilevel {
                a,
                b,
                c,
                phi0,
                steps,
                lr,
                eig_min,
                eig_max,
            }
        })
        .collect()
}

/// Random upper-level point for family member `i`.
pub fn family_theta(seed: u64, i: usize, d: usize) -> Vec<f64> {
    let mut rng = StreamKey::new(seed, Purpose::Oracle).task(i as u64).sample(1).stream();
    (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn rel_err(est: &[f64], exact: &[f64]) -> f64 {
    let diff: Vec<f64> = est.iter().zip(exact).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(exact).max(1e-300)
}
