//! Self-supervised losses on projected views.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{encode, project, Bound};
use crate::taskgen::TaskBatch;
use crate::tensor::{Tensor, Var};

/// Column standardization epsilon inside [`barlow`].
pub const BARLOW_EPS: f64 = 1e-9;

/// Logit added on the diagonal so an anchor never competes with itself.
const SELF_MASK: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    NtXent { tau: f64 },
    Barlow { lambda_offdiag: f64 },
    AlignCosine,
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::NtXent { tau: 0.1 }
    }
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::NtXent { tau } if !(tau > 0.0) => {
                Err(Error::invalid(format!("nt_xent temperature must be > 0, got {tau}")))
            }
            LossKind::Barlow { lambda_offdiag } if lambda_offdiag < 0.0 => Err(Error::invalid(
                format!("barlow off-diagonal weight must be >= 0, got {lambda_offdiag}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Normalized-temperature cross entropy over `N` pairs.
///
/// For every anchor the candidates are all other rows; the positive is the
/// other row carrying the same label.
pub fn nt_xent<'t>(z: Var<'t>, labels: &[usize], tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("nt_xent temperature must be > 0, got {tau}")));
    }
    let rows = labels.len();
    let shape = z.shape();
    if shape.len() != 2 || shape[0] != rows || rows < 2 {
        return Err(Error::shape("nt_xent", format!("{shape:?} vs {rows} labels")));
    }
    let mut positive = Tensor::zeros(&[rows, rows]);
    for (a, &la) in labels.iter().enumerate() {
        let partners: Vec<usize> = (0..rows).filter(|&b| b != a && labels[b] == la).collect();
        if partners.len() != 1 {
            return Err(Error::invalid(format!(
                "nt_xent needs exactly two views per label; label {la} has {}",
                partners.len() + 1
            )));
        }
        positive.data_mut()[a * rows + partners[0]] = 1.0;
    }
    let mut mask = Tensor::zeros(&[rows, rows]);
    for a in 0..rows {
        mask.data_mut()[a * rows + a] = SELF_MASK;
    }
    let tape = z.tape();
    let logits = z
        .matmul(z.transpose()?)?
        .scale(1.0 / tau)?
        .add(tape.constant(mask))?;
    logits
        .log_softmax_rows()?
        .mul(tape.constant(positive))?
        .sum()?
        .scale(-1.0 / rows as f64)
}

/// Redundancy-reduction loss on the cross-correlation of standardized columns.
pub fn barlow<'t>(za: Var<'t>, zb: Var<'t>, lambda_offdiag: f64) -> Result<Var<'t>> {
    let sa = za.shape();
    if sa.len() != 2 || sa != zb.shape() {
        return Err(Error::shape("barlow", format!("{sa:?} and {:?}", zb.shape())));
    }
    let (n, p) = (sa[0], sa[1]);
    if n < 2 {
        return Err(Error::invalid(format!("barlow needs at least 2 rows, got {n}")));
    }
    let tape = za.tape();
    let centering = {
        let mut c = Tensor::filled(&[n, n], -1.0 / n as f64);
        for i in 0..n {
            c.data_mut()[i * n + i] += 1.0;
        }
        tape.constant(c)
    };
    let ones_row = tape.constant(Tensor::filled(&[1, n], 1.0 / n as f64));
    let standardize = |z: Var<'t>| -> Result<Var<'t>> {
        let centered = centering.matmul(z)?;
        let var = ones_row.matmul(centered.mul(centered)?)?;
        centered.mul(var.add_scalar(BARLOW_EPS)?.powf(-0.5)?)
    };
    let c = standardize(za)?
        .transpose()?
        .matmul(standardize(zb)?)?
        .scale(1.0 / n as f64)?;
    let eye = Tensor::identity(p);
    let off = eye.map(|v| 1.0 - v);
    let on_diag = c
        .sub(tape.constant(eye.clone()))?
        .powf(2.0)?
        .mul(tape.constant(eye))?
        .sum()?;
    let off_diag = c.mul(c)?.mul(tape.constant(off))?.sum()?;
    on_diag.add(off_diag.scale(lambda_offdiag)?)
}

/// `-mean_i <za_i, zb_i>` for unit rows, with `zb` held fixed.
pub fn align_cosine<'t>(za: Var<'t>, zb_detached: &Tensor) -> Result<Var<'t>> {
    if za.shape() != zb_detached.shape() {
        return Err(Error::shape(
            "align_cosine",
            format!("{:?} and {:?}", za.shape(), zb_detached.shape()),
        ));
    }
    let n = zb_detached.rows();
    za.mul(za.tape().constant(zb_detached.clone()))?
        .sum()?
        .scale(-1.0 / n as f64)
}

/// Rows `offset, offset + a, offset + 2a, ...` of `z`.
fn select_view<'t>(z: Var<'t>, n: usize, a: usize, offset: usize) -> Result<Var<'t>> {
    let mut sel = Tensor::zeros(&[n, n * a]);
    for i in 0..n {
        sel.data_mut()[i * n * a + i * a + offset] = 1.0;
    }
    z.tape().constant(sel).matmul(z)
}

/// The inner-loop loss of a task: project every view and apply `kind`.
pub fn task_loss<'t>(params: &Bound<'t>, task: &TaskBatch, kind: LossKind) -> Result<Var<'t>> {
    let tape = params.var("proj.weight")?.tape();
    let x = tape.constant(task.views.clone());
    let z = project(params, encode(params, x)?)?;
    projected_loss(z, task, kind)
}

pub fn projected_loss<'t>(z: Var<'t>, task: &TaskBatch, kind: LossKind) -> Result<Var<'t>> {
    let (n, a) = (task.n_classes, task.views_per_class);
    match kind {
        LossKind::NtXent { tau } => {
            if a != 2 {
                return Err(Error::invalid(format!("nt_xent requires 2 views, task has {a}")));
            }
            nt_xent(z, &task.pseudo_labels, tau)
        }
        LossKind::Barlow { lambda_offdiag } => {
            barlow(select_view(z, n, a, 0)?, select_view(z, n, a, 1)?, lambda_offdiag)
        }
        LossKind::AlignCosine => {
            let zb = select_view(z, n, a, 1)?.value();
            align_cosine(select_view(z, n, a, 0)?, &zb)
        }
    }
}
