//! Encoder, projection head, class-probability heads and the SGD step.

use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamKey};
use crate::tensor::{Tape, Tensor, Var};

/// Named parameters in a fixed order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::ParamMismatch(format!("duplicate parameter `{name}`")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Concatenates all values in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` as the layout.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::ParamMismatch(format!(
                "flat vector has {} values, layout needs {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| {
                let k = t.numel();
                let v = Tensor::new(t.shape().to_vec(), flat[offset..offset + k].to_vec())
                    .expect("layout shape");
                offset += k;
                (n.clone(), v)
            })
            .collect();
        Ok(ParameterSet { entries })
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_same_layout(&self, other: &ParameterSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ParamMismatch(format!(
                "{} vs {} parameters",
                self.len(),
                other.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.iter().zip(other.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::ParamMismatch(format!(
                    "`{a}` {:?} vs `{b}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Puts every tensor on `tape`, as parameters or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// A [`ParameterSet`] placed on a tape.
pub struct Bound<'t> {
    vars: Vec<(String, Var<'t>)>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::ParamMismatch(format!("no parameter `{name}`")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Collects the gradient of `loss` for every bound parameter.
    pub fn gradients(&self, tape: &'t Tape, loss: Var<'t>) -> Result<ParameterSet> {
        let grads = tape.backward(loss)?;
        let mut out = ParameterSet::new();
        for (n, v) in &self.vars {
            out.entries.push((n.clone(), grads.wrt(*v)));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub proj_dim: usize,
}

impl EncoderConfig {
    /// Desk-scale default: two hidden layers of 64, 32-d embeddings, 16-d projections.
    pub fn desk(input_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            hidden_dims: vec![64, 64],
            embed_dim: 32,
            proj_dim: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.embed_dim == 0
            || self.proj_dim == 0
            || self.hidden_dims.contains(&0)
        {
            return Err(Error::invalid(format!("encoder dims must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

fn uniform_weight(rows: usize, cols: usize, rng: &mut crate::rng::Stream) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| u.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Encoder layers `enc.{i}.weight [in x out]`, `enc.{i}.bias [1 x out]`, then
/// the projection head `proj.weight`, `proj.bias`.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut rng = StreamKey::new(seed, Purpose::Init).stream();
    let mut params = ParameterSet::new();
    for (i, (fan_in, fan_out)) in config.layer_dims().into_iter().enumerate() {
        params.push(format!("enc.{i}.weight"), uniform_weight(fan_in, fan_out, &mut rng))?;
        params.push(format!("enc.{i}.bias"), Tensor::zeros(&[1, fan_out]))?;
    }
    params.push(
        "proj.weight",
        uniform_weight(config.embed_dim, config.proj_dim, &mut rng),
    )?;
    params.push("proj.bias", Tensor::zeros(&[1, config.proj_dim]))?;
    Ok(params)
}

fn encoder_depth(params: &Bound<'_>) -> usize {
    params
        .vars()
        .filter(|(n, _)| n.starts_with("enc.") && n.ends_with(".weight"))
        .count()
}

/// MLP forward: affine + relu for hidden layers, final affine to the embedding.
pub fn encode<'t>(params: &Bound<'t>, batch: Var<'t>) -> Result<Var<'t>> {
    let depth = encoder_depth(params);
    let mut h = batch;
    for i in 0..depth {
        let w = params.var(&format!("enc.{i}.weight"))?;
        let b = params.var(&format!("enc.{i}.bias"))?;
        h = h.matmul(w)?.add(b)?;
        if i + 1 < depth {
            h = h.relu()?;
        }
    }
    Ok(h)
}

/// Projection head followed by row normalization.
pub fn project<'t>(params: &Bound<'t>, embeddings: Var<'t>) -> Result<Var<'t>> {
    let w = params.var("proj.weight")?;
    let b = params.var("proj.bias")?;
    embeddings.matmul(w)?.add(b)?.l2_normalize_rows()
}

/// Untracked convenience: embeddings for a batch of rows.
pub fn embed(params: &ParameterSet, batch: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    Ok(encode(&bound, tape.constant(batch.clone()))?.value())
}

/// Which map turns embeddings into per-class probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PiKind {
    /// Cosine softmax against leave-one-out class prototypes.
    Prototype { tau: f64 },
    /// Frozen random affine head, re-seeded per task from `seed`.
    Linear { seed: u64 },
}

impl Default for PiKind {
    fn default() -> Self {
        PiKind::Prototype { tau: 0.1 }
    }
}

fn class_counts(labels: &[usize], n_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(Error::invalid(format!("label {l} out of range 0..{n_classes}")));
        }
        counts[l] += 1;
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {j} has no members")));
    }
    Ok(counts)
}

/// Prototype-softmax class probabilities.
///
/// Row `s` is `softmax_j(cos(e_s, c_j) / tau)` where `c_j` is the normalized
/// mean of the normalized embeddings labelled `j`. The prototype of the
/// sample's own class leaves the sample out when that class has at least two
/// members.
pub fn pi_prototype<'t>(
    embeddings: Var<'t>,
    labels: &[usize],
    n_classes: usize,
    tau: f64,
) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let shape = embeddings.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "pi_prototype",
            format!("embeddings {shape:?} vs {} labels", labels.len()),
        ));
    }
    let counts = class_counts(labels, n_classes)?;
    let tape = embeddings.tape();
    let s = labels.len();
    let e = shape[1];

    let mut membership = Tensor::zeros(&[n_classes, s]);
    let mut own = Tensor::zeros(&[s, n_classes]);
    for (i, &l) in labels.iter().enumerate() {
        membership.data_mut()[l * s + i] = 1.0;
        if counts[l] >= 2 {
            own.data_mut()[i * n_classes + l] = 1.0;
        }
    }
    let own = tape.constant(own);

    let u = embeddings.l2_normalize_rows()?;
    // class sums of unit embeddings [N x e]
    let sums = tape.constant(membership).matmul(u)?;
    // dot(u_s, sum_j) [S x N]
    let dots = u.matmul(sums.transpose()?)?;
    // |u_s|^2 broadcast over classes [S x N]
    let self_sq = u
        .mul(u)?
        .matmul(tape.constant(Tensor::filled(&[e, n_classes], 1.0)))?;
    // |sum_j|^2 broadcast over samples [S x N]
    let sums_sq = tape
        .constant(Tensor::filled(&[s, e], 1.0))
        .matmul(sums.mul(sums)?.transpose()?)?;

    let loo_dots = dots.sub(own.mul(self_sq)?)?;
    // |sum_j - u_s|^2 = |sum_j|^2 - 2 u_s.sum_j + |u_s|^2 on the own-class entry
    let correction = own.mul(dots.scale(2.0)?.sub(self_sq)?)?;
    let norms_sq = sums_sq.sub(correction)?.clamp_min(1e-24)?;
    let cos = loo_dots.mul(norms_sq.powf(-0.5)?)?;
    cos.scale(1.0 / tau)?.softmax_rows()
}

/// A frozen affine head `embed_dim -> n_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    pub fn seeded(embed_dim: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = StreamKey::new(seed, Purpose::Head).stream();
        let scale = 1.0 / (embed_dim as f64).sqrt();
        let data = (0..embed_dim * n_classes)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        LinearHead {
            weight: Tensor::matrix(embed_dim, n_classes, data).expect("shape"),
            bias: Tensor::zeros(&[1, n_classes]),
        }
    }
}

/// Softmax of the frozen head's logits.
pub fn pi_linear<'t>(head: &LinearHead, embeddings: Var<'t>) -> Result<Var<'t>> {
    let tape = embeddings.tape();
    embeddings
        .matmul(tape.constant(head.weight.clone()))?
        .add(tape.constant(head.bias.clone()))?
        .softmax_rows()
}

/// Velocity buffers and hyperparameters of momentum SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub velocity: ParameterSet,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(params: &ParameterSet, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must be in [0,1), got {momentum}")));
        }
        if weight_decay < 0.0 {
            return Err(Error::invalid(format!(
                "weight decay must be >= 0, got {weight_decay}"
            )));
        }
        Ok(OptimState {
            velocity: params.zeros_like(),
            momentum,
            weight_decay,
        })
    }

    pub fn plain(params: &ParameterSet) -> Self {
        Self::new(params, 0.0, 0.0).expect("valid")
    }
}

/// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
pub fn sgd_step(
    params: &ParameterSet,
    grads: &ParameterSet,
    lr: f64,
    state: &mut OptimState,
) -> Result<ParameterSet> {
    if lr < 0.0 {
        return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
    }
    let mut out = params.clone();
    for ((name, p), (_, v)) in out.entries.iter_mut().zip(state.velocity.entries.iter_mut()) {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(Error::ParamMismatch(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let (m, wd) = (state.momentum, state.weight_decay);
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = m * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnapshotTag {
    Current,
    InnerK,
    InnerKPlusLambda,
}

/// Immutable deep copy of a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    params: ParameterSet,
    tag: SnapshotTag,
}

impl Snapshot {
    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn tag(&self) -> SnapshotTag {
        self.tag
    }
}

pub fn clone_snapshot(params: &ParameterSet, tag: SnapshotTag) -> Snapshot {
    Snapshot {
        params: params.clone(),
        tag,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            input_dim: 4,
            hidden_dims: vec![5],
            embed_dim: 3,
            proj_dim: 2,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_encoder(&small(), 11).unwrap();
        let b = init_encoder(&small(), 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_encoder(&small(), 12).unwrap());
        for (n, t) in a.iter() {
            if n.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
        let names: Vec<_> = a.names().collect();
        assert_eq!(
            names,
            ["enc.0.weight", "enc.0.bias", "enc.1.weight", "enc.1.bias", "proj.weight", "proj.bias"]
        );
    }

    #[test]
    fn weight_std_matches_scaled_uniform() {
        let cfg = EncoderConfig {
            input_dim: 256,
            hidden_dims: vec![],
            embed_dim: 64,
            proj_dim: 1,
        };
        let expect = 1.0 / (3.0 * 256.0f64).sqrt();
        for seed in 0..10 {
            let p = init_encoder(&cfg, seed).unwrap();
            let w = p.get("enc.0.weight").unwrap().data();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
            assert!((var.sqrt() / expect - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn zero_weights_give_zero_embeddings() {
        let p = init_encoder(&small(), 1).unwrap().zeros_like();
        let x = Tensor::filled(&[2, 4], 3.0);
        assert!(embed(&p, &x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_independence() {
        let p = init_encoder(&small(), 5).unwrap();
        let x = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let all = embed(&p, &x).unwrap();
        let one = embed(&p, &Tensor::matrix(1, 4, x.row(1).to_vec()).unwrap()).unwrap();
        assert_eq!(one.data(), all.row(1));
    }

    #[test]
    fn hand_checked_two_layer() {
        // h = relu(x W0 + b0), e = h W1 + b1
        let mut p = ParameterSet::new();
        p.push("enc.0.weight", Tensor::matrix(2, 2, vec![1.0, -1.0, 2.0, 0.5]).unwrap()).unwrap();
        p.push("enc.0.bias", Tensor::matrix(1, 2, vec![0.0, 0.25]).unwrap()).unwrap();
        p.push("enc.1.weight", Tensor::matrix(2, 2, vec![1.0, 0.0, 3.0, -2.0]).unwrap()).unwrap();
        p.push("enc.1.bias", Tensor::matrix(1, 2, vec![0.5, 0.0]).unwrap()).unwrap();
        let x = Tensor::matrix(2, 2, vec![1.0, 1.0, -1.0, 2.0]).unwrap();
        // row 0: pre = (3, -0.25) -> relu (3, 0) -> (3.5, 0)
        // row 1: pre = (3, 2.25) -> (3, 2.25) -> (3 + 6.75 + 0.5, -4.5)
        let e = embed(&p, &x).unwrap();
        assert_eq!(e.data(), &[3.5, 0.0, 10.25, -4.5]);
    }

    #[test]
    fn projection_rows_unit_norm_and_identity_head() {
        let mut p = ParameterSet::new();
        p.push("proj.weight", Tensor::identity(2)).unwrap();
        p.push("proj.bias", Tensor::zeros(&[1, 2])).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape, false);
        let e = tape.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, -1.0, 0.0]).unwrap());
        let z = project(&b, e).unwrap().value();
        for (a, b) in z.data().iter().zip([0.6, 0.8, -1.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }

        let mut q = ParameterSet::new();
        q.push("proj.weight", Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 2.0]).unwrap()).unwrap();
        q.push("proj.bias", Tensor::matrix(1, 2, vec![0.0, -1.0]).unwrap()).unwrap();
        let b = q.bind(&tape, false);
        let e = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        // (1, 1+2-1) = (1, 2) / sqrt 5
        let z = project(&b, e).unwrap().value();
        let r5 = 5f64.sqrt();
        assert!((z.data()[0] - 1.0 / r5).abs() < 1e-15);
        assert!((z.data()[1] - 2.0 / r5).abs() < 1e-15);
    }

    #[test]
    fn prototype_two_class_hand_softmax() {
        // sample 0 and 1 in class 0 both (1,0); sample 2,3 in class 1 both (0,1)
        let tape = Tape::new();
        let e = tape.constant(
            Tensor::matrix(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap(),
        );
        let p = pi_prototype(e, &[0, 0, 1, 1], 2, 0.1).unwrap().value();
        let expect = 10f64.exp() / (10f64.exp() + 1.0);
        assert!((p.at(0, 0) - expect).abs() < 1e-12);
        assert!((expect - 0.9999546).abs() < 1e-7);
        assert!((p.at(2, 1) - expect).abs() < 1e-12);
    }

    #[test]
    fn prototype_limits() {
        let tape = Tape::new();
        let e = tape.constant(Tensor::matrix(3, 2, vec![1.0, 0.2, -0.3, 1.0, 0.5, 0.5]).unwrap());
        let p = pi_prototype(e, &[0, 0, 0], 1, 0.1).unwrap().value();
        assert!(p.data().iter().all(|&v| v == 1.0));
        let e = tape.constant(Tensor::matrix(4, 2, vec![1.0, 0.2, -0.3, 1.0, 0.5, 0.5, 0.1, -1.0]).unwrap());
        let p = pi_prototype(e, &[0, 1, 0, 1], 2, 1e9).unwrap().value();
        assert!(p.data().iter().all(|&v| (v - 0.5).abs() < 1e-8));
    }

    #[test]
    fn prototype_leave_one_out_pairs() {
        // class 0 = {0, 1}: sample 0's own prototype is sample 1's direction
        let tape = Tape::new();
        let rows = vec![1.0, 0.0, 0.6, 0.8, 0.0, 1.0, -1.0, 0.0];
        let e = tape.constant(Tensor::matrix(4, 2, rows).unwrap());
        let p = pi_prototype(e, &[0, 0, 1, 1], 2, 1.0).unwrap().value();
        // cos(s0, s1) = 0.6; class 1 prototype = normalize((0,1)+(-1,0)) -> cos = -1/sqrt2
        let a = 0.6f64.exp();
        let b = (-1.0 / 2f64.sqrt()).exp();
        assert!((p.at(0, 0) - a / (a + b)).abs() < 1e-12);
    }

    #[test]
    fn prototype_errors() {
        let tape = Tape::new();
        let e = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(pi_prototype(e, &[0, 0], 2, 0.1).is_err());
        assert!(pi_prototype(e, &[0, 1], 2, 0.0).is_err());
    }

    #[test]
    fn linear_head_zero_weights_uniform_and_hand_case() {
        let tape = Tape::new();
        let e = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let head = LinearHead {
            weight: Tensor::zeros(&[3, 4]),
            bias: Tensor::zeros(&[1, 4]),
        };
        let p = pi_linear(&head, e).unwrap().value();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let head = LinearHead {
            weight: Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::matrix(1, 2, vec![0.0, 0.5]).unwrap(),
        };
        // row 0 logits (1, 3.5); row 1 logits (-1, 1.5)
        let p = pi_linear(&head, e).unwrap().value();
        let p0 = 1.0 / (1.0 + 2.5f64.exp());
        assert!((p.at(0, 0) - p0).abs() < 1e-15);
        assert!((p.at(1, 0) - p0).abs() < 1e-15);
        assert_eq!(LinearHead::seeded(3, 2, 9), LinearHead::seeded(3, 2, 9));
    }

    #[test]
    fn sgd_examples() {
        let mut p = ParameterSet::new();
        p.push("w", Tensor::scalar(1.0)).unwrap();
        let mut g = ParameterSet::new();
        g.push("w", Tensor::scalar(0.5)).unwrap();

        let mut st = OptimState::plain(&p);
        assert_eq!(sgd_step(&p, &g, 0.0, &mut st).unwrap(), p);
        let mut st = OptimState::plain(&p);
        assert_eq!(sgd_step(&p, &g, 0.1, &mut st).unwrap().get("w").unwrap().item(), 0.95);

        let mut st = OptimState::new(&p, 0.9, 0.0).unwrap();
        let p1 = sgd_step(&p, &g, 0.1, &mut st).unwrap();
        assert!((p1.get("w").unwrap().item() - 0.95).abs() < 1e-15);
        let p2 = sgd_step(&p1, &g, 0.1, &mut st).unwrap();
        assert!((st.velocity.get("w").unwrap().item() - 0.95).abs() < 1e-15);
        assert!((p2.get("w").unwrap().item() - 0.855).abs() < 1e-15);

        let empty = ParameterSet::new();
        let mut st = OptimState::plain(&p);
        assert!(matches!(
            sgd_step(&p, &empty, 0.1, &mut st),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn snapshot_is_detached() {
        let mut p = init_encoder(&small(), 2).unwrap();
        let snap = clone_snapshot(&p, SnapshotTag::InnerK);
        assert_eq!(snap.params(), &p);
        assert_eq!(snap.tag(), SnapshotTag::InnerK);
        let g = p.clone();
        let mut st = OptimState::plain(&p);
        p = sgd_step(&p, &g, 1.0, &mut st).unwrap();
        assert_ne!(snap.params(), &p);
    }
}
