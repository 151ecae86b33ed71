//! Central finite-difference checks for the differentiation record.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, Stream};
use crate::tensor::{Op, Tape, Tensor, Var};

/// Floor on the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// Max over coordinates of `|analytic - numeric| / max(1e-8, |numeric|)`,
/// where `numeric` is the central difference with step `h`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&tape, x)?;
    if y.value().numel() != 1 {
        return Err(Error::NotScalar(y.shape()));
    }
    let analytic = tape.backward(y)?.wrt(x);

    let eval = |p: Tensor| -> Result<f64> {
        let t = Tape::new();
        let v = t.constant(p);
        Ok(f(&t, v)?.item())
    };
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(REL_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Outcome of checking one op over many random points.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn normal(rng: &mut Stream, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

fn uniform(rng: &mut Stream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let u = Uniform::new(lo, hi).expect("lo < hi");
    Tensor::new(shape.to_vec(), (0..n).map(|_| u.sample(rng)).collect()).expect("valid shape")
}

/// Normal entries pushed at least `gap` away from zero.
fn away_from_zero(rng: &mut Stream, shape: &[usize], gap: f64) -> Tensor {
    normal(rng, shape).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// `sum(weights * y)` so every output coordinate contributes to the scalar.
fn weighted_sum<'t>(tape: &'t Tape, y: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    y.mul(tape.constant(weights.clone()))?.sum()
}

type BuildFn = for<'t> fn(&'t Tape, Var<'t>, Option<Var<'t>>) -> Result<Var<'t>>;

struct Case {
    name: &'static str,
    point: Tensor,
    other: Option<Tensor>,
    weights: Tensor,
    build: BuildFn,
}

fn cases(rng: &mut Stream) -> Vec<Case> {
    let (r, c) = (rng.random_range(2..5), rng.random_range(2..5));
    let k = rng.random_range(2..5);
    let mat = [r, c];
    let mut out = Vec::new();
    let mut push = |name: &'static str,
                    point: Tensor,
                    other: Option<Tensor>,
                    out_shape: &[usize],
                    build: BuildFn,
                    rng: &mut Stream| {
        out.push(Case {
            name,
            point,
            other,
            weights: normal(rng, out_shape),
            build,
        })
    };
    push("add", normal(rng, &mat), Some(normal(rng, &mat)), &mat, |_, x, o| x.add(o.unwrap()), rng);
    push("add_row_broadcast", normal(rng, &[1, c]), Some(normal(rng, &mat)), &mat, |_, x, o| o.unwrap().add(x), rng);
    push("sub_lhs", normal(rng, &mat), Some(normal(rng, &mat)), &mat, |_, x, o| x.sub(o.unwrap()), rng);
    push("sub_rhs", normal(rng, &mat), Some(normal(rng, &mat)), &mat, |_, x, o| o.unwrap().sub(x), rng);
    push("mul", normal(rng, &mat), Some(normal(rng, &mat)), &mat, |_, x, o| x.mul(o.unwrap()), rng);
    push("mul_self", normal(rng, &mat), None, &mat, |_, x, _| x.mul(x), rng);
    push("mul_row_broadcast", normal(rng, &[1, c]), Some(normal(rng, &mat)), &mat, |_, x, o| o.unwrap().mul(x), rng);
    push("scale", normal(rng, &mat), None, &mat, |_, x, _| x.scale(-1.7), rng);
    push("add_scalar", normal(rng, &mat), None, &mat, |_, x, _| x.add_scalar(0.3), rng);
    push("matmul_lhs", normal(rng, &mat), Some(normal(rng, &[c, k])), &[r, k], |_, x, o| x.matmul(o.unwrap()), rng);
    push("matmul_rhs", normal(rng, &[c, k]), Some(normal(rng, &mat)), &[r, k], |_, x, o| o.unwrap().matmul(x), rng);
    push("transpose", normal(rng, &mat), None, &[c, r], |_, x, _| x.transpose(), rng);
    push("relu", away_from_zero(rng, &mat, 0.05), None, &mat, |_, x, _| x.relu(), rng);
    push("exp", normal(rng, &mat), None, &mat, |_, x, _| x.exp(), rng);
    push("log", uniform(rng, &mat, 0.5, 2.0), None, &mat, |_, x, _| x.log(), rng);
    push("pow", uniform(rng, &mat, 0.5, 2.0), None, &mat, |_, x, _| x.powf(-0.5), rng);
    push("clamp_min", away_from_zero(rng, &mat, 0.05), None, &mat, |_, x, _| x.clamp_min(0.0), rng);
    push("sum", normal(rng, &mat), None, &[1], |_, x, _| x.sum(), rng);
    push("mean", normal(rng, &mat), None, &[1], |_, x, _| x.mean(), rng);
    push("concat_rows", normal(rng, &mat), Some(normal(rng, &[2, c])), &[r + 2, c], |_, x, o| Var::concat_rows(&[o.unwrap(), x]), rng);
    push("l2_normalize_rows", away_from_zero(rng, &mat, 0.1), None, &mat, |_, x, _| x.l2_normalize_rows(), rng);
    push("softmax_rows", normal(rng, &mat), None, &mat, |_, x, _| x.softmax_rows(), rng);
    push("log_softmax_rows", normal(rng, &mat), None, &mat, |_, x, _| x.log_softmax_rows(), rng);
    out
}

/// Names of every op exercised by [`op_suite`], matching [`Op`] variants.
pub fn covered_ops() -> Vec<Op> {
    vec![
        Op::Add,
        Op::Sub,
        Op::Mul,
        Op::Scale(0.0),
        Op::AddScalar(0.0),
        Op::Matmul,
        Op::Transpose,
        Op::Relu,
        Op::Exp,
        Op::Log,
        Op::Pow(0.0),
        Op::ClampMin(0.0),
        Op::Sum,
        Op::Mean,
        Op::ConcatRows,
        Op::L2NormalizeRows,
        Op::SoftmaxRows,
        Op::LogSoftmaxRows,
    ]
}

/// Runs every op through [`grad_check`] at `trials` seeded random points.
pub fn op_suite(seed: u64, trials: usize, h: f64) -> Result<Vec<OpCheck>> {
    let mut rng = stream(seed, Purpose::Check);
    let mut results: Vec<OpCheck> = Vec::new();
    for _ in 0..trials {
        for case in cases(&mut rng) {
            let Case {
                name,
                point,
                other,
                weights,
                build,
            } = case;
            let err = grad_check(
                |tape, x| {
                    let o = other.as_ref().map(|t| tape.constant(t.clone()));
                    let y = build(tape, x, o)?;
                    weighted_sum(tape, y, &weights)
                },
                &point,
                h,
            )?;
            match results.iter_mut().find(|r| r.name == name) {
                Some(r) => {
                    r.trials += 1;
                    r.max_rel_err = r.max_rel_err.max(err);
                }
                None => results.push(OpCheck {
                    name,
                    trials: 1,
                    max_rel_err: err,
                }),
            }
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_tight() {
        let p = Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.7]).unwrap();
        let err = grad_check(|_, x| x.mul(x)?.sum(), &p, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let _ = x;
                Ok(t.constant(Tensor::scalar(4.0)))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn exp_sum_at_origin() {
        let p = Tensor::zeros(&[5]);
        let err = grad_check(|_, x| x.exp()?.sum(), &p, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn non_scalar_fn_rejected() {
        let p = Tensor::zeros(&[2]);
        assert!(matches!(
            grad_check(|_, x| x.exp(), &p, 1e-5),
            Err(Error::NotScalar(_))
        ));
        assert!(grad_check(|_, x| x.sum(), &p, 0.0).is_err());
    }

    #[test]
    fn matmul_weight_gradient() {
        let v = Tensor::matrix(3, 1, vec![0.5, -1.0, 2.0]).unwrap();
        let w = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let err = grad_check(
            |t, x| x.matmul(t.constant(v.clone()))?.sum(),
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn suite_covers_every_op_quickly() {
        let report = op_suite(3, 3, 1e-5).unwrap();
        assert!(report.len() >= covered_ops().len());
        for r in &report {
            assert!(r.passed(1e-6), "{} {}", r.name, r.max_rel_err);
        }
    }
}
