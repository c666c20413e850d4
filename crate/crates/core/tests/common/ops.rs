//! Finite-difference checks of every differentiable tape operation.
//!
//! Each operation is checked on [`INSTANCES`] random instances with central
//! differences (h = 1e-5) and a relative-error tolerance of 1e-4. Inputs are
//! resampled away from non-differentiable points (ties in `max`, zeros of
//! `relu`) and kept inside the domains of `log` and `sqrt`.

use domaug_core::autodiff::{Conv2dAttrs, OpKind, Tape, Var};
use domaug_core::gradcheck::gradient_check;
use domaug_core::tensor::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 100;
pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// `Ok` carries the largest relative error seen.
pub type Outcome = std::result::Result<f64, String>;

pub const ALL_KINDS: [OpKind; 24] = [
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::Conv2d,
    OpKind::Relu,
    OpKind::GlobalAvgPool,
    OpKind::Affine,
    OpKind::L2Normalize,
    OpKind::Concat,
    OpKind::Slice,
    OpKind::ReduceSum,
    OpKind::ReduceMean,
    OpKind::Log,
    OpKind::Exp,
    OpKind::Sqrt,
    OpKind::Square,
    OpKind::Softplus,
    OpKind::Max,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::Gather,
    OpKind::PairwiseSqDist,
];

/// Checks one operation kind. The match is exhaustive, so adding an
/// operation without a check does not compile.
pub fn check(kind: OpKind) -> Outcome {
    match kind {
        OpKind::Add => check_binary(kind, same_shape_pair, |t, a, b| t.add(a, b)),
        OpKind::Sub => check_binary(kind, same_shape_pair, |t, a, b| t.sub(a, b)),
        OpKind::Mul => check_binary(kind, same_shape_pair, |t, a, b| t.mul(a, b)),
        OpKind::Max => check_binary(kind, separated_pair, |t, a, b| t.max(a, b)),
        OpKind::MatMul => check_binary(kind, matmul_pair, |t, a, b| t.matmul(a, b)),
        OpKind::Transpose => check_unary(kind, &[3, 5], -1.0, 1.0, |t, x| t.transpose(x)),
        OpKind::Conv2d => check_conv2d(),
        OpKind::Relu => check_relu(),
        OpKind::GlobalAvgPool => {
            check_unary(kind, &[2, 3, 4, 4], -1.0, 1.0, |t, x| t.global_avg_pool(x))
        }
        OpKind::Affine => check_affine(),
        OpKind::L2Normalize => check_unary(kind, &[4, 6], -1.0, 1.0, |t, x| t.l2_normalize(x)),
        OpKind::Concat => check_concat(),
        OpKind::Slice => check_slice(),
        OpKind::ReduceSum => check_unary(kind, &[3, 4], -1.0, 1.0, |t, x| t.reduce_sum(x)),
        OpKind::ReduceMean => check_unary(kind, &[3, 4], -1.0, 1.0, |t, x| t.reduce_mean(x)),
        OpKind::Log => check_unary(kind, &[10], 0.5, 2.0, |t, x| t.log(x)),
        OpKind::Exp => check_unary(kind, &[10], -2.0, 2.0, |t, x| t.exp(x)),
        OpKind::Sqrt => check_unary(kind, &[10], 0.5, 2.0, |t, x| t.sqrt(x)),
        OpKind::Square => check_unary(kind, &[10], -2.0, 2.0, |t, x| t.square(x)),
        OpKind::Softplus => check_unary(kind, &[10], -4.0, 4.0, |t, x| t.softplus(x)),
        OpKind::Scale => check_with_constant(kind, |t, x, c| t.scale(x, c)),
        OpKind::AddScalar => check_with_constant(kind, |t, x, c| {
            // squared so the gradient depends on the added constant
            let y = t.add_scalar(x, c)?;
            t.square(y)
        }),
        OpKind::Gather => check_gather(),
        OpKind::PairwiseSqDist => {
            check_unary(kind, &[5, 3], -1.0, 1.0, |t, x| t.pairwise_sq_dist(x))
        }
    }
}

fn rng_for(kind: OpKind) -> ChaCha8Rng {
    let salt = format!("{kind:?}")
        .bytes()
        .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    ChaCha8Rng::seed_from_u64(salt)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random weights bounded away from zero, so every output element matters.
fn weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.5..1.5)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `y` to the scalar `Σ w ⊙ y`.
fn weighted_sum(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let c = tape.constant(w.clone());
    let prod = tape.mul(y, c)?;
    tape.reduce_sum(prod)
}

/// Output shape of `op` applied to constants.
fn out_shape(inputs: &[&Tensor], op: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Vec<usize> {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant((*x).clone())).collect();
    let y = op(&mut t, &vars).unwrap();
    t.value(y).shape().to_vec()
}

fn run<F>(kind: OpKind, instance: usize, what: &str, f: F, x: &Tensor) -> Outcome
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report =
        gradient_check(f, x, H, TOL).map_err(|e| format!("{kind:?} instance {instance}: {e}"))?;
    if report.passed() {
        Ok(report.max_relative_error())
    } else {
        Err(format!(
            "{kind:?} instance {instance} ({what}): relative error {:.3e} at {:?}",
            report.max_relative_error(),
            report.failures
        ))
    }
}

fn check_unary(
    kind: OpKind,
    shape: &[usize],
    lo: f64,
    hi: f64,
    op: fn(&mut Tape, Var) -> Result<Var>,
) -> Outcome {
    let mut rng = rng_for(kind);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let x = uniform(&mut rng, shape, lo, hi);
        let w = weights(&mut rng, &out_shape(&[&x], |t, v| op(t, v[0])));
        let f = |t: &mut Tape, v: Var| {
            let y = op(t, v)?;
            weighted_sum(t, y, &w)
        };
        worst = worst.max(run(kind, i, "x", f, &x)?);
    }
    Ok(worst)
}

/// Checks a binary op with respect to each operand in turn.
fn check_binary(
    kind: OpKind,
    sample: fn(&mut ChaCha8Rng) -> (Tensor, Tensor),
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Outcome {
    let mut rng = rng_for(kind);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let (a, b) = sample(&mut rng);
        let w = weights(&mut rng, &out_shape(&[&a, &b], |t, v| op(t, v[0], v[1])));
        let lhs = |t: &mut Tape, v: Var| {
            let other = t.constant(b.clone());
            let y = op(t, v, other)?;
            weighted_sum(t, y, &w)
        };
        let rhs = |t: &mut Tape, v: Var| {
            let other = t.constant(a.clone());
            let y = op(t, other, v)?;
            weighted_sum(t, y, &w)
        };
        worst = worst.max(run(kind, i, "lhs", lhs, &a)?);
        worst = worst.max(run(kind, i, "rhs", rhs, &b)?);
    }
    Ok(worst)
}

/// Checks an op of three inputs with respect to each of them in turn.
fn check_ternary(
    kind: OpKind,
    rng: &mut ChaCha8Rng,
    instance: usize,
    inputs: [Tensor; 3],
    op: impl Fn(&mut Tape, Var, Var, Var) -> Result<Var>,
) -> Outcome {
    let w = weights(
        rng,
        &out_shape(&[&inputs[0], &inputs[1], &inputs[2]], |t, v| {
            op(t, v[0], v[1], v[2])
        }),
    );
    let mut worst: f64 = 0.0;
    for (slot, what) in ["input", "weight", "bias"].into_iter().enumerate() {
        let f = |t: &mut Tape, v: Var| {
            let mut vars = [v; 3];
            for (j, x) in inputs.iter().enumerate() {
                if j != slot {
                    vars[j] = t.constant(x.clone());
                }
            }
            let y = op(t, vars[0], vars[1], vars[2])?;
            weighted_sum(t, y, &w)
        };
        worst = worst.max(run(kind, instance, what, f, &inputs[slot])?);
    }
    Ok(worst)
}

fn same_shape_pair(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    (
        uniform(rng, &[3, 4], -2.0, 2.0),
        uniform(rng, &[3, 4], -2.0, 2.0),
    )
}

/// Operands that differ by more than 1e-3 everywhere, away from ties.
fn separated_pair(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    loop {
        let (a, b) = same_shape_pair(rng);
        if a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() > 1e-3)
        {
            return (a, b);
        }
    }
}

fn matmul_pair(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let (m, k, n) = (
        rng.gen_range(1..5),
        rng.gen_range(1..5),
        rng.gen_range(1..5),
    );
    (
        uniform(rng, &[m, k], -1.0, 1.0),
        uniform(rng, &[k, n], -1.0, 1.0),
    )
}

fn check_conv2d() -> Outcome {
    let kind = OpKind::Conv2d;
    let mut rng = rng_for(kind);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let attrs = Conv2dAttrs {
            stride: rng.gen_range(1..=2),
            padding: rng.gen_range(0..=1),
        };
        let (c, o) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let inputs = [
            uniform(&mut rng, &[2, c, 5, 5], -1.0, 1.0),
            uniform(&mut rng, &[o, c, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[o], -1.0, 1.0),
        ];
        let e = check_ternary(kind, &mut rng, i, inputs, |t, x, w, b| {
            t.conv2d(x, w, b, attrs)
        })?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn check_affine() -> Outcome {
    let kind = OpKind::Affine;
    let mut rng = rng_for(kind);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let (n, din, dout) = (
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let inputs = [
            uniform(&mut rng, &[n, din], -1.0, 1.0),
            uniform(&mut rng, &[dout, din], -1.0, 1.0),
            uniform(&mut rng, &[dout], -1.0, 1.0),
        ];
        worst = worst.max(check_ternary(kind, &mut rng, i, inputs, |t, x, w, b| {
            t.affine(x, w, b)
        })?);
    }
    Ok(worst)
}

fn check_relu() -> Outcome {
    let kind = OpKind::Relu;
    let mut rng = rng_for(kind);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let x = loop {
            let x = uniform(&mut rng, &[12], -1.0, 1.0);
            if x.data().iter().all(|v| v.abs() > 1e-3) {
                break x;
            }
        };
        let w = weights(&mut rng, &[12]);
        let f = |t: &mut Tape, v: Var| {
            let y = t.relu(v)?;
            weighted_sum(t, y, &w)
        };
        worst = worst.max(run(kind, i, "x", f, &x)?);
    }
    Ok(worst)
}

fn check_concat() -> Outcome {
    let kind = OpKind::Concat;
    let mut rng = rng_for(kind);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let axis = rng.gen_range(0..2);
        let x = uniform(&mut rng, &[2, 3], -1.0, 1.0);
        let other_shape = if axis == 0 {
            [rng.gen_range(1..4), 3]
        } else {
            [2, rng.gen_range(1..4)]
        };
        let other = uniform(&mut rng, &other_shape, -1.0, 1.0);
        let first = rng.gen::<bool>();
        let mut joined = [2, 3];
        joined[axis] += other_shape[axis];
        let w = weights(&mut rng, &joined);
        let f = |t: &mut Tape, v: Var| {
            let c = t.constant(other.clone());
            let parts = if first { [v, c] } else { [c, v] };
            let y = t.concat(&parts, axis)?;
            weighted_sum(t, y, &w)
        };
        worst = worst.max(run(kind, i, if first { "first" } else { "second" }, f, &x)?);
    }
    Ok(worst)
}

fn check_slice() -> Outcome {
    let kind = OpKind::Slice;
    let mut rng = rng_for(kind);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let shape = [4, 5];
        let axis = rng.gen_range(0..2);
        let start = rng.gen_range(0..shape[axis]);
        let len = rng.gen_range(1..=shape[axis] - start);
        let x = uniform(&mut rng, &shape, -1.0, 1.0);
        let mut sliced = shape;
        sliced[axis] = len;
        let w = weights(&mut rng, &sliced);
        let f = |t: &mut Tape, v: Var| {
            let y = t.slice(v, axis, start, len)?;
            weighted_sum(t, y, &w)
        };
        worst = worst.max(run(kind, i, "x", f, &x)?);
    }
    Ok(worst)
}

fn check_with_constant(kind: OpKind, op: fn(&mut Tape, Var, f64) -> Result<Var>) -> Outcome {
    let mut rng = rng_for(kind);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let c = rng.gen_range(-3.0..3.0);
        let x = uniform(&mut rng, &[8], -1.0, 1.0);
        let w = weights(&mut rng, &[8]);
        let f = |t: &mut Tape, v: Var| {
            let y = op(t, v, c)?;
            weighted_sum(t, y, &w)
        };
        worst = worst.max(run(kind, i, "x", f, &x)?);
    }
    Ok(worst)
}

fn check_gather() -> Outcome {
    let kind = OpKind::Gather;
    let mut rng = rng_for(kind);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let x = uniform(&mut rng, &[10], -1.0, 1.0);
        let count = rng.gen_range(1..15);
        let indices: Vec<usize> = (0..count).map(|_| rng.gen_range(0..10)).collect();
        let w = weights(&mut rng, &[count]);
        let f = |t: &mut Tape, v: Var| {
            let y = t.gather(v, &indices)?;
            weighted_sum(t, y, &w)
        };
        worst = worst.max(run(kind, i, "x", f, &x)?);
    }
    Ok(worst)
}
