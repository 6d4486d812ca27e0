//! Central finite-difference gradient checks in 64-bit precision.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Attrs, Axis, Graph, Primitive, Result, Tensor, Var};

/// Step used by the gradient checks throughout the workspace.
pub const STEP: f64 = 1e-3;

/// Outcome of one gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over inputs of `max_i |analytic_i - numeric_i| / scale`, where
    /// `scale` is the largest gradient magnitude of that input (floored at
    /// `1e-6`).
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub evaluations: usize,
}


/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences `(f(x + h) - f(x - h)) / 2h`, element by element.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).expect("param has grad")).collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = xs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        evaluations: 0,
    };
    let mut work = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.numel());
        for i in 0..grad.numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
            report.evaluations += 2;
        }
        let scale = grad
            .data()
            .iter()
            .chain(&numeric)
            .fold(1e-6_f64, |m, &v| m.max(v.abs()));
        let abs = grad
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0_f64, |m, (&a, &n)| m.max((a - n).abs()));
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(abs / scale);
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so kinks (relu, abs) sit outside `±STEP`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Inputs and attributes exercising one primitive.
pub fn primitive_case(kind: Primitive, seed: u64) -> (Vec<Tensor<f64>>, Attrs) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9e37_79b9));
    let r = &mut rng;
    match kind {
        Primitive::Matmul => (vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)], Attrs::None),
        Primitive::Conv2d => (
            vec![uniform(r, &[1, 6, 6, 2], -1.0, 1.0), uniform(r, &[3, 3, 2, 3], -1.0, 1.0)],
            Attrs::Conv { stride: 2, padding: 1 },
        ),
        Primitive::GlobalAvgPool => (vec![uniform(r, &[2, 3, 3, 4], -1.0, 1.0)], Attrs::None),
        Primitive::MaxPool => {
            // distinct values spaced far beyond the finite-difference step
            let mut vals: Vec<f64> = (0..72).map(|i| i as f64 * 0.05 - 1.8).collect();
            vals.shuffle(r);
            (
                vec![Tensor::new(&[1, 6, 6, 2], vals).expect("shape")],
                Attrs::Pool { kernel: 3, stride: 2, padding: 1 },
            )
        }
        Primitive::Relu | Primitive::Abs => (vec![away_from_zero(r, &[3, 4])], Attrs::None),
        Primitive::Sigmoid | Primitive::Exp => (vec![uniform(r, &[3, 4], -2.0, 2.0)], Attrs::None),
        Primitive::Softmax | Primitive::LogSoftmax | Primitive::L2Normalize => {
            (vec![uniform(r, &[3, 5], -2.0, 2.0)], Attrs::None)
        }
        Primitive::Concat => (vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 2], -1.0, 1.0)], Attrs::None),
        Primitive::ChannelScale => (
            vec![uniform(r, &[2, 3, 3, 4], -1.0, 1.0), uniform(r, &[2, 4], 0.0, 1.0)],
            Attrs::None,
        ),
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            (vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)], Attrs::None)
        }
        Primitive::Div => (vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], 0.5, 1.5)], Attrs::None),
        Primitive::Mean => (vec![uniform(r, &[3, 4], -1.0, 1.0)], Attrs::Axis(Axis::Last)),
        Primitive::Sum => (vec![uniform(r, &[3, 4], -1.0, 1.0)], Attrs::Axis(Axis::All)),
        Primitive::Variance => (vec![uniform(r, &[7], -1.0, 1.0)], Attrs::None),
        Primitive::Sqrt | Primitive::Log => (vec![uniform(r, &[3, 4], 0.5, 2.0)], Attrs::None),
        Primitive::Reshape => (vec![uniform(r, &[2, 6], -1.0, 1.0)], Attrs::Shape(vec![3, 4])),
        Primitive::Gather => (vec![uniform(r, &[3, 4], -1.0, 1.0)], Attrs::Indices(vec![1, 0, 3])),
        Primitive::Scale => (vec![uniform(r, &[3, 4], -1.0, 1.0)], Attrs::Factor(0.7)),
    }
}

/// Finite-difference check of one primitive's Jacobian-vector product:
/// the root is `sum(y * w)` for a fixed random `w`. With `fault` set, the
/// primitive's backward rule is deliberately corrupted.
pub fn check_primitive(kind: Primitive, seed: u64, fault: bool) -> Result<GradCheck> {
    let (inputs, attrs) = primitive_case(kind, seed);
    check_gradients(&inputs, STEP, |g, vars| {
        if fault {
            g.corrupt_backward(Some(kind));
        }
        let y = g.apply(kind, vars, &attrs)?;
        g.corrupt_backward(None);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
        let w = uniform(&mut rng, g.shape(y), -1.0, 1.0);
        let w = g.constant(w)?;
        let yw = g.mul(y, w)?;
        g.sum(yw, Axis::All)
    })
}
