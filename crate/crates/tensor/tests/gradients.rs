use dcml_tensor::check::{check_gradients, check_primitive, STEP};
use dcml_tensor::{Axis, Graph, Primitive, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

#[test]
fn every_primitive_matches_finite_differences() {
    for kind in Primitive::ALL {
        let report = check_primitive(kind, 11, false).unwrap();
        assert!(
            report.max_rel_err < TOL,
            "{}: rel err {:.3e}",
            kind.name(),
            report.max_rel_err
        );
    }
}

#[test]
fn corrupted_rule_is_detected() {
    for kind in [Primitive::Exp, Primitive::Conv2d, Primitive::Variance] {
        let report = check_primitive(kind, 11, true).unwrap();
        assert!(report.max_rel_err > 0.1, "{} fault went unnoticed", kind.name());
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn three_layer_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        random(&mut rng, &[4, 5]),
        random(&mut rng, &[5, 6]),
        random(&mut rng, &[6]),
        random(&mut rng, &[6, 3]),
        random(&mut rng, &[3, 2]),
    ];
    let report = check_gradients(&inputs, STEP, |g, v| {
        let h = g.linear(v[0], v[1], v[2])?;
        let h = g.sigmoid(h)?;
        let h = g.matmul(h, v[3])?;
        let h = g.exp(h)?;
        let h = g.matmul(h, v[4])?;
        let h = g.log_softmax(h)?;
        g.mean(h, Axis::All)
    })
    .unwrap();
    assert!(report.max_rel_err < TOL, "{report:?}");
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f32>::new();
        let x = g.constant(random(&mut rng, &[2, 8, 8, 3]).cast()).unwrap();
        let w = g.param(random(&mut rng, &[3, 3, 3, 4]).cast()).unwrap();
        let y = g.conv2d(x, w, 1, 1).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.global_avg_pool(y).unwrap();
        let y = g.softmax(y).unwrap();
        let y = g.variance(y).unwrap();
        g.backward(y).unwrap();
        g.grad(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
