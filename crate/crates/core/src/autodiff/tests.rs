use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces `y` to a scalar through a fixed random projection so every output
/// coordinate carries an O(1) weight.
fn project(g: &mut Graph, y: NodeId, seed: u64) -> crate::Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w)?;
    g.dot(y, w)
}

#[test]
fn matmul_with_identity_is_identity() {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let a = Tensor::matrix(2, 2, vec![1.5, -2.0, 0.25, 7.0]).unwrap();
    let an = g.constant(a.clone()).unwrap();
    let out = g.matmul(eye, an).unwrap();
    assert_eq!(g.value(out), &a);
}

#[test]
fn scalar_examples() {
    let mut g = Graph::new();
    let z = g.leaf(Tensor::scalar(0.0)).unwrap();
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).item().unwrap(), 0.5);
    g.backward(s).unwrap();
    assert_eq!(g.grad(z).unwrap().item().unwrap(), 0.25);

    let v = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
    let total = g.sum(v).unwrap();
    assert_eq!(g.value(total).item().unwrap(), 6.0);

    let x = g.leaf(Tensor::scalar(3.0)).unwrap();
    let sq = g.square(x).unwrap();
    g.backward(sq).unwrap();
    assert_eq!(g.grad(x).unwrap().item().unwrap(), 6.0);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let y = g.square(x).unwrap();
    assert!(matches!(g.backward(y), Err(crate::Error::NotScalar(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = g.leaf(Tensor::zeros(&[4])).unwrap();
    assert!(g.add(a, c).is_err());
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![0.0, 1.0])).unwrap();
    assert!(matches!(g.log10(x), Err(crate::Error::NonFinite { op: "log10" })));
}

#[test]
fn mean_of_matmul_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = random(&mut rng, &[4, 3], -1.0, 1.0);
    let x = random(&mut rng, &[3, 2], -1.0, 1.0);
    let xc = x.clone();
    let err = finite_diff_check(
        |g, w| {
            let x = g.constant(xc.clone())?;
            let y = g.matmul(w, x)?;
            g.mean(y)
        },
        &w,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
    let err = finite_diff_check(
        |g, x| {
            let w = g.constant(w.clone())?;
            let y = g.matmul(w, x)?;
            g.mean(y)
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn sum_of_squares_is_exact_polynomial() {
    let err = finite_diff_check(|g, x| g.energy(x), &Tensor::vector(vec![1.0, 2.0]), STEP).unwrap();
    assert!(err < 1e-6, "{err}");
}

type UnaryCase = (&'static str, f64, f64, fn(&mut Graph, NodeId) -> crate::Result<NodeId>);

#[test]
fn unary_ops_match_finite_differences_at_100_points() {
    let cases: Vec<UnaryCase> = vec![
        ("sum", -2.0, 2.0, |g, x| g.sum(x)),
        ("mean", -2.0, 2.0, |g, x| g.mean(x)),
        ("square", -2.0, 2.0, |g, x| g.square(x)),
        ("sqrt", 0.5, 2.0, |g, x| g.sqrt(x)),
        ("log10", 0.5, 2.0, |g, x| g.log10(x)),
        ("relu", -2.0, 2.0, |g, x| g.relu(x)),
        ("sigmoid", -2.0, 2.0, |g, x| g.sigmoid(x)),
        ("tanh", -2.0, 2.0, |g, x| g.tanh(x)),
        ("scale", -2.0, 2.0, |g, x| g.scale(x, -3.5)),
        ("clamp_min", -2.0, 2.0, |g, x| g.clamp_min(x, 0.3)),
        ("slice", -2.0, 2.0, |g, x| g.slice(x, 1, 1, 3)),
        ("reshape", -2.0, 2.0, |g, x| g.reshape(x, 4, 2)),
        ("flatten", -2.0, 2.0, |g, x| g.flatten(x)),
        ("concat", -2.0, 2.0, |g, x| {
            let s = g.square(x)?;
            g.concat(&[x, s, x], 0)
        }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, lo, hi, op) in cases {
        let mut worst = 0.0f64;
        for trial in 0..100 {
            let point = random(&mut rng, &[2, 4], lo, hi);
            let err = finite_diff_check(
                |g, x| {
                    let y = op(g, x)?;
                    project(g, y, trial)
                },
                &point,
                STEP,
            )
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst < TOL, "{name}: {worst}");
    }
}

#[test]
fn binary_ops_match_finite_differences_at_100_points() {
    type Binary = fn(&mut Graph, NodeId, NodeId) -> crate::Result<NodeId>;
    let cases: Vec<(&str, Binary, Vec<usize>)> = vec![
        ("add", |g, a, b| g.add(a, b), vec![2, 3]),
        ("sub", |g, a, b| g.sub(a, b), vec![2, 3]),
        ("mul", |g, a, b| g.mul(a, b), vec![2, 3]),
        ("div", |g, a, b| g.div(a, b), vec![2, 3]),
        ("add_row", |g, a, b| g.add(a, b), vec![3]),
        ("mul_row", |g, a, b| g.mul(a, b), vec![3]),
        ("mul_scalar", |g, a, b| g.mul(a, b), vec![]),
        ("div_scalar", |g, a, b| g.div(a, b), vec![]),
        ("dot", |g, a, b| g.dot(a, b), vec![2, 3]),
        ("matmul", |g, a, b| g.matmul(a, b), vec![3, 2]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (name, op, rhs_shape) in cases {
        let mut worst = 0.0f64;
        for trial in 0..100 {
            let lhs = random(&mut rng, &[2, 3], -2.0, 2.0);
            // Positive right operand keeps `div` away from its pole.
            let rhs = random(&mut rng, &rhs_shape, 0.5, 2.0);
            let (l, r) = (lhs.clone(), rhs.clone());
            let wrt_lhs = finite_diff_check(
                |g, a| {
                    let b = g.constant(r.clone())?;
                    let y = op(g, a, b)?;
                    project(g, y, trial)
                },
                &lhs,
                STEP,
            )
            .unwrap();
            let wrt_rhs = finite_diff_check(
                |g, b| {
                    let a = g.constant(l.clone())?;
                    let y = op(g, a, b)?;
                    project(g, y, trial)
                },
                &rhs,
                STEP,
            )
            .unwrap();
            worst = worst.max(wrt_lhs).max(wrt_rhs);
        }
        assert!(worst < TOL, "{name}: {worst}");
    }
}

#[test]
fn repeated_input_accumulates() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(1.5)).unwrap();
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    g.backward(z).unwrap();
    assert_eq!(g.grad(x).unwrap().item().unwrap(), 4.0);
}

#[test]
fn concat_then_slice_is_identity_on_values_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for axis in 0..2 {
        let mut g = Graph::new();
        let a = g.leaf(random(&mut rng, &[3, 4], -1.0, 1.0)).unwrap();
        let b = g.leaf(random(&mut rng, &[3, 4], -1.0, 1.0)).unwrap();
        let c = g.concat(&[a, b], axis).unwrap();
        let a2 = g.slice(c, axis, 0, 3 + axis).unwrap();
        let b2 = g.slice(c, axis, 3 + axis, g.shape(c)[axis]).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
        let w = g.constant(random(&mut rng, &[3, 4], -1.0, 1.0)).unwrap();
        let la = g.dot(a2, w).unwrap();
        let lb = g.dot(b2, w).unwrap();
        let loss = g.add(la, lb).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), g.value(w));
        assert_eq!(g.grad(b).unwrap(), g.value(w));
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let x = g.leaf(Tensor::vector(vec![3.0, 4.0])).unwrap();
    let y = g.dot(c, x).unwrap();
    g.backward(y).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn evaluation_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let w = g.leaf(random(&mut rng, &[8, 8], -1.0, 1.0)).unwrap();
        let x = g.constant(random(&mut rng, &[8, 8], -1.0, 1.0)).unwrap();
        let y = g.matmul(w, x).unwrap();
        let y = g.tanh(y).unwrap();
        let l = g.mean(y).unwrap();
        g.backward(l).unwrap();
        (g.value(l).item().unwrap().to_bits(), g.grad(w).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}
