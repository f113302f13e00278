use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random_tensor(r: &mut crate::rng::Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| r.random_range(-1.5..1.5)).collect::<Vec<_>>())
}

#[test]
fn sigmoid_and_add_values() {
    let mut g = Graph::new();
    let z = g.constant(t(&[1], &[0.0]));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).data(), &[0.5]);
    let a = g.constant(t(&[2], &[1.0, 2.0]));
    let b = g.constant(t(&[2], &[3.0, 4.0]));
    let c = g.add(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1], &[0.0]));
    let s = g.sigmoid(x).unwrap();
    let root = g.sum(s, None).unwrap();
    let analytic = g.backward(root).unwrap().wrt(x).unwrap()[0];
    assert_eq!(analytic, 0.25);
    let eps = 1e-5;
    let f = |v: f64| 1.0 / (1.0 + (-v).exp());
    let numeric = (f(eps) - f(-eps)) / (2.0 * eps);
    assert!((analytic - numeric).abs() < 1e-8);
}

#[test]
fn elementwise_rejects_illegal_broadcast() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let c = g.constant(Tensor::zeros(&[2, 1]));
    assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    let d = g.mul(a, c).unwrap();
    assert_eq!(g.shape(d), &[2, 3]);
    let e = g.mul(c, a).unwrap();
    assert_eq!(g.shape(e), &[2, 3]);
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let p = g.matmul(i, m).unwrap();
    assert_eq!(g.value(p).data(), &[5.0, 6.0, 7.0, 8.0]);
    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
    assert!(g.matmul(a, a).is_err());
}

#[test]
fn matmul_gradient_is_b_transpose_row_sums() {
    let mut r = rng::stream(1, "mm");
    let a = random_tensor(&mut r, &[3, 4]);
    let b = random_tensor(&mut r, &[4, 5]);
    let mut g = Graph::new();
    let av = g.leaf(a.clone());
    let bv = g.constant(b.clone());
    let c = g.matmul(av, bv).unwrap();
    let root = g.sum(c, None).unwrap();
    let grad = g.backward(root).unwrap().wrt(av).unwrap().to_vec();
    for i in 0..3 {
        for p in 0..4 {
            let expected: f64 = b.row(p).iter().sum();
            assert!((grad[i * 4 + p] - expected).abs() < 1e-12);
        }
    }
    let report = grad_check(
        |g, x| {
            let bv = g.constant(b.clone());
            let c = g.matmul(x, bv)?;
            g.sum(c, None)
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6);
}

#[test]
fn reduce_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
    let m = g.mean(x, None).unwrap();
    assert_eq!(g.value(m).item(), 2.0);
    let y = g.leaf(t(&[3], &[1.0, -2.0, 0.0]));
    let l1 = g.l1_norm(y, None).unwrap();
    assert_eq!(g.value(l1).item(), 3.0);
    let grads = g.backward(l1).unwrap();
    assert_eq!(grads.wrt(y).unwrap(), &[1.0, -1.0, 0.0]);
    assert!(matches!(
        g.sum(x, Some(1)),
        Err(TensorError::InvalidAxis { axis: 1, rank: 1, .. })
    ));
}

#[test]
fn reduce_along_axis() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let s0 = g.sum(x, Some(0)).unwrap();
    assert_eq!(g.value(s0).data(), &[5.0, 7.0, 9.0]);
    let m1 = g.mean(x, Some(1)).unwrap();
    assert_eq!(g.value(m1).data(), &[2.0, 5.0]);
}

#[test]
fn l1_subgradient_matches_finite_differences_away_from_zero() {
    let x = t(&[2, 3], &[0.3, -0.7, 1.2, -0.1, 0.5, -2.0]);
    let report = grad_check(|g, v| g.l1_norm(v, None), &x, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-8);
    assert!(report.resampled.is_empty());
}

#[test]
fn concat_and_slice_examples() {
    let mut g = Graph::new();
    let a = g.leaf(t(&[2, 1], &[1.0, 2.0]));
    let b = g.leaf(t(&[2, 1], &[3.0, 4.0]));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 2]);
    assert_eq!(g.value(c).data(), &[1.0, 3.0, 2.0, 4.0]);
    let back = g.slice(c, 1, 0, 1).unwrap();
    assert_eq!(g.value(back), g.value(a));
    let root = g.sum(c, None).unwrap();
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.wrt(a).unwrap(), &[1.0, 1.0]);
    assert_eq!(grads.wrt(b).unwrap(), &[1.0, 1.0]);
    assert!(matches!(
        g.slice(c, 1, 1, 3),
        Err(TensorError::OutOfRange { .. })
    ));
    let d = g.constant(Tensor::zeros(&[3, 1]));
    assert!(g.concat(&[a, d], 1).is_err());
}

#[test]
fn concat_slice_conserve_gradient_mass() {
    let mut r = rng::stream(2, "mass");
    let mut g = Graph::new();
    let a = g.leaf(random_tensor(&mut r, &[2, 3, 2]));
    let b = g.leaf(random_tensor(&mut r, &[2, 1, 2]));
    let c = g.concat(&[a, b], 1).unwrap();
    let s = g.slice(c, 1, 1, 4).unwrap();
    let w = g.constant(random_tensor(&mut r, &[2, 3, 2]));
    let prod = g.mul(s, w).unwrap();
    let root = g.sum(prod, None).unwrap();
    let grads = g.backward(root).unwrap();
    let incoming: f64 = g.value(w).data().iter().sum();
    let routed: f64 = grads.wrt(a).unwrap().iter().sum::<f64>() + grads.wrt(b).unwrap().iter().sum::<f64>();
    assert!((incoming - routed).abs() < 1e-12);
    // The first slot of axis 1 of `a` was sliced away.
    let ga = grads.wrt(a).unwrap();
    assert_eq!(&ga[0..2], &[0.0, 0.0]);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[0.5, -1.0, 2.0]));
    let s = g.sum(x, None).unwrap();
    assert_eq!(g.backward(s).unwrap().wrt(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq, None).unwrap();
    assert_eq!(g.backward(s).unwrap().wrt(x).unwrap(), &[2.0, 4.0]);
    assert!(matches!(g.backward(sq), Err(TensorError::NonScalarRoot(_))));
}

#[test]
fn shared_subgraph_fan_out_sums_once() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.5, -3.0]));
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, y).unwrap();
    let root = g.sum(z, None).unwrap();
    let grad = g.backward(root).unwrap();
    assert_eq!(grad.wrt(x).unwrap(), &[6.0, -12.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(t(&[2], &[1.0, 2.0]));
    let x = g.leaf(t(&[2], &[3.0, 4.0]));
    let p = g.mul(c, x).unwrap();
    let root = g.sum(p, None).unwrap();
    let grads = g.backward(root).unwrap();
    assert!(grads.wrt(c).is_none());
    assert_eq!(grads.wrt(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn grl_forward_identity_backward_reversed() {
    for (lambda, expected) in [(1.0, -1.0), (0.0, 0.0), (2.5, -2.5)] {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let r = g.grl(x, lambda).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0]);
        let root = g.sum(r, None).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[expected, expected]);
    }
    let mut g = Graph::new();
    let x = g.leaf(t(&[1], &[1.0]));
    assert!(g.grl(x, -0.1).is_err());
}

#[test]
fn softmax_cross_entropy_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[3, 4]));
    let ce = g.softmax_cross_entropy(z, &[0, 1, 3]).unwrap();
    assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);

    let confident = g.constant(t(&[1, 3], &[0.0, 50.0, 0.0]));
    let ce = g.softmax_cross_entropy(confident, &[1]).unwrap();
    assert!(g.value(ce).item() < 1e-20);
    assert!(g.value(ce).item() >= 0.0);

    assert!(g.softmax_cross_entropy(z, &[0, 1, 4]).is_err());
}

#[test]
fn softmax_cross_entropy_matches_direct_formula() {
    let mut r = rng::stream(3, "ce");
    let logits = random_tensor(&mut r, &[6, 5]);
    let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..5)).collect();
    let direct: f64 = (0..6)
        .map(|i| {
            let row = logits.row(i);
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[labels[i]].exp() / denom).ln()
        })
        .sum::<f64>()
        / 6.0;
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let ce = g.softmax_cross_entropy(z, &labels).unwrap();
    assert!((g.value(ce).item() - direct).abs() < 1e-12);
    let report = grad_check(|g, v| g.softmax_cross_entropy(v, &labels), &logits, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-6);
}

#[test]
fn binary_cross_entropy_examples() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::full(&[2, 3], 0.5));
    let targets = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    let l = g.binary_cross_entropy(p, &targets).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

    let exact = g.constant(t(&[2, 3], &targets));
    let l = g.binary_cross_entropy(exact, &targets).unwrap();
    assert!(g.value(l).item() <= 1e-6);

    assert!(g.binary_cross_entropy(p, &[0.5; 6]).is_err());
    assert!(g.binary_cross_entropy(p, &[1.0; 5]).is_err());
}

#[test]
fn binary_cross_entropy_matches_direct_formula() {
    let mut r = rng::stream(4, "bce");
    let p: Vec<f64> = (0..12).map(|_| r.random_range(0.05..0.95)).collect();
    let targets: Vec<f64> = (0..12).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let direct: f64 = p
        .iter()
        .zip(&targets)
        .map(|(p, t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
        .sum::<f64>()
        / 12.0;
    let pt = t(&[3, 4], &p);
    let mut g = Graph::new();
    let pv = g.constant(pt.clone());
    let l = g.binary_cross_entropy(pv, &targets).unwrap();
    assert!((g.value(l).item() - direct).abs() < 1e-12);
    let report = grad_check(|g, v| g.binary_cross_entropy(v, &targets), &pt, 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-4);
}

#[test]
fn grad_check_of_sum_is_exact() {
    let x = t(&[4], &[0.1, -2.0, 3.5, 7.0]);
    let report = grad_check(|g, v| g.sum(v, None), &x, 1e-5).unwrap();
    assert!(report.max_rel_error <= 1e-10);
}

#[test]
fn grad_check_sigmoid_matmul_chain() {
    let mut r = rng::stream(5, "chain");
    let x = random_tensor(&mut r, &[3, 4]);
    let w = random_tensor(&mut r, &[4, 2]);
    let report = grad_check(
        |g, v| {
            let wv = g.constant(w.clone());
            let m = g.matmul(v, wv)?;
            let s = g.sigmoid(m)?;
            g.sum(s, None)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4);
}

#[test]
fn grad_check_resamples_relu_kink() {
    let x = t(&[3], &[0.0, 0.7, -0.4]);
    let report = grad_check(
        |g, v| {
            let r = g.relu(v)?;
            g.sum(r, None)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert_eq!(report.resampled, vec![0]);
    assert_ne!(report.point.data()[0], 0.0);
    assert!(report.max_rel_error < 1e-8);
}

#[test]
fn grad_check_rejects_non_scalar() {
    let x = t(&[2], &[1.0, 2.0]);
    assert!(matches!(
        grad_check(|g, v| g.sigmoid(v), &x, 1e-5),
        Err(TensorError::NonScalarRoot(_))
    ));
}

/// Builds a random composite of the differentiable ops over `x: [3, 4]`.
/// GRL is excluded: it deliberately breaks agreement with finite differences.
fn random_composite(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut r = rng::indexed_stream(seed, "composite", 0);
    let mut cur = x;
    for _ in 0..r.random_range(2..6) {
        let shape = g.shape(cur).to_vec();
        let next = match r.random_range(0..10) {
            0 => {
                let c = g.constant(random_tensor(&mut r, &shape));
                g.add(cur, c)?
            }
            1 => {
                let c = g.constant(random_tensor(&mut r, &shape));
                g.sub(c, cur)?
            }
            2 => {
                let mut bshape = shape.clone();
                *bshape.last_mut().unwrap() = 1;
                let c = g.constant(random_tensor(&mut r, &bshape));
                g.mul(cur, c)?
            }
            3 => g.sigmoid(cur)?,
            4 => g.relu(cur)?,
            5 => g.affine(cur, r.random_range(-2.0..2.0), 0.3)?,
            6 => {
                let w = g.constant(random_tensor(&mut r, &[3, shape[1]]));
                let b = g.constant(random_tensor(&mut r, &[3]));
                g.linear(cur, w, Some(b))?
            }
            7 => {
                let w = g.constant(random_tensor(&mut r, &[shape[1], 4]));
                g.matmul(cur, w)?
            }
            8 => {
                let y = g.mul(cur, cur)?;
                let both = g.concat(&[cur, y], 1)?;
                g.slice(both, 1, 1, shape[1] + 1)?
            }
            _ => {
                let s = g.softmax(cur)?;
                g.add(s, cur)?
            }
        };
        cur = next;
    }
    match r.random_range(0..4) {
        0 => g.sum(cur, None),
        1 => {
            let m = g.mean(cur, Some(1))?;
            g.l1_norm(m, None)
        }
        2 => {
            let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..g.shape(cur)[1])).collect();
            g.softmax_cross_entropy(cur, &labels)
        }
        _ => {
            let s = g.sigmoid(cur)?;
            let n = g.value(s).len();
            let targets: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
            g.binary_cross_entropy(s, &targets)
        }
    }
}

#[test]
fn random_composites_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..120 {
        let mut r = rng::indexed_stream(seed, "composite-x", 0);
        let x = random_tensor(&mut r, &[3, 4]);
        let report = grad_check(|g, v| random_composite(g, v, seed), &x, 1e-5).unwrap();
        worst = worst.max(report.max_rel_error);
        assert!(report.max_rel_error <= 1e-4, "seed {seed}: {}", report.max_rel_error);
    }
    assert!(worst <= 1e-4);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], values).unwrap());
        let s = g.softmax(x).unwrap();
        for row in g.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sigmoid_in_open_unit_interval(v in -30.0f64..30.0) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1], vec![v]).unwrap());
        let s = g.sigmoid(x).unwrap();
        let p = g.value(s).item();
        prop_assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn slice_of_concat_round_trips(a in proptest::collection::vec(-5.0f64..5.0, 6),
                                   b in proptest::collection::vec(-5.0f64..5.0, 4)) {
        let mut g = Graph::new();
        let av = g.constant(Tensor::new(&[2, 3], a).unwrap());
        let bv = g.constant(Tensor::new(&[2, 2], b).unwrap());
        let c = g.concat(&[av, bv], 1).unwrap();
        let sa = g.slice(c, 1, 0, 3).unwrap();
        let sb = g.slice(c, 1, 3, 5).unwrap();
        prop_assert_eq!(g.value(sa), g.value(av));
        prop_assert_eq!(g.value(sb), g.value(bv));
    }
}

