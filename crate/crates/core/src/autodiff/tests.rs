use proptest::prelude::*;

use super::gradcheck::GradCheckConfig;
use super::suite::run_op_suite;
use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let o = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(o).data(), &[1.0, 2.0, 3.0, 4.0]);

    let n = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
    let o = g.matmul(m, n).unwrap();
    assert_eq!(g.value(o).data(), &[19.0, 22.0, 43.0, 50.0]);

    let row = g.constant(t(&[1, 3], &[1.0; 3])).unwrap();
    let col = g.constant(t(&[3, 1], &[1.0; 3])).unwrap();
    let o = g.matmul(row, col).unwrap();
    assert_eq!(g.shape(o), &[1, 1]);
    assert_eq!(g.value(o).data(), &[3.0]);

    assert!(matches!(g.matmul(row, row), Err(Error::Dimension(_))));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
    let o = g.softmax(a).unwrap();
    assert_eq!(g.value(o).data(), &[0.5, 0.5]);

    let b = g.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let o = g.softmax(b).unwrap();
    assert!(close(g.value(o).data(), &[0.0900, 0.2447, 0.6652], 1e-4));

    let c = g.constant(t(&[2], &[1000.0, 0.0])).unwrap();
    let o = g.softmax(c).unwrap();
    assert!(close(g.value(o).data(), &[1.0, 0.0], 1e-12));
}

#[test]
fn masked_softmax_zeroes_masked_columns() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 3], &[1.0, 9.0, 2.0, 0.0, 5.0, 0.0])).unwrap();
    let o = g.masked_softmax(x, Some(&[true, false, true])).unwrap();
    let v = g.value(o);
    assert_eq!(v.data()[1], 0.0);
    assert_eq!(v.data()[4], 0.0);
    assert!((v.data()[3] - 0.5).abs() < 1e-12);
    assert!(g.masked_softmax(x, Some(&[false, false, false])).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let one = g.constant(t(&[2], &[1.0, 1.0])).unwrap();
    let zero = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
    let x = g.constant(t(&[1, 2], &[1.0, 3.0])).unwrap();
    let o = g.layer_norm(x, one, zero, 1e-12).unwrap();
    assert!(close(g.value(o).data(), &[-1.0, 1.0], 1e-9));

    let beta = g.constant(t(&[2], &[0.3, -0.7])).unwrap();
    let flat = g.constant(t(&[1, 2], &[4.0, 4.0])).unwrap();
    let o = g.layer_norm(flat, one, beta, 1e-5).unwrap();
    assert!(close(g.value(o).data(), &[0.3, -0.7], 1e-12));

    let gz = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
    let o = g.layer_norm(x, gz, beta, 1e-5).unwrap();
    assert!(close(g.value(o).data(), &[0.3, -0.7], 1e-12));
}

#[test]
fn cosine_examples() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(t(&[3], &[0.3, -1.2, 2.0])).unwrap();
    let o = g.cosine(v, v).unwrap();
    assert!((g.value(o).data()[0] - 1.0).abs() < 1e-12);

    let e1 = g.constant(t(&[2], &[1.0, 0.0])).unwrap();
    let e2 = g.constant(t(&[2], &[0.0, 1.0])).unwrap();
    let o = g.cosine(e1, e2).unwrap();
    assert_eq!(g.value(o).data()[0], 0.0);

    let d = g.constant(t(&[2], &[1.0, 1.0])).unwrap();
    let o = g.cosine(d, e1).unwrap();
    assert!((g.value(o).data()[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);

    let z = g.constant(t(&[2], &[0.0, 1e-9])).unwrap();
    assert!(matches!(g.cosine(z, e1), Err(Error::DegenerateVector { .. })));
}

#[test]
fn dropout_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2], &[2.0, 4.0])).unwrap();
    let mut s = SeedStream::new(1, 1);
    assert_eq!(g.dropout(x, 0.0, Mode::Train, &mut s).unwrap(), x);
    assert_eq!(g.dropout(x, 0.9, Mode::Eval, &mut s).unwrap(), x);
    assert_eq!(s.offset(), 0);
    let o = g.dropout_with_mask(x, &[true, false], 0.5).unwrap();
    assert_eq!(g.value(o).data(), &[4.0, 0.0]);
    assert!(g.dropout(x, 1.0, Mode::Train, &mut s).is_err());
}

#[test]
fn dropout_is_reproducible_and_unbiased() {
    let n = 100_000;
    let rate = 0.3;
    let values = [1.5, -0.5, 2.0];
    let run = || {
        let mut g = Graph::<f64>::new();
        let mut s = SeedStream::new(42, 9);
        let x = g.constant(Tensor::vector(values.repeat(n))).unwrap();
        let o = g.dropout(x, rate, Mode::Train, &mut s).unwrap();
        g.value(o).data().to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    for (k, &v) in values.iter().enumerate() {
        let draws: Vec<f64> = a.iter().skip(k).step_by(3).copied().collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        // Per-draw variance of inverted dropout: v² · rate / (1 − rate).
        let se = (v * v * rate / (1.0 - rate) / n as f64).sqrt();
        assert!((mean - v).abs() < 3.0 * se, "element {k}: mean {mean} vs {v}");
    }
}

#[test]
fn backward_square_sum() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_cosine_stationary_at_equal_vectors() {
    let mut g = Graph::<f64>::new();
    let u = g.param(t(&[3], &[0.4, -1.0, 2.0])).unwrap();
    let v = g.param(t(&[3], &[0.4, -1.0, 2.0])).unwrap();
    let c = g.cosine(u, v).unwrap();
    let grads = g.backward(c).unwrap();
    for w in [u, v] {
        assert!(grads.wrt(w).unwrap().data().iter().all(|d| d.abs() < 1e-12));
    }
}

#[test]
fn backward_requires_scalar_and_zero_fills_unused() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
    let unused = g.param(t(&[2, 2], &[1.0; 4])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    let l = g.sum(x).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0; 4]);
}

#[test]
fn fan_out_accumulates_path_contributions() {
    // loss = sum(x) + sum(x ∘ x) + dot(x, x): gradient 1 + 2x + 2x.
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[3], &[0.5, -1.0, 2.0])).unwrap();
    let a = g.sum(x).unwrap();
    let sq = g.mul(x, x).unwrap();
    let b = g.sum(sq).unwrap();
    let c = g.dot(x, x).unwrap();
    let ab = g.add(a, b).unwrap();
    let l = g.add(ab, c).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, -3.0, 9.0]);
}

#[test]
fn record_is_topologically_ordered() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let y = g.matmul(x, x).unwrap();
    let z = g.softmax(y).unwrap();
    let s = g.sum(z).unwrap();
    for v in [y, z, s] {
        assert!(g.inputs(v).iter().all(|i| i.id() < v.id()));
    }
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2], &[-1.0, 1.0])).unwrap();
    assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
    let big = g.constant(t(&[1], &[1000.0])).unwrap();
    assert!(matches!(g.exp(big), Err(Error::NonFinite { .. })));
}

#[test]
fn every_op_passes_finite_differences() {
    let reports = run_op_suite(10, 2024, GradCheckConfig::default()).unwrap();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![3, 4], data).unwrap()).unwrap();
        let o = g.softmax(x).unwrap();
        for r in 0..3 {
            let s: f64 = g.value(o).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(g.value(o).row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn cosine_bounded_and_scale_invariant(
        u in prop::collection::vec(-2.0f64..2.0, 5),
        v in prop::collection::vec(-2.0f64..2.0, 5),
        alpha in 0.01f64..100.0,
        beta in 0.01f64..100.0,
    ) {
        let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(nu > 1e-3 && nv > 1e-3);
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(u.clone())).unwrap();
        let b = g.constant(Tensor::vector(v.clone())).unwrap();
        let c = g.cosine(a, b).unwrap();
        let c0 = g.value(c).data()[0];
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c0));
        let sa = g.constant(Tensor::vector(u.iter().map(|x| x * alpha).collect())).unwrap();
        let sb = g.constant(Tensor::vector(v.iter().map(|x| x * beta).collect())).unwrap();
        let c1 = g.cosine(sa, sb).unwrap();
        prop_assert!((g.value(c1).data()[0] - c0).abs() < 1e-9);
    }
}
