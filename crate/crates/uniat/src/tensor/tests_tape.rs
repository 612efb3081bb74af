use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let i2 = tape.leaf(&t64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
    let a = tape.leaf(&t64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let y = tape.matmul(i2, a).unwrap();
    assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_projector() {
    let mut tape = Tape::new();
    let p = tape.leaf(&t64(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]));
    let v = tape.leaf(&t64(vec![2, 1], vec![5.0, 7.0]));
    let y = tape.matmul(p, v).unwrap();
    assert_eq!(tape.value(y), &[5.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(&Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "message should name shapes: {msg}");
    match err {
        Error::ShapeMismatch { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    // 3x4 by 4x2 at 64-bit, step 1e-5, rel err ≤ 1e-6.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = randn(&mut rng, vec![3, 4]);
    let b = randn(&mut rng, vec![4, 2]);
    let err = finite_diff_check(
        |t, x| {
            let bid = t.leaf(&b);
            let y = t.matmul(x, bid)?;
            Ok(t.sum(y))
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "matmul grad err {err}");
}

#[test]
fn gelu_point_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(vec![3], vec![0.0, 10.0, 1.0]));
    let y = tape.gelu(x);
    let v = tape.value(y);
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-6);

    // Quadrature oracle for Φ(1): Simpson's rule on the normal density
    // over [0, 1], plus the 0.5 mass below zero.
    let n = 2000usize;
    let h = 1.0 / n as f64;
    let pdf = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut integral = pdf(0.0) + pdf(1.0);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        integral += w * pdf(i as f64 * h);
    }
    integral *= h / 3.0;
    let phi1 = 0.5 + integral;
    assert!((v[2] - 1.0 * phi1).abs() < 1e-9, "gelu(1)={} vs {}", v[2], phi1);
}

#[test]
fn softmax_uniform_and_shift_invariance() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(vec![1, 2], vec![0.0, 0.0]));
    let y = tape.softmax(x, 1).unwrap();
    assert_eq!(tape.value(y), &[0.5, 0.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let base = randn(&mut rng, vec![2, 5]);
        let c = rng.gen_range(-30.0..30.0);
        let shifted = Tensor::new(
            vec![2, 5],
            base.data().iter().map(|v| v + c).collect(),
        )
        .unwrap();
        let mut t1 = Tape::new();
        let a = t1.leaf(&base);
        let ya = t1.softmax(a, 1).unwrap();
        let mut t2 = Tape::new();
        let b = t2.leaf(&shifted);
        let yb = t2.softmax(b, 1).unwrap();
        for (u, w) in t1.value(ya).iter().zip(t2.value(yb)) {
            assert!((u - w).abs() <= 1e-6);
        }
        // Rows sum to 1 ± 1e-6.
        for row in 0..2 {
            let s: f64 = t1.value(ya)[row * 5..(row + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn softmax_direct_oracle() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(vec![1, 3], vec![1.0, 2.0, 3.0]));
    let y = tape.softmax(x, 1).unwrap();
    // Plain exp/sum evaluation, no stabilization.
    let z: f64 = 1f64.exp() + 2f64.exp() + 3f64.exp();
    let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
    for (a, e) in tape.value(y).iter().zip(expect) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn softmax_axis_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(vec![2, 2], vec![3.0, 0.0, 3.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    // Columns are [3,3] and [0,0]: both uniform.
    assert_eq!(tape.value(y), &[0.5, 0.5, 0.5, 0.5]);
    let bad = tape.softmax(x, 2);
    assert!(bad.is_err());
}

#[test]
fn layernorm_constant_row_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(vec![1, 4], vec![2.5; 4]));
    let gain = tape.leaf(&t64(vec![4], vec![1.0; 4]));
    let bias = tape.leaf(&t64(vec![4], vec![0.0; 4]));
    let y = tape.layernorm(x, gain, bias, 1e-5).unwrap();
    for &v in tape.value(y) {
        assert_eq!(v, 0.0);
    }
}

#[test]
fn layernorm_already_normalized_row() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(vec![1, 2], vec![1.0, -1.0]));
    let gain = tape.leaf(&t64(vec![2], vec![1.0; 2]));
    let bias = tape.leaf(&t64(vec![2], vec![0.0; 2]));
    let y = tape.layernorm(x, gain, bias, 1e-12).unwrap();
    assert!((tape.value(y)[0] - 1.0).abs() < 1e-9);
    assert!((tape.value(y)[1] + 1.0).abs() < 1e-9);
}

#[test]
fn layernorm_rows_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, vec![4, 8]);
    let mut tape = Tape::new();
    let xid = tape.leaf(&x);
    let gain = tape.leaf(&t64(vec![8], vec![1.0; 8]));
    let bias = tape.leaf(&t64(vec![8], vec![0.0; 8]));
    let y = tape.layernorm(xid, gain, bias, 1e-12).unwrap();
    for r in 0..4 {
        let row = &tape.value(y)[r * 8..(r + 1) * 8];
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn layernorm_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = randn(&mut rng, vec![2, 8]);
    let w = randn(&mut rng, vec![2, 8]);
    let gain = randn(&mut rng, vec![8]);
    let bias = randn(&mut rng, vec![8]);
    let err = finite_diff_check(
        |t, xid| {
            let g = t.leaf(&gain);
            let b = t.leaf(&bias);
            let y = t.layernorm(xid, g, b, 1e-5)?;
            let wid = t.leaf(&w);
            let z = t.mul(y, wid)?;
            Ok(t.sum(z))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "layernorm grad err {err}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).with_grad());
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_sum_of_squares_is_2x() {
    let data = vec![1.0, -2.0, 0.5, 3.0];
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(vec![4], data.clone()).with_grad());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    let g = tape.grad(x).unwrap();
    for (gv, xv) in g.iter().zip(&data) {
        assert!((gv - 2.0 * xv).abs() < 1e-12);
    }
}

#[test]
fn backward_composite_matches_finite_differences() {
    // gelu ∘ matmul ∘ layernorm at 64-bit.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = randn(&mut rng, vec![3, 6]);
    let gain = randn(&mut rng, vec![6]);
    let bias = randn(&mut rng, vec![6]);
    let w = randn(&mut rng, vec![6, 4]);
    let err = finite_diff_check(
        |t, xid| {
            let g = t.leaf(&gain);
            let b = t.leaf(&bias);
            let y = t.layernorm(xid, g, b, 1e-5)?;
            let wid = t.leaf(&w);
            let y = t.matmul(y, wid)?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "composite grad err {err}");
}

#[test]
fn backward_rejects_non_scalar_and_double_call() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(vec![2], vec![1.0, 2.0]).with_grad());
    let y = tape.scale(x, 2.0);
    assert!(tape.backward(y).is_err()); // non-scalar

    let mut tape = Tape::new();
    let x = tape.leaf(&t64(vec![2], vec![1.0, 2.0]).with_grad());
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    let again = tape.backward(loss);
    assert!(again.is_err(), "second backward must be rejected");
}

#[test]
fn gradients_deterministic_across_rebuilt_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = randn(&mut rng, vec![4, 4]);
    let w = randn(&mut rng, vec![4, 4]);
    let run = || {
        let mut tape = Tape::new();
        let mut watched = x.clone();
        watched.requires_grad = true;
        let xid = tape.leaf(&watched);
        let wid = tape.leaf(&w);
        let y = tape.matmul(xid, wid)?;
        let y = tape.gelu(y);
        let loss = tape.sum(y);
        tape.backward(loss)?;
        Ok::<Vec<f64>, Error>(tape.grad(xid).unwrap().to_vec())
    };
    let g1 = run().unwrap();
    let g2 = run().unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn off_path_tensor_has_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(vec![2], vec![1.0, 2.0]).with_grad());
    let unused = tape.leaf(&t64(vec![2], vec![5.0, 6.0]).with_grad());
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert!(tape.grad(unused).is_none());
    let _ = unused;
}

#[test]
fn finite_diff_check_on_sum_is_tiny() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = randn(&mut rng, vec![3, 3]);
    let err = finite_diff_check(|t, xid| Ok(t.sum(xid)), &x, 1e-5).unwrap();
    assert!(err <= 1e-10, "sum fd err {err}");
}

#[test]
fn finite_diff_check_on_softmax_sum_is_zero_gradient() {
    // Rows of softmax sum to a constant, so both the analytic gradient
    // and the central differences are the (near-)zero vector.
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let x = randn(&mut rng, vec![2, 4]);

    let mut tape = Tape::new();
    let mut watched = x.clone();
    watched.requires_grad = true;
    let xid = tape.leaf(&watched);
    let y = tape.softmax(xid, 1).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    for &g in tape.grad(xid).unwrap() {
        assert!(g.abs() <= 1e-12, "analytic gradient should vanish: {g}");
    }

    let eval = |data: &[f64]| {
        let mut t = Tape::new();
        let id = t.leaf(&Tensor::new(vec![2, 4], data.to_vec()).unwrap());
        let y = t.softmax(id, 1).unwrap();
        let s = t.sum(y);
        t.value(s)[0]
    };
    let h = 1e-5;
    let mut data = x.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + h;
        let up = eval(&data);
        data[i] = orig - h;
        let down = eval(&data);
        data[i] = orig;
        let central = (up - down) / (2.0 * h);
        assert!(central.abs() <= 1e-9, "central difference should vanish: {central}");
    }
}

#[test]
fn finite_diff_check_on_identity_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let logits = randn(&mut rng, vec![3, 5]);
    let rows = vec![
        CeRow { gt: 1, negatives: vec![0, 3] },
        CeRow { gt: 4, negatives: vec![0, 1, 2, 3] },
        CeRow { gt: 0, negatives: vec![2] },
    ];
    let err = finite_diff_check(
        |t, xid| {
            let l = t.restricted_ce(xid, rows.clone())?;
            Ok(t.sum(l))
        },
        &logits,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "identity-loss fd err {err}");
}

#[test]
fn every_primitive_passes_gradient_check() {
    let entries = primitive_checks::<f64>(1e-5, None).unwrap();
    assert!(entries.len() >= 20, "suite should cover all primitives");
    for e in &entries {
        assert!(
            e.max_rel_err <= 1e-4,
            "{} failed gradient check: {}",
            e.name,
            e.max_rel_err
        );
    }
    // Three deep compositions are part of the sweep.
    let composites = entries
        .iter()
        .filter(|e| e.name.starts_with("composite_"))
        .count();
    assert_eq!(composites, 3);
}

#[test]
fn corrupted_adjoint_is_detected() {
    let entries = primitive_checks::<f64>(1e-5, Some("gelu")).unwrap();
    let gelu = entries.iter().find(|e| e.name == "gelu").unwrap();
    assert!(
        gelu.max_rel_err > 1e-4,
        "fault injection must register as failure, got {}",
        gelu.max_rel_err
    );
    for e in entries.iter().filter(|e| e.name != "gelu") {
        assert!(e.max_rel_err <= 1e-4);
    }
}

#[test]
fn topk_mask_keeps_largest_with_index_tiebreak() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(vec![2, 4], vec![0.1, 0.4, 0.4, 0.2, 0.9, 0.9, 0.9, 0.9]));
    let y = tape.topk_mask(x, 2).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.4, 0.4, 0.0, 0.9, 0.9, 0.0, 0.0]);
}

#[test]
fn restricted_ce_empty_negative_set_is_exact_zero() {
    let mut tape = Tape::new();
    let logits = tape.leaf(&t64(vec![1, 3], vec![3.0, -1.0, 0.5]).with_grad());
    let loss = tape
        .restricted_ce(logits, vec![CeRow { gt: 0, negatives: vec![] }])
        .unwrap();
    assert_eq!(tape.value(loss), &[0.0]);
    let total = tape.sum(loss);
    tape.backward(total).unwrap();
    assert_eq!(tape.grad(logits).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn bmm_matches_per_group_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let a = randn(&mut rng, vec![2, 3, 4]);
    let b = randn(&mut rng, vec![2, 4, 2]);
    let mut tape = Tape::new();
    let aid = tape.leaf(&a);
    let bid = tape.leaf(&b);
    let y = tape.bmm(aid, bid, false).unwrap();
    for g in 0..2 {
        let direct = super::matmul_raw(
            &a.data()[g * 12..(g + 1) * 12],
            &b.data()[g * 8..(g + 1) * 8],
            3,
            4,
            2,
        );
        assert_eq!(&tape.value(y)[g * 6..(g + 1) * 6], direct.as_slice());
    }
}
