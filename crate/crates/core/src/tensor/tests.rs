use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{grad_check, grad_check_params, Tensor};
use crate::error::Error;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(data, shape).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "element {i}: {x} vs {y} (tol {tol})"
        );
    }
}

#[test]
fn ewise_examples() {
    let a = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
    let b = Tensor::new(vec![3.0, 4.0], &[2]).unwrap();
    assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);

    let x = Tensor::new(vec![1.5, -2.0, 7.0], &[3]).unwrap();
    let zero = Tensor::zeros(&[3]).unwrap();
    assert_eq!(x.mul(&zero).unwrap().data(), &[0.0, 0.0, 0.0]);

    // GELU is odd-symmetric around the origin, so gelu(0) = 0.
    let z = Tensor::new(vec![0.0], &[1]).unwrap();
    assert_eq!(z.gelu().unwrap().data(), &[0.0]);
}

#[test]
fn ewise_shape_mismatch_rejected() {
    let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
    let b = Tensor::<f64>::zeros(&[4]).unwrap();
    assert!(matches!(a.add(&b), Err(Error::Shape(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let big = Tensor::new(vec![1e308], &[1]).unwrap();
    assert!(matches!(
        big.mul(&big),
        Err(Error::NonFinite { op: "mul", .. })
    ));
    assert!(Tensor::new(vec![f64::NAN], &[1]).is_err());
}

#[test]
fn matmul_examples() {
    let eye = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let m = Tensor::new(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
    assert_eq!(eye.matmul(&m).unwrap().data(), m.data());

    // [[1,2],[3,4]] . [[5,6],[7,8]] expanded by hand.
    let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    assert_eq!(a.matmul(&m).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);

    let bad = Tensor::<f64>::zeros(&[4, 3]).unwrap();
    let lhs = Tensor::<f64>::zeros(&[2, 3]).unwrap();
    assert!(matches!(lhs.matmul(&bad), Err(Error::Shape(_))));
}

#[test]
fn matmul_batch_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = randn(&[2, 3, 4], &mut rng);
    let b = randn(&[4, 5], &mut rng);
    let out = a.matmul(&b).unwrap();
    assert_eq!(out.shape(), &[2, 3, 5]);
    // Each batch slice must equal the plain 2-d product.
    for bi in 0..2 {
        let slice = Tensor::new(a.data()[bi * 12..(bi + 1) * 12].to_vec(), &[3, 4]).unwrap();
        let expect = slice.matmul(&b).unwrap();
        assert_close(
            &out.data()[bi * 15..(bi + 1) * 15],
            expect.data(),
            1e-12,
        );
    }
}

#[test]
fn softmax_examples() {
    let x = Tensor::new(vec![0.0, 0.0, 0.0], &[3]).unwrap();
    let s = x.softmax(0).unwrap();
    assert_close(s.data(), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 1e-15);

    // Shift invariance: softmax([c, c + d]) == softmax([0, d]).
    let shifted = Tensor::new(vec![5.3, 5.3 + 0.7], &[2]).unwrap();
    let base = Tensor::new(vec![0.0, 0.7], &[2]).unwrap();
    assert_close(
        shifted.softmax(0).unwrap().data(),
        base.softmax(0).unwrap().data(),
        1e-14,
    );

    let x = Tensor::new(vec![0.0, 3f64.ln()], &[2]).unwrap();
    assert_close(x.softmax(0).unwrap().data(), &[0.25, 0.75], 1e-14);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&[4, 7], &mut rng);
    let s = x.softmax(1).unwrap();
    for row in s.data().chunks(7) {
        let total: f64 = row.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn layer_norm_examples() {
    let gain = Tensor::ones(&[4]).unwrap();
    let bias = Tensor::zeros(&[4]).unwrap();

    // Constant row: zero variance is handled by eps, output is zeros.
    let c = Tensor::new(vec![3.0; 4], &[1, 4]).unwrap();
    let out = c.layer_norm(&gain, &bias, 1e-5).unwrap();
    assert_close(out.data(), &[0.0; 4], 1e-12);

    // A mean-0 / std-1 row maps approximately to itself.
    let g2 = Tensor::ones(&[2]).unwrap();
    let b2 = Tensor::zeros(&[2]).unwrap();
    let x = Tensor::new(vec![1.0, -1.0], &[1, 2]).unwrap();
    let out = x.layer_norm(&g2, &b2, 1e-5).unwrap();
    assert_close(out.data(), &[1.0, -1.0], 1e-4);

    // gain = 0 annihilates the normalized value, leaving the bias.
    let zero_gain = Tensor::zeros(&[2]).unwrap();
    let some_bias = Tensor::new(vec![0.5, -0.25], &[2]).unwrap();
    let out = x.layer_norm(&zero_gain, &some_bias, 1e-5).unwrap();
    assert_close(out.data(), &[0.5, -0.25], 1e-12);
}

#[test]
fn layer_norm_row_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&[5, 9], &mut rng);
    let g = Tensor::ones(&[9]).unwrap();
    let b = Tensor::zeros(&[9]).unwrap();
    let out = x.layer_norm(&g, &b, 1e-5).unwrap();
    for row in out.data().chunks(9) {
        let mean: f64 = row.iter().sum::<f64>() / 9.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        assert!(mean.abs() < 1e-5, "row mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "row var {var}");
    }
}

#[test]
fn backward_linear_and_quadratic() {
    let x = Tensor::var(vec![1.0, -2.0, 0.5], &[3]).unwrap();
    let grads = x.sum_all().unwrap().backward().unwrap();
    assert_eq!(grads.get(&x).unwrap(), &[1.0, 1.0, 1.0]);

    let x = Tensor::var(vec![1.0, -2.0, 0.5], &[3]).unwrap();
    let grads = x.square().unwrap().sum_all().unwrap().backward().unwrap();
    assert_eq!(grads.get(&x).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_softmax_sum_is_constant() {
    // Softmax rows sum to 1, so sum(softmax(x)) is constant and the
    // gradient vanishes; verified against finite differences.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&[3, 4], &mut rng);
    let var = x.to_var().unwrap();
    let grads = var
        .softmax(1)
        .unwrap()
        .sum_all()
        .unwrap()
        .backward()
        .unwrap();
    for &g in grads.get(&var).unwrap() {
        assert!(g.abs() < 1e-12, "analytic grad {g}");
    }
    let err = grad_check(|t| t.softmax(1)?.sum_all(), &x, 1e-5).unwrap();
    // The true gradient is exactly zero, so the relative error is measured
    // against the 1e-8 floor; err < 0.05 means the central differences are
    // below 5e-10 in absolute value, i.e. pure cancellation noise.
    assert!(err < 0.05, "finite differences disagree: {err}");
}

#[test]
fn backward_requires_scalar_and_connected_loss() {
    let x = Tensor::var(vec![1.0, 2.0], &[2]).unwrap();
    assert!(x.backward().is_err()); // not scalar

    let detached = Tensor::<f64>::new(vec![1.0], &[1]).unwrap();
    assert!(detached.backward().is_err()); // no graph
}

#[test]
fn backward_is_idempotent_across_zeroed_cycles() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&[4, 4], &mut rng).to_var().unwrap();
    let w = randn(&[4, 4], &mut rng);
    let loss = x.matmul(&w).unwrap().gelu().unwrap().sum_all().unwrap();

    let mut grads = loss.backward().unwrap();
    let first = grads.get(&x).unwrap().to_vec();
    grads.zero();
    loss.backward_into(&mut grads).unwrap();
    let second = grads.get(&x).unwrap().to_vec();
    assert_eq!(first, second, "zero+backward must be bitwise reproducible");

    // Without zeroing, gradients accumulate additively.
    loss.backward_into(&mut grads).unwrap();
    let doubled = grads.get(&x).unwrap();
    for (a, b) in doubled.iter().zip(&first) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn gradient_fans_out_additively() {
    // y = x + x: gradient accumulates to 2.
    let x = Tensor::var(vec![3.0], &[1]).unwrap();
    let grads = x.add(&x).unwrap().sum_all().unwrap().backward().unwrap();
    assert_eq!(grads.get(&x).unwrap(), &[2.0]);
}

#[test]
fn grad_check_rejects_zero_step() {
    let x = Tensor::new(vec![1.0], &[1]).unwrap();
    assert!(matches!(
        grad_check(|t| t.sum_all(), &x, 0.0),
        Err(Error::InvalidArg(_))
    ));
}

#[test]
fn grad_check_linear_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&[6], &mut rng);
    let err = grad_check(|t| t.sum_all(), &x, 1e-4).unwrap();
    assert!(err < 1e-10, "linear map should check exactly, got {err}");
}

/// Every differentiable primitive passes a finite-difference check at
/// <= 1e-5 relative error on random 64-bit inputs (fixed seed).
#[test]
fn grad_check_every_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let h = 1e-5;
    let tol = 1e-5;

    // Weight tensors make the losses non-degenerate.
    let w34 = randn(&[3, 4], &mut rng);
    let w4 = randn(&[4], &mut rng);
    let b = randn(&[3, 4], &mut rng);
    let m45 = randn(&[4, 5], &mut rng);
    let w35 = randn(&[3, 5], &mut rng);

    let x = randn(&[3, 4], &mut rng);
    let cases: Vec<(&str, Box<dyn Fn(&Tensor<f64>) -> crate::Result<Tensor<f64>>>)> = vec![
        ("add", Box::new({
            let b = b.clone();
            let w = w34.clone();
            move |t| t.add(&b)?.mul(&w)?.sum_all()
        })),
        ("add_broadcast", Box::new({
            let w4 = w4.clone();
            let w = w34.clone();
            move |t| t.add(&w4)?.mul(&w)?.sum_all()
        })),
        ("sub", Box::new({
            let b = b.clone();
            let w = w34.clone();
            move |t| t.sub(&b)?.mul(&w)?.sum_all()
        })),
        ("mul", Box::new({
            let b = b.clone();
            move |t| t.mul(&b)?.sum_all()
        })),
        ("mul_self", Box::new(|t: &Tensor<f64>| t.square()?.sum_all())),
        ("scale", Box::new(|t: &Tensor<f64>| t.scale(-2.5)?.sum_all())),
        ("add_scalar", Box::new({
            let w = w34.clone();
            move |t| t.add_scalar(0.7)?.mul(&w)?.sum_all()
        })),
        ("gelu", Box::new({
            let w = w34.clone();
            move |t| t.gelu()?.mul(&w)?.sum_all()
        })),
        ("matmul_lhs", Box::new({
            let m = m45.clone();
            let w = w35.clone();
            move |t| t.matmul(&m)?.mul(&w)?.sum_all()
        })),
        ("softmax", Box::new({
            let w = w34.clone();
            move |t| t.softmax(1)?.mul(&w)?.sum_all()
        })),
        ("layer_norm", Box::new({
            let w = w34.clone();
            let g = w4.clone();
            let bias = w4.clone();
            move |t| t.layer_norm(&g, &bias, 1e-5)?.mul(&w)?.sum_all()
        })),
        ("reshape", Box::new({
            let w = w34.clone();
            move |t| {
                t.reshape(&[4, 3])?
                    .reshape(&[3, 4])?
                    .mul(&w)?
                    .sum_all()
            }
        })),
        ("permute", Box::new({
            let w = w34.clone();
            move |t| t.permute(&[1, 0])?.permute(&[1, 0])?.mul(&w)?.sum_all()
        })),
        ("sum_all", Box::new(|t: &Tensor<f64>| t.sum_all())),
    ];
    for (name, f) in &cases {
        let err = grad_check(f, &x, h).unwrap();
        assert!(err <= tol, "{name}: relative error {err} > {tol}");
    }

    // matmul w.r.t. the right operand, including batch broadcast.
    let rhs = randn(&[4, 5], &mut rng);
    let lhs_b = randn(&[2, 3, 4], &mut rng);
    let w_b = randn(&[2, 3, 5], &mut rng);
    let err = grad_check(
        |t| lhs_b.matmul(t)?.mul(&w_b)?.sum_all(),
        &rhs,
        h,
    )
    .unwrap();
    assert!(err <= tol, "matmul_rhs_batched: {err}");

    // broadcast_to, concat, index_select.
    let small = randn(&[1, 4], &mut rng);
    let w24 = randn(&[2, 4], &mut rng);
    let err = grad_check(|t| t.broadcast_to(&[2, 4])?.mul(&w24)?.sum_all(), &small, h).unwrap();
    assert!(err <= tol, "broadcast_to: {err}");

    let other = randn(&[2, 4], &mut rng);
    let w44 = randn(&[4, 4], &mut rng);
    let err = grad_check(
        |t| Tensor::concat(&[t.clone(), other.clone()], 0)?.mul(&w44)?.sum_all(),
        &w24,
        h,
    )
    .unwrap();
    assert!(err <= tol, "concat: {err}");

    let table = randn(&[5, 3], &mut rng);
    let w33 = randn(&[3, 3], &mut rng);
    let err = grad_check(
        |t| t.index_select(&[4, 0, 4])?.mul(&w33)?.sum_all(),
        &table,
        h,
    )
    .unwrap();
    assert!(err <= tol, "index_select: {err}");

    // layer_norm gradients w.r.t. gain and bias via the multi-param checker.
    let xs = randn(&[3, 4], &mut rng);
    let params = vec![xs, w4.clone(), w4.clone()];
    let w = w34.clone();
    let coords: Vec<(usize, usize)> =
        (0..12).map(|i| (0, i)).chain((0..4).map(|i| (1, i))).chain((0..4).map(|i| (2, i))).collect();
    let err = grad_check_params(
        |ps| ps[0].layer_norm(&ps[1], &ps[2], 1e-5)?.mul(&w)?.sum_all(),
        &params,
        &coords,
        h,
    )
    .unwrap();
    assert!(err <= tol, "layer_norm params: {err}");
}

/// Broadcasting add/mul agree with explicit tiling (independent oracle) on
/// all right-aligned mask patterns of shapes up to rank 4, sizes <= 4.
#[test]
fn broadcast_matches_explicit_tiling() {
    fn tile(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
        // Naive independent tiler: decode output coordinates, map to input
        // coordinates (right-aligned, size-1 dims clamp to 0).
        let out_n: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(out_n);
        for lin in 0..out_n {
            let mut rem = lin;
            let mut coords = vec![0usize; out_shape.len()];
            for d in (0..out_shape.len()).rev() {
                coords[d] = rem % out_shape[d];
                rem /= out_shape[d];
            }
            let offset = out_shape.len() - shape.len();
            let mut idx = 0;
            for (d, &s) in shape.iter().enumerate() {
                let c = if s == 1 { 0 } else { coords[offset + d] };
                idx = idx * s + c;
            }
            out.push(data[idx]);
        }
        out
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let base_shapes: Vec<Vec<usize>> = vec![
        vec![2],
        vec![4],
        vec![2, 3],
        vec![3, 1, 4],
        vec![2, 3, 2, 2],
        vec![4, 1, 2, 3],
    ];
    for out_shape in &base_shapes {
        let rank = out_shape.len();
        for mask_a in 0..(1u32 << rank) {
            for mask_b in 0..(1u32 << rank) {
                // Derive input shapes by masking dims to 1 and optionally
                // trimming leading dims from a.
                let shape_with = |mask: u32| -> Vec<usize> {
                    out_shape
                        .iter()
                        .enumerate()
                        .map(|(d, &s)| if mask & (1 << d) != 0 { 1 } else { s })
                        .collect()
                };
                let mut a_shape = shape_with(mask_a);
                if mask_a % 3 == 1 && rank > 1 {
                    a_shape = a_shape[1..].to_vec();
                }
                let b_shape = shape_with(mask_b);

                let an: usize = a_shape.iter().product();
                let bn: usize = b_shape.iter().product();
                let a_data: Vec<f64> = (0..an).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let b_data: Vec<f64> = (0..bn).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let a = Tensor::new(a_data.clone(), &a_shape).unwrap();
                let bt = Tensor::new(b_data.clone(), &b_shape).unwrap();

                // Expected output shape: elementwise max after right
                // alignment (a dim masked to 1 in both inputs stays 1).
                let rank_out = a_shape.len().max(b_shape.len());
                let dim = |s: &[usize], d: usize| {
                    if d + s.len() >= rank_out { s[d + s.len() - rank_out] } else { 1 }
                };
                let expect_shape: Vec<usize> = (0..rank_out)
                    .map(|d| dim(&a_shape, d).max(dim(&b_shape, d)))
                    .collect();

                let at = tile(&a_data, &a_shape, &expect_shape);
                let btiled = tile(&b_data, &b_shape, &expect_shape);
                let want_add: Vec<f64> = at.iter().zip(&btiled).map(|(x, y)| x + y).collect();
                let want_mul: Vec<f64> = at.iter().zip(&btiled).map(|(x, y)| x * y).collect();

                let got_add = a.add(&bt).unwrap();
                let got_mul = a.mul(&bt).unwrap();
                assert_eq!(got_add.shape(), expect_shape.as_slice());
                assert_eq!(got_add.data(), want_add.as_slice());
                assert_eq!(got_mul.data(), want_mul.as_slice());
            }
        }
    }
}

#[test]
fn detach_severs_graph_and_shares_data() {
    let x = Tensor::var(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.scale(3.0).unwrap();
    let d = y.detach();
    assert!(!d.tracked());
    assert!(d.is_leaf());
    assert_eq!(d.data(), y.data());
    // Loss through the detached path must not reach x.
    assert!(d.sum_all().unwrap().backward().is_err());
}

#[test]
fn concat_and_index_select_roundtrip() {
    let a = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
    let b = Tensor::new(vec![3.0, 4.0], &[1, 2]).unwrap();
    let cat = Tensor::concat(&[a, b], 0).unwrap();
    assert_eq!(cat.shape(), &[2, 2]);
    assert_eq!(cat.data(), &[1.0, 2.0, 3.0, 4.0]);
    let picked = cat.index_select(&[1]).unwrap();
    assert_eq!(picked.data(), &[3.0, 4.0]);
    assert!(cat.index_select(&[2]).is_err());
}
