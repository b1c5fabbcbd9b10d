//! Forward operations against brute-force loop oracles, adjoint identities,
//! and backward rules against central finite differences.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use samsnet::numerics::gradcheck::{all_indices, finite_differences, GradCheckReport};
use samsnet::numerics::{ops, Eager, Graph, Tape, Var};
use samsnet::{Error, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn assert_close(a: &[f64], b: &[f64], rel: f64) {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= rel * scale, "index {i}: {x} vs {y}");
    }
}

/// Six nested loops over (co, ci, t, f, kt, kf) with explicit zero padding.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let [cin, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let [cout, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let p = (k / 2) as isize;
    let mut out = vec![0.0; cout * h * wd];
    for co in 0..cout {
        for t in 0..h {
            for f in 0..wd {
                let mut s = b[co];
                for ci in 0..cin {
                    for kt in 0..k {
                        for kf in 0..k {
                            let ti = t as isize + kt as isize - p;
                            let fi = f as isize + kf as isize - p;
                            if ti < 0 || fi < 0 || ti >= h as isize || fi >= wd as isize {
                                continue;
                            }
                            s += w.data()[((co * cin + ci) * k + kt) * k + kf]
                                * x.data()[(ci * h + ti as usize) * wd + fi as usize];
                        }
                    }
                }
                out[(co * h + t) * wd + f] = s;
            }
        }
    }
    out
}

#[test]
fn conv2d_identity_kernel() {
    let x = rand_t(&[1, 5, 7], 1);
    let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    let y = ops::conv2d(&x, &w, Some(&Tensor::zeros(&[1]))).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv2d_pointwise_is_channel_mix() {
    let x = Tensor::<f64>::from_vec(&[2, 1, 1], vec![1.0, 2.0]).unwrap();
    let w = Tensor::from_vec(&[1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
    assert_eq!(ops::conv2d(&x, &w, None).unwrap().data(), &[1.5]);
}

#[test]
fn conv2d_matches_loop_oracle() {
    // Two random 3×5×5 inputs through 4×3×3×3 kernels.
    let w = rand_t(&[4, 3, 3, 3], 11);
    let b = rand_t(&[4], 12);
    for seed in [13, 14] {
        let x = rand_t(&[3, 5, 5], seed);
        let y = ops::conv2d(&x, &w, Some(&b)).unwrap();
        assert_close(y.data(), &conv_oracle(&x, &w, b.data()), 1e-6);
    }
    let x32: Tensor<f32> = rand_t(&[3, 5, 5], 15).cast();
    let y32 = ops::conv2d(&x32, &w.cast(), Some(&b.cast())).unwrap();
    let want = conv_oracle(&x32.cast(), &w, b.data());
    assert_close(&y32.cast::<f64>().into_data(), &want, 1e-5);
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let x = rand_t(&[2, 4, 4], 1);
    let w = rand_t(&[3, 5, 3, 3], 2);
    assert!(matches!(ops::conv2d(&x, &w, None), Err(Error::Shape { .. })));
    let even = rand_t(&[3, 2, 2, 2], 3);
    assert!(ops::conv2d(&x, &even, None).is_err());
}

#[test]
fn depthwise_identity_and_channel_independence() {
    let x = rand_t(&[3, 4, 4], 21);
    let mut w = Tensor::<f64>::zeros(&[3, 3, 3]);
    for c in 0..3 {
        w.data_mut()[c * 9 + 4] = 1.0;
    }
    assert_eq!(ops::depthwise_conv(&x, &w).unwrap().data(), x.data());
    w.data_mut()[4] = 0.0;
    let y = ops::depthwise_conv(&x, &w).unwrap();
    assert!(y.data()[..16].iter().all(|v| *v == 0.0));
    assert_eq!(&y.data()[16..], &x.data()[16..]);
}

#[test]
fn depthwise_matches_per_channel_oracle() {
    let x = rand_t(&[3, 4, 4], 22);
    let w = rand_t(&[3, 3, 3], 23);
    let y = ops::depthwise_conv(&x, &w).unwrap();
    for c in 0..3 {
        let xc = ops::slice(&x, 0, c, c + 1).unwrap();
        let wc = Tensor::from_vec(&[1, 1, 3, 3], w.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
        let want = conv_oracle(&xc, &wc, &[0.0]);
        assert_close(&y.data()[c * 16..(c + 1) * 16], &want, 1e-12);
    }
    assert!(ops::depthwise_conv(&x, &rand_t(&[2, 3, 3], 1)).is_err());
}

#[test]
fn transpose_conv_pointwise_equals_conv_pointwise() {
    // 1×1 kernels: transpose over [C × C_out] equals conv over the transposed matrix.
    let x = rand_t(&[3, 4, 5], 31);
    let wt = rand_t(&[3, 2, 1, 1], 32);
    let mut wc = Tensor::<f64>::zeros(&[2, 3, 1, 1]);
    for c in 0..3 {
        for o in 0..2 {
            wc.data_mut()[o * 3 + c] = wt.data()[c * 2 + o];
        }
    }
    let a = ops::transpose_conv2d(&x, &wt, None).unwrap();
    let b = ops::conv2d(&x, &wc, None).unwrap();
    assert_close(a.data(), b.data(), 1e-12);
}

#[test]
fn transpose_conv_zero_input_gives_bias() {
    let x = Tensor::<f64>::zeros(&[4, 3, 3]);
    let w = rand_t(&[4, 2, 3, 3], 33);
    let b = Tensor::from_vec(&[2], vec![0.25, -1.5]).unwrap();
    let y = ops::transpose_conv2d(&x, &w, Some(&b)).unwrap();
    assert!(y.data()[..9].iter().all(|v| *v == 0.25));
    assert!(y.data()[9..].iter().all(|v| *v == -1.5));
}

#[test]
fn matmul_identity_unit_and_loop_oracle() {
    let mut eye = Tensor::<f64>::zeros(&[2, 3, 3]);
    for b in 0..2 {
        for i in 0..3 {
            eye.data_mut()[b * 9 + i * 3 + i] = 1.0;
        }
    }
    let m = rand_t(&[2, 3, 4], 41);
    assert_eq!(ops::matmul_batched(&eye, &m).unwrap().data(), m.data());

    let a = Tensor::<f64>::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
    let b = Tensor::from_vec(&[1, 1, 1], vec![3.0]).unwrap();
    assert_eq!(ops::matmul_batched(&a, &b).unwrap().data(), &[6.0]);

    let a = rand_t(&[2, 3, 4], 42);
    let b = rand_t(&[2, 4, 5], 43);
    let c = ops::matmul_batched(&a, &b).unwrap();
    let mut want = vec![0.0; 30];
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                for k in 0..4 {
                    want[bi * 15 + i * 5 + j] += a.data()[bi * 12 + i * 4 + k] * b.data()[bi * 20 + k * 5 + j];
                }
            }
        }
    }
    assert_close(c.data(), &want, 1e-6);

    // a · bᵀ against the same oracle with b transposed explicitly.
    let bt = rand_t(&[2, 5, 4], 44);
    let c = ops::matmul_batched_bt(&a, &bt).unwrap();
    let mut want = vec![0.0; 30];
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                for k in 0..4 {
                    want[bi * 15 + i * 5 + j] += a.data()[bi * 12 + i * 4 + k] * bt.data()[bi * 20 + j * 4 + k];
                }
            }
        }
    }
    assert_close(c.data(), &want, 1e-6);
    assert!(ops::matmul_batched(&a, &a).is_err());
}

#[test]
fn softmax_known_values() {
    let half = ops::softmax_rows(&Tensor::<f64>::zeros(&[1, 2])).unwrap();
    assert_eq!(half.data(), &[0.5, 0.5]);
    let y = ops::softmax_rows(&Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    // exp(k) / Σ exp evaluated with 30-digit arithmetic.
    for (got, want) in y.data().iter().zip([0.09003057317, 0.2447284711, 0.6652409558]) {
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_cases() {
    let x = Tensor::<f64>::full(&[2, 3], 4.0);
    let g = Tensor::ones(&[3]);
    let b = Tensor::zeros(&[3]);
    let y = ops::layer_norm(&x, &[1], &g, &b, 1e-5).unwrap().out;
    assert!(y.data().iter().all(|v| *v == 0.0));

    let x = Tensor::<f64>::from_vec(&[2], vec![1.0, 3.0]).unwrap();
    let y = ops::layer_norm(&x, &[0], &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-12).unwrap().out;
    assert_close(y.data(), &[-1.0, 1.0], 1e-9);

    let x = rand_t(&[4, 6], 51);
    let y = ops::layer_norm(&x, &[1], &Tensor::ones(&[6]), &Tensor::zeros(&[6]), 1e-10).unwrap().out;
    for row in y.data().chunks(6) {
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }

    // Normalising over (C, F) of a [C × T × F] map: each time frame separately.
    let x = rand_t(&[3, 4, 5], 52);
    let y = ops::layer_norm(&x, &[0, 2], &Tensor::ones(&[3, 5]), &Tensor::zeros(&[3, 5]), 1e-10).unwrap().out;
    for t in 0..4 {
        let vals: Vec<f64> = (0..3).flat_map(|c| (0..5).map(move |f| (c, f))).map(|(c, f)| y.data()[(c * 4 + t) * 5 + f]).collect();
        let mean = vals.iter().sum::<f64>() / 15.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 15.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6);
    }

    let empty = Tensor::<f64>::zeros(&[2, 0]);
    assert!(ops::layer_norm(&empty, &[1], &Tensor::zeros(&[0]), &Tensor::zeros(&[0]), 1e-5).is_err());
}

#[test]
fn backward_of_sum_and_half_square() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&rand_t(&[2, 3], 61));
    let s = tape.sum(&x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().unwrap(), &[1.0; 6]);

    let mut tape = Tape::<f64>::new();
    let xv = rand_t(&[5], 62);
    let x = tape.param(&xv);
    let sq = tape.sum_squares(&x).unwrap();
    let half = tape.scale(&sq, 0.5).unwrap();
    tape.backward(half).unwrap();
    assert_eq!(tape.grad(x).unwrap().unwrap(), xv.data());
}

#[test]
fn backward_errors_and_constants() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&rand_t(&[3], 63));
    let c = tape.constant(rand_t(&[3], 64));
    let y = tape.mul(&x, &c).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
    let s = tape.sum(&y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(c).unwrap().is_none());

    let mut other = Tape::<f64>::new();
    assert!(matches!(other.backward(s), Err(Error::Tape(_))));
}

/// Builds `Σ r ⊙ f(params)` on a fresh tape and returns (loss, grads).
fn autodiff<F>(params: &[Tensor<f64>], f: &F) -> (f64, Vec<f64>)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars);
    let weights = rand_t(tape.value(out).unwrap().shape(), 999);
    let w = tape.constant(weights);
    let prod = tape.mul(&out, &w).unwrap();
    let loss = tape.sum(&prod).unwrap();
    tape.backward(loss).unwrap();
    let value = tape.value(loss).unwrap().item().unwrap();
    let grads = vars.iter().flat_map(|v| tape.grad(*v).unwrap().unwrap().to_vec()).collect();
    (value, grads)
}

fn gradcheck<F>(mut params: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let (_, analytic) = autodiff(&params, &f);
    let idx = all_indices(&params);
    let numeric = finite_differences(&mut params, &idx, 1e-5, |p| Ok(autodiff(p, &f).0)).unwrap();
    let report = GradCheckReport::new(&analytic, &numeric);
    assert!(report.max_error() < 1e-4, "max relative error {}", report.max_error());
}

#[test]
fn gradcheck_conv2d() {
    gradcheck(vec![rand_t(&[2, 4, 5], 1), rand_t(&[3, 2, 3, 3], 2), rand_t(&[3], 3)], |t, v| {
        t.conv2d(&v[0], &v[1], Some(&v[2])).unwrap()
    });
}

#[test]
fn gradcheck_transpose_conv2d() {
    gradcheck(vec![rand_t(&[3, 4, 5], 4), rand_t(&[3, 2, 3, 3], 5), rand_t(&[2], 6)], |t, v| {
        t.transpose_conv2d(&v[0], &v[1], Some(&v[2])).unwrap()
    });
}

#[test]
fn gradcheck_depthwise() {
    gradcheck(vec![rand_t(&[2, 4, 5], 7), rand_t(&[2, 3, 3], 8)], |t, v| t.depthwise_conv(&v[0], &v[1]).unwrap());
}

#[test]
fn gradcheck_matmuls() {
    gradcheck(vec![rand_t(&[2, 3, 4], 9), rand_t(&[2, 4, 5], 10)], |t, v| t.matmul_batched(&v[0], &v[1]).unwrap());
    gradcheck(vec![rand_t(&[2, 3, 4], 11), rand_t(&[2, 5, 4], 12)], |t, v| {
        t.matmul_batched_bt(&v[0], &v[1]).unwrap()
    });
}

#[test]
fn gradcheck_layer_norm_over_inner_and_outer_axes() {
    let params = vec![rand_t(&[3, 4, 5], 13), rand_t(&[3, 5], 14), rand_t(&[3, 5], 15)];
    gradcheck(params, |t, v| t.layer_norm(&v[0], &[0, 2], &v[1], &v[2], 1e-5).unwrap());
    let params = vec![rand_t(&[4, 6], 16), rand_t(&[4], 17), rand_t(&[4], 18)];
    gradcheck(params, |t, v| t.layer_norm(&v[0], &[0], &v[1], &v[2], 1e-5).unwrap());
}

#[test]
fn gradcheck_attention_composite() {
    // softmax(Q Kᵀ / √C) V per channel.
    let params = vec![rand_t(&[2, 3, 4], 19), rand_t(&[2, 3, 4], 20), rand_t(&[2, 3, 4], 21)];
    gradcheck(params, |t, v| {
        let s = t.matmul_batched_bt(&v[0], &v[1]).unwrap();
        let s = t.scale(&s, 1.0 / 2f64.sqrt()).unwrap();
        let p = t.softmax_rows(&s).unwrap();
        t.matmul_batched(&p, &v[2]).unwrap()
    });
}

#[test]
fn gradcheck_elementwise_and_structural() {
    let params = vec![rand_t(&[2, 3, 4], 22), rand_t(&[2, 3, 4], 23)];
    gradcheck(params, |t, v| {
        let a = t.sigmoid(&v[0]).unwrap();
        let b = t.mul(&a, &v[1]).unwrap();
        let c = t.sub(&b, &v[0]).unwrap();
        let left = t.slice(&c, 1, 0, 1).unwrap();
        let right = t.slice(&c, 1, 1, 3).unwrap();
        let cat = t.concat(&[&right, &left], 1).unwrap();
        let d = t.add(&cat, &v[1]).unwrap();
        let e = t.relu(&d).unwrap();
        let sq = t.sum_squares(&e).unwrap();
        let sq = t.scale(&sq, 0.1).unwrap();
        let ones = t.constant(Tensor::ones(&[1]));
        t.add(&sq, &ones).unwrap()
    });
}

#[test]
fn non_finite_forward_is_an_error() {
    let x = Tensor::<f32>::from_vec(&[2], vec![1e30, 1e30]).unwrap();
    let err = ops::mul(&x, &x).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "mul", .. }));
}

#[test]
fn eager_and_tape_agree_bitwise() {
    let x: Tensor<f32> = rand_t(&[2, 4, 6], 71).cast();
    let w: Tensor<f32> = rand_t(&[3, 2, 3, 3], 72).cast();
    let mut eager = Eager;
    let a = eager.conv2d(&x, &w, None).unwrap();
    let a = eager.softmax_rows(&a).unwrap();
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.param(&w));
    let b = tape.conv2d(&xv, &wv, None).unwrap();
    let b = tape.softmax_rows(&b).unwrap();
    assert_eq!(a.data(), tape.value(b).unwrap().data());
}

#[test]
fn inputs_are_not_mutated() {
    let x = rand_t(&[2, 3, 3], 81);
    let w = rand_t(&[2, 2, 3, 3], 82);
    let (xc, wc) = (x.clone(), w.clone());
    let _ = ops::conv2d(&x, &w, None).unwrap();
    let _ = ops::transpose_conv2d(&x, &w, None).unwrap();
    assert_eq!((x, w), (xc, wc));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        row in proptest::collection::vec(-20.0f64..20.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let n = row.len();
        let x = Tensor::from_vec(&[1, n], row.clone()).unwrap();
        let shifted = Tensor::from_vec(&[1, n], row.iter().map(|v| v + shift).collect()).unwrap();
        let y = ops::softmax_rows(&x).unwrap();
        let ys = ops::softmax_rows(&shifted).unwrap();
        prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(y.data().iter().all(|v| *v > 0.0 && *v < 1.0 || n == 1));
        for (a, b) in y.data().iter().zip(ys.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_and_transpose_conv_are_adjoint(
        seed in 0u64..1_000,
        cin in 1usize..4,
        cout in 1usize..4,
        h in 1usize..6,
        w in 1usize..7,
        k in prop_oneof![Just(1usize), Just(3), Just(5)],
    ) {
        let x = rand_t(&[cin, h, w], seed);
        let y = rand_t(&[cout, h, w], seed + 1);
        let kern = rand_t(&[cout, cin, k, k], seed + 2);
        let lhs = ops::conv2d(&x, &kern, None).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&ops::transpose_conv2d(&y, &kern, None).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()).max(1e-12));
    }

    #[test]
    fn depthwise_and_matmul_are_adjoint(seed in 0u64..1_000, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        // Depthwise: ⟨D x, y⟩ = ⟨x, Dᵀ y⟩ with Dᵀ the flipped kernels.
        let x = rand_t(&[c, h, w], seed);
        let y = rand_t(&[c, h, w], seed + 1);
        let kern = rand_t(&[c, 3, 3], seed + 2);
        let mut flipped = kern.clone();
        for ch in 0..c {
            for i in 0..9 {
                flipped.data_mut()[ch * 9 + i] = kern.data()[ch * 9 + 8 - i];
            }
        }
        let lhs = ops::depthwise_conv(&x, &kern).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&ops::depthwise_conv(&y, &flipped).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()).max(1e-12));

        // Right-multiplication by B: ⟨A B, Y⟩ = ⟨A, Y Bᵀ⟩.
        let a = rand_t(&[c, h, w], seed + 3);
        let b = rand_t(&[c, w, 3], seed + 4);
        let yy = rand_t(&[c, h, 3], seed + 5);
        let lhs = ops::matmul_batched(&a, &b).unwrap().dot(&yy).unwrap();
        let rhs = a.dot(&ops::matmul_batched_bt(&yy, &b).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()).max(1e-12));
    }
}
