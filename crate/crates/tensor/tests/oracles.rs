//! Operations checked against direct scalar-loop oracles.

use dmffn_tensor::ops::{
    concat, conv2d, global_avg_pool, layer_norm, linear, pad2d, pixel_shuffle, pixel_unshuffle,
    resize_bilinear,
};
use dmffn_tensor::{check_gradients, finite_diff_grad, Conv2dOptions, PadMode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random<T: dmffn_tensor::Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-1.0..1.0)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

#[test]
fn add_matches_loop() {
    let a = random::<f32>(&[2, 3, 4, 4], 1);
    let b = random::<f32>(&[2, 3, 4, 4], 2);
    let c = a.add(&b).unwrap();
    for i in 0..a.numel() {
        assert_eq!(c.data()[i], a.data()[i] + b.data()[i]);
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let a = random::<f32>(&[2, 3], 3);
    let b = random::<f32>(&[3, 4], 4);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 4]);
    for i in 0..2 {
        for j in 0..4 {
            let mut s = 0.0f64;
            for k in 0..3 {
                s += a.data()[i * 3 + k] as f64 * b.data()[k * 4 + j] as f64;
            }
            assert!((c.data()[i * 4 + j] as f64 - s).abs() < 1e-6);
        }
    }
}

fn conv_oracle(
    x: &Tensor<f32>,
    w: &Tensor<f32>,
    b: &Tensor<f32>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let [n, cin, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [cout, cin_g, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let cout_g = cout / groups;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for bn in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.data()[co] as f64;
                    for ci in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let c_in = g * cin_g + ci;
                                let xv = x.data()
                                    [((bn * cin + c_in) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((co * cin_g + ci) * kh + ky) * kw + kx];
                                s += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

#[test]
fn grouped_conv_matches_nested_loops() {
    let x = random::<f32>(&[1, 4, 6, 6], 5);
    let w = random::<f32>(&[4, 2, 3, 3], 6);
    let b = random::<f32>(&[4], 7);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let opts = Conv2dOptions {
            stride,
            padding: pad,
            groups: 2,
        };
        let y = conv2d(&x, &w, Some(&b), opts).unwrap();
        let oracle = conv_oracle(&x, &w, &b, stride, pad, 2);
        assert_eq!(y.numel(), oracle.len());
        for (got, want) in y.data().iter().zip(&oracle) {
            assert!((*got as f64 - want).abs() < 1e-5, "{got} vs {want}");
        }
    }
}

#[test]
fn depthwise_conv_matches_nested_loops() {
    let x = random::<f32>(&[2, 3, 5, 7], 8);
    let w = random::<f32>(&[3, 1, 3, 3], 9);
    let b = random::<f32>(&[3], 10);
    let opts = Conv2dOptions {
        stride: 1,
        padding: 1,
        groups: 3,
    };
    let y = conv2d(&x, &w, Some(&b), opts).unwrap();
    for (got, want) in y.data().iter().zip(conv_oracle(&x, &w, &b, 1, 1, 3)) {
        assert!((*got as f64 - want).abs() < 1e-5);
    }
}

#[test]
fn grouped_conv_equals_sliced_convs() {
    let x = random::<f64>(&[2, 6, 5, 5], 11);
    let w = random::<f64>(&[9, 2, 3, 3], 12);
    let b = random::<f64>(&[9], 13);
    let opts = Conv2dOptions {
        stride: 1,
        padding: 1,
        groups: 3,
    };
    let grouped = conv2d(&x, &w, Some(&b), opts).unwrap();
    let pieces: Vec<Tensor<f64>> = (0..3)
        .map(|g| {
            let xs = x.narrow(1, 2 * g, 2).unwrap();
            let ws = w.narrow(0, 3 * g, 3).unwrap();
            let bs = b.narrow(0, 3 * g, 3).unwrap();
            let single = Conv2dOptions { groups: 1, ..opts };
            conv2d(&xs, &ws, Some(&bs), single).unwrap()
        })
        .collect();
    let joined = concat(&pieces, 1).unwrap();
    for (a, b) in grouped.data().iter().zip(joined.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn ones_kernel_with_reflect_padding_on_constant() {
    let c = 0.37f64;
    let x = Tensor::full([1, 1, 5, 4], c);
    let padded = pad2d(&x, (1, 1, 1, 1), PadMode::Reflect).unwrap();
    let w = Tensor::ones([1, 1, 3, 3]);
    let y = conv2d(
        &padded,
        &w,
        Some(&Tensor::zeros([1])),
        Conv2dOptions::default(),
    )
    .unwrap();
    assert_eq!(y.shape(), &[1, 1, 5, 4]);
    assert!(y.data().iter().all(|&v| (v - 9.0 * c).abs() < 1e-12));
}

#[test]
fn linear_matches_matmul() {
    let x = random::<f64>(&[2, 5, 3], 14);
    let w = random::<f64>(&[4, 3], 15);
    let b = random::<f64>(&[4], 16);
    let y = linear(&x, &w, Some(&b)).unwrap();
    let wt = w.transpose_last2().unwrap();
    let via_matmul = x.reshape([10, 3]).unwrap().matmul(&wt).unwrap();
    for r in 0..10 {
        for o in 0..4 {
            let want = via_matmul.data()[r * 4 + o] + b.data()[o];
            assert!((y.data()[r * 4 + o] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_matches_loop() {
    let x = random::<f64>(&[1, 4, 2, 2], 17);
    let gamma = random::<f64>(&[4], 18);
    let beta = random::<f64>(&[4], 19);
    let eps = 1e-5;
    let y = layer_norm(&x, &gamma, &beta, eps).unwrap();
    for pos in 0..4 {
        let vals: Vec<f64> = (0..4).map(|c| x.data()[c * 4 + pos]).collect();
        let mean = vals.iter().sum::<f64>() / 4.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        for (c, v) in vals.iter().enumerate() {
            let want = (v - mean) / (var + eps).sqrt() * gamma.data()[c] + beta.data()[c];
            assert!((y.data()[c * 4 + pos] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn global_avg_pool_matches_loop() {
    let x = random::<f64>(&[2, 3, 4, 5], 20);
    let y = global_avg_pool(&x).unwrap();
    for plane in 0..6 {
        let want: f64 = x.data()[plane * 20..(plane + 1) * 20].iter().sum::<f64>() / 20.0;
        assert!((y.data()[plane] - want).abs() < 1e-12);
    }
}

#[test]
fn bilinear_upsample_matches_scalar_formula() {
    let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = resize_bilinear(&x, 4, 4).unwrap();
    // align_corners=false: source coordinate (i + 0.5) / 2 - 0.5, clamped to [0, 1].
    let src = |i: usize| ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
    for oy in 0..4 {
        for ox in 0..4 {
            let (sy, sx) = (src(oy), src(ox));
            let want =
                (1.0 - sy) * ((1.0 - sx) * 1.0 + sx * 2.0) + sy * ((1.0 - sx) * 3.0 + sx * 4.0);
            assert!((y.data()[oy * 4 + ox] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_shift_invariance() {
    let x = random::<f64>(&[3, 7], 21);
    let a = x.softmax(-1).unwrap();
    let b = x.add_scalar(1000.0).softmax(-1).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-6);
    }
    for row in a.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn finite_differences_agree_with_backward_on_conv() {
    let x = random::<f64>(&[1, 2, 5, 5], 22);
    let w = random::<f64>(&[3, 2, 3, 3], 23);
    let probe = random::<f64>(&[1, 3, 5, 5], 24);
    let opts = Conv2dOptions {
        stride: 1,
        padding: 1,
        groups: 1,
    };
    let loss = |xi: &Tensor<f64>| {
        conv2d(xi, &w, None, opts)
            .unwrap()
            .mul(&probe)
            .unwrap()
            .sum()
    };
    let xp = x.detach().into_param();
    loss(&xp).backward().unwrap();
    let numeric = finite_diff_grad(|t| loss(t).item().unwrap(), &x, 1e-4);
    for (a, n) in xp.grad().unwrap().iter().zip(numeric.data()) {
        assert!(dmffn_tensor::gradcheck::relative_error(*a, *n) < 1e-4);
    }
    let report = check_gradients(
        "conv2d",
        &[x, w],
        |t| Ok(conv2d(&t[0], &t[1], None, opts)?.mul(&probe)?.sum()),
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report}");
}

#[test]
fn fan_out_gradient_matches_finite_differences() {
    let x = random::<f64>(&[6], 25);
    let report = check_gradients(
        "fan_out",
        &[x],
        |t| {
            let a = t[0].sigmoid();
            let b = t[0].mul(&t[0])?;
            Ok(a.mul(&b)?.add(&t[0].elu())?.sum())
        },
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report}");
}

proptest! {
    #[test]
    fn shuffle_unshuffle_roundtrip(c in 1usize..3, r in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let x = random::<f32>(&[1, c * r * r, h, w], seed);
        let y = pixel_shuffle(&x, r).unwrap();
        prop_assert!(pixel_unshuffle(&y, r).unwrap().bit_eq(&x));
        let z = random::<f32>(&[2, c, h * r, w * r], seed ^ 1);
        prop_assert!(pixel_shuffle(&pixel_unshuffle(&z, r).unwrap(), r).unwrap().bit_eq(&z));
    }

    #[test]
    fn add_and_mul_commute_bitwise(seed in any::<u64>(), n in 1usize..64) {
        let a = random::<f64>(&[n], seed);
        let b = random::<f64>(&[n], seed.wrapping_add(7));
        prop_assert!(a.add(&b).unwrap().bit_eq(&b.add(&a).unwrap()));
        prop_assert!(a.mul(&b).unwrap().bit_eq(&b.mul(&a).unwrap()));
    }
}
