#![allow(dead_code)]

use dmffn::data::FloatImage;
use dmffn_tensor::{Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(lo..hi))).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FloatImage {
    let data = (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    FloatImage::new(c, h, w, data)
}

/// 64×64 RGB test card: a horizontal colour ramp behind three flat
/// rectangles whose edges fall on both even and odd pixel positions.
pub fn test_card() -> FloatImage {
    let (h, w) = (64, 64);
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let pc = c as f64 / 2.0;
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.3 + 0.2 * x as f64 / 64.0 + 0.1 * pc;
                if (5..27).contains(&x) && (9..40).contains(&y) {
                    v = 0.85 - 0.2 * pc;
                }
                if (31..58).contains(&x) && (21..46).contains(&y) {
                    v = 0.15 + 0.3 * pc;
                }
                if (17..50).contains(&x) && (49..60).contains(&y) {
                    v = 0.65;
                }
                data[(c * h + y) * w + x] = v;
            }
        }
    }
    FloatImage::new(3, h, w, data).quantized()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
