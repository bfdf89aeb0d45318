use crate::element::Element;
use crate::error::{invalid, Result, TensorError};
use crate::tensor::Tensor;

/// Two-tap interpolation weights along one axis (align-corners = false).
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of the spatial axes of an `N×C×H×W` tensor.
pub fn resize_bilinear<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let &[n, c, h, w] = x.shape() else {
        return Err(TensorError::Rank {
            op: "resize_bilinear",
            expected: 4,
            shape: x.shape().to_vec(),
        });
    };
    if out_h == 0 || out_w == 0 {
        return Err(invalid(
            "resize_bilinear",
            "output size must be at least 1x1",
        ));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let src = x.data();
    let mut data = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            let (ly, hy) = (T::lit(ly), T::lit(1.0 - ly));
            for &(x0, x1, lx) in &tx {
                let (lx, hx) = (T::lit(lx), T::lit(1.0 - lx));
                let top = hx * p[y0 * w + x0] + lx * p[y0 * w + x1];
                let bot = hx * p[y1 * w + x0] + lx * p[y1 * w + x1];
                data.push(hy * top + ly * bot);
            }
        }
    }
    Ok(Tensor::from_op(
        "resize_bilinear",
        vec![n, c, out_h, out_w],
        data,
        vec![x.clone()],
        Box::new(move |args| {
            let mut gx = vec![T::zero(); n * c * h * w];
            let mut it = args.grad.iter();
            for plane in 0..n * c {
                let p = &mut gx[plane * h * w..(plane + 1) * h * w];
                for &(y0, y1, ly) in &ty {
                    let (ly, hy) = (T::lit(ly), T::lit(1.0 - ly));
                    for &(x0, x1, lx) in &tx {
                        let (lx, hx) = (T::lit(lx), T::lit(1.0 - lx));
                        let g = *it.next().unwrap();
                        p[y0 * w + x0] += g * hy * hx;
                        p[y0 * w + x1] += g * hy * lx;
                        p[y1 * w + x0] += g * ly * hx;
                        p[y1 * w + x1] += g * ly * lx;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}
