use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

fn dims4<T: Element>(x: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(TensorError::Rank {
            op,
            expected: 4,
            shape: x.shape().to_vec(),
        }),
    }
}

/// Mean over the spatial positions of each channel: `N×C×H×W → N×C×1×1`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(x, "global_avg_pool")?;
    let hw = h * w;
    let inv = T::one() / T::lit(hw as f64);
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|plane| {
            let mut s = T::zero();
            for &v in plane {
                s += v;
            }
            s * inv
        })
        .collect();
    Ok(Tensor::from_op(
        "global_avg_pool",
        vec![n, c, 1, 1],
        data,
        vec![x.clone()],
        Box::new(move |args| {
            let gx = args
                .grad
                .iter()
                .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
                .collect();
            vec![Some(gx)]
        }),
    ))
}

/// Max pooling without padding. Ties route the gradient to the first maximum.
pub fn max_pool2d<T: Element>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(x, "max_pool2d")?;
    if kernel == 0 || stride == 0 || h < kernel || w < kernel {
        return Err(TensorError::SizeUnderflow {
            op: "max_pool2d",
            detail: format!("input {h}x{w}, kernel {kernel}, stride {stride}"),
        });
    }
    let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
    let src = x.data();
    let mut data = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let j = base + (oy * stride + ky) * w + ox * stride + kx;
                        if src[j] > src[best] {
                            best = j;
                        }
                    }
                }
                data.push(src[best]);
                argmax.push(best);
            }
        }
    }
    let n_in = x.numel();
    Ok(Tensor::from_op(
        "max_pool2d",
        vec![n, c, ho, wo],
        data,
        vec![x.clone()],
        Box::new(move |args| {
            let mut gx = vec![T::zero(); n_in];
            for (&j, &g) in argmax.iter().zip(args.grad) {
                gx[j] += g;
            }
            vec![Some(gx)]
        }),
    ))
}
