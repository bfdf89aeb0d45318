use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Layer normalisation over the channel axis only.
///
/// Rank-4 input is read as `N×C×H×W` (channel axis 1); anything else
/// normalises the trailing axis (`N×L×C`). Variance is biased.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let axis = if x.ndim() == 4 { 1 } else { x.ndim() - 1 };
    layer_norm_axis(x, gamma, beta, eps, axis)
}

pub fn layer_norm_axis<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    axis: usize,
) -> Result<Tensor<T>> {
    let shape = x.shape();
    let c = shape.get(axis).copied().unwrap_or(0);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: shape.to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let inv_c = T::one() / T::lit(c as f64);
    let mut out = vec![T::zero(); src.len()];
    // Normalised values and per-position inverse std, kept for backward.
    let mut xhat = vec![T::zero(); src.len()];
    let mut rstd = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * c + k) * inner + i;
            let mut mean = T::zero();
            for k in 0..c {
                mean += src[at(k)];
            }
            mean *= inv_c;
            let mut var = T::zero();
            for k in 0..c {
                let d = src[at(k)] - mean;
                var += d * d;
            }
            var *= inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd[o * inner + i] = r;
            for k in 0..c {
                let xh = (src[at(k)] - mean) * r;
                xhat[at(k)] = xh;
                out[at(k)] = xh * gd[k] + bd[k];
            }
        }
    }
    let gc = gamma.clone();
    Ok(Tensor::from_op(
        "layer_norm",
        shape.to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |args| {
            let g = args.grad;
            let gd = gc.data();
            let mut gx = vec![T::zero(); g.len()];
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * c + k) * inner + i;
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for k in 0..c {
                        let d = g[at(k)] * gd[k];
                        mean_d += d;
                        mean_dx += d * xhat[at(k)];
                        ggamma[k] += g[at(k)] * xhat[at(k)];
                        gbeta[k] += g[at(k)];
                    }
                    mean_d *= inv_c;
                    mean_dx *= inv_c;
                    let r = rstd[o * inner + i];
                    for k in 0..c {
                        let d = g[at(k)] * gd[k];
                        gx[at(k)] = r * (d - mean_d - xhat[at(k)] * mean_dx);
                    }
                }
            }
            vec![
                args.needs[0].then_some(gx),
                args.needs[1].then_some(ggamma),
                args.needs[2].then_some(gbeta),
            ]
        }),
    ))
}
