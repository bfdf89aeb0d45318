use crate::element::Element;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Numerically stabilised softmax along `axis` (negative counts from the end).
pub fn softmax<T: Element>(x: &Tensor<T>, axis: isize) -> Result<Tensor<T>> {
    let rank = x.ndim() as isize;
    let ax = if axis < 0 { rank + axis } else { axis };
    if ax < 0 || ax >= rank {
        return Err(invalid(
            "softmax",
            format!("axis {axis} out of range for rank {rank}"),
        ));
    }
    let ax = ax as usize;
    let len = x.shape()[ax];
    let inner: usize = x.shape()[ax + 1..].iter().product();
    let outer: usize = x.shape()[..ax].iter().product();
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..len {
                max = max.max(src[at(k)]);
            }
            let mut total = T::zero();
            for k in 0..len {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            let inv = T::one() / total;
            for k in 0..len {
                out[at(k)] *= inv;
            }
        }
    }
    Ok(Tensor::from_op(
        "softmax",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |args| {
            let (g, y) = (args.grad, args.out);
            let mut gx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let mut dot = T::zero();
                    for k in 0..len {
                        dot += g[at(k)] * y[at(k)];
                    }
                    for k in 0..len {
                        gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

impl<T: Element> Tensor<T> {
    pub fn softmax(&self, axis: isize) -> Result<Tensor<T>> {
        softmax(self, axis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_slice() {
        let y = Tensor::<f64>::full([3], 2.5).softmax(-1).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_logits() {
        let x = Tensor::<f64>::from_vec([2], vec![0.0, 3f64.ln()]).unwrap();
        let y = x.softmax(0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn middle_axis_sums_to_one() {
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let x = Tensor::from_vec([2, 3, 4], data).unwrap();
        let y = x.softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|k| y.data()[(o * 3 + k) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
