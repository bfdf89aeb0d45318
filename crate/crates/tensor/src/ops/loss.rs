use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Mean absolute error. The subgradient at zero difference is zero.
pub fn l1_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "l1_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = pred.numel();
    let inv = T::one() / T::lit(n as f64);
    let mut s = T::zero();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        s += (p - t).abs();
    }
    let (pc, tc) = (pred.clone(), target.clone());
    Ok(Tensor::from_op(
        "l1_loss",
        vec![1],
        vec![s * inv],
        vec![pred.clone(), target.clone()],
        Box::new(move |args| {
            let scale = args.grad[0] * inv;
            let sign: Vec<T> = pc
                .data()
                .iter()
                .zip(tc.data())
                .map(|(&p, &t)| {
                    let d = p - t;
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let gt = args.needs[1].then(|| sign.iter().map(|&v| -v).collect());
            vec![args.needs[0].then_some(sign), gt]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_zero() {
        let a = Tensor::<f64>::from_vec([3], vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(l1_loss(&a, &a).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn constant_offset() {
        let a = Tensor::<f64>::full([2, 2], 1.0);
        let b = Tensor::<f64>::full([2, 2], 0.5);
        assert_eq!(l1_loss(&a, &b).unwrap().item().unwrap(), 0.5);
        assert!(l1_loss(&a, &Tensor::zeros([4])).is_err());
    }
}
