use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }

    #[inline]
    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

/// How `b` maps onto the output (which always has `a`'s shape).
enum Broadcast {
    Same,
    Scalar,
    /// `b` flat index for every output element.
    Index(Vec<usize>),
}

impl Broadcast {
    fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        if b.iter().product::<usize>() == 1 {
            return Ok(Broadcast::Scalar);
        }
        let compatible =
            a.len() == b.len() && a.iter().zip(b).all(|(&da, &db)| db == da || db == 1);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        // Strides of `b` with broadcast axes pinned to zero.
        let mut bstride = vec![0usize; b.len()];
        let mut acc = 1;
        for d in (0..b.len()).rev() {
            bstride[d] = if b[d] == 1 { 0 } else { acc };
            acc *= b[d];
        }
        let n: usize = a.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; a.len()];
        let mut bi = 0usize;
        for _ in 0..n {
            index.push(bi);
            for d in (0..a.len()).rev() {
                counter[d] += 1;
                bi += bstride[d];
                if counter[d] < a[d] {
                    break;
                }
                bi -= bstride[d] * a[d];
                counter[d] = 0;
            }
        }
        Ok(Broadcast::Index(index))
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Index(ix) => ix[i],
        }
    }
}

/// Sums `g` (output-shaped) down to `b`'s element count, in output order.
fn reduce_to_b<T: Element>(plan: &Broadcast, g: &[T], b_len: usize) -> Vec<T> {
    match plan {
        Broadcast::Same => g.to_vec(),
        _ => {
            let mut out = vec![T::zero(); b_len];
            for (i, &v) in g.iter().enumerate() {
                out[plan.at(i)] += v;
            }
            out
        }
    }
}

/// `out[i] = op(a[i], b[i])` where `b` may be a one-element tensor or broadcast
/// along singleton dimensions of the same rank. The output has `a`'s shape.
pub fn elementwise<T: Element>(kind: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let op = kind.name();
    let plan = Broadcast::plan(op, a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<T> = match &plan {
        Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| kind.apply(x, y)).collect(),
        Broadcast::Scalar => ad.iter().map(|&x| kind.apply(x, bd[0])).collect(),
        Broadcast::Index(ix) => ad
            .iter()
            .zip(ix)
            .map(|(&x, &j)| kind.apply(x, bd[j]))
            .collect(),
    };
    let (ac, bc) = (a.clone(), b.clone());
    let b_len = b.numel();
    Ok(Tensor::from_op(
        op,
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |args| {
            let g = args.grad;
            let ga = args.needs[0].then(|| match kind {
                BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                BinaryOp::Mul => {
                    let bd = bc.data();
                    g.iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * bd[plan.at(i)])
                        .collect()
                }
            });
            let gb = args.needs[1].then(|| match kind {
                BinaryOp::Add => reduce_to_b(&plan, g, b_len),
                BinaryOp::Sub => {
                    let mut r = reduce_to_b(&plan, g, b_len);
                    r.iter_mut().for_each(|v| *v = -*v);
                    r
                }
                BinaryOp::Mul => {
                    let prod: Vec<T> = g.iter().zip(ac.data()).map(|(&gi, &x)| gi * x).collect();
                    reduce_to_b(&plan, &prod, b_len)
                }
            });
            vec![ga, gb]
        }),
    ))
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        elementwise(BinaryOp::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        elementwise(BinaryOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        elementwise(BinaryOp::Mul, self, other)
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x + s).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|args| vec![Some(args.grad.to_vec())]),
        )
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x * s).collect();
        Tensor::from_op(
            "mul_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |args| vec![Some(args.grad.iter().map(|&g| g * s).collect())]),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_pair() {
        let c = t(&[2], &[1.0, 2.0]).add(&t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(c.data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_one_is_bitwise_identity() {
        let x = t(&[3], &[0.1, -7.25, 1e-300]);
        assert!(x.mul(&Tensor::scalar(1.0)).unwrap().bit_eq(&x));
        assert!(x.mul_scalar(1.0).bit_eq(&x));
    }

    #[test]
    fn singleton_broadcast() {
        let a = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let b = t(&[1, 2, 1, 1], &[10.0, 100.0]);
        let c = a.mul(&b).unwrap();
        assert_eq!(
            c.data(),
            &[10.0, 20.0, 30.0, 40.0, 500.0, 600.0, 700.0, 800.0]
        );
        let b2 = t(&[1, 1, 2, 1], &[1.0, -1.0]);
        let d = a.add(&b2).unwrap();
        assert_eq!(d.data(), &[2.0, 3.0, 2.0, 3.0, 6.0, 7.0, 6.0, 7.0]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let err = t(&[2], &[1.0, 2.0])
            .add(&t(&[3], &[1.0, 2.0, 3.0]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn broadcast_gradient_reduces() {
        let a = Tensor::param([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::param([2, 1], vec![2.0, 3.0]).unwrap();
        a.mul(&b).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![6.0, 15.0]);
        assert_eq!(a.grad().unwrap(), vec![2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
    }
}
