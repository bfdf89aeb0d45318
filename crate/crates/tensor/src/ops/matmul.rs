use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::gemm::{gemm_acc, transpose};
use crate::tensor::Tensor;

/// Batched matrix product `(…×M×K) · (…×K×P) → (…×M×P)`.
///
/// Leading (batch) dimensions must match exactly; there is no broadcasting.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sa.len() != sb.len() {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let r = sa.len();
    let (m, k) = (sa[r - 2], sa[r - 1]);
    let (k2, p) = (sb[r - 2], sb[r - 1]);
    if k != k2 {
        return Err(TensorError::InnerDim {
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    if sa[..r - 2] != sb[..r - 2] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let batch: usize = sa[..r - 2].iter().product();
    let mut out = vec![T::zero(); batch * m * p];
    for bi in 0..batch {
        gemm_acc(
            m,
            k,
            p,
            &a.data()[bi * m * k..(bi + 1) * m * k],
            &b.data()[bi * k * p..(bi + 1) * k * p],
            &mut out[bi * m * p..(bi + 1) * m * p],
        );
    }
    let mut shape = sa[..r - 2].to_vec();
    shape.extend([m, p]);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        "matmul",
        shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |args| {
            let g = args.grad;
            let ga = args.needs[0].then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                for bi in 0..batch {
                    let bt = transpose(k, p, &bc.data()[bi * k * p..(bi + 1) * k * p]);
                    gemm_acc(
                        m,
                        p,
                        k,
                        &g[bi * m * p..(bi + 1) * m * p],
                        &bt,
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                    );
                }
                ga
            });
            let gb = args.needs[1].then(|| {
                let mut gb = vec![T::zero(); batch * k * p];
                for bi in 0..batch {
                    let at = transpose(m, k, &ac.data()[bi * m * k..(bi + 1) * m * k]);
                    gemm_acc(
                        k,
                        m,
                        p,
                        &at,
                        &g[bi * m * p..(bi + 1) * m * p],
                        &mut gb[bi * k * p..(bi + 1) * k * p],
                    );
                }
                gb
            });
            vec![ga, gb]
        }),
    ))
}

/// `y = x · Wᵀ + b` over the trailing dimension of `x`.
pub fn linear<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let ws = weight.shape();
    let xs = x.shape();
    if ws.len() != 2 || xs.last() != Some(&ws[1]) {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let (d_out, d_in) = (ws[0], ws[1]);
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: ws.to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let rows = x.numel() / d_in;
    let mut out = match bias {
        Some(b) => b.data().repeat(rows),
        None => vec![T::zero(); rows * d_out],
    };
    let wt = transpose(d_out, d_in, weight.data());
    gemm_acc(rows, d_in, d_out, x.data(), &wt, &mut out);
    let mut shape = xs.to_vec();
    *shape.last_mut().unwrap() = d_out;

    let mut inputs = vec![x.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    let (xc, wc) = (x.clone(), weight.clone());
    Ok(Tensor::from_op(
        "linear",
        shape,
        out,
        inputs,
        Box::new(move |args| {
            let g = args.grad;
            let gx = args.needs[0].then(|| {
                let mut gx = vec![T::zero(); rows * d_in];
                gemm_acc(rows, d_out, d_in, g, wc.data(), &mut gx);
                gx
            });
            let gw = args.needs[1].then(|| {
                let gt = transpose(rows, d_out, g);
                let mut gw = vec![T::zero(); d_out * d_in];
                gemm_acc(d_out, rows, d_in, &gt, xc.data(), &mut gw);
                gw
            });
            let mut grads = vec![gx, gw];
            if args.needs.len() == 3 {
                grads.push(args.needs[2].then(|| {
                    let mut gb = vec![T::zero(); d_out];
                    for row in g.chunks_exact(d_out) {
                        for (b, &v) in gb.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    gb
                }));
            }
            grads
        }),
    ))
}

impl<T: Element> Tensor<T> {
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        matmul(self, other)
    }
}
