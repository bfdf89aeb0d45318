use std::borrow::Cow;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::gemm::{gemm_acc, transpose};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution. Padding here is always zero padding;
/// other pad modes are applied beforehand with [`pad2d`](crate::ops::pad2d).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the unfolded input matrix for one group.
    fn kc(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Channel-major slice of `x` for batch `n`, group `g`.
    fn input_block<'a, T: Element>(&self, x: &'a [T], n: usize, g: usize) -> &'a [T] {
        let hw = self.h * self.w;
        let start = (n * self.cin + g * self.cin_g()) * hw;
        &x[start..start + self.cin_g() * hw]
    }

    /// Unfolds one (batch, group) block into a `kc × positions` matrix.
    fn im2col<'a, T: Element>(&self, xg: &'a [T]) -> Cow<'a, [T]> {
        if self.is_pointwise() {
            return Cow::Borrowed(xg);
        }
        let p = self.positions();
        let mut cols = vec![T::zero(); self.kc() * p];
        for ci in 0..self.cin_g() {
            let plane = &xg[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        Cow::Owned(cols)
    }

    /// Adjoint of `im2col`: scatters a `kc × positions` matrix back onto one block.
    fn col2im<T: Element>(&self, cols: &[T], dxg: &mut [T]) {
        let p = self.positions();
        if self.is_pointwise() {
            for (d, &c) in dxg.iter_mut().zip(cols) {
                *d += c;
            }
            return;
        }
        for ci in 0..self.cin_g() {
            let plane = &mut dxg[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn geometry(x: &[usize], w: &[usize], opts: Conv2dOptions) -> Result<Geometry> {
    if x.len() != 4 {
        return Err(TensorError::Rank {
            op: "conv2d",
            expected: 4,
            shape: x.to_vec(),
        });
    }
    if w.len() != 4 {
        return Err(TensorError::Rank {
            op: "conv2d",
            expected: 4,
            shape: w.to_vec(),
        });
    }
    let (n, cin, h, wd) = (x[0], x[1], x[2], x[3]);
    let (cout, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
    let groups = opts.groups;
    if groups == 0 || opts.stride == 0 {
        return Err(crate::error::invalid(
            "conv2d",
            "groups and stride must be positive",
        ));
    }
    if cin % groups != 0 {
        return Err(TensorError::Divisibility {
            op: "conv2d",
            axis: "input channels".into(),
            size: cin,
            divisor: groups,
        });
    }
    if cout % groups != 0 {
        return Err(TensorError::Divisibility {
            op: "conv2d",
            axis: "output channels".into(),
            size: cout,
            divisor: groups,
        });
    }
    if cin / groups != cin_g {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    let (hp, wp) = (h + 2 * opts.padding, wd + 2 * opts.padding);
    if hp < kh || wp < kw {
        return Err(TensorError::SizeUnderflow {
            op: "conv2d",
            detail: format!("padded input {hp}x{wp} smaller than kernel {kh}x{kw}"),
        });
    }
    Ok(Geometry {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        ho: (hp - kh) / opts.stride + 1,
        wo: (wp - kw) / opts.stride + 1,
        stride: opts.stride,
        pad: opts.padding,
        groups,
    })
}

/// Grouped 2-D cross-correlation over `N×C_in×H×W` input.
///
/// `weight` is `C_out × C_in/groups × kH × kW`. `groups == 1` is a standard
/// convolution, `groups == C_in == C_out` is depthwise.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    opts: Conv2dOptions,
) -> Result<Tensor<T>> {
    let geo = geometry(x.shape(), weight.shape(), opts)?;
    if let Some(b) = bias {
        if b.shape() != [geo.cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: weight.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let (p, kc, cout_g) = (geo.positions(), geo.kc(), geo.cout_g());
    let mut out = vec![T::zero(); geo.n * geo.cout * p];
    for n in 0..geo.n {
        for g in 0..geo.groups {
            let cols = geo.im2col(geo.input_block(x.data(), n, g));
            let wg = &weight.data()[g * cout_g * kc..(g + 1) * cout_g * kc];
            let start = (n * geo.cout + g * cout_g) * p;
            let og = &mut out[start..start + cout_g * p];
            if let Some(b) = bias {
                for (co, row) in og.chunks_exact_mut(p).enumerate() {
                    row.fill(b.data()[g * cout_g + co]);
                }
            }
            gemm_acc(cout_g, kc, p, wg, &cols, og);
        }
    }

    let mut inputs = vec![x.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    let (xc, wc) = (x.clone(), weight.clone());
    Ok(Tensor::from_op(
        "conv2d",
        vec![geo.n, geo.cout, geo.ho, geo.wo],
        out,
        inputs,
        Box::new(move |args| {
            let g_out = args.grad;
            let block = |n: usize, g: usize| {
                let start = (n * geo.cout + g * cout_g) * p;
                &g_out[start..start + cout_g * p]
            };
            let gx = args.needs[0].then(|| {
                let mut gx = vec![T::zero(); xc.numel()];
                let hw = geo.h * geo.w;
                for g in 0..geo.groups {
                    let wg = &wc.data()[g * cout_g * kc..(g + 1) * cout_g * kc];
                    let wt = transpose(cout_g, kc, wg);
                    for n in 0..geo.n {
                        let mut dcols = vec![T::zero(); kc * p];
                        gemm_acc(kc, cout_g, p, &wt, block(n, g), &mut dcols);
                        let start = (n * geo.cin + g * geo.cin_g()) * hw;
                        geo.col2im(&dcols, &mut gx[start..start + geo.cin_g() * hw]);
                    }
                }
                gx
            });
            let gw = args.needs[1].then(|| {
                let mut gw = vec![T::zero(); wc.numel()];
                for g in 0..geo.groups {
                    let gwg = &mut gw[g * cout_g * kc..(g + 1) * cout_g * kc];
                    for n in 0..geo.n {
                        let cols = geo.im2col(geo.input_block(xc.data(), n, g));
                        let cols_t = transpose(kc, p, &cols);
                        gemm_acc(cout_g, p, kc, block(n, g), &cols_t, gwg);
                    }
                }
                gw
            });
            let mut grads = vec![gx, gw];
            if args.needs.len() == 3 {
                grads.push(args.needs[2].then(|| {
                    let mut gb = vec![T::zero(); geo.cout];
                    for n in 0..geo.n {
                        for (co, b) in gb.iter_mut().enumerate() {
                            let start = (n * geo.cout + co) * p;
                            for &v in &g_out[start..start + p] {
                                *b += v;
                            }
                        }
                    }
                    gb
                }));
            }
            grads
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_identity() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::from_vec([1], vec![0.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), Conv2dOptions::default()).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn output_size_with_stride() {
        let x = Tensor::<f64>::zeros([1, 2, 8, 7]);
        let w = Tensor::zeros([3, 2, 3, 3]);
        let opts = Conv2dOptions {
            stride: 2,
            padding: 0,
            groups: 1,
        };
        assert_eq!(conv2d(&x, &w, None, opts).unwrap().shape(), &[1, 3, 3, 3]);
    }

    #[test]
    fn errors() {
        let x = Tensor::<f64>::zeros([1, 3, 4, 4]);
        let opts = Conv2dOptions {
            groups: 2,
            ..Default::default()
        };
        assert!(matches!(
            conv2d(&x, &Tensor::zeros([2, 1, 1, 1]), None, opts),
            Err(TensorError::Divisibility { .. })
        ));
        assert!(matches!(
            conv2d(
                &x,
                &Tensor::zeros([2, 2, 1, 1]),
                None,
                Conv2dOptions::default()
            ),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            conv2d(
                &x,
                &Tensor::zeros([2, 3, 5, 5]),
                None,
                Conv2dOptions::default()
            ),
            Err(TensorError::SizeUnderflow { .. })
        ));
    }
}
