//! Data-movement operations. All of them are expressed as an index gather,
//! whose backward pass is the matching scatter-add.

use std::sync::Arc;

use crate::element::Element;
use crate::error::{invalid, Result, TensorError};
use crate::tensor::{numel, Tensor};

/// Gather source index meaning "emit zero".
pub const ZERO_FILL: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zero,
    /// Mirror about the edge sample without repeating it (`…2 1 | 0 1 2…`).
    Reflect,
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Maps an out-of-range coordinate into `0..n` by repeated mirroring.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// `out[i] = x[index[i]]` (or zero for [`ZERO_FILL`]).
pub fn gather<T: Element>(
    x: &Tensor<T>,
    out_shape: Vec<usize>,
    index: Vec<usize>,
    op: &'static str,
) -> Tensor<T> {
    debug_assert_eq!(numel(&out_shape), index.len());
    let src = x.data();
    let data = index
        .iter()
        .map(|&j| if j == ZERO_FILL { T::zero() } else { src[j] })
        .collect();
    let index = Arc::new(index);
    let n_in = x.numel();
    Tensor::from_op(
        op,
        out_shape,
        data,
        vec![x.clone()],
        Box::new(move |args| {
            let mut gx = vec![T::zero(); n_in];
            for (&j, &g) in index.iter().zip(args.grad) {
                if j != ZERO_FILL {
                    gx[j] += g;
                }
            }
            vec![Some(gx)]
        }),
    )
}

fn require_rank<T: Element>(x: &Tensor<T>, op: &'static str, rank: usize) -> Result<()> {
    if x.ndim() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: x.shape().to_vec(),
        });
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        Ok(Tensor::from_op(
            "reshape",
            shape,
            self.to_vec(),
            vec![self.clone()],
            Box::new(|args| vec![Some(args.grad.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.ndim();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.numel();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        let mut at = 0usize;
        for _ in 0..n {
            index.push(at);
            for d in (0..rank).rev() {
                counter[d] += 1;
                at += src_strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                at -= src_strides[d] * out_shape[d];
                counter[d] = 0;
            }
        }
        Ok(gather(self, out_shape, index, "permute"))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let r = self.ndim();
        if r < 2 {
            return Err(invalid("transpose", "rank must be at least 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Contiguous slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            index.extend(base..base + len * inner);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(gather(self, out_shape, index, "narrow"))
    }

    /// Splits `axis` into `parts` equal chunks.
    pub fn chunk(&self, parts: usize, axis: usize) -> Result<Vec<Tensor<T>>> {
        let size = *self
            .shape()
            .get(axis)
            .ok_or_else(|| invalid("chunk", format!("axis {axis} out of range")))?;
        if parts == 0 || size % parts != 0 {
            return Err(TensorError::Divisibility {
                op: "chunk",
                axis: format!("axis {axis}"),
                size,
                divisor: parts,
            });
        }
        let len = size / parts;
        (0..parts)
            .map(|p| self.narrow(axis, p * len, len))
            .collect()
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<T: Element>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("concat", "no inputs"))?;
    let shape = first.shape();
    if axis >= shape.len() {
        return Err(invalid(
            "concat",
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    for p in parts {
        let ok = p.ndim() == shape.len()
            && p.shape()
                .iter()
                .zip(shape)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: shape.to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = total;
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Ok(Tensor::from_op(
        "concat",
        out_shape,
        data,
        parts.to_vec(),
        Box::new(move |args| {
            let mut grads: Vec<Vec<T>> = sizes
                .iter()
                .map(|&s| Vec::with_capacity(outer * s * inner))
                .collect();
            let mut at = 0;
            for _ in 0..outer {
                for (g, &s) in grads.iter_mut().zip(&sizes) {
                    g.extend_from_slice(&args.grad[at..at + s * inner]);
                    at += s * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    ))
}

/// Pads the two spatial axes of an `N×C×H×W` tensor.
pub fn pad2d<T: Element>(
    x: &Tensor<T>,
    (top, bottom, left, right): (usize, usize, usize, usize),
    mode: PadMode,
) -> Result<Tensor<T>> {
    require_rank(x, "pad2d", 4)?;
    let &[n, c, h, w] = x.shape() else {
        unreachable!()
    };
    if top + bottom + left + right == 0 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h + top + bottom, w + left + right);
    let mut index = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        for oy in 0..ho {
            let iy = oy as isize - top as isize;
            for ox in 0..wo {
                let ix = ox as isize - left as isize;
                let inside = iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize;
                let j = match (inside, mode) {
                    (true, _) => (plane * h + iy as usize) * w + ix as usize,
                    (false, PadMode::Zero) => ZERO_FILL,
                    (false, PadMode::Reflect) => {
                        (plane * h + reflect_index(iy, h)) * w + reflect_index(ix, w)
                    }
                };
                index.push(j);
            }
        }
    }
    Ok(gather(x, vec![n, c, ho, wo], index, "pad2d"))
}

/// Spatial window `[y0, y0+h) × [x0, x0+w)` of an `N×C×H×W` tensor.
pub fn crop2d<T: Element>(
    x: &Tensor<T>,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    require_rank(x, "crop2d", 4)?;
    if y0 == 0 && x0 == 0 && h == x.shape()[2] && w == x.shape()[3] {
        return Ok(x.clone());
    }
    x.narrow(2, y0, h)?.narrow(3, x0, w)
}

/// `N×(r²C)×H×W → N×C×rH×rW` with `out[n,c,rh+i,rw+j] = x[n, c·r²+i·r+j, h, w]`.
pub fn pixel_shuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    require_rank(x, "pixel_shuffle", 4)?;
    let &[n, crr, h, w] = x.shape() else {
        unreachable!()
    };
    if r == 0 || crr % (r * r) != 0 {
        return Err(TensorError::Divisibility {
            op: "pixel_shuffle",
            axis: "channels".into(),
            size: crr,
            divisor: r * r,
        });
    }
    let c = crr / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut index = Vec::with_capacity(x.numel());
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                let (hy, i) = (oy / r, oy % r);
                for ox in 0..wo {
                    let (wx, j) = (ox / r, ox % r);
                    let src_c = ch * r * r + i * r + j;
                    index.push(((b * crr + src_c) * h + hy) * w + wx);
                }
            }
        }
    }
    Ok(gather(x, vec![n, c, ho, wo], index, "pixel_shuffle"))
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    require_rank(x, "pixel_unshuffle", 4)?;
    let &[n, c, ho, wo] = x.shape() else {
        unreachable!()
    };
    for (axis, size) in [("height", ho), ("width", wo)] {
        if r == 0 || size % r != 0 {
            return Err(TensorError::Divisibility {
                op: "pixel_unshuffle",
                axis: axis.into(),
                size,
                divisor: r,
            });
        }
    }
    let (h, w) = (ho / r, wo / r);
    let crr = c * r * r;
    let mut index = Vec::with_capacity(x.numel());
    for b in 0..n {
        for oc in 0..crr {
            let (ch, rem) = (oc / (r * r), oc % (r * r));
            let (i, j) = (rem / r, rem % r);
            for hy in 0..h {
                for wx in 0..w {
                    index.push(((b * c + ch) * ho + hy * r + i) * wo + wx * r + j);
                }
            }
        }
    }
    Ok(gather(x, vec![n, crr, h, w], index, "pixel_unshuffle"))
}
