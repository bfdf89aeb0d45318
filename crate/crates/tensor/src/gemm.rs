//! Dense matrix kernels shared by matmul, linear and convolution.

use crate::element::Element;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Each output element accumulates its `k` products in ascending `k` order,
/// so results do not depend on blocking or thread count.
pub(crate) fn gemm_acc<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn transpose<T: Element>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    for (r, row) in src.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        gemm_acc(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f64> = (0..12).map(f64::from).collect();
        let t = transpose(3, 4, &a);
        assert_eq!(t[1], 4.0);
        assert_eq!(transpose(4, 3, &t), a);
    }
}
