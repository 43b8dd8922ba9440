//! Raw numeric kernels shared by the tape's forward and backward passes.
//!
//! Convolutions are direct (im2col + matmul), never FFT or Winograd. The
//! matmul uses an i-k-j loop order so the inner loop runs over contiguous
//! rows of B and C and autovectorizes.

use crate::tensor::Scalar;

/// C[m x n] += A[m x k] * B[k x n], all row-major.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// C[m x n] = A[m x k] * B[k x n].
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// C[m x n] = A[m x k] * B^T where B is [n x k] row-major.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![T::ZERO; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *cv = s;
        }
    }
    c
}

/// Transpose a row-major [rows x cols] matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Unfold X[c_in x h x w] into a [c_in*k*k x h*w] patch matrix for a k x k
/// kernel with `pad` zero padding (same-size output).
pub fn im2col<T: Scalar>(x: &[T], c_in: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<T> {
    let hw = h * w;
    let mut col = vec![T::ZERO; c_in * k * k * hw];
    for c in 0..c_in {
        let x_ch = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let dst = &mut col[row + oy * w..row + (oy + 1) * w];
                    let src = &x_ch[iy * w..(iy + 1) * w];
                    // valid ox range: 0 <= ox + kx - pad < w
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (w + pad - kx).min(w);
                    for ox in ox_lo..ox_hi {
                        dst[ox] = src[ox + kx - pad];
                    }
                }
            }
        }
    }
    col
}

/// Fold a [c_in*k*k x h*w] patch-gradient matrix back onto dX[c_in x h x w],
/// accumulating overlapping contributions. Inverse scatter of [`im2col`].
pub fn col2im_acc<T: Scalar>(
    col: &[T],
    dx: &mut [T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) {
    let hw = h * w;
    debug_assert_eq!(col.len(), c_in * k * k * hw);
    debug_assert_eq!(dx.len(), c_in * hw);
    for c in 0..c_in {
        let dx_ch = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let src = &col[row + oy * w..row + (oy + 1) * w];
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (w + pad - kx).min(w);
                    for ox in ox_lo..ox_hi {
                        dx_ch[iy * w + ox + kx - pad] += src[ox];
                    }
                }
            }
        }
    }
}
