//! Raw compute loops shared by the tape operations.
//!
//! Row-parallel where it pays off; accumulation order within a row is always
//! sequential, so results are deterministic regardless of thread count.

use rayon::prelude::*;

use super::Scalar;

/// Rough work threshold below which threading overhead dominates.
const PAR_FLOPS: usize = 1 << 17;

/// C += A[m,k] * B[k,n], all row-major.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |c_row: &mut [T], i: usize| {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip.to_f64() == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + a_ip * b_row[j];
            }
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, c_row)| row(c_row, i));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(c_row, i);
        }
    }
}

/// C += A[m,k] * B^T where B is [n,k] row-major (i.e. dot products of rows).
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |c_row: &mut [T], i: usize| {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for p in 0..k {
                acc = acc + a_row[p] * b_row[p];
            }
            c_row[j] = c_row[j] + acc;
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, c_row)| row(c_row, i));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(c_row, i);
        }
    }
}

/// C += A^T * B where A is [k,m] and B is [k,n], both row-major.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |c_row: &mut [T], i: usize| {
        for p in 0..k {
            let a_pi = a[p * m + i];
            if a_pi.to_f64() == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + a_pi * b_row[j];
            }
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, c_row)| row(c_row, i));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(c_row, i);
        }
    }
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return None;
        }
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        Some(ConvGeom {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Expand one image [C,H,W] into the patch matrix [C*kh*kw, out_h*out_w].
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    debug_assert_eq!(img.len(), g.channels * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    let mut r = 0;
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[r * cols..(r + 1) * cols];
                let mut idx = 0;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        for _ in 0..g.out_w {
                            row[idx] = T::ZERO;
                            idx += 1;
                        }
                        continue;
                    }
                    let line = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        row[idx] = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            line[ix as usize]
                        };
                        idx += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Scatter-accumulate a patch-matrix gradient back into an image gradient.
pub fn col2im_acc<T: Scalar>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    debug_assert_eq!(img.len(), g.channels * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    let mut r = 0;
    for c in 0..g.channels {
        let base = c * g.h * g.w;
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[r * cols..(r + 1) * cols];
                let mut idx = 0;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        idx += g.out_w;
                        continue;
                    }
                    let line = base + iy as usize * g.w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let p = line + ix as usize;
                            img[p] = img[p] + row[idx];
                        }
                        idx += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Bilinear interpolation source taps for one output coordinate
/// (half-pixel-centered, clamped to the border).
pub fn bilinear_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    debug_assert_eq!(out_len, in_len * factor);
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let lo = src.floor();
            let frac = src - lo;
            let i0 = lo.max(0.0) as usize;
            let i1 = ((lo as isize + 1).max(0) as usize).min(in_len - 1);
            (i0.min(in_len - 1), i1, frac)
        })
        .collect()
}
