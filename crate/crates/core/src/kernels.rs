//! Row-major GEMM and im2col primitives.
//!
//! Every output element accumulates its products in ascending order of the
//! reduction index, starting from the existing value of the output buffer.
//! Restricting a kernel to a subset of output rows therefore produces the
//! same bits for those rows as the unrestricted call.

/// `c[m×n] += a[m×k] · b[k×n]`, optionally only for the listed rows of `c`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], rows: Option<&[usize]>) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut row_kernel = |i: usize| {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    };
    match rows {
        Some(rows) => rows.iter().for_each(|&i| row_kernel(i)),
        None => (0..m).for_each(row_kernel),
    }
}

/// `c[m×n] += aᵀ · b` where `a` is stored `[k×m]` and `b` is `[k×n]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], rows: Option<&[usize]>) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        let mut update = |i: usize| {
            let a_pi = a_row[i];
            for (c_ij, &b_pj) in c[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        };
        match rows {
            Some(rows) => rows.iter().for_each(|&i| update(i)),
            None => (0..m).for_each(update),
        }
    }
}

pub fn transpose(rows: usize, cols: usize, src: &[f32]) -> Vec<f32> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Spatial geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    /// Returns `None` when the output would have no pixels.
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        h_in: usize,
        w_in: usize,
    ) -> Option<Self> {
        if kernel == 0 || stride == 0 {
            return None;
        }
        let out = |len: usize| {
            let padded = len + 2 * padding;
            (padded >= kernel).then(|| (padded - kernel) / stride + 1)
        };
        let h_out = out(h_in)?;
        let w_out = out(w_in)?;
        Some(Self {
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            h_in,
            w_in,
            h_out,
            w_out,
        })
    }

    /// Rows of the unfolded patch matrix, `C_in·k²`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn in_pixels(&self) -> usize {
        self.h_in * self.w_in
    }

    fn source(&self, out_pos: usize, offset: usize, in_len: usize) -> Option<usize> {
        let pos = (out_pos * self.stride + offset) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < in_len).then_some(pos as usize)
    }
}

/// Unfolds one `[C_in×H×W]` sample into a `[C_in·k² × H_out·W_out]` matrix.
/// Padding positions are zero.
pub fn im2col(x: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let k = g.kernel;
    let pixels = g.out_pixels();
    let mut cols = vec![0.0; g.patch_len() * pixels];
    for c in 0..g.c_in {
        let plane = &x[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.h_out {
                    let Some(iy) = g.source(oy, ky, g.h_in) else {
                        continue;
                    };
                    for ox in 0..g.w_out {
                        if let Some(ix) = g.source(ox, kx, g.w_in) {
                            dst[oy * g.w_out + ox] = plane[iy * g.w_in + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back into `dx`.
pub fn col2im(cols: &[f32], g: &ConvGeometry, dx: &mut [f32]) {
    let k = g.kernel;
    let pixels = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.h_out {
                    let Some(iy) = g.source(oy, ky, g.h_in) else {
                        continue;
                    };
                    for ox in 0..g.w_out {
                        if let Some(ix) = g.source(ox, kx, g.w_in) {
                            plane[iy * g.w_in + ix] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let expect = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c, None);
        assert_eq!(c, expect);

        let at = transpose(m, k, &a);
        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c, None);
        assert_eq!(c, expect);
    }

    #[test]
    fn row_restricted_gemm_touches_only_listed_rows() {
        let (m, k, n) = (4, 3, 2);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 - 3.5).collect();
        let b: Vec<f32> = (0..k * n).map(|i| 0.25 * i as f32).collect();
        let full = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c, Some(&[1, 3]));
        for i in 0..m {
            let row = &c[i * n..(i + 1) * n];
            if i == 1 || i == 3 {
                assert_eq!(row, &full[i * n..(i + 1) * n]);
            } else {
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn geometry_rejects_empty_output() {
        assert!(ConvGeometry::new(1, 1, 5, 1, 0, 3, 3).is_none());
        let g = ConvGeometry::new(1, 1, 3, 2, 1, 5, 5).unwrap();
        assert_eq!((g.h_out, g.w_out), (3, 3));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new(2, 1, 3, 2, 1, 5, 4).unwrap();
        let x: Vec<f32> = (0..2 * 5 * 4).map(|i| (i as f32).sin()).collect();
        let y: Vec<f32> = (0..g.patch_len() * g.out_pixels())
            .map(|i| (i as f32 * 0.3).cos())
            .collect();
        let cols = im2col(&x, &g);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
