//! Flat-array numeric kernels behind the tape ops. All matrices are
//! row-major; the loops are ordered so the innermost dimension is
//! contiguous and auto-vectorizes.

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, m, k, n, &mut c);
    c
}

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T  (dot products of contiguous rows)
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv = acc;
        }
    }
    c
}

/// C[k,n] += A[k,m]^T-view * B[m,n], i.e. C = A^T B with A stored [m,k].
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &ap) in a_row.iter().enumerate() {
            if ap == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += ap * bv;
            }
        }
    }
}

/// Spatial geometry of a stride-1 convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub channels_in: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    /// zero padding on each border (0 for valid)
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels_in: usize,
        height: usize,
        width: usize,
        filters: usize,
        kernel: usize,
        pad: usize,
    ) -> Option<Self> {
        let out_h = (height + 2 * pad).checked_sub(kernel)? + 1;
        let out_w = (width + 2 * pad).checked_sub(kernel)? + 1;
        if out_h == 0 || out_w == 0 {
            return None;
        }
        Some(Self {
            channels_in,
            height,
            width,
            filters,
            kernel,
            pad,
            out_h,
            out_w,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels_in * self.kernel * self.kernel
    }
}

/// Lowers one example (C,H,W) into a [(out_h*out_w), patch_len] matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let k = g.kernel;
    debug_assert_eq!(x.len(), g.channels_in * g.height * g.width);
    debug_assert_eq!(cols.len(), g.out_h * g.out_w * g.patch_len());
    cols.fill(0.0);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = (oy * g.out_w + ox) * g.patch_len();
            for c in 0..g.channels_in {
                let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
                for ky in 0..k {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        cols[row + (c * k + ky) * k + kx] = plane[iy * g.width + ix as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column-gradient matrix back into an example gradient.
pub fn col2im_acc(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let k = g.kernel;
    debug_assert_eq!(dx.len(), g.channels_in * g.height * g.width);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = (oy * g.out_w + ox) * g.patch_len();
            for c in 0..g.channels_in {
                let base = c * g.height * g.width;
                for ky in 0..k {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        dx[base + iy * g.width + ix as usize] +=
                            dcols[row + (c * k + ky) * k + kx];
                    }
                }
            }
        }
    }
}

/// Row-wise numerically stable softmax of an [rows, cols] matrix.
pub fn softmax_rows(z: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for r in 0..rows {
        let row = &z[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (oi, &zi) in o.iter_mut().zip(row) {
            let e = (zi - m).exp();
            *oi = e;
            sum += e;
        }
        for oi in o.iter_mut() {
            *oi /= sum;
        }
    }
    out
}

/// Row-wise log-sum-exp of an [rows, cols] matrix.
pub fn logsumexp_rows(z: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let row = &z[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|&zi| (zi - m).exp()).sum();
        out[r] = m + s.ln();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_nt_matches_matmul() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 1.0, 2.0, 3.0]; // 2 rows of len 3 -> B^T is 3x2
        let c = matmul_nt(&a, &b, 2, 3, 2);
        let bt = [7.0, 1.0, 8.0, 2.0, 9.0, 3.0]; // 3x2
        assert_eq!(c, matmul(&a, &bt, 2, 3, 2));
    }

    #[test]
    fn matmul_tn_matches_matmul() {
        let a = [1.0, 2.0, 3.0, 4.0]; // 2x2
        let b = [5.0, 6.0, 7.0, 8.0]; // 2x2
        let mut c = vec![0.0; 4];
        matmul_tn_acc(&a, &b, 2, 2, 2, &mut c);
        let at = [1.0, 3.0, 2.0, 4.0];
        assert_eq!(c, matmul(&at, &b, 2, 2, 2));
    }

    #[test]
    fn im2col_identity_kernel() {
        // 1x3x3 input, kernel 3, valid -> single patch equals the input
        let g = ConvGeom::new(1, 3, 3, 1, 3, 0).unwrap();
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let mut cols = vec![0.0; g.out_h * g.out_w * g.patch_len()];
        im2col(&x, &g, &mut cols);
        assert_eq!(cols, x);
    }

    #[test]
    fn softmax_rows_normalized() {
        let s = softmax_rows(&[0.0, 0.0, 1000.0, 1000.0], 2, 2);
        assert!((s[0] - 0.5).abs() < 1e-12);
        assert!((s[2] - 0.5).abs() < 1e-12);
    }
}
