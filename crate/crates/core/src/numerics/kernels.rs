//! Slice-level kernels shared by the forward and backward passes.
//!
//! All matrices are row-major. Every kernel accumulates into `c`, so callers
//! zero the destination when they want a plain product.

const MR: usize = 4;
const NR: usize = 8;

/// `c[m×n] += a[m×k] · b[k×n]`
///
/// Full `4 × 8` tiles of `c` are accumulated in registers; every element
/// still sums over `p` in ascending order, so the tiling does not change
/// results.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let m_full = m - m % MR;
    let n_full = n - n % NR;
    for i0 in (0..m_full).step_by(MR) {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            let a_rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
            for (p, b_row) in b.chunks_exact(n).enumerate() {
                let bp: &[f64; NR] = b_row[j0..j0 + NR].try_into().unwrap();
                for (row, a_row) in acc.iter_mut().zip(&a_rows) {
                    let av = a_row[p];
                    for q in 0..NR {
                        row[q] += av * bp[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        if n_full < n {
            gemm_nn_edge(i0, i0 + MR, n_full, k, n, a, b, c);
        }
    }
    gemm_nn_edge(m_full, m, 0, k, n, a, b, c);
}

/// Rows `[i_lo, i_hi)`, columns `[j_lo, n)` of [`gemm_nn`].
#[allow(clippy::too_many_arguments)]
fn gemm_nn_edge(i_lo: usize, i_hi: usize, j_lo: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in i_lo..i_hi {
        let c_row = &mut c[i * n + j_lo..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n + j_lo..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m >= 4 {
        let bt = transpose(n, k, b);
        gemm_nn(m, k, n, a, &bt, c);
        return;
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut p = 0;
    while p + 4 <= k {
        let b0 = &b[p * n..(p + 1) * n];
        let b1 = &b[(p + 1) * n..(p + 2) * n];
        let b2 = &b[(p + 2) * n..(p + 3) * n];
        let b3 = &b[(p + 3) * n..(p + 4) * n];
        for i in 0..m {
            let a0 = a[p * m + i];
            let a1 = a[(p + 1) * m + i];
            let a2 = a[(p + 2) * m + i];
            let a3 = a[(p + 3) * m + i];
            if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
        }
        p += 4;
    }
    for p in p..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Row-major `rows × cols` → `cols × rows`.
pub fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Four-lane dot product; the fixed lane split keeps results reproducible.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for o in chunks * 4..a.len() {
        s += a[o] * b[o];
    }
    s
}

/// Geometry of a 2-D sliding window over an NHWC image.
///
/// `grid` is the lattice of window positions; `image` is the lattice the
/// window reads from. For a convolution the grid is the output; for a
/// transposed convolution the grid is the input and the image is the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub batch: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.batch * self.grid_h * self.grid_w
    }

    pub fn cols(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    #[inline]
    fn source(&self, g: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (g * self.stride + k) as isize - self.padding as isize;
        if pos < 0 || pos as usize >= extent {
            None
        } else {
            Some(pos as usize)
        }
    }
}

/// Gathers every window into a row of `[rows, kernel·kernel·channels]`.
pub fn im2col(win: &Window, image: &[f64]) -> Vec<f64> {
    let cols = win.cols();
    let c = win.channels;
    let mut out = vec![0.0; win.rows() * cols];
    for b in 0..win.batch {
        let img = &image[b * win.image_h * win.image_w * c..(b + 1) * win.image_h * win.image_w * c];
        for gi in 0..win.grid_h {
            for gj in 0..win.grid_w {
                let row = ((b * win.grid_h + gi) * win.grid_w + gj) * cols;
                for ki in 0..win.kernel {
                    let Some(y) = win.source(gi, ki, win.image_h) else {
                        continue;
                    };
                    for kj in 0..win.kernel {
                        let Some(x) = win.source(gj, kj, win.image_w) else {
                            continue;
                        };
                        let dst = row + (ki * win.kernel + kj) * c;
                        let src = (y * win.image_w + x) * c;
                        out[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters rows back onto the image, summing overlaps.
pub fn col2im(win: &Window, cols_data: &[f64], image: &mut [f64]) {
    let cols = win.cols();
    let c = win.channels;
    for b in 0..win.batch {
        let img = &mut image[b * win.image_h * win.image_w * c..(b + 1) * win.image_h * win.image_w * c];
        for gi in 0..win.grid_h {
            for gj in 0..win.grid_w {
                let row = ((b * win.grid_h + gi) * win.grid_w + gj) * cols;
                for ki in 0..win.kernel {
                    let Some(y) = win.source(gi, ki, win.image_h) else {
                        continue;
                    };
                    for kj in 0..win.kernel {
                        let Some(x) = win.source(gj, kj, win.image_w) else {
                            continue;
                        };
                        let src = row + (ki * win.kernel + kj) * c;
                        let dst = (y * win.image_w + x) * c;
                        for (d, s) in img[dst..dst + c].iter_mut().zip(&cols_data[src..src + c]) {
                            *d += *s;
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

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        for (m, k, n) in [(3, 7, 5), (9, 10, 6), (4, 4, 1), (1, 13, 8), (8, 5, 16), (13, 3, 19)] {
            check_gemms(m, k, n);
        }
    }

    fn check_gemms(m: usize, k: usize, n: usize) {
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        let win = Window {
            batch: 2,
            image_h: 5,
            image_w: 4,
            channels: 3,
            grid_h: 3,
            grid_w: 2,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> = (0..2 * 5 * 4 * 3).map(|i| (i as f64 * 0.3).sin()).collect();
        let y: Vec<f64> = (0..win.rows() * win.cols()).map(|i| (i as f64 * 0.7).cos()).collect();
        let ax = im2col(&win, &x);
        let mut aty = vec![0.0; x.len()];
        col2im(&win, &y, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
