//! Inner loops shared by forward and backward passes.

const COL_BLOCK: usize = 256;
const LANES: usize = 8;

/// Shared driver for `c[m×n] += op(a) · b`, where `a_at(i, p)` reads `op(a)`.
/// Rows are handled four at a time from a packed copy of `op(a)`, so every
/// loaded `b` element feeds four multiply-adds held in registers.
#[inline(always)]
fn gemm_rows<F: Fn(usize, usize) -> f64>(a_at: F, b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let b = &b[..k * n];
    let mut pack = vec![[0.0f64; 4]; k];
    let mut i = 0;
    while i + 4 <= m {
        for (p, slot) in pack.iter_mut().enumerate() {
            *slot = [a_at(i, p), a_at(i + 1, p), a_at(i + 2, p), a_at(i + 3, p)];
        }
        let mut j0 = 0;
        while j0 < n {
            let w = COL_BLOCK.min(n - j0);
            let mut j = j0;
            while j + LANES <= j0 + w {
                let mut acc = [[0.0f64; LANES]; 4];
                for (p, av) in pack.iter().enumerate() {
                    let bv: &[f64; LANES] = b[p * n + j..p * n + j + LANES].try_into().unwrap();
                    for r in 0..4 {
                        for l in 0..LANES {
                            acc[r][l] = av[r].mul_add(bv[l], acc[r][l]);
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    let cr = &mut c[(i + r) * n + j..(i + r) * n + j + LANES];
                    for (o, v) in cr.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                j += LANES;
            }
            for (r, av) in (i..i + 4).zip(0..4) {
                for jj in j..j0 + w {
                    let mut acc = 0.0;
                    for (p, a4) in pack.iter().enumerate() {
                        acc = a4[av].mul_add(b[p * n + jj], acc);
                    }
                    c[r * n + jj] += acc;
                }
            }
            j0 += w;
        }
        i += 4;
    }
    while i < m {
        let cr = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a0 = a_at(i, p);
            let br = &b[p * n..(p + 1) * n];
            for (cj, &bj) in cr.iter_mut().zip(br) {
                *cj = a0.mul_add(bj, *cj);
            }
        }
        i += 1;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    gemm_rows(|i, p| a[i * k + p], b, c, m, k, n);
}

/// `c[m×n] += aᵀ · b` where `a` is stored as `k×m`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    gemm_rows(|i, p| a[p * m + i], b, c, m, k, n);
}

/// `c[m×n] += a · bᵀ` where `b` is stored as `n×k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    let body = k - k % 4;
    let mut j = 0;
    while j + 4 <= n {
        let b0 = &b[j * k..j * k + body];
        let b1 = &b[(j + 1) * k..(j + 1) * k + body];
        let b2 = &b[(j + 2) * k..(j + 2) * k + body];
        let b3 = &b[(j + 3) * k..(j + 3) * k + body];
        for i in 0..m {
            let ar = &a[i * k..i * k + body];
            let mut acc = [[0.0f64; 4]; 4];
            for ((((av, x0), x1), x2), x3) in ar
                .chunks_exact(4)
                .zip(b0.chunks_exact(4))
                .zip(b1.chunks_exact(4))
                .zip(b2.chunks_exact(4))
                .zip(b3.chunks_exact(4))
            {
                for l in 0..4 {
                    acc[0][l] = av[l].mul_add(x0[l], acc[0][l]);
                    acc[1][l] = av[l].mul_add(x1[l], acc[1][l]);
                    acc[2][l] = av[l].mul_add(x2[l], acc[2][l]);
                    acc[3][l] = av[l].mul_add(x3[l], acc[3][l]);
                }
            }
            for (t, r) in acc.iter().enumerate() {
                let mut v = (r[0] + r[1]) + (r[2] + r[3]);
                for p in body..k {
                    v = a[i * k + p].mul_add(b[(j + t) * k + p], v);
                }
                c[i * n + j + t] += v;
            }
        }
        j += 4;
    }
    for j in j..n {
        for i in 0..m {
            c[i * n + j] += dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Geometry of a stride-1, zero-padded 2-D convolution on one image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Valid output-column range `[lo, hi)` for kernel column `kj`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let ow = g.out_w();
    let lo = g.pad.saturating_sub(kj).min(ow);
    let hi = (g.w + g.pad).saturating_sub(kj).min(ow).max(lo);
    (lo, hi)
}

/// Unfolds a `c_in×h×w` image into columns of a `(c_in·kh·kw) × ld` matrix,
/// writing this image's `out_h·out_w` columns starting at column `off`.
pub(crate) fn im2col(img: &[f64], g: ConvGeom, col: &mut [f64], ld: usize, off: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ld + off..row * ld + off + oh * ow];
                let (lo, hi) = valid_cols(&g, kj);
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    let y = (oy + ki).wrapping_sub(g.pad);
                    if y >= g.h {
                        line.fill(0.0);
                        continue;
                    }
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let x0 = lo + kj - g.pad;
                    line[lo..hi].copy_from_slice(&plane[y * g.w + x0..y * g.w + x0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(col: &[f64], g: ConvGeom, img: &mut [f64], ld: usize, off: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ld + off..row * ld + off + oh * ow];
                let (lo, hi) = valid_cols(&g, kj);
                for oy in 0..oh {
                    let y = (oy + ki).wrapping_sub(g.pad);
                    if y >= g.h {
                        continue;
                    }
                    let x0 = lo + kj - g.pad;
                    let dst = &mut plane[y * g.w + x0..y * g.w + x0 + (hi - lo)];
                    for (d, &v) in dst.iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Samples per unfolded chunk: enough columns for long GEMM rows while the
/// chunk's column matrix stays cache resident.
fn chunk_len(g: &ConvGeom, n: usize) -> usize {
    (512usize.div_ceil(g.col_cols())).clamp(1, n.max(1))
}

/// Batched convolution `[n,c_in,h,w] ⊛ [c_out,c_in,kh,kw]`.
pub(crate) fn conv_forward(x: &[f64], k: &[f64], g: ConvGeom, n: usize, c_out: usize) -> Vec<f64> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_stride = g.c_in * g.h * g.w;
    let chunk = chunk_len(&g, n);
    let mut col = vec![0.0; rows * chunk * cols];
    let mut wide = vec![0.0; c_out * chunk * cols];
    let mut out = vec![0.0; n * c_out * cols];
    for s0 in (0..n).step_by(chunk) {
        let m = chunk.min(n - s0);
        let ld = m * cols;
        for i in 0..m {
            let img = &x[(s0 + i) * in_stride..(s0 + i + 1) * in_stride];
            im2col(img, g, &mut col, ld, i * cols);
        }
        let wide = &mut wide[..c_out * ld];
        wide.fill(0.0);
        gemm_nn(k, &col[..rows * ld], wide, c_out, rows, ld);
        for i in 0..m {
            for co in 0..c_out {
                let dst = ((s0 + i) * c_out + co) * cols;
                out[dst..dst + cols].copy_from_slice(&wide[co * ld + i * cols..co * ld + (i + 1) * cols]);
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`] with respect to the input and the kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    k: &[f64],
    gy: &[f64],
    g: ConvGeom,
    n: usize,
    c_out: usize,
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_stride = g.c_in * g.h * g.w;
    let chunk = chunk_len(&g, n);
    let mut dx = need_x.then(|| vec![0.0; n * in_stride]);
    let mut dk = need_k.then(|| vec![0.0; c_out * rows]);
    let mut col = vec![0.0; rows * chunk * cols];
    let mut wide = vec![0.0; c_out * chunk * cols];
    for s0 in (0..n).step_by(chunk) {
        let m = chunk.min(n - s0);
        let ld = m * cols;
        let wide = &mut wide[..c_out * ld];
        for i in 0..m {
            for co in 0..c_out {
                let src = ((s0 + i) * c_out + co) * cols;
                wide[co * ld + i * cols..co * ld + (i + 1) * cols].copy_from_slice(&gy[src..src + cols]);
            }
        }
        let col = &mut col[..rows * ld];
        if let Some(dk) = dk.as_mut() {
            for i in 0..m {
                let img = &x[(s0 + i) * in_stride..(s0 + i + 1) * in_stride];
                im2col(img, g, col, ld, i * cols);
            }
            gemm_nt(wide, col, dk, c_out, ld, rows);
        }
        if let Some(dx) = dx.as_mut() {
            col.fill(0.0);
            gemm_tn(k, wide, col, rows, c_out, ld);
            for i in 0..m {
                col2im(col, g, &mut dx[(s0 + i) * in_stride..(s0 + i + 1) * in_stride], ld, i * cols);
            }
        }
    }
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        // a: 2×3, b: 3×2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0; 4];
        gemm_tn(&at, &b, &mut c2, 2, 3, 2);
        assert_eq!(c2, c);

        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c3 = [0.0; 4];
        gemm_nt(&a, &bt, &mut c3, 2, 3, 2);
        assert_eq!(c3, c);
    }

    #[test]
    fn im2col_then_col2im_counts_window_memberships() {
        let g = ConvGeom {
            c_in: 1,
            h: 3,
            w: 3,
            kh: 2,
            kw: 2,
            pad: 0,
        };
        let img = [1.0; 9];
        let cols = g.col_cols();
        let mut col = vec![0.0; g.col_rows() * cols];
        im2col(&img, g, &mut col, cols, 0);
        assert!(col.iter().all(|&v| v == 1.0));
        let mut back = vec![0.0; 9];
        col2im(&col, g, &mut back, cols, 0);
        assert_eq!(back, vec![1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]);
    }
}

#[cfg(test)]
mod padded_tests {
    use super::*;

    /// Direct (non-unfolded) convolution used as an oracle.
    fn direct(img: &[f64], k: &[f64], g: ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..g.c_in {
                    for ki in 0..g.kh {
                        for kj in 0..g.kw {
                            let y = oy as isize + ki as isize - g.pad as isize;
                            let x = ox as isize + kj as isize - g.pad as isize;
                            if y >= 0 && x >= 0 && (y as usize) < g.h && (x as usize) < g.w {
                                acc += img[(c * g.h + y as usize) * g.w + x as usize]
                                    * k[(c * g.kh + ki) * g.kw + kj];
                            }
                        }
                    }
                }
                out[oy * ow + ox] = acc;
            }
        }
        out
    }

    #[test]
    fn unfolded_product_matches_direct_convolution() {
        for pad in 0..3 {
            let g = ConvGeom { c_in: 2, h: 5, w: 4, kh: 3, kw: 2, pad };
            let img: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let k: Vec<f64> = (0..12).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
            let cols = g.col_cols();
            let mut col = vec![f64::NAN; g.col_rows() * (cols + 3)];
            im2col(&img, g, &mut col, cols + 3, 3);
            let sub: Vec<f64> = (0..g.col_rows())
                .flat_map(|r| col[r * (cols + 3) + 3..(r + 1) * (cols + 3)].to_vec())
                .collect();
            let mut out = vec![0.0; cols];
            gemm_nn(&k, &sub, &mut out, 1, g.col_rows(), cols);
            assert_eq!(out, direct(&img, &k, g), "pad {pad}");
        }
    }
}
