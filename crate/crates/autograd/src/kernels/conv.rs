//! im2col + GEMM convolution kernels, forward and backward.
//!
//! Inputs are channel-major per batch item: `[batch, channels, length]` for
//! 1-D and `[batch, channels, height, width]` for 2-D. Column buffers are
//! built one chunk of output positions at a time so they stay cache sized.

use super::gemm::{gemm, MatRef};

const COL_BUDGET: usize = 1 << 17;

fn chunk_len(rows: usize, total: usize) -> usize {
    (COL_BUDGET / rows.max(1)).clamp(256, 4096).min(total.max(1))
}

/// Geometry of a stride-1, dilated, symmetrically zero-padded 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv1dGeom {
    pub fn len_out(&self) -> usize {
        let span = self.dilation * (self.kernel - 1);
        assert!(
            self.len_in + 2 * self.padding > span,
            "conv1d input of length {} too short for span {span}",
            self.len_in
        );
        self.len_in + 2 * self.padding - span
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.padding == 0
    }

    fn rows(&self) -> usize {
        self.c_in * self.kernel
    }
}

fn fill_col_1d(x: &[f64], g: &Conv1dGeom, t0: usize, n: usize, col: &mut [f64]) {
    let len = g.len_in as isize;
    for c in 0..g.c_in {
        let xr = &x[c * g.len_in..(c + 1) * g.len_in];
        for k in 0..g.kernel {
            let row = &mut col[(c * g.kernel + k) * n..(c * g.kernel + k + 1) * n];
            let off = t0 as isize + (k * g.dilation) as isize - g.padding as isize;
            let lo = (-off).clamp(0, n as isize);
            let hi = (len - off).clamp(lo, n as isize);
            let (lo, hi) = (lo as usize, hi as usize);
            row[..lo].fill(0.0);
            row[hi..].fill(0.0);
            if hi > lo {
                let s = (off + lo as isize) as usize;
                row[lo..hi].copy_from_slice(&xr[s..s + (hi - lo)]);
            }
        }
    }
}

fn scatter_col_1d(col: &[f64], g: &Conv1dGeom, t0: usize, n: usize, dx: &mut [f64]) {
    let len = g.len_in as isize;
    for c in 0..g.c_in {
        let dxr = &mut dx[c * g.len_in..(c + 1) * g.len_in];
        for k in 0..g.kernel {
            let row = &col[(c * g.kernel + k) * n..(c * g.kernel + k + 1) * n];
            let off = t0 as isize + (k * g.dilation) as isize - g.padding as isize;
            let lo = (-off).clamp(0, n as isize) as usize;
            let hi = (len - off).clamp(lo as isize, n as isize) as usize;
            if hi > lo {
                let s = (off + lo as isize) as usize;
                for (d, v) in dxr[s..s + (hi - lo)].iter_mut().zip(&row[lo..hi]) {
                    *d += v;
                }
            }
        }
    }
}

/// `out[b, o, t] = bias[o] + Σ_{c,k} w[o, c, k] · x[b, c, t + k·dilation − padding]`.
pub fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &Conv1dGeom) -> Vec<f64> {
    let lo = g.len_out();
    let mut out = vec![0.0; g.batch * g.c_out * lo];
    conv1d_forward_into(x, w, g, &mut out, 0.0);
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias, g.batch, g.c_out, lo);
    }
    out
}

/// Accumulating form: `out = beta * out + conv(x, w)` (no bias).
pub fn conv1d_forward_into(x: &[f64], w: &[f64], g: &Conv1dGeom, out: &mut [f64], beta: f64) {
    let lo = g.len_out();
    let rows = g.rows();
    assert_eq!(x.len(), g.batch * g.c_in * g.len_in);
    assert_eq!(w.len(), g.c_out * rows);
    assert_eq!(out.len(), g.batch * g.c_out * lo);
    let wm = MatRef::row_major(w, g.c_out, rows, rows);
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.len_in..(b + 1) * g.c_in * g.len_in];
        let ob = &mut out[b * g.c_out * lo..(b + 1) * g.c_out * lo];
        if g.is_pointwise() {
            gemm(1.0, wm, MatRef::row_major(xb, g.c_in, lo, g.len_in), beta, ob, lo);
            continue;
        }
        let chunk = chunk_len(rows, lo);
        let mut col = vec![0.0; rows * chunk];
        let mut t0 = 0;
        while t0 < lo {
            let n = chunk.min(lo - t0);
            fill_col_1d(xb, g, t0, n, &mut col[..rows * n]);
            gemm(
                1.0,
                wm,
                MatRef::row_major(&col[..rows * n], rows, n, n),
                beta,
                &mut ob[t0..],
                lo,
            );
            t0 += n;
        }
    }
}

/// Accumulates weight and input gradients of a 1-D convolution.
///
/// `dw` and `dx` are added into (pass zeroed buffers for a fresh gradient).
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &Conv1dGeom,
    mut dw: Option<&mut [f64]>,
    mut dx: Option<&mut [f64]>,
) {
    let lo = g.len_out();
    let rows = g.rows();
    assert_eq!(dout.len(), g.batch * g.c_out * lo);
    let wt = MatRef::transposed(w, rows, g.c_out, rows);
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.len_in..(b + 1) * g.c_in * g.len_in];
        let db = &dout[b * g.c_out * lo..(b + 1) * g.c_out * lo];
        if g.is_pointwise() {
            if let Some(dw) = dw.as_deref_mut() {
                gemm(
                    1.0,
                    MatRef::row_major(db, g.c_out, lo, lo),
                    MatRef::transposed(xb, lo, g.c_in, g.len_in),
                    1.0,
                    dw,
                    rows,
                );
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxb = &mut dx[b * g.c_in * g.len_in..(b + 1) * g.c_in * g.len_in];
                gemm(1.0, wt, MatRef::row_major(db, g.c_out, lo, lo), 1.0, dxb, g.len_in);
            }
            continue;
        }
        let chunk = chunk_len(rows, lo);
        let mut col = vec![0.0; rows * chunk];
        let mut t0 = 0;
        while t0 < lo {
            let n = chunk.min(lo - t0);
            let dchunk = MatRef::row_major(&db[t0..], g.c_out, n, lo);
            if let Some(dw) = dw.as_deref_mut() {
                fill_col_1d(xb, g, t0, n, &mut col[..rows * n]);
                gemm(1.0, dchunk, MatRef::transposed(&col[..rows * n], n, rows, n), 1.0, dw, rows);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxb = &mut dx[b * g.c_in * g.len_in..(b + 1) * g.c_in * g.len_in];
                gemm(1.0, wt, dchunk, 0.0, &mut col[..rows * n], n);
                scatter_col_1d(&col[..rows * n], g, t0, n, dxb);
            }
            t0 += n;
        }
    }
}

pub fn add_channel_bias(out: &mut [f64], bias: &[f64], batch: usize, channels: usize, inner: usize) {
    assert_eq!(bias.len(), channels);
    for b in 0..batch {
        for (c, &bv) in bias.iter().enumerate() {
            let base = (b * channels + c) * inner;
            for v in &mut out[base..base + inner] {
                *v += bv;
            }
        }
    }
}

/// Sum over batch and inner positions, per channel.
pub fn channel_sums(grad: &[f64], batch: usize, channels: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for b in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let base = (b * channels + c) * inner;
            *o += grad[base..base + inner].iter().sum::<f64>();
        }
    }
    out
}

/// Geometry of a strided, zero-padded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeom {
    pub fn out_dims(&self) -> (usize, usize) {
        let h = self.h_in + 2 * self.padding.0;
        let w = self.w_in + 2 * self.padding.1;
        assert!(
            h >= self.kernel.0 && w >= self.kernel.1,
            "conv2d input {}x{} smaller than kernel {:?}",
            self.h_in,
            self.w_in,
            self.kernel
        );
        (
            (h - self.kernel.0) / self.stride.0 + 1,
            (w - self.kernel.1) / self.stride.1 + 1,
        )
    }

    fn rows(&self) -> usize {
        self.c_in * self.kernel.0 * self.kernel.1
    }
}

/// Output columns `[lo, hi)` whose tap `j` lands inside a row of the input.
#[inline]
fn valid_cols(g: &Conv2dGeom, wo: usize, j: usize) -> (usize, usize) {
    let (s, p) = (g.stride.1, g.padding.1);
    let lo = if p > j { (p - j).div_ceil(s) } else { 0 };
    let hi = if g.w_in + p > j { ((g.w_in + p - j - 1) / s + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// im2col for output rows `[oh0, oh1)`: `col[r * n + p]` is the input under
/// tap `r` for output position `p`, zero in the padding.
fn fill_cols_2d(g: &Conv2dGeom, x: &[f64], oh0: usize, oh1: usize, col: &mut [f64]) {
    let (_, wo) = g.out_dims();
    let (kh, kw) = g.kernel;
    let n = (oh1 - oh0) * wo;
    let s = g.stride.1;
    for c in 0..g.c_in {
        for i in 0..kh {
            for j in 0..kw {
                let r = (c * kh + i) * kw + j;
                let (lo, hi) = valid_cols(g, wo, j);
                for oh in oh0..oh1 {
                    let dst = &mut col[r * n + (oh - oh0) * wo..][..wo];
                    let ih = (oh * g.stride.0 + i) as isize - g.padding.0 as isize;
                    if ih < 0 || ih >= g.h_in as isize || lo == hi {
                        dst.fill(0.0);
                        continue;
                    }
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let row = &x[(c * g.h_in + ih as usize) * g.w_in..][..g.w_in];
                    let start = lo * s + j - g.padding.1;
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&row[start..start + hi - lo]);
                    } else {
                        for (d, v) in dst[lo..hi].iter_mut().zip(row[start..].iter().step_by(s)) {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`fill_cols_2d`]: accumulates column entries back into `dx`.
fn scatter_cols_2d(g: &Conv2dGeom, col: &[f64], oh0: usize, oh1: usize, dx: &mut [f64]) {
    let (_, wo) = g.out_dims();
    let (kh, kw) = g.kernel;
    let n = (oh1 - oh0) * wo;
    let s = g.stride.1;
    for c in 0..g.c_in {
        for i in 0..kh {
            for j in 0..kw {
                let r = (c * kh + i) * kw + j;
                let (lo, hi) = valid_cols(g, wo, j);
                if lo == hi {
                    continue;
                }
                for oh in oh0..oh1 {
                    let ih = (oh * g.stride.0 + i) as isize - g.padding.0 as isize;
                    if ih < 0 || ih >= g.h_in as isize {
                        continue;
                    }
                    let src = &col[r * n + (oh - oh0) * wo..][lo..hi];
                    let row = &mut dx[(c * g.h_in + ih as usize) * g.w_in..][..g.w_in];
                    let start = lo * s + j - g.padding.1;
                    if s == 1 {
                        for (d, v) in row[start..start + hi - lo].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (d, v) in row[start..].iter_mut().step_by(s).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn row_chunk_2d(g: &Conv2dGeom) -> usize {
    let (ho, wo) = g.out_dims();
    let per_row = g.rows() * wo;
    (COL_BUDGET / per_row.max(1)).clamp(1, ho.max(1))
}

pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &Conv2dGeom) -> Vec<f64> {
    let (ho, wo) = g.out_dims();
    let plane = ho * wo;
    let rows = g.rows();
    let in_plane = g.c_in * g.h_in * g.w_in;
    assert_eq!(x.len(), g.batch * in_plane);
    assert_eq!(w.len(), g.c_out * rows);
    let mut out = vec![0.0; g.batch * g.c_out * plane];
    let wm = MatRef::row_major(w, g.c_out, rows, rows);
    let step = row_chunk_2d(g);
    let mut col = vec![0.0; rows * step * wo];
    for b in 0..g.batch {
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let ob = &mut out[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        let mut oh0 = 0;
        while oh0 < ho {
            let oh1 = (oh0 + step).min(ho);
            let n = (oh1 - oh0) * wo;
            let colc = &mut col[..rows * n];
            fill_cols_2d(g, xb, oh0, oh1, colc);
            gemm(1.0, wm, MatRef::row_major(colc, rows, n, n), 0.0, &mut ob[oh0 * wo..], plane);
            oh0 = oh1;
        }
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias, g.batch, g.c_out, plane);
    }
    out
}

pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &Conv2dGeom,
    mut dw: Option<&mut [f64]>,
    mut dx: Option<&mut [f64]>,
) {
    let (ho, wo) = g.out_dims();
    let plane = ho * wo;
    let rows = g.rows();
    let in_plane = g.c_in * g.h_in * g.w_in;
    let wt = MatRef::transposed(w, rows, g.c_out, rows);
    let step = row_chunk_2d(g);
    let mut col = vec![0.0; rows * step * wo];
    for b in 0..g.batch {
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let db = &dout[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        let mut oh0 = 0;
        while oh0 < ho {
            let oh1 = (oh0 + step).min(ho);
            let n = (oh1 - oh0) * wo;
            let dchunk = MatRef::row_major(&db[oh0 * wo..], g.c_out, n, plane);
            if let Some(dw) = dw.as_deref_mut() {
                let colc = &mut col[..rows * n];
                fill_cols_2d(g, xb, oh0, oh1, colc);
                gemm(1.0, dchunk, MatRef::transposed(colc, n, rows, n), 1.0, dw, rows);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxb = &mut dx[b * in_plane..(b + 1) * in_plane];
                let colc = &mut col[..rows * n];
                gemm(1.0, wt, dchunk, 0.0, colc, n);
                scatter_cols_2d(g, colc, oh0, oh1, dxb);
            }
            oh0 = oh1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv1d(x: &[f64], w: &[f64], g: &Conv1dGeom) -> Vec<f64> {
        let lo = g.len_out();
        let mut out = vec![0.0; g.batch * g.c_out * lo];
        for b in 0..g.batch {
            for o in 0..g.c_out {
                for t in 0..lo {
                    let mut acc = 0.0;
                    for c in 0..g.c_in {
                        for k in 0..g.kernel {
                            let s = t as isize + (k * g.dilation) as isize - g.padding as isize;
                            if s >= 0 && (s as usize) < g.len_in {
                                acc += w[(o * g.c_in + c) * g.kernel + k]
                                    * x[(b * g.c_in + c) * g.len_in + s as usize];
                            }
                        }
                    }
                    out[(b * g.c_out + o) * lo + t] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv1d_matches_naive_loop() {
        for &(k, d, p) in &[(3, 1, 1), (5, 4, 8), (1, 1, 0), (4, 2, 1), (17, 32, 256)] {
            let g = Conv1dGeom { batch: 2, c_in: 3, c_out: 4, len_in: 5000, kernel: k, dilation: d, padding: p };
            let x = pseudo(2 * 3 * 5000, 1);
            let w = pseudo(4 * 3 * k, 2);
            let got = conv1d_forward(&x, &w, None, &g);
            let want = naive_conv1d(&x, &w, &g);
            let err = got.iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-12, "k={k} d={d} p={p}: {err}");
        }
    }

    #[test]
    fn conv1d_backward_is_adjoint() {
        // <conv(x), y> = <x, conv^T(y)> and the same for the weights.
        let g = Conv1dGeom { batch: 2, c_in: 3, c_out: 2, len_in: 700, kernel: 5, dilation: 3, padding: 6 };
        let x = pseudo(2 * 3 * 700, 3);
        let w = pseudo(2 * 3 * 5, 4);
        let y = pseudo(2 * 2 * g.len_out(), 5);
        let fwd = conv1d_forward(&x, &w, None, &g);
        let lhs: f64 = fwd.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        conv1d_backward(&x, &w, &y, &g, Some(&mut dw), Some(&mut dx));
        let rhs_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - rhs_w).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv2d_matches_naive_loop_and_adjoint() {
        let g = Conv2dGeom {
            batch: 2,
            c_in: 2,
            c_out: 3,
            h_in: 37,
            w_in: 11,
            kernel: (5, 3),
            stride: (3, 2),
            padding: (2, 1),
        };
        let x = pseudo(2 * 2 * 37 * 11, 6);
        let w = pseudo(3 * 2 * 15, 7);
        let (ho, wo) = g.out_dims();
        let got = conv2d_forward(&x, &w, None, &g);
        for b in 0..2 {
            for o in 0..3 {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for i in 0..5 {
                                for j in 0..3 {
                                    let ih = (oh * 3 + i) as isize - 2;
                                    let iw = (ow * 2 + j) as isize - 1;
                                    if (0..37).contains(&ih) && (0..11).contains(&iw) {
                                        acc += w[((o * 2 + c) * 5 + i) * 3 + j]
                                            * x[((b * 2 + c) * 37 + ih as usize) * 11 + iw as usize];
                                    }
                                }
                            }
                        }
                        let v = got[((b * 3 + o) * ho + oh) * wo + ow];
                        assert!((v - acc).abs() < 1e-12);
                    }
                }
            }
        }
        let y = pseudo(got.len(), 8);
        let lhs: f64 = got.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        conv2d_backward(&x, &w, &y, &g, Some(&mut dw), Some(&mut dx));
        let rx: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let rw: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-9 && (lhs - rw).abs() < 1e-9);
    }
}
