//! Raw numeric kernels shared by the autograd graph and plain inference code.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// `c = a · b + beta · c` on strided row/column views.
///
/// `a` is `m × k`, `b` is `k × n`, `c` is `m × n`; every stride is in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: c too small");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!(last(m, k, rsa, csa) < a.len(), "gemm: a too small");
    assert!(last(k, n, rsb, csb) < b.len(), "gemm: b too small");
    // SAFETY: the asserts above bound every index the kernel touches, and `c`
    // is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let n = oh * ow;
    let k = g.kernel;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let n = oh * ow;
    let k = g.kernel;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution; `x` is `B × c_in × h × w`, `weight` is `c_out × c_in × k × k`.
pub(crate) fn conv2d_forward(g: &ConvGeom, batch: usize, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let n = oh * ow;
    let kk = g.patch();
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * n;
    let mut out = vec![0.0; batch * out_stride];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * n] };
    for b in 0..batch {
        let xb = &x[b * in_stride..(b + 1) * in_stride];
        let ob = &mut out[b * out_stride..(b + 1) * out_stride];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_exact_mut(n).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let cols: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        gemm(g.c_out, kk, n, weight, (kk, 1), cols, (n, 1), 1.0, ob, (n, 1));
    }
    out
}

/// Gradients of [`conv2d_forward`]; returns `(dx, dweight, dbias)` for the requested parts.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (oh, ow) = g.out_hw();
    let n = oh * ow;
    let kk = g.patch();
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * n;
    let mut dx = want_dx.then(|| vec![0.0; batch * in_stride]);
    let mut dw = want_dw.then(|| vec![0.0; g.c_out * kk]);
    let mut db = vec![0.0; g.c_out];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * n] };
    let mut dcol = if want_dx && !g.is_pointwise() { vec![0.0; kk * n] } else { Vec::new() };
    for b in 0..batch {
        let gb = &grad_out[b * out_stride..(b + 1) * out_stride];
        for (co, chunk) in gb.chunks_exact(n).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * in_stride..(b + 1) * in_stride];
            let cols: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut col);
                &col
            };
            // dW += gOut · colᵀ
            gemm(g.c_out, n, kk, gb, (n, 1), cols, (1, n), 1.0, dw, (kk, 1));
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
            if g.is_pointwise() {
                gemm(kk, g.c_out, n, weight, (1, kk), gb, (n, 1), 0.0, dxb, (n, 1));
            } else {
                // dcol = Wᵀ · gOut
                gemm(kk, g.c_out, n, weight, (1, kk), gb, (n, 1), 0.0, &mut dcol, (n, 1));
                col2im(g, &dcol, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Per-(sample, group) statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct GroupNormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

pub(crate) fn group_norm_forward(
    x: &[f64],
    (b, c, hw): (usize, usize, usize),
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, GroupNormStats) {
    let cpg = c / groups;
    let len = cpg * hw;
    let mut out = vec![0.0; x.len()];
    let mut mean = vec![0.0; b * groups];
    let mut rstd = vec![0.0; b * groups];
    for bi in 0..b {
        for gi in 0..groups {
            let off = (bi * c + gi * cpg) * hw;
            let seg = &x[off..off + len];
            let mu = seg.iter().sum::<f64>() / len as f64;
            let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / len as f64;
            let r = 1.0 / math::sqrt(var + GROUP_NORM_EPS);
            mean[bi * groups + gi] = mu;
            rstd[bi * groups + gi] = r;
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let (gm, bt) = (gamma[ch], beta[ch]);
                let s = off + cc * hw;
                for i in s..s + hw {
                    out[i] = (x[i] - mu) * r * gm + bt;
                }
            }
        }
    }
    (out, GroupNormStats { mean, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn group_norm_backward(
    x: &[f64],
    (b, c, hw): (usize, usize, usize),
    groups: usize,
    gamma: &[f64],
    stats: &GroupNormStats,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cpg = c / groups;
    let len = (cpg * hw) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for gi in 0..groups {
            let mu = stats.mean[bi * groups + gi];
            let r = stats.rstd[bi * groups + gi];
            let off = (bi * c + gi * cpg) * hw;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let s = off + cc * hw;
                for i in s..s + hw {
                    let xhat = (x[i] - mu) * r;
                    let go = grad_out[i];
                    dgamma[ch] += go * xhat;
                    dbeta[ch] += go;
                    let dxhat = go * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let s = off + cc * hw;
                for i in s..s + hw {
                    let xhat = (x[i] - mu) * r;
                    let dxhat = grad_out[i] * gamma[ch];
                    dx[i] = r / len * (len * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Source index inside the `(B, C·r², H, W)` input for output element
/// `(b, c, y, x)` of the `(B, C, H·r, W·r)` sub-pixel rearrangement.
#[inline]
pub(crate) fn pixel_shuffle_source(
    (c_out, h, w): (usize, usize, usize),
    r: usize,
    (b, c, y, x): (usize, usize, usize, usize),
) -> usize {
    let ch = c * r * r + (y % r) * r + (x % r);
    ((b * c_out * r * r + ch) * h + y / r) * w + x / r
}

pub(crate) fn pixel_shuffle(x: &[f64], (b, c_in, h, w): (usize, usize, usize, usize), r: usize) -> Vec<f64> {
    let c_out = c_in / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    for bi in 0..b {
        for c in 0..c_out {
            for y in 0..oh {
                for xx in 0..ow {
                    out[i] = x[pixel_shuffle_source((c_out, h, w), r, (bi, c, y, xx))];
                    i += 1;
                }
            }
        }
    }
    out
}

pub(crate) fn pixel_unshuffle(grad: &[f64], (b, c_in, h, w): (usize, usize, usize, usize), r: usize) -> Vec<f64> {
    let c_out = c_in / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; grad.len()];
    let mut i = 0;
    for bi in 0..b {
        for c in 0..c_out {
            for y in 0..oh {
                for xx in 0..ow {
                    out[pixel_shuffle_source((c_out, h, w), r, (bi, c, y, xx))] = grad[i];
                    i += 1;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
        let (oh, ow) = g.out_hw();
        let mut out = vec![0.0; g.c_out * oh * ow];
        for co in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..g.c_in {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((co * g.c_in + ci) * g.kernel + ky) * g.kernel + kx];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 0.4).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2), (4, 2, 1)] {
            let g = ConvGeom { c_in: 3, c_out: 4, kernel: k, stride, pad, h: 9, w: 8 };
            let x = ramp(3 * 9 * 8, 0.05);
            let w = ramp(4 * 3 * k * k, 0.03);
            let bias = [0.1, -0.2, 0.3, 0.0];
            let fast = conv2d_forward(&g, 1, &x, &w, Some(&bias));
            let slow = naive_conv(&g, &x, &w, &bias);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]; aᵀ·b = [[26,30],[38,44]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn pixel_shuffle_round_trip() {
        let dims = (2, 8, 3, 2);
        let x: Vec<f64> = (0..2 * 8 * 3 * 2).map(f64::from).collect();
        let y = pixel_shuffle(&x, dims, 2);
        assert_eq!(pixel_unshuffle(&y, dims, 2), x);
    }
}
