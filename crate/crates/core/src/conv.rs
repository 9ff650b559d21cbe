//! Dense 2D cross-correlation kernels (NCHW, row-major) built on im2col + GEMM.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let &[batch, in_ch, in_h, in_w] = input else {
            return Err(shape_err("conv2d", format!("input must be [b,c,h,w], got {input:?}")));
        };
        let &[out_ch, w_ch, kh, kw] = weight else {
            return Err(shape_err("conv2d", format!("weight must be [m,c,kh,kw], got {weight:?}")));
        };
        if in_ch != w_ch {
            return Err(shape_err(
                "conv2d",
                format!("input has {in_ch} channels but weight expects {w_ch}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (in_h + 2 * padding, in_w + 2 * padding);
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit padded input {ph}x{pw}"),
            ));
        }
        Ok(Self {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }
}

/// Output columns `[lo, hi)` of kernel column `j` that read inside the input row.
fn valid_cols(g: &ConvGeom, j: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(j).div_ceil(g.stride).min(g.out_w);
    let limit = g.in_w + g.padding;
    let hi = if limit > j { ((limit - j - 1) / g.stride + 1).min(g.out_w) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfold one sample `[c,h,w]` into `[c*kh*kw, out_h*out_w]`.
fn im2col(sample: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_ch {
        let plane = &sample[c * g.in_plane()..(c + 1) * g.in_plane()];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let (lo, hi) = valid_cols(g, j);
                let row = &mut col[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - pad;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.in_h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.in_w..(y as usize + 1) * g.in_w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let x0 = lo * g.stride + j - g.padding;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (k, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[x0 + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Fold `[c*kh*kw, out_h*out_w]` back onto a sample, accumulating overlaps.
fn col2im(col: &[f64], g: &ConvGeom, sample: &mut [f64]) {
    let p = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_ch {
        let plane = &mut sample[c * g.in_plane()..(c + 1) * g.in_plane()];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let (lo, hi) = valid_cols(g, j);
                let row = &col[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - pad;
                    if y < 0 || y >= g.in_h as isize || lo == hi {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.in_w..(y as usize + 1) * g.in_w];
                    let src = &row[oy * g.out_w + lo..oy * g.out_w + hi];
                    let x0 = lo * g.stride + j - g.padding;
                    if g.stride == 1 {
                        dst[x0..x0 + src.len()].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    } else {
                        for (k, s) in src.iter().enumerate() {
                            dst[x0 + k * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c[m,n] = beta*c + a[m,k] · b[k,n]`, with optional transposes of the operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the m*k, k*n and m*n extents addressed by these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    gemm(m, k, n, a, a_trans, b, b_trans, beta, c)
}

pub fn conv2d_forward(input: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (pl, p) = (g.patch_len(), g.out_plane());
    let in_stride = g.in_ch * g.in_plane();
    let out_stride = g.out_ch * p;
    let mut out = vec![0.0; g.batch * out_stride];
    let mut col = vec![0.0; pl * p];
    for b in 0..g.batch {
        im2col(&input[b * in_stride..(b + 1) * in_stride], g, &mut col);
        gemm(g.out_ch, pl, p, weight, false, &col, false, 0.0, &mut out[b * out_stride..]);
    }
    out
}

/// Gradient of the conv output w.r.t. its input.
pub fn conv2d_backward_input(grad_out: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (pl, p) = (g.patch_len(), g.out_plane());
    let in_stride = g.in_ch * g.in_plane();
    let out_stride = g.out_ch * p;
    let mut grad_in = vec![0.0; g.batch * in_stride];
    let mut col = vec![0.0; pl * p];
    for b in 0..g.batch {
        gemm(pl, g.out_ch, p, weight, true, &grad_out[b * out_stride..], false, 0.0, &mut col);
        col2im(&col, g, &mut grad_in[b * in_stride..(b + 1) * in_stride]);
    }
    grad_in
}

/// Gradient of the conv output w.r.t. its weight.
pub fn conv2d_backward_weight(grad_out: &[f64], input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (pl, p) = (g.patch_len(), g.out_plane());
    let in_stride = g.in_ch * g.in_plane();
    let out_stride = g.out_ch * p;
    let mut grad_w = vec![0.0; g.out_ch * pl];
    let mut col = vec![0.0; pl * p];
    for b in 0..g.batch {
        im2col(&input[b * in_stride..(b + 1) * in_stride], g, &mut col);
        gemm(g.out_ch, p, pl, &grad_out[b * out_stride..], false, &col, true, 1.0, &mut grad_w);
    }
    grad_w
}

/// Cross-correlation of `input [b,c,h,w]` with `weight [m,c,kh,kw]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding)?;
    Tensor::new(g.out_shape(), conv2d_forward(input.data(), weight.data(), &g))
}
