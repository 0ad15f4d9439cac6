//! Cross-correlation and its adjoint via im2col and GEMM.
//!
//! The forward convolution accumulates in `f64`, which keeps deep stacks of
//! layer outputs smooth functions of their inputs down to `f32` storage
//! rounding. Transposed convolutions and all backward products run in single
//! precision, roughly halving the cost of a training step.

use crate::error::{Error, Result};

/// Spatial geometry of one convolution, seen from the side of the
/// "image" (the conv input / transposed-conv output).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Geometry of a forward convolution on a `channels × height × width` input.
    pub fn forward(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("stride must be at least 1"));
        }
        let ph = height + 2 * padding;
        let pw = width + 2 * padding;
        if kh > ph || kw > pw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    /// Geometry of a transposed convolution whose input has extents
    /// `in_h × in_w` and whose output has `channels` channels.
    pub fn transposed(
        channels: usize,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("stride must be at least 1"));
        }
        let full_h = (in_h - 1) * stride + kh;
        let full_w = (in_w - 1) * stride + kw;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::shape(format!(
                "transposed conv padding {padding} consumes the whole {full_h}x{full_w} output"
            )));
        }
        let g = Self::forward(
            channels,
            full_h - 2 * padding,
            full_w - 2 * padding,
            kh,
            kw,
            stride,
            padding,
        )?;
        debug_assert_eq!((g.out_h, g.out_w), (in_h, in_w));
        Ok(g)
    }

    /// Rows of the patch matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Columns of the patch matrix.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kx - padding` is in range.
fn valid_columns(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.width + g.padding > kx {
        ((g.width + g.padding - kx - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold `image` (`channels × height × width`) into a `patch_len × positions` matrix.
pub fn im2col(image: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let mut cols = Vec::with_capacity(g.patch_len() * g.positions());
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_columns(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize || lo == hi {
                        cols.resize(cols.len() + g.out_w, 0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    cols.resize(cols.len() + lo, 0.0);
                    let first = lo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        cols.extend_from_slice(&src_row[first..first + hi - lo]);
                    } else {
                        cols.extend(src_row[first..].iter().step_by(g.stride).take(hi - lo));
                    }
                    cols.resize(cols.len() + g.out_w - hi, 0.0);
                }
            }
        }
    }
    cols
}

/// Fold a patch matrix back into an image, summing overlapping contributions.
pub fn col2im(cols: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let p = g.positions();
    let mut image = vec![0.0f32; g.image_len()];
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_columns(g, kx);
                if lo == hi {
                    continue;
                }
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let first = iy as usize * g.width + lo * g.stride + kx - g.padding;
                    let s = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    if g.stride == 1 {
                        for (d, &v) in plane[first..first + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in plane[first..].iter_mut().step_by(g.stride).zip(s) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    image
}

/// Row-major `c = alpha · op(a) · op(b) + beta · c` with `op(a)` of size
/// `m × k` and `op(b)` of size `k × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
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
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
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

/// Single-precision `op(a) · op(b)` into a fresh `m × n` buffer.
pub fn sgemm_new(m: usize, k: usize, n: usize, a: &[f32], a_trans: bool, b: &[f32], b_trans: bool) -> Vec<f32> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let mut c: Vec<f32> = Vec::with_capacity(m * n);
    // SAFETY: the asserts bound every read of A and B; with beta = 0 the
    // kernel writes every element of C without reading it, so the buffer is
    // initialised before `set_len`.
    unsafe {
        matrixmultiply::sgemm(
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

pub(crate) fn widen(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&x| f64::from(x)).collect()
}

pub(crate) fn narrow(xs: &[f64]) -> Vec<f32> {
    xs.iter().map(|&x| x as f32).collect()
}

/// Forward convolution. Returns the output and the patch matrix for reuse in backward.
pub fn conv2d_forward(
    input: &[f32],
    kernels: &[f32],
    bias: &[f32],
    out_channels: usize,
    g: &ConvGeometry,
) -> (Vec<f32>, Vec<f32>) {
    let cols = im2col(input, g);
    let p = g.positions();
    let mut out = vec![0.0f64; out_channels * p];
    for (o, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(f64::from(bias[o]));
    }
    gemm(out_channels, g.patch_len(), p, &widen(kernels), false, &widen(&cols), false, 1.0, &mut out);
    (narrow(&out), cols)
}

fn row_sums(xs: &[f32], len: usize) -> Vec<f32> {
    xs.chunks_exact(len)
        .map(|row| row.iter().map(|&v| f64::from(v)).sum::<f64>() as f32)
        .collect()
}

/// Gradients of a forward convolution: (input, kernels, bias), each only when requested.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward(
    upstream: &[f32],
    kernels: &[f32],
    cols: &[f32],
    out_channels: usize,
    g: &ConvGeometry,
    need: [bool; 3],
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let p = g.positions();
    let k = g.patch_len();
    let dx = need[0].then(|| col2im(&sgemm_new(k, out_channels, p, kernels, true, upstream, false), g));
    let dw = need[1].then(|| sgemm_new(out_channels, p, k, upstream, false, cols, true));
    let db = need[2].then(|| row_sums(upstream, p));
    (dx, dw, db)
}

/// Transposed convolution: `input` has `in_channels` planes of `out_h × out_w`
/// (geometry seen from the wide side), kernels are `[in_channels, g.channels, kh, kw]`.
pub fn transpose_conv2d_forward(
    input: &[f32],
    kernels: &[f32],
    bias: &[f32],
    in_channels: usize,
    g: &ConvGeometry,
) -> Vec<f32> {
    let p = g.positions();
    let k = g.patch_len();
    let cols = sgemm_new(k, in_channels, p, kernels, true, input, false);
    let mut out = col2im(&cols, g);
    let plane = g.height * g.width;
    for (c, chunk) in out.chunks_exact_mut(plane).enumerate() {
        chunk.iter_mut().for_each(|v| *v += bias[c]);
    }
    out
}

#[allow(clippy::type_complexity)]
pub fn transpose_conv2d_backward(
    upstream: &[f32],
    input: &[f32],
    kernels: &[f32],
    in_channels: usize,
    g: &ConvGeometry,
    need: [bool; 3],
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let p = g.positions();
    let k = g.patch_len();
    let dcols = im2col(upstream, g);
    let dx = need[0].then(|| sgemm_new(in_channels, k, p, kernels, false, &dcols, false));
    let dw = need[1].then(|| sgemm_new(in_channels, p, k, input, false, &dcols, true));
    let db = need[2].then(|| row_sums(upstream, g.height * g.width));
    (dx, dw, db)
}
