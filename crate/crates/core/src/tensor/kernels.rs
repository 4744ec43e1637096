//! Raw buffer kernels behind the differentiable convolution ops.

use super::Scalar;

/// Geometry of a zero-padded 2-D convolution over a single `C×H×W` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Unfold patches into a `(C·k·k) × (H'·W')` matrix.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.kernel;
    let (h, w) = (g.height as isize, g.width as isize);
    let cols = g.col_cols();
    let mut out = vec![T::zero(); g.col_rows() * cols];
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `C×H×W` buffer.
pub fn col2im<T: Scalar>(cols_buf: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.kernel;
    let (h, w) = (g.height as isize, g.width as isize);
    let cols = g.col_cols();
    let mut out = vec![T::zero(); g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2×2 mean pooling of a `C×H×W` buffer (H, W even).
pub fn avg_downsample<T: Scalar>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                let s = plane[2 * y * w + 2 * x]
                    + plane[2 * y * w + 2 * x + 1]
                    + plane[(2 * y + 1) * w + 2 * x]
                    + plane[(2 * y + 1) * w + 2 * x + 1];
                out.push(s * quarter);
            }
        }
    }
    out
}

pub fn avg_downsample_backward<T: Scalar>(grad: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = grad[(ch * ho + y / 2) * wo + x / 2] * quarter;
            }
        }
    }
    out
}
