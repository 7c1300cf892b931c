//! Forward and backward kernels over raw buffers. The tape in `graph` wires
//! these together; they are public so benches can time them in isolation.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Added to the squared norm before the square root in [`l2norm_forward`].
pub const L2NORM_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c, h, w) = match input {
            &[c, h, w] => (c, h, w),
            _ => return Err(Error::Shape(format!("conv input must be [C,H,W], got {input:?}"))),
        };
        let (f, wc, kh, kw) = match weight {
            &[f, wc, kh, kw] => (f, wc, kh, kw),
            _ => {
                return Err(Error::Shape(format!(
                    "conv weight must be [F,C,k,k], got {weight:?}"
                )))
            }
        };
        if wc != c {
            return Err(Error::Shape(format!(
                "conv weight expects {wc} input channels, input has {c}"
            )));
        }
        if kh != kw {
            return Err(Error::Shape(format!("conv kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Shape("conv stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv kernel {kh} with pad {pad} does not fit input {h}x{w}"
            )));
        }
        Ok(Self {
            in_channels: c,
            height: h,
            width: w,
            filters: f,
            kernel: kh,
            stride,
            pad,
            out_height: (h + 2 * pad - kh) / stride + 1,
            out_width: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Unfolds input patches into a `[C*k*k, H'*W']` matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    let k = g.kernel;
    for c in 0..g.in_channels {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into `dx`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    let k = g.kernel;
    for c in 0..g.in_channels {
        let dst = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[base + ix as usize] =
                                dst[base + ix as usize] + src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.dims(), weight.dims(), stride, pad)?;
    if let Some(b) = bias {
        if b.dims() != [g.filters] {
            return Err(Error::Shape(format!(
                "conv bias must be [{}], got {:?}",
                g.filters,
                b.dims()
            )));
        }
    }
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.filters * plane];
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(plane).zip(b.data()) {
            row.fill(bv);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    let kk = g.patch_len();
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        x.data()
    } else {
        let mut buf = vec![T::zero(); kk * plane];
        im2col(x.data(), &g, &mut buf);
        owned = buf;
        &owned
    };
    T::gemm(
        g.filters,
        kk,
        plane,
        T::one(),
        weight.data(),
        (kk as isize, 1),
        cols,
        (plane as isize, 1),
        beta,
        &mut out,
        (plane as isize, 1),
    );
    Tensor::new(vec![g.filters, g.out_height, g.out_width], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &[T],
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.dims(), weight.dims(), stride, pad)?;
    let plane = g.out_plane();
    let kk = g.patch_len();
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        x.data()
    } else {
        let mut buf = vec![T::zero(); kk * plane];
        im2col(x.data(), &g, &mut buf);
        owned = buf;
        &owned
    };
    // dW[F, kk] = dOut[F, P] * cols^T[P, kk]
    let mut dw = vec![T::zero(); g.filters * kk];
    T::gemm(
        g.filters,
        plane,
        kk,
        T::one(),
        dout,
        (plane as isize, 1),
        cols,
        (1, plane as isize),
        T::zero(),
        &mut dw,
        (kk as isize, 1),
    );
    let db = dout.chunks(plane).map(|row| row.iter().copied().sum()).collect();
    let dx = if need_input {
        // dCols[kk, P] = W^T[kk, F] * dOut[F, P]
        let mut dcols = vec![T::zero(); kk * plane];
        T::gemm(
            kk,
            g.filters,
            plane,
            T::one(),
            weight.data(),
            (1, kk as isize),
            dout,
            (plane as isize, 1),
            T::zero(),
            &mut dcols,
            (plane as isize, 1),
        );
        if g.is_pointwise() {
            Some(dcols)
        } else {
            let mut dx = vec![T::zero(); x.len()];
            col2im(&dcols, &g, &mut dx);
            Some(dx)
        }
    } else {
        None
    };
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// 2x2 stride-2 max pooling. Returns the output and, per output element, the
/// flat input index that won (first in scan order on ties).
pub fn maxpool2x2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2x2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + 2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

pub fn maxpool2x2_backward<T: Real>(argmax: &[u32], dout: &[T], dx: &mut [T]) {
    for (&i, &g) in argmax.iter().zip(dout) {
        dx[i as usize] = dx[i as usize] + g;
    }
}

/// Per destination index: (lower source index, upper source index, weight of upper).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|d| {
            let src = ((d as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear 2x upsampling with half-pixel centers and edge clamping.
pub fn upsample2x_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn upsample2x_backward<T: Real>(dims: (usize, usize, usize), dout: &[T], dx: &mut [T]) {
    let (c, h, w) = dims;
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        let src = &dout[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let g = src[oy * ow + ox];
                let (gt, gb) = (g * (T::one() - fy), g * fy);
                dst[y0 * w + x0] = dst[y0 * w + x0] + gt * (T::one() - fx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + gt * fx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + gb * (T::one() - fx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + gb * fx;
            }
        }
    }
}

/// Per-location channel L2 normalization with a learnable per-channel scale.
/// Returns the output and the per-location norms `sqrt(sum x^2 + eps)`.
pub fn l2norm_forward<T: Real>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (c, h, w) = x.chw()?;
    if scale.dims() != [c] {
        return Err(Error::Shape(format!(
            "l2norm scale must be [{c}], got {:?}",
            scale.dims()
        )));
    }
    let hw = h * w;
    let src = x.data();
    let eps = T::of(L2NORM_EPS);
    let mut norms = vec![eps; hw];
    for ch in 0..c {
        for (n, &v) in norms.iter_mut().zip(&src[ch * hw..(ch + 1) * hw]) {
            *n = *n + v * v;
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    let mut out = vec![T::zero(); c * hw];
    for ch in 0..c {
        let s = scale.data()[ch];
        for p in 0..hw {
            out[ch * hw + p] = s * src[ch * hw + p] / norms[p];
        }
    }
    Ok((Tensor::new(vec![c, h, w], out)?, norms))
}

/// Returns (dx, dscale).
pub fn l2norm_backward<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    norms: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>) {
    let (c, h, w) = x.chw().expect("validated in forward");
    let hw = h * w;
    let src = x.data();
    let mut dscale = vec![T::zero(); c];
    // dot[p] = sum_c (dout_c * s_c) * x_c
    let mut dot = vec![T::zero(); hw];
    for ch in 0..c {
        let s = scale.data()[ch];
        let mut acc = T::zero();
        for p in 0..hw {
            let i = ch * hw + p;
            acc = acc + dout[i] * src[i] / norms[p];
            dot[p] = dot[p] + dout[i] * s * src[i];
        }
        dscale[ch] = acc;
    }
    let mut dx = vec![T::zero(); c * hw];
    for ch in 0..c {
        let s = scale.data()[ch];
        for p in 0..hw {
            let i = ch * hw + p;
            let n = norms[p];
            dx[i] = dout[i] * s / n - src[i] * dot[p] / (n * n * n);
        }
    }
    (dx, dscale)
}
