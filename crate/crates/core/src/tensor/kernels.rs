//! Forward and backward numeric kernels on raw row-major buffers.
//!
//! Every reduction runs in a fixed sequential order so that results are
//! bitwise reproducible.

use super::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution or pooling window along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], bias: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be [n,c,h,w], got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be [c_in,c_out,k,k], got {kernel:?}"),
            ));
        }
        if kernel[2] != kernel[3] {
            return Err(Error::dim("conv2d", "kernel width", kernel[2], kernel[3]));
        }
        if input[1] != kernel[0] {
            return Err(Error::dim("conv2d", "input channels", kernel[0], input[1]));
        }
        if bias != [kernel[1]] {
            return Err(Error::dim("conv2d", "bias", kernel[1], bias.iter().product()));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        let k = kernel[2];
        let out_h = conv_output_extent(input[2], k, stride, padding)
            .ok_or_else(|| Error::dim("conv2d", "height", k, input[2] + 2 * padding))?;
        let out_w = conv_output_extent(input[3], k, stride, padding)
            .ok_or_else(|| Error::dim("conv2d", "width", k, input[3] + 2 * padding))?;
        Ok(ConvGeometry {
            batch: input[0],
            c_in: input[1],
            c_out: kernel[1],
            h: input[2],
            w: input[3],
            k,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col<F: Scalar>(&self, x: &[F], cols: &mut [F]) {
        let (k, s, p) = (self.k, self.stride, self.padding as isize);
        let positions = self.positions();
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ky) as isize - p;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(F::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *v = if ix < 0 || ix >= self.w as isize {
                                F::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<F: Scalar>(&self, cols: &[F], dx: &mut [F]) {
        let (k, s, p) = (self.k, self.stride, self.padding as isize);
        let positions = self.positions();
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.out_w {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Kernel `[c_in, c_out, k, k]` rearranged as a `[c_out, c_in·k·k]` matrix.
    fn weight_matrix<F: Scalar>(&self, kernel: &[F]) -> Vec<F> {
        let kk = self.k * self.k;
        let r = self.patch_len();
        let mut w = vec![F::zero(); self.c_out * r];
        for c in 0..self.c_in {
            for o in 0..self.c_out {
                let src = &kernel[(c * self.c_out + o) * kk..(c * self.c_out + o + 1) * kk];
                w[o * r + c * kk..o * r + (c + 1) * kk].copy_from_slice(src);
            }
        }
        w
    }
}

pub(crate) fn conv2d_forward<F: Scalar>(g: &ConvGeometry, x: &[F], kernel: &[F], bias: &[F]) -> Vec<F> {
    let r = g.patch_len();
    let positions = g.positions();
    let wmat = g.weight_matrix(kernel);
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * positions;
    let mut cols = vec![F::zero(); r * positions];
    let mut out = vec![F::zero(); g.batch * out_len];
    for n in 0..g.batch {
        g.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        for (o, row) in dst.chunks_mut(positions).enumerate() {
            row.fill(bias[o]);
        }
        gemm_nn(g.c_out, r, positions, &wmat, &cols, F::one(), dst);
    }
    out
}

pub(crate) struct ConvGrads<F> {
    pub input: Option<Vec<F>>,
    pub kernel: Vec<F>,
    pub bias: Vec<F>,
}

pub(crate) fn conv2d_backward<F: Scalar>(
    g: &ConvGeometry,
    x: &[F],
    kernel: &[F],
    dout: &[F],
    need_input: bool,
) -> ConvGrads<F> {
    let r = g.patch_len();
    let positions = g.positions();
    let wmat = g.weight_matrix(kernel);
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * positions;
    let mut cols = vec![F::zero(); r * positions];
    let mut dcols = vec![F::zero(); r * positions];
    let mut dw = vec![F::zero(); g.c_out * r];
    let mut db = vec![F::zero(); g.c_out];
    let mut dx = need_input.then(|| vec![F::zero(); g.batch * in_len]);
    for n in 0..g.batch {
        let dy = &dout[n * out_len..(n + 1) * out_len];
        for (o, row) in dy.chunks(positions).enumerate() {
            db[o] = db[o] + row.iter().fold(F::zero(), |acc, &v| acc + v);
        }
        g.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
        gemm_nt(g.c_out, positions, r, dy, &cols, F::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            gemm_tn(r, g.c_out, positions, &wmat, dy, F::zero(), &mut dcols);
            g.col2im_add(&dcols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    let kk = g.k * g.k;
    let mut dk = vec![F::zero(); kernel.len()];
    for c in 0..g.c_in {
        for o in 0..g.c_out {
            dk[(c * g.c_out + o) * kk..(c * g.c_out + o + 1) * kk]
                .copy_from_slice(&dw[o * r + c * kk..o * r + (c + 1) * kk]);
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

/// Windowed max over `[n,c,h,w]`; returns values and the flat input index of
/// each winner. Ties go to the first element in row-major scan order.
pub(crate) fn max_pool_forward<F: Scalar>(
    shape: &[usize],
    x: &[F],
    window: usize,
    stride: usize,
) -> Result<(Vec<usize>, Vec<F>, Vec<usize>)> {
    if shape.len() != 4 {
        return Err(Error::shape("max_pool2d", format!("input must be [n,c,h,w], got {shape:?}")));
    }
    if window == 0 || stride == 0 {
        return Err(Error::Parameter("max_pool2d window and stride must be positive".into()));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let oh = conv_output_extent(h, window, stride, 0).ok_or_else(|| Error::dim("max_pool2d", "height", window, h))?;
    let ow = conv_output_extent(w, window, stride, 0).ok_or_else(|| Error::dim("max_pool2d", "width", window, w))?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((vec![n, c, oh, ow], out, argmax))
}

fn adaptive_bounds(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Average pooling onto a fixed `out_h × out_w` grid with possibly
/// overlapping windows `[⌊i·H/oh⌋, ⌈(i+1)·H/oh⌉)`.
pub(crate) fn adaptive_avg_pool_forward<F: Scalar>(shape: &[usize], x: &[F], out_h: usize, out_w: usize) -> Vec<F> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..out_h {
            let (y0, y1) = adaptive_bounds(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_bounds(ox, w, out_w);
                let mut acc = F::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc = acc + x[base + y * w + xx];
                    }
                }
                out.push(acc / F::from_f64(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_pool_backward<F: Scalar>(shape: &[usize], dout: &[F], out_h: usize, out_w: usize) -> Vec<F> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut dx = vec![F::zero(); n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..out_h {
            let (y0, y1) = adaptive_bounds(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_bounds(ox, w, out_w);
                let g = dout[(plane * out_h + oy) * out_w + ox] / F::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dx[base + y * w + xx] = dx[base + y * w + xx] + g;
                    }
                }
            }
        }
    }
    dx
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

pub(crate) struct BnForward<F> {
    pub out: Vec<F>,
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
    /// Per-channel batch mean and biased variance (train mode only).
    pub batch_stats: Option<(Vec<F>, Vec<F>)>,
}

/// Batch normalization over `[n,c,h,w]`, statistics per channel.
pub(crate) fn batchnorm_forward<F: Scalar>(
    shape: &[usize],
    x: &[F],
    gamma: &[F],
    beta: &[F],
    running: Option<(&[F], &[F])>,
) -> BnForward<F> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = F::from_f64((n * hw) as f64);
    let eps = F::from_f64(BN_EPS);
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    match running {
        Some((rm, rv)) => {
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
        }
        None => {
            for ch in 0..c {
                let mut s = F::zero();
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    s = x[off..off + hw].iter().fold(s, |acc, &v| acc + v);
                }
                let m = s / count;
                let mut sq = F::zero();
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    sq = x[off..off + hw].iter().fold(sq, |acc, &v| acc + (v - m) * (v - m));
                }
                mean[ch] = m;
                var[ch] = sq / count;
            }
        }
    }
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![F::zero(); x.len()];
    let mut out = vec![F::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BnForward {
        out,
        xhat,
        inv_std,
        batch_stats: running.is_none().then_some((mean, var)),
    }
}

pub(crate) struct BnGrads<F> {
    pub input: Vec<F>,
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
}

pub(crate) fn batchnorm_backward<F: Scalar>(
    shape: &[usize],
    dout: &[F],
    xhat: &[F],
    inv_std: &[F],
    gamma: &[F],
    train: bool,
) -> BnGrads<F> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = F::from_f64((n * hw) as f64);
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] = dgamma[ch] + dout[i] * xhat[i];
                dbeta[ch] = dbeta[ch] + dout[i];
            }
        }
    }
    let mut dx = vec![F::zero(); dout.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let g = gamma[ch] * inv_std[ch];
            for i in off..off + hw {
                dx[i] = if train {
                    // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                    g * (dout[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                } else {
                    g * dout[i]
                };
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// Row-wise softmax of `logits / temperature`, with max subtraction.
pub(crate) fn softmax_rows<F: Scalar>(x: &[F], classes: usize, temperature: F) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (row, dst) in x.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut z = F::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = ((v - max) / temperature).exp();
            z = z + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / z;
        }
    }
    out
}

/// Row-wise log-softmax of `logits / temperature`.
pub(crate) fn log_softmax_rows<F: Scalar>(x: &[F], classes: usize, temperature: F) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (row, dst) in x.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let z = row
            .iter()
            .fold(F::zero(), |acc, &v| acc + ((v - max) / temperature).exp());
        let log_z = z.ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max) / temperature - log_z;
        }
    }
    out
}

/// Softmax of `logits / temperature` along the last axis.
pub fn softmax_with_temperature<F: Scalar>(logits: &Tensor<F>, temperature: F) -> Result<Tensor<F>> {
    if !(temperature > F::zero()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    let classes = *logits.shape().last().expect("tensor has at least one axis");
    Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), classes, temperature))
}
