//! Forward and backward kernels for the layer set used by the models:
//! affine maps, SAME-padded convolution, 2×2 max pooling, ReLU and dropout.
//!
//! Matrix products go through `matrixmultiply`'s blocked GEMM; everything
//! else is plain loops. Backward functions return fresh gradient tensors and
//! never mutate their inputs.

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above guarantee every index reachable through these
    // strides lies inside the corresponding slice, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::Dimension(format!("{what} must be 2-d, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `y = x·w + b` for `x: [N×D]`, `w: [D×M]`, `b: [M]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = check_matrix(x, "affine input")?;
    let (dw, m) = check_matrix(w, "affine weight")?;
    if d != dw || b.len() != m {
        return Err(Error::Dimension(format!(
            "affine: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut y = Vec::with_capacity(n * m);
    for _ in 0..n {
        y.extend_from_slice(b.data());
    }
    gemm(n, d, m, 1.0, x.data(), false, w.data(), false, 1.0, &mut y);
    Tensor::new(&[n, m], y)
}

pub struct AffineGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

/// Gradients of `affine` given the upstream gradient `dy: [N×M]`.
pub fn affine_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<AffineGrads> {
    let (n, d) = check_matrix(x, "affine input")?;
    let (_, m) = check_matrix(w, "affine weight")?;
    if dy.shape() != [n, m] {
        return Err(Error::Dimension(format!("affine backward: dy {:?}", dy.shape())));
    }
    let mut gx = vec![0.0; n * d];
    gemm(n, m, d, 1.0, dy.data(), false, w.data(), true, 0.0, &mut gx);
    let mut gw = vec![0.0; d * m];
    gemm(d, n, m, 1.0, x.data(), true, dy.data(), false, 0.0, &mut gw);
    let mut gb = vec![0.0; m];
    for r in 0..n {
        for (g, v) in gb.iter_mut().zip(dy.row(r)) {
            *g += v;
        }
    }
    Ok(AffineGrads {
        x: Tensor::new(&[n, d], gx)?,
        w: Tensor::new(&[d, m], gw)?,
        b: Tensor::vector(gb),
    })
}

fn check_images(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() != 4 {
        return Err(Error::Dimension(format!(
            "expected [N, C, H, W] images, got {:?}",
            x.shape()
        )));
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

fn conv_dims(x: &Tensor, filters: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = check_images(x)?;
    if filters.ndim() != 4 {
        return Err(Error::Dimension(format!("filters must be [O, C, k, k], got {:?}", filters.shape())));
    }
    let fs = filters.shape();
    let (o, fc, k) = (fs[0], fs[1], fs[2]);
    if fs[3] != k || k % 2 == 0 {
        return Err(Error::Dimension(format!("filters must be square with odd size, got {fs:?}")));
    }
    if fc != c {
        return Err(Error::Dimension(format!("filters expect {fc} channels, input has {c}")));
    }
    if h < k || w < k {
        return Err(Error::Dimension(format!("input {h}×{w} smaller than kernel {k}×{k}")));
    }
    Ok((n, c, h, w, o, k))
}

/// Unfolds one image `[C, H, W]` into `[C·k·k, H·W]` patches with zero padding `k/2`.
fn im2col(img: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let p = k / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ch * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < p || sy - p >= h {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[(sy - p) * w..(sy - p + 1) * w];
                    // x + kx - p must land in [0, w)
                    let x_lo = p.saturating_sub(kx);
                    let x_hi = (w + p - kx).min(w);
                    out[..x_lo].fill(0.0);
                    out[x_hi..].fill(0.0);
                    if x_lo < x_hi {
                        out[x_lo..x_hi].copy_from_slice(&src[x_lo + kx - p..x_hi + kx - p]);
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters patch gradients back onto the image.
fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, img: &mut [f64]) {
    let p = k / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ch * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y + ky;
                    if sy < p || sy - p >= h {
                        continue;
                    }
                    let x_lo = p.saturating_sub(kx);
                    let x_hi = (w + p - kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let dst = &mut plane[(sy - p) * w + x_lo + kx - p..(sy - p) * w + x_hi + kx - p];
                    for (d, v) in dst.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution with SAME zero padding.
///
/// `x: [N, C, H, W]`, `filters: [O, C, k, k]` (k odd), `bias: [O]` → `[N, O, H, W]`.
pub fn conv2d_same(x: &Tensor, filters: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, w, o, k) = conv_dims(x, filters)?;
    if bias.len() != o {
        return Err(Error::Dimension(format!("bias has {} entries, expected {o}", bias.len())));
    }
    let hw = h * w;
    let ckk = c * k * k;
    let mut col = vec![0.0; ckk * hw];
    let mut out = vec![0.0; n * o * hw];
    for i in 0..n {
        im2col(x.row(i), c, h, w, k, &mut col);
        let dst = &mut out[i * o * hw..(i + 1) * o * hw];
        for (oc, plane) in dst.chunks_mut(hw).enumerate() {
            plane.fill(bias.data()[oc]);
        }
        gemm(o, ckk, hw, 1.0, filters.data(), false, &col, false, 1.0, dst);
    }
    Tensor::new(&[n, o, h, w], out)
}

pub struct ConvGrads {
    pub x: Tensor,
    pub filters: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_same_backward(x: &Tensor, filters: &Tensor, dy: &Tensor) -> Result<ConvGrads> {
    let (n, c, h, w, o, k) = conv_dims(x, filters)?;
    if dy.shape() != [n, o, h, w] {
        return Err(Error::Dimension(format!("conv backward: dy {:?}", dy.shape())));
    }
    let hw = h * w;
    let ckk = c * k * k;
    let mut col = vec![0.0; ckk * hw];
    let mut dcol = vec![0.0; ckk * hw];
    let mut gx = vec![0.0; n * c * hw];
    let mut gf = vec![0.0; o * ckk];
    let mut gb = vec![0.0; o];
    for i in 0..n {
        let dyi = dy.row(i);
        im2col(x.row(i), c, h, w, k, &mut col);
        gemm(o, hw, ckk, 1.0, dyi, false, &col, true, 1.0, &mut gf);
        gemm(ckk, o, hw, 1.0, filters.data(), true, dyi, false, 0.0, &mut dcol);
        col2im(&dcol, c, h, w, k, &mut gx[i * c * hw..(i + 1) * c * hw]);
        for (oc, plane) in dyi.chunks(hw).enumerate() {
            gb[oc] += plane.iter().sum::<f64>();
        }
    }
    Ok(ConvGrads {
        x: Tensor::new(&[n, c, h, w], gx)?,
        filters: Tensor::new(filters.shape(), gf)?,
        bias: Tensor::vector(gb),
    })
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Returns the pooled tensor and, per output cell, the flat input index of the
/// selected maximum (first maximum in window order on ties).
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = check_images(x)?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Dimension(format!("cannot pool a {h}×{w} input")));
    }
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, arg))
}

pub fn maxpool2x2_backward(dy: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if dy.len() != argmax.len() {
        return Err(Error::Dimension("pool backward: argmax length".into()));
    }
    let mut gx = Tensor::zeros(input_shape);
    let g = gx.data_mut();
    for (&i, &v) in argmax.iter().zip(dy.data()) {
        g[i] += v;
    }
    Ok(gx)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    // `f64::max` would map NaN to 0 and hide a corrupted parameter
    y.data_mut().iter_mut().filter(|v| **v < 0.0).for_each(|v| *v = 0.0);
    y
}

/// Gradient of ReLU given the forward *output* `y`.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    y.check_same_shape(dy)?;
    let mut g = dy.clone();
    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
        if yv <= 0.0 {
            *gv = 0.0;
        }
    }
    Ok(g)
}

/// Inverted dropout mask: each entry is `0` or `1/keep` with keep probability `keep`.
/// Returns `None` when `keep >= 1` (dropout off).
pub fn dropout_mask(len: usize, keep: f64, rng: &mut impl Rng) -> Option<Vec<f64>> {
    if keep >= 1.0 {
        return None;
    }
    let scale = 1.0 / keep;
    Some((0..len).map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 }).collect())
}

pub fn apply_mask(t: &mut Tensor, mask: &[f64]) {
    t.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
}
