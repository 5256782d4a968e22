//! Layer kernels. Convolution goes through im2col plus a GEMM; everything
//! here is deterministic for a fixed input regardless of worker count
//! (parallel work is split per image, and each output element is produced by
//! exactly one task).

use crate::nn::BN_EPS;
use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn new<E: Scalar>(x: &Tensor<E>, w: &Tensor<E>, stride: usize, pad: usize) -> Self {
        let (batch, in_ch, in_h, in_w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (out_ch, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        debug_assert_eq!(w.shape()[1], in_ch);
        let out_h = (in_h + 2 * pad - kh) / stride + 1;
        let out_w = (in_w + 2 * pad - kw) / stride + 1;
        ConvGeom {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    fn cols(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn rows_per_image(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unrolls one image (`[C, H, W]` slice) into `rows_per_image x cols`
/// patch rows.
fn im2col_image<E: Scalar>(img: &[E], g: &ConvGeom, col: &mut [E]) {
    let ckk = g.cols();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut col[(oy * g.out_w + ox) * ckk..(oy * g.out_w + ox + 1) * ckk];
            let iy0 = (oy * g.stride) as isize - g.pad as isize;
            let ix0 = (ox * g.stride) as isize - g.pad as isize;
            for c in 0..g.in_ch {
                let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
                for ky in 0..g.kh {
                    let iy = iy0 + ky as isize;
                    let dst = &mut row[(c * g.kh + ky) * g.kw..(c * g.kh + ky + 1) * g.kw];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let line = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    if ix0 >= 0 && ix0 as usize + g.kw <= g.in_w {
                        dst.copy_from_slice(&line[ix0 as usize..ix0 as usize + g.kw]);
                    } else {
                        for kx in 0..g.kw {
                            let ix = ix0 + kx as isize;
                            dst[kx] = if ix < 0 || ix >= g.in_w as isize {
                                E::zero()
                            } else {
                                line[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatters patch-row gradients back onto one image.
fn col2im_image<E: Scalar>(col: &[E], g: &ConvGeom, img: &mut [E]) {
    let ckk = g.cols();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &col[(oy * g.out_w + ox) * ckk..(oy * g.out_w + ox + 1) * ckk];
            let iy0 = (oy * g.stride) as isize - g.pad as isize;
            let ix0 = (ox * g.stride) as isize - g.pad as isize;
            for c in 0..g.in_ch {
                let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
                for ky in 0..g.kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &row[(c * g.kh + ky) * g.kw..(c * g.kh + ky) * g.kw + g.kw];
                    let line = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for kx in 0..g.kw {
                        let ix = ix0 + kx as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            line[ix as usize] += src[kx];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. Returns the `[B, N, OH, OW]` output along with the
/// batch im2col matrix (`[B*OH*OW, C*KH*KW]`), which training keeps for the
/// backward pass.
pub(crate) fn conv_forward<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> (Tensor<E>, Tensor<E>) {
    let g = ConvGeom::new(x, w, stride, pad);
    let ckk = g.cols();
    let rpi = g.rows_per_image();
    let mut col = Tensor::zeros(vec![g.batch * rpi, ckk]);
    let mut y = Tensor::zeros(vec![g.batch, g.out_ch, g.out_h, g.out_w]);

    let in_img = g.in_ch * g.in_h * g.in_w;
    let out_img = g.out_ch * rpi;
    let xd = x.data();
    let wd = w.data().as_ptr() as usize;
    let bd = bias.data();

    col.data_mut()
        .par_chunks_mut(rpi * ckk)
        .zip(y.data_mut().par_chunks_mut(out_img))
        .enumerate()
        .for_each(|(b, (col_b, y_b))| {
            im2col_image(&xd[b * in_img..(b + 1) * in_img], &g, col_b);
            // Pre-fill with bias so the GEMM accumulates on top of it.
            for n in 0..g.out_ch {
                y_b[n * rpi..(n + 1) * rpi].fill(bd[n]);
            }
            // y_b viewed as [rpi x out_ch] with element (q, n) at n*rpi + q.
            unsafe {
                E::gemm(
                    rpi,
                    ckk,
                    g.out_ch,
                    E::one(),
                    col_b.as_ptr(),
                    ckk as isize,
                    1,
                    wd as *const E, // w as [ckk x out_ch]: transposed view
                    1,
                    ckk as isize,
                    E::one(),
                    y_b.as_mut_ptr(),
                    1,
                    rpi as isize,
                );
            }
        });
    (y, col)
}

/// Convolution backward: gradients for weights, bias and (unless this is the
/// first layer) the input.
pub(crate) fn conv_backward<E: Scalar>(
    x_shape: &[usize],
    w: &Tensor<E>,
    col: &Tensor<E>,
    dy: &Tensor<E>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Tensor<E>, Tensor<E>, Option<Tensor<E>>) {
    let g = ConvGeom {
        batch: x_shape[0],
        in_ch: x_shape[1],
        in_h: x_shape[2],
        in_w: x_shape[3],
        out_ch: w.shape()[0],
        kh: w.shape()[2],
        kw: w.shape()[3],
        stride,
        pad,
        out_h: dy.shape()[2],
        out_w: dy.shape()[3],
    };
    let ckk = g.cols();
    let rpi = g.rows_per_image();
    let rows = g.batch * rpi;
    let out_img = g.out_ch * rpi;

    // dy lives as [B, N, OH, OW]; re-pack to a [rows x N] row-major matrix.
    let mut dy_mat = vec![E::zero(); rows * g.out_ch];
    dy_mat
        .par_chunks_mut(rpi * g.out_ch)
        .zip(dy.data().par_chunks(out_img))
        .for_each(|(dst, src)| {
            for n in 0..g.out_ch {
                for q in 0..rpi {
                    dst[q * g.out_ch + n] = src[n * rpi + q];
                }
            }
        });

    // dW = dy_mat^T (N x rows) @ col (rows x ckk)
    let mut dw = Tensor::zeros(vec![g.out_ch, g.in_ch, g.kh, g.kw]);
    unsafe {
        E::gemm(
            g.out_ch,
            rows,
            ckk,
            E::one(),
            dy_mat.as_ptr(),
            1,
            g.out_ch as isize,
            col.data().as_ptr(),
            ckk as isize,
            1,
            E::zero(),
            dw.data_mut().as_mut_ptr(),
            ckk as isize,
            1,
        );
    }

    let mut db = Tensor::zeros(vec![g.out_ch]);
    {
        let dbd = db.data_mut();
        for img in dy.data().chunks_exact(out_img) {
            for n in 0..g.out_ch {
                let mut s = E::zero();
                for &v in &img[n * rpi..(n + 1) * rpi] {
                    s += v;
                }
                dbd[n] += s;
            }
        }
    }

    let dx = if need_dx {
        let mut dx = Tensor::zeros(x_shape.to_vec());
        let in_img = g.in_ch * g.in_h * g.in_w;
        let wd = w.data().as_ptr() as usize;
        dx.data_mut()
            .par_chunks_mut(in_img)
            .zip(dy_mat.par_chunks(rpi * g.out_ch))
            .for_each(|(dx_b, dy_b)| {
                // dcol_b = dy_b (rpi x N) @ w (N x ckk)
                let mut dcol = vec![E::zero(); rpi * ckk];
                unsafe {
                    E::gemm(
                        rpi,
                        g.out_ch,
                        ckk,
                        E::one(),
                        dy_b.as_ptr(),
                        g.out_ch as isize,
                        1,
                        wd as *const E,
                        ckk as isize,
                        1,
                        E::zero(),
                        dcol.as_mut_ptr(),
                        ckk as isize,
                        1,
                    );
                }
                col2im_image(&dcol, &g, dx_b);
            });
        Some(dx)
    } else {
        None
    };

    (dw, db, dx)
}

/// Max-pooling forward; records the flat in-plane argmax per output cell
/// (first maximum wins on ties, so the choice is deterministic).
pub(crate) fn maxpool_forward<E: Scalar>(
    x: &Tensor<E>,
    window: usize,
    stride: usize,
) -> (Tensor<E>, Vec<u32>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut y = Tensor::zeros(vec![b, c, oh, ow]);
    let mut argmax = vec![0u32; b * c * oh * ow];
    let xd = x.data();
    let yd = y.data_mut();
    for plane in 0..b * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut yd[plane * oh * ow..(plane + 1) * oh * ow];
        let am = &mut argmax[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = src[oy * stride * w + ox * stride];
                let mut best_idx = (oy * stride * w + ox * stride) as u32;
                for ky in 0..window {
                    let base = (oy * stride + ky) * w + ox * stride;
                    for kx in 0..window {
                        let v = src[base + kx];
                        if v > best {
                            best = v;
                            best_idx = (base + kx) as u32;
                        }
                    }
                }
                dst[oy * ow + ox] = best;
                am[oy * ow + ox] = best_idx;
            }
        }
    }
    (y, argmax)
}

pub(crate) fn maxpool_backward<E: Scalar>(
    x_shape: &[usize],
    argmax: &[u32],
    dy: &Tensor<E>,
) -> Tensor<E> {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let per_plane_out = dy.shape()[2] * dy.shape()[3];
    let mut dx = Tensor::zeros(vec![b, c, h, w]);
    let dxd = dx.data_mut();
    for plane in 0..b * c {
        let dst = &mut dxd[plane * h * w..(plane + 1) * h * w];
        let src = &dy.data()[plane * per_plane_out..(plane + 1) * per_plane_out];
        let am = &argmax[plane * per_plane_out..(plane + 1) * per_plane_out];
        for q in 0..per_plane_out {
            dst[am[q] as usize] += src[q];
        }
    }
    dx
}

pub(crate) fn relu_forward<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < E::zero() {
            *v = E::zero();
        }
    }
    y
}

pub(crate) fn relu_backward<E: Scalar>(x: &Tensor<E>, dy: &Tensor<E>) -> Tensor<E> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= E::zero() {
            *d = E::zero();
        }
    }
    dx
}

/// Per-channel statistics kept from the training-mode forward pass.
pub(crate) struct BnCache<E> {
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
}

/// Batchnorm in training mode: normalizes with batch statistics and folds the
/// batch into the running statistics (momentum update, unbiased variance).
pub(crate) fn batchnorm_train<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &mut Tensor<E>,
    running_var: &mut Tensor<E>,
) -> (Tensor<E>, BnCache<E>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let count = b * plane;
    let count_e = E::from_usize(count);
    let eps = E::from_f64(BN_EPS);
    let momentum = E::from_f64(crate::nn::BN_MOMENTUM);

    let mut y = Tensor::zeros(vec![b, c, h, w]);
    let mut mean = vec![E::zero(); c];
    let mut inv_std = vec![E::zero(); c];
    let xd = x.data();
    let yd = y.data_mut();
    for ch in 0..c {
        let mut sum = E::zero();
        for bi in 0..b {
            let s = &xd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
            for &v in s {
                sum += v;
            }
        }
        let mu = sum / count_e;
        let mut var_sum = E::zero();
        for bi in 0..b {
            let s = &xd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
            for &v in s {
                let d = v - mu;
                var_sum += d * d;
            }
        }
        let var = var_sum / count_e;
        let istd = (var + eps).sqrt().recip();
        mean[ch] = mu;
        inv_std[ch] = istd;

        let g = gamma.data()[ch];
        let be = beta.data()[ch];
        for bi in 0..b {
            let src = &xd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
            let dst = &mut yd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = g * (v - mu) * istd + be;
            }
        }

        // Unbiased variance goes into the running estimate.
        let unbiased = if count > 1 {
            var_sum / E::from_usize(count - 1)
        } else {
            var
        };
        let rm = &mut running_mean.data_mut()[ch];
        *rm = (E::one() - momentum) * *rm + momentum * mu;
        let rv = &mut running_var.data_mut()[ch];
        *rv = (E::one() - momentum) * *rv + momentum * unbiased;
    }
    (y, BnCache { mean, inv_std })
}

/// Batchnorm in inference mode (running statistics).
pub(crate) fn batchnorm_infer<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
) -> Tensor<E> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let eps = E::from_f64(BN_EPS);
    let mut y = Tensor::zeros(vec![b, c, h, w]);
    let xd = x.data();
    let yd = y.data_mut();
    for ch in 0..c {
        let mu = running_mean.data()[ch];
        let istd = (running_var.data()[ch] + eps).sqrt().recip();
        let g = gamma.data()[ch];
        let be = beta.data()[ch];
        for bi in 0..b {
            let src = &xd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
            let dst = &mut yd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = g * (v - mu) * istd + be;
            }
        }
    }
    y
}

/// Full training-mode batchnorm backward (gradient flows through the batch
/// mean and variance as well).
pub(crate) fn batchnorm_backward<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    cache: &BnCache<E>,
    dy: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let count = b * plane;
    let count_e = E::from_usize(count);

    let mut dx = Tensor::zeros(vec![b, c, h, w]);
    let mut dgamma = Tensor::zeros(vec![c]);
    let mut dbeta = Tensor::zeros(vec![c]);
    let xd = x.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for ch in 0..c {
        let mu = cache.mean[ch];
        let istd = cache.inv_std[ch];
        let g = gamma.data()[ch];

        let mut sum_dy = E::zero();
        let mut sum_dy_xhat = E::zero();
        for bi in 0..b {
            let xs = &xd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
            let ds = &dyd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
            for (&xv, &dv) in xs.iter().zip(ds) {
                sum_dy += dv;
                sum_dy_xhat += dv * (xv - mu) * istd;
            }
        }
        dbeta.data_mut()[ch] = sum_dy;
        dgamma.data_mut()[ch] = sum_dy_xhat;

        // dx = (gamma * istd / m) * (m*dy - sum(dy) - xhat * sum(dy*xhat))
        let scale = g * istd / count_e;
        for bi in 0..b {
            let xs = &xd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
            let ds = &dyd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
            let out = &mut dxd[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
            for ((o, &xv), &dv) in out.iter_mut().zip(xs).zip(ds) {
                let xhat = (xv - mu) * istd;
                *o = scale * (count_e * dv - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Mean softmax cross-entropy over a `[B, K]` logit matrix, with the gradient
/// w.r.t. the logits.
pub(crate) fn softmax_cross_entropy<E: Scalar>(
    logits: &Tensor<E>,
    labels: &[u8],
) -> (E, Tensor<E>) {
    let b = logits.shape()[0];
    let k = logits.shape()[1];
    debug_assert_eq!(b, labels.len());
    let inv_b = E::from_usize(b).recip();
    let mut dlogits = Tensor::zeros(vec![b, k]);
    let mut loss = E::zero();
    for (row, (&label, drow)) in logits
        .data()
        .chunks_exact(k)
        .zip(labels.iter().zip(dlogits.data_mut().chunks_exact_mut(k)))
    {
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let mut denom = E::zero();
        for (d, &v) in drow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *d = e;
            denom += e;
        }
        let inv_denom = denom.recip();
        for d in drow.iter_mut() {
            *d = *d * inv_denom * inv_b;
        }
        let li = label as usize;
        loss += denom.ln() - (row[li] - max);
        drow[li] -= inv_b;
    }
    (loss * inv_b, dlogits)
}
