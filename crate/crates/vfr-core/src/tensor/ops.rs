//! Forward operations and their gradient companions.
//!
//! Every function here is pure: inputs are borrowed, outputs are fresh
//! tensors. Convolution uses the cross-correlation convention (no kernel
//! flip). Parallel loops assign each output element to exactly one task
//! with a fixed sequential accumulation order, so results are bit-identical
//! regardless of thread count.

use rayon::prelude::*;

use super::{Result, Tensor, TensorError};

#[cfg(feature = "acc64")]
type Acc = f64;
#[cfg(not(feature = "acc64"))]
type Acc = f32;

/// Probability clamp for log-based losses.
pub const LOSS_EPS: f32 = 1e-7;

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

// ── convolution ──────────────────────────────────────────────────────

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Unfold one sample into a (cin*k*k, hout*wout) patch matrix.
/// Out-of-bounds positions (from padding) contribute zeros.
fn im2col(
    sample: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Vec<f32> {
    let spatial = hout * wout;
    let mut col = vec![0.0f32; cin * k * k * spatial];
    for ci in 0..cin {
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * spatial;
                for oh in 0..hout {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src_row = (ci * h + ih as usize) * w;
                    for ow in 0..wout {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        col[row + oh * wout + ow] = sample[src_row + iw as usize];
                    }
                }
            }
        }
    }
    col
}

/// Fold a patch-matrix gradient back onto the input sample, accumulating
/// overlapping contributions.
fn col2im_accumulate(
    dcol: &[f32],
    dsample: &mut [f32],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) {
    let spatial = hout * wout;
    for ci in 0..cin {
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * spatial;
                for oh in 0..hout {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + ih as usize) * w;
                    for ow in 0..wout {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dsample[dst_row + iw as usize] += dcol[row + oh * wout + ow];
                    }
                }
            }
        }
    }
}

fn conv2d_check(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, cin, h, w) = input.dims4("conv2d")?;
    let ws = weight.shape();
    if ws.len() != 4 {
        return Err(shape_err("conv2d", format!("weight must be rank 4, got {ws:?}")));
    }
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if kh != kw {
        return Err(shape_err("conv2d", format!("kernel must be square, got {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(shape_err(
            "conv2d",
            format!("weight input channels {wcin} != input channels {cin}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(shape_err(
            "conv2d",
            format!("bias shape {:?} != [{cout}]", bias.shape()),
        ));
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument { op: "conv2d", detail: "stride must be >= 1".into() });
    }
    if h + 2 * pad < kh || w + 2 * pad < kh {
        return Err(shape_err(
            "conv2d",
            format!("kernel {kh} exceeds padded input {}x{}", h + 2 * pad, w + 2 * pad),
        ));
    }
    Ok((n, cin, h, w, cout, kh))
}

/// 2-D cross-correlation over NCHW input with weight (Cout, Cin, k, k).
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, cin, h, w, cout, k) = conv2d_check(input, weight, bias, stride, pad)?;
    let hout = conv_out_extent(h, k, stride, pad);
    let wout = conv_out_extent(w, k, stride, pad);
    let spatial = hout * wout;
    let ckk = cin * k * k;

    let cols: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            im2col(&input.data()[ni * cin * h * w..(ni + 1) * cin * h * w], cin, h, w, k, stride, pad, hout, wout)
        })
        .collect();

    let mut out = vec![0.0f32; n * cout * spatial];
    out.par_chunks_mut(spatial).enumerate().for_each(|(idx, chunk)| {
        let ni = idx / cout;
        let co = idx % cout;
        let wrow = &weight.data()[co * ckk..(co + 1) * ckk];
        let col = &cols[ni];
        let b = bias.data()[co];
        for (s, o) in chunk.iter_mut().enumerate() {
            let mut acc: Acc = 0.0;
            for (r, &wv) in wrow.iter().enumerate() {
                acc += (wv as Acc) * (col[r * spatial + s] as Acc);
            }
            *o = acc as f32 + b;
        }
    });

    Tensor::new(vec![n, cout, hout, wout], out)
}

/// Gradients of [`conv2d`] with respect to input, weight, and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, cin, h, w) = input.dims4("conv2d_backward").expect("checked at forward");
    let ws = weight.shape();
    let (cout, k) = (ws[0], ws[2]);
    let (hout, wout) = (dout.shape()[2], dout.shape()[3]);
    let spatial = hout * wout;
    let ckk = cin * k * k;

    let cols: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            im2col(&input.data()[ni * cin * h * w..(ni + 1) * cin * h * w], cin, h, w, k, stride, pad, hout, wout)
        })
        .collect();

    // dW[co][r] = sum over samples of dot(dout[n][co], col[n][r])
    let mut dweight = vec![0.0f32; cout * ckk];
    dweight.par_chunks_mut(ckk).enumerate().for_each(|(co, wrow)| {
        for ni in 0..n {
            let drow = &dout.data()[(ni * cout + co) * spatial..(ni * cout + co + 1) * spatial];
            let col = &cols[ni];
            for (r, wr) in wrow.iter_mut().enumerate() {
                let crow = &col[r * spatial..(r + 1) * spatial];
                let mut acc: Acc = 0.0;
                for (dv, cv) in drow.iter().zip(crow) {
                    acc += (*dv as Acc) * (*cv as Acc);
                }
                *wr += acc as f32;
            }
        }
    });

    let mut dbias = vec![0.0f32; cout];
    for ni in 0..n {
        for (co, db) in dbias.iter_mut().enumerate() {
            let drow = &dout.data()[(ni * cout + co) * spatial..(ni * cout + co + 1) * spatial];
            let mut acc: Acc = 0.0;
            for dv in drow {
                acc += *dv as Acc;
            }
            *db += acc as f32;
        }
    }

    // dcol[n] = W^T (cout x ckk)  x  dout[n]; fold back with col2im.
    let mut dinput = vec![0.0f32; n * cin * h * w];
    dinput.par_chunks_mut(cin * h * w).enumerate().for_each(|(ni, dsample)| {
        let mut dcol = vec![0.0f32; ckk * spatial];
        for co in 0..cout {
            let drow = &dout.data()[(ni * cout + co) * spatial..(ni * cout + co + 1) * spatial];
            let wrow = &weight.data()[co * ckk..(co + 1) * ckk];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let dcrow = &mut dcol[r * spatial..(r + 1) * spatial];
                for (dc, dv) in dcrow.iter_mut().zip(drow) {
                    *dc += wv * dv;
                }
            }
        }
        col2im_accumulate(&dcol, dsample, cin, h, w, k, stride, pad, hout, wout);
    });

    (
        Tensor::new(input.shape().to_vec(), dinput).unwrap(),
        Tensor::new(weight.shape().to_vec(), dweight).unwrap(),
        Tensor::new(vec![cout], dbias).unwrap(),
    )
}

// ── transposed convolution ───────────────────────────────────────────

/// Transposed convolution (up-convolution). Weight layout (Cin, Cout, k, k);
/// output spatial extent is (H-1)*stride + k.
pub fn conv2d_transpose(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (n, cin, h, w) = input.dims4("conv2d_transpose")?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(shape_err(
            "conv2d_transpose",
            format!("weight must be (Cin, Cout, k, k), got {ws:?}"),
        ));
    }
    let (wcin, cout, k) = (ws[0], ws[1], ws[2]);
    if wcin != cin {
        return Err(shape_err(
            "conv2d_transpose",
            format!("weight input channels {wcin} != input channels {cin}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(shape_err(
            "conv2d_transpose",
            format!("bias shape {:?} != [{cout}]", bias.shape()),
        ));
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d_transpose",
            detail: "stride must be >= 1".into(),
        });
    }
    let hout = (h - 1) * stride + k;
    let wout = (w - 1) * stride + k;

    let mut out = vec![0.0f32; n * cout * hout * wout];
    out.par_chunks_mut(hout * wout).enumerate().for_each(|(idx, chunk)| {
        let ni = idx / cout;
        let co = idx % cout;
        let b = bias.data()[co];
        for (p, o) in chunk.iter_mut().enumerate() {
            let (oh, ow) = (p / wout, p % wout);
            let mut acc: Acc = 0.0;
            for kh in 0..k {
                if oh < kh || (oh - kh) % stride != 0 {
                    continue;
                }
                let ih = (oh - kh) / stride;
                if ih >= h {
                    continue;
                }
                for kw in 0..k {
                    if ow < kw || (ow - kw) % stride != 0 {
                        continue;
                    }
                    let iw = (ow - kw) / stride;
                    if iw >= w {
                        continue;
                    }
                    for ci in 0..cin {
                        let iv = input.data()[((ni * cin + ci) * h + ih) * w + iw];
                        let wv = weight.data()[((ci * cout + co) * k + kh) * k + kw];
                        acc += (iv as Acc) * (wv as Acc);
                    }
                }
            }
            *o = acc as f32 + b;
        }
    });

    Tensor::new(vec![n, cout, hout, wout], out)
}

/// Gradients of [`conv2d_transpose`].
pub fn conv2d_transpose_backward(
    input: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    stride: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, cin, h, w) = input.dims4("conv2d_transpose_backward").expect("checked at forward");
    let ws = weight.shape();
    let (cout, k) = (ws[1], ws[2]);
    let (hout, wout) = (dout.shape()[2], dout.shape()[3]);

    let mut dinput = vec![0.0f32; n * cin * h * w];
    dinput.par_chunks_mut(h * w).enumerate().for_each(|(idx, chunk)| {
        let ni = idx / cin;
        let ci = idx % cin;
        for (p, di) in chunk.iter_mut().enumerate() {
            let (ih, iw) = (p / w, p % w);
            let mut acc: Acc = 0.0;
            for co in 0..cout {
                let dbase = (ni * cout + co) * hout * wout;
                for kh in 0..k {
                    let oh = ih * stride + kh;
                    for kw in 0..k {
                        let ow = iw * stride + kw;
                        let dv = dout.data()[dbase + oh * wout + ow];
                        let wv = weight.data()[((ci * cout + co) * k + kh) * k + kw];
                        acc += (dv as Acc) * (wv as Acc);
                    }
                }
            }
            *di = acc as f32;
        }
    });

    let mut dweight = vec![0.0f32; cin * cout * k * k];
    dweight.par_chunks_mut(cout * k * k).enumerate().for_each(|(ci, wchunk)| {
        for ni in 0..n {
            for ih in 0..h {
                for iw in 0..w {
                    let iv = input.data()[((ni * cin + ci) * h + ih) * w + iw];
                    if iv == 0.0 {
                        continue;
                    }
                    for co in 0..cout {
                        let dbase = (ni * cout + co) * hout * wout;
                        for kh in 0..k {
                            let oh = ih * stride + kh;
                            for kw in 0..k {
                                let ow = iw * stride + kw;
                                wchunk[(co * k + kh) * k + kw] += iv * dout.data()[dbase + oh * wout + ow];
                            }
                        }
                    }
                }
            }
        }
    });

    let mut dbias = vec![0.0f32; cout];
    for ni in 0..n {
        for (co, db) in dbias.iter_mut().enumerate() {
            let dbase = (ni * cout + co) * hout * wout;
            let mut acc: Acc = 0.0;
            for dv in &dout.data()[dbase..dbase + hout * wout] {
                acc += *dv as Acc;
            }
            *db += acc as f32;
        }
    }

    (
        Tensor::new(input.shape().to_vec(), dinput).unwrap(),
        Tensor::new(weight.shape().to_vec(), dweight).unwrap(),
        Tensor::new(vec![cout], dbias).unwrap(),
    )
}

// ── pooling ──────────────────────────────────────────────────────────

/// 2x2 max pooling over disjoint windows. Requires even spatial extents.
/// Returns the pooled tensor and, per output element, the flat index of
/// its argmax in the input (first in row-major order on ties).
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = input.dims4("maxpool2x2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(
            "maxpool2x2",
            format!("spatial extents must be even, got {h}x{w}"),
        ));
    }
    let (hout, wout) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * hout * wout];
    let mut argmax = vec![0u32; out.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let obase = (ni * c + ci) * hout * wout;
            for oh in 0..hout {
                for ow in 0..wout {
                    let mut best_idx = base + (2 * oh) * w + 2 * ow;
                    let mut best = input.data()[best_idx];
                    for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oh + dh) * w + 2 * ow + dw;
                        let v = input.data()[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                    out[obase + oh * wout + ow] = best;
                    argmax[obase + oh * wout + ow] = best_idx as u32;
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, hout, wout], out)?, argmax))
}

/// Routes the upstream gradient entirely to each window's argmax position.
pub fn maxpool2x2_backward(input_shape: &[usize], argmax: &[u32], dout: &Tensor) -> Tensor {
    let mut dinput = Tensor::zeros(input_shape);
    let d = dinput.data_mut();
    for (i, &src) in argmax.iter().enumerate() {
        d[src as usize] += dout.data()[i];
    }
    dinput
}

// ── batch normalization ──────────────────────────────────────────────

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Per-channel batch statistics saved by the train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub inv_std: Vec<f32>,
}

fn bn_check(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4("batchnorm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "batchnorm",
            format!(
                "gamma/beta shapes {:?}/{:?} must be [{c}]",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok((n, c, h, w))
}

/// Train-mode forward: normalizes with batch statistics over (N, H, W) per
/// channel. Variance is the biased batch variance.
pub fn batchnorm_train(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<(Tensor, BnStats)> {
    let (n, c, h, w) = bn_check(input, gamma, beta)?;
    let count = n * h * w;
    if count <= 1 {
        return Err(TensorError::DegenerateBatchStats);
    }
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for (ci, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
        let mut sum: Acc = 0.0;
        let mut sum_sq: Acc = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for &x in &input.data()[base..base + h * w] {
                sum += x as Acc;
                sum_sq += (x as Acc) * (x as Acc);
            }
        }
        let mu = sum / count as Acc;
        *m = mu as f32;
        *v = ((sum_sq / count as Acc) - mu * mu).max(0.0) as f32;
    }
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

    let mut out = vec![0.0f32; input.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let (m, s) = (mean[ci], inv_std[ci]);
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for (o, &x) in out[base..base + h * w].iter_mut().zip(&input.data()[base..base + h * w]) {
                *o = (x - m) * s * g + b;
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BnStats { mean, var, inv_std },
    ))
}

/// Infer-mode forward using frozen running statistics.
pub fn batchnorm_infer(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let (n, c, h, w) = bn_check(input, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(shape_err(
            "batchnorm",
            format!("running stats length {} != channels {c}", running_mean.len()),
        ));
    }
    let mut out = vec![0.0f32; input.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let s = 1.0 / (running_var[ci] + eps).sqrt();
            let (m, g, b) = (running_mean[ci], gamma.data()[ci], beta.data()[ci]);
            for (o, &x) in out[base..base + h * w].iter_mut().zip(&input.data()[base..base + h * w]) {
                *o = (x - m) * s * g + b;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Spec-shaped entry point: train mode additionally updates the running
/// statistics in place by exponential moving average
/// (`new = (1 - momentum) * old + momentum * batch`).
pub fn batchnorm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut [f32],
    running_var: &mut [f32],
    mode: BnMode,
    eps: f32,
    momentum: f32,
) -> Result<Tensor> {
    match mode {
        BnMode::Train => {
            let (out, stats) = batchnorm_train(input, gamma, beta, eps)?;
            for (r, b) in running_mean.iter_mut().zip(&stats.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in running_var.iter_mut().zip(&stats.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            Ok(out)
        }
        BnMode::Infer => batchnorm_infer(input, gamma, beta, running_mean, running_var, eps),
    }
}

/// Gradients of train-mode batchnorm with respect to input, gamma, beta.
/// Accounts for the dependence of the batch statistics on the input.
pub fn batchnorm_train_backward(
    input: &Tensor,
    gamma: &Tensor,
    stats: &BnStats,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = input.dims4("batchnorm_backward").expect("checked at forward");
    let count = (n * h * w) as f32;
    let mut dinput = vec![0.0f32; input.numel()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ci in 0..c {
        let (m, s) = (stats.mean[ci], stats.inv_std[ci]);
        let g = gamma.data()[ci];
        let mut sum_dy: Acc = 0.0;
        let mut sum_dy_xhat: Acc = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for (&dy, &x) in dout.data()[base..base + h * w].iter().zip(&input.data()[base..base + h * w]) {
                sum_dy += dy as Acc;
                sum_dy_xhat += (dy as Acc) * (((x - m) * s) as Acc);
            }
        }
        dbeta[ci] = sum_dy as f32;
        dgamma[ci] = sum_dy_xhat as f32;
        let k1 = (sum_dy as f32) / count;
        let k2 = (sum_dy_xhat as f32) / count;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for (di, (&dy, &x)) in dinput[base..base + h * w]
                .iter_mut()
                .zip(dout.data()[base..base + h * w].iter().zip(&input.data()[base..base + h * w]))
            {
                let xhat = (x - m) * s;
                *di = g * s * (dy - k1 - xhat * k2);
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dinput).unwrap(),
        Tensor::new(vec![c], dgamma).unwrap(),
        Tensor::new(vec![c], dbeta).unwrap(),
    )
}

/// Gradients of infer-mode batchnorm (running statistics are constants).
pub fn batchnorm_infer_backward(
    input: &Tensor,
    gamma: &Tensor,
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = input.dims4("batchnorm_backward").expect("checked at forward");
    let mut dinput = vec![0.0f32; input.numel()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ci in 0..c {
        let s = 1.0 / (running_var[ci] + eps).sqrt();
        let m = running_mean[ci];
        let g = gamma.data()[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for ((di, &dy), &x) in dinput[base..base + h * w]
                .iter_mut()
                .zip(&dout.data()[base..base + h * w])
                .zip(&input.data()[base..base + h * w])
            {
                *di = dy * g * s;
                dgamma[ci] += dy * (x - m) * s;
                dbeta[ci] += dy;
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dinput).unwrap(),
        Tensor::new(vec![c], dgamma).unwrap(),
        Tensor::new(vec![c], dbeta).unwrap(),
    )
}

// ── elementwise ──────────────────────────────────────────────────────

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::new(
        input.shape().to_vec(),
        input.data().iter().map(|&x| x.max(0.0)).collect(),
    )
    .unwrap()
}

/// Passes gradient where x > 0; subgradient 0 at x = 0.
pub fn relu_backward(input: &Tensor, dout: &Tensor) -> Tensor {
    Tensor::new(
        input.shape().to_vec(),
        input
            .data()
            .iter()
            .zip(dout.data())
            .map(|(&x, &dy)| if x > 0.0 { dy } else { 0.0 })
            .collect(),
    )
    .unwrap()
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    Tensor::new(
        input.shape().to_vec(),
        input.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
    )
    .unwrap()
}

pub fn sigmoid_backward(output: &Tensor, dout: &Tensor) -> Tensor {
    Tensor::new(
        output.shape().to_vec(),
        output
            .data()
            .iter()
            .zip(dout.data())
            .map(|(&y, &dy)| dy * y * (1.0 - y))
            .collect(),
    )
    .unwrap()
}

/// Elementwise product of same-shape tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "mul",
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
    )
}

/// Sum of all elements as a scalar tensor.
pub fn sum(input: &Tensor) -> Tensor {
    let mut acc: Acc = 0.0;
    for &x in input.data() {
        acc += x as Acc;
    }
    Tensor::scalar(acc as f32)
}

// ── reductions over space and channels ───────────────────────────────

/// Per-channel spatial mean: NCHW -> NC. No trainable parameters.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    let inv = 1.0 / (h * w) as f32;
    let mut out = vec![0.0f32; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let mut acc: Acc = 0.0;
            for &x in &input.data()[base..base + h * w] {
                acc += x as Acc;
            }
            out[ni * c + ci] = acc as f32 * inv;
        }
    }
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], dout: &Tensor) -> Tensor {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let inv = 1.0 / (h * w) as f32;
    let mut dinput = Tensor::zeros(input_shape);
    let d = dinput.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let g = dout.data()[ni * c + ci] * inv;
            let base = (ni * c + ci) * h * w;
            for di in &mut d[base..base + h * w] {
                *di = g;
            }
        }
    }
    dinput
}

/// Concatenate along the channel axis; `a`'s channels precede `b`'s.
/// Batch and spatial extents must match exactly (no implicit crop).
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ha, wa) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if na != nb || ha != hb || wa != wb {
        return Err(shape_err(
            "concat_channels",
            format!(
                "batch/spatial extents differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            ),
        ));
    }
    let spatial = ha * wa;
    let mut out = vec![0.0f32; na * (ca + cb) * spatial];
    for ni in 0..na {
        let dst = ni * (ca + cb) * spatial;
        out[dst..dst + ca * spatial]
            .copy_from_slice(&a.data()[ni * ca * spatial..(ni + 1) * ca * spatial]);
        out[dst + ca * spatial..dst + (ca + cb) * spatial]
            .copy_from_slice(&b.data()[ni * cb * spatial..(ni + 1) * cb * spatial]);
    }
    Tensor::new(vec![na, ca + cb, ha, wa], out)
}

/// Split a channel-concatenated tensor back at `ca`. Inverse of
/// [`concat_channels`], also used to route its gradient.
pub fn split_channels(t: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = t.dims4("split_channels")?;
    if ca == 0 || ca >= c {
        return Err(TensorError::InvalidArgument {
            op: "split_channels",
            detail: format!("split point {ca} outside 1..{c}"),
        });
    }
    let cb = c - ca;
    let spatial = h * w;
    let mut a = vec![0.0f32; n * ca * spatial];
    let mut b = vec![0.0f32; n * cb * spatial];
    for ni in 0..n {
        let src = ni * c * spatial;
        a[ni * ca * spatial..(ni + 1) * ca * spatial]
            .copy_from_slice(&t.data()[src..src + ca * spatial]);
        b[ni * cb * spatial..(ni + 1) * cb * spatial]
            .copy_from_slice(&t.data()[src + ca * spatial..src + c * spatial]);
    }
    Ok((
        Tensor::new(vec![n, ca, h, w], a)?,
        Tensor::new(vec![n, cb, h, w], b)?,
    ))
}

// ── dense / softmax ──────────────────────────────────────────────────

/// Affine map per batch row: (N, Cin) x (Cout, Cin)^T + bias -> (N, Cout).
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, cin) = input.dims2("dense")?;
    let (cout, wcin) = weight.dims2("dense")?;
    if wcin != cin {
        return Err(shape_err(
            "dense",
            format!("weight input features {wcin} != input features {cin}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(shape_err("dense", format!("bias shape {:?} != [{cout}]", bias.shape())));
    }
    let mut out = vec![0.0f32; n * cout];
    for ni in 0..n {
        let xrow = &input.data()[ni * cin..(ni + 1) * cin];
        for co in 0..cout {
            let wrow = &weight.data()[co * cin..(co + 1) * cin];
            let mut acc: Acc = 0.0;
            for (&x, &wv) in xrow.iter().zip(wrow) {
                acc += (x as Acc) * (wv as Acc);
            }
            out[ni * cout + co] = acc as f32 + bias.data()[co];
        }
    }
    Tensor::new(vec![n, cout], out)
}

pub fn dense_backward(input: &Tensor, weight: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, cin) = input.dims2("dense_backward").expect("checked at forward");
    let cout = weight.shape()[0];
    let mut dinput = vec![0.0f32; n * cin];
    let mut dweight = vec![0.0f32; cout * cin];
    let mut dbias = vec![0.0f32; cout];
    for ni in 0..n {
        let xrow = &input.data()[ni * cin..(ni + 1) * cin];
        let drow = &dout.data()[ni * cout..(ni + 1) * cout];
        for (co, &dy) in drow.iter().enumerate() {
            dbias[co] += dy;
            let wrow = &weight.data()[co * cin..(co + 1) * cin];
            for (j, (&x, &wv)) in xrow.iter().zip(wrow).enumerate() {
                dinput[ni * cin + j] += dy * wv;
                dweight[co * cin + j] += dy * x;
            }
        }
    }
    (
        Tensor::new(vec![n, cin], dinput).unwrap(),
        Tensor::new(vec![cout, cin], dweight).unwrap(),
        Tensor::new(vec![cout], dbias).unwrap(),
    )
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, c) = logits.dims2("softmax")?;
    let mut out = vec![0.0f32; n * c];
    for ni in 0..n {
        let row = &logits.data()[ni * c..(ni + 1) * c];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let orow = &mut out[ni * c..(ni + 1) * c];
        let mut denom: Acc = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            let e = (x - max).exp();
            *o = e;
            denom += e as Acc;
        }
        let inv = 1.0 / denom as f32;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// dlogits = y * (dy - sum_j dy_j * y_j) per row, using the saved output y.
pub fn softmax_backward(output: &Tensor, dout: &Tensor) -> Tensor {
    let (n, c) = output.dims2("softmax_backward").expect("checked at forward");
    let mut dinput = vec![0.0f32; n * c];
    for ni in 0..n {
        let yrow = &output.data()[ni * c..(ni + 1) * c];
        let drow = &dout.data()[ni * c..(ni + 1) * c];
        let mut dot: Acc = 0.0;
        for (&y, &dy) in yrow.iter().zip(drow) {
            dot += (y as Acc) * (dy as Acc);
        }
        let dot = dot as f32;
        for (j, di) in dinput[ni * c..(ni + 1) * c].iter_mut().enumerate() {
            *di = yrow[j] * (drow[j] - dot);
        }
    }
    Tensor::new(vec![n, c], dinput).unwrap()
}

// ── losses ───────────────────────────────────────────────────────────

/// Mean binary cross-entropy between a {0,1} target and a probability
/// tensor. Probabilities are clamped to [eps, 1-eps].
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(shape_err(
            "bce_loss",
            format!("shapes {:?} and {:?} differ", pred.shape(), target.shape()),
        ));
    }
    let m = pred.numel() as Acc;
    let mut acc: Acc = 0.0;
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let p = p.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
        acc += (y as Acc) * (p.ln() as Acc) + ((1.0 - y) as Acc) * ((1.0 - p).ln() as Acc);
    }
    Ok(Tensor::scalar((-acc / m) as f32))
}

pub fn bce_loss_backward(pred: &Tensor, target: &Tensor, dloss: f32) -> Tensor {
    let m = pred.numel() as f32;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            if p <= LOSS_EPS || p >= 1.0 - LOSS_EPS {
                0.0 // clamped region: the loss is locally constant in p
            } else {
                dloss * (p - y) / (p * (1.0 - p) * m)
            }
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data).unwrap()
}

/// Mean categorical cross-entropy of softmax outputs against class indices.
pub fn cross_entropy_loss(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = probs.dims2("cross_entropy_loss")?;
    if labels.len() != n {
        return Err(shape_err(
            "cross_entropy_loss",
            format!("{} labels for batch of {n}", labels.len()),
        ));
    }
    let mut acc: Acc = 0.0;
    for (ni, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy_loss",
                detail: format!("label {label} out of range for {c} classes"),
            });
        }
        let p = probs.data()[ni * c + label].clamp(LOSS_EPS, 1.0 - LOSS_EPS);
        acc += p.ln() as Acc;
    }
    Ok(Tensor::scalar((-acc / n as Acc) as f32))
}

pub fn cross_entropy_loss_backward(probs: &Tensor, labels: &[usize], dloss: f32) -> Tensor {
    let (n, c) = probs.dims2("cross_entropy_loss_backward").expect("checked at forward");
    let mut dprobs = vec![0.0f32; n * c];
    for (ni, &label) in labels.iter().enumerate() {
        let p = probs.data()[ni * c + label];
        if p > LOSS_EPS && p < 1.0 - LOSS_EPS {
            dprobs[ni * c + label] = -dloss / (p * n as f32);
        }
    }
    Tensor::new(vec![n, c], dprobs).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nchw(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let input = Tensor::from_fn(&[1, 1, 5, 5], |i| i as f32 * 0.3 - 2.0);
        let mut kernel = vec![0.0f32; 9];
        kernel[4] = 1.0; // center weight
        let weight = nchw(1, 1, 3, 3, kernel);
        let bias = Tensor::zeros(&[1]);
        let out = conv2d(&input, &weight, &bias, 1, 1).unwrap();
        assert_eq!(out.shape(), input.shape());
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        let input = Tensor::full(&[1, 1, 4, 4], 1.0);
        let weight = Tensor::full(&[1, 1, 3, 3], 1.0);
        let bias = Tensor::zeros(&[1]);
        let out = conv2d(&input, &weight, &bias, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv2d_output_extent_formula() {
        // floor((H + 2*pad - k) / stride) + 1 per axis
        let input = Tensor::zeros(&[1, 2, 7, 5]);
        let weight = Tensor::zeros(&[4, 2, 3, 3]);
        let bias = Tensor::zeros(&[4]);
        let out = conv2d(&input, &weight, &bias, 2, 1).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4, 3]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let input = Tensor::zeros(&[1, 3, 4, 4]);
        let weight = Tensor::zeros(&[8, 2, 3, 3]);
        let bias = Tensor::zeros(&[8]);
        let err = conv2d(&input, &weight, &bias, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'), "error should name the dimensions: {msg}");
    }

    #[test]
    fn conv2d_transpose_doubles_extent_with_k2_s2() {
        let input = Tensor::zeros(&[1, 3, 14, 14]);
        let weight = Tensor::zeros(&[3, 5, 2, 2]);
        let bias = Tensor::zeros(&[5]);
        let out = conv2d_transpose(&input, &weight, &bias, 2).unwrap();
        assert_eq!(out.shape(), &[1, 5, 28, 28]); // (14-1)*2 + 2
    }

    #[test]
    fn conv2d_transpose_broadcasts_single_pixel() {
        let input = nchw(1, 1, 1, 1, vec![3.5]);
        let weight = Tensor::full(&[1, 1, 2, 2], 1.0);
        let bias = Tensor::zeros(&[1]);
        let out = conv2d_transpose(&input, &weight, &bias, 2).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn maxpool_then_upconv_restores_extents() {
        let input = Tensor::from_fn(&[1, 2, 6, 8], |i| i as f32);
        let (pooled, _) = maxpool2x2(&input).unwrap();
        let weight = Tensor::zeros(&[2, 2, 2, 2]);
        let bias = Tensor::zeros(&[2]);
        let restored = conv2d_transpose(&pooled, &weight, &bias, 2).unwrap();
        assert_eq!(&restored.shape()[2..], &input.shape()[2..]);
    }

    #[test]
    fn maxpool_takes_window_max() {
        let input = nchw(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let (out, argmax) = maxpool2x2(&input).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(argmax, vec![3]);
    }

    #[test]
    fn maxpool_constant_input_halves_extents() {
        let input = Tensor::full(&[2, 3, 4, 6], 7.5);
        let (out, _) = maxpool2x2(&input).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2, 3]);
        assert!(out.data().iter().all(|&v| v == 7.5));
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let input = Tensor::zeros(&[1, 1, 3, 4]);
        assert!(maxpool2x2(&input).is_err());
    }

    #[test]
    fn maxpool_backward_routes_to_argmax_only() {
        let input = nchw(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let (_, argmax) = maxpool2x2(&input).unwrap();
        let dout = Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        let dinput = maxpool2x2_backward(input.shape(), &argmax, &dout);
        assert_eq!(dinput.data(), &[0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn batchnorm_train_normalizes_per_channel() {
        let input = Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f32 * 0.7).sin() * 3.0 + 1.0);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let (out, _) = batchnorm_train(&input, &gamma, &beta, BN_EPS).unwrap();
        let (n, c, h, w) = out.dims4("test").unwrap();
        for ci in 0..c {
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        let v = out.at4(ni, ci, hi, wi) as f64;
                        sum += v;
                        sum_sq += v * v;
                    }
                }
            }
            let count = (n * h * w) as f64;
            let mean = sum / count;
            let var = sum_sq / count - mean * mean;
            assert!(mean.abs() < 1e-5, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {ci} var {var}");
        }
    }

    #[test]
    fn batchnorm_infer_with_identity_stats_is_identity() {
        let input = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f32 * 0.1 - 0.5);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let out = batchnorm_infer(&input, &gamma, &beta, &[0.0, 0.0], &[1.0, 1.0], BN_EPS).unwrap();
        for (o, i) in out.data().iter().zip(input.data()) {
            assert!((o - i).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_train_rejects_single_element_statistics() {
        let input = Tensor::zeros(&[1, 4, 1, 1]);
        let gamma = Tensor::full(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let err = batchnorm_train(&input, &gamma, &beta, BN_EPS).unwrap_err();
        assert!(matches!(err, TensorError::DegenerateBatchStats));
    }

    #[test]
    fn batchnorm_train_updates_running_stats_by_ema() {
        let input = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f32);
        let gamma = Tensor::full(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        batchnorm(&input, &gamma, &beta, &mut rm, &mut rv, BnMode::Train, BN_EPS, BN_MOMENTUM).unwrap();
        // batch mean of 0..8 is 3.5, biased var is 5.25
        assert!((rm[0] - 0.1 * 3.5).abs() < 1e-6);
        assert!((rv[0] - (0.9 * 1.0 + 0.1 * 5.25)).abs() < 1e-5);
    }

    #[test]
    fn relu_clamps_negatives() {
        let input = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&input).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_all_negative_zeroes_output_and_gradient() {
        let input = Tensor::full(&[2, 4], -3.0);
        let out = relu(&input);
        assert!(out.data().iter().all(|&v| v == 0.0));
        let dout = Tensor::full(&[2, 4], 1.0);
        let dinput = relu_backward(&input, &dout);
        assert!(dinput.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gap_of_constant_channel_is_the_constant() {
        let input = Tensor::full(&[1, 3, 5, 5], 2.25);
        let out = global_avg_pool(&input).unwrap();
        assert_eq!(out.shape(), &[1, 3]);
        assert!(out.data().iter().all(|&v| v == 2.25));
    }

    #[test]
    fn gap_averages_spatial_values() {
        let input = nchw(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let out = global_avg_pool(&input).unwrap();
        assert_eq!(out.data(), &[2.5]);
    }

    #[test]
    fn gap_backward_spreads_gradient_uniformly() {
        let dout = Tensor::new(vec![1, 1], vec![8.0]).unwrap();
        let dinput = global_avg_pool_backward(&[1, 1, 2, 2], &dout);
        assert_eq!(dinput.data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_adds_channels_and_splits_back_exactly() {
        let a = Tensor::from_fn(&[1, 32, 7, 7], |i| i as f32 * 0.01);
        let b = Tensor::from_fn(&[1, 32, 7, 7], |i| 100.0 - i as f32 * 0.02);
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), &[1, 64, 7, 7]);
        let (a2, b2) = split_channels(&cat, 32).unwrap();
        assert_eq!(a2.data(), a.data());
        assert_eq!(b2.data(), b.data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::zeros(&[1, 2, 4, 4]);
        let b = Tensor::zeros(&[1, 2, 4, 5]);
        assert!(concat_channels(&a, &b).is_err());
    }

    #[test]
    fn dense_identity_weight_passes_through() {
        let input = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let weight = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let bias = Tensor::zeros(&[3]);
        let out = dense(&input, &weight, &bias).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn softmax_uniform_logits_give_uniform_rows() {
        let logits = Tensor::full(&[2, 60], 3.0);
        let probs = softmax(&logits).unwrap();
        for &p in probs.data() {
            assert!((p - 1.0 / 60.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let logits = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let probs = softmax(&logits).unwrap();
        assert!(probs.all_finite());
        assert!((probs.data()[0] - 1.0).abs() < 1e-6);
        assert!(probs.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let shifted = Tensor::new(vec![1, 4], vec![100.3, 98.8, 102.0, 100.7]).unwrap();
        let a = softmax(&logits).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Tensor::from_fn(&[5, 7], |i| ((i * 37) % 11) as f32 - 5.0);
        let probs = softmax(&logits).unwrap();
        for row in probs.data().chunks(7) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn forward_ops_stay_finite_on_finite_inputs() {
        let input = Tensor::from_fn(&[2, 3, 4, 4], |i| ((i as f32) * 1.7).cos() * 50.0);
        let weight = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i as f32) * 0.9).sin());
        let bias = Tensor::from_fn(&[4], |i| i as f32);
        let out = conv2d(&input, &weight, &bias, 1, 1).unwrap();
        assert!(out.all_finite());
        assert!(relu(&out).all_finite());
        assert!(sigmoid(&out).all_finite());
        let (pooled, _) = maxpool2x2(&out).unwrap();
        assert!(pooled.all_finite());
        assert!(global_avg_pool(&pooled).unwrap().all_finite());
    }

    #[test]
    fn determinism_same_inputs_same_bits() {
        let input = Tensor::from_fn(&[2, 3, 6, 6], |i| ((i as f32) * 0.31).sin());
        let weight = Tensor::from_fn(&[5, 3, 3, 3], |i| ((i as f32) * 0.17).cos());
        let bias = Tensor::from_fn(&[5], |i| i as f32 * 0.01);
        let a = conv2d(&input, &weight, &bias, 1, 1).unwrap();
        let b = conv2d(&input, &weight, &bias, 1, 1).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
