//! NN operators: convolution, ReLU, pooling, batch norm, linear, residual
//! add. Each float operator has a fake-quantized twin that rounds weights and
//! outputs onto a fixed-point grid; accumulation stays in exact real
//! arithmetic.

use super::Tensor;
use crate::error::{QfxError, Result};
use crate::fixedpoint::{self, QFormat};
use rayon::prelude::*;

/// Convolution layer parameters, NCHW / OIHW layout, zero padding,
/// cross-correlation convention.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

impl ConvParams {
    pub fn new(
        weights: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if weights.rank() != 4 {
            return Err(QfxError::ShapeMismatch {
                op: "ConvParams".into(),
                detail: format!("weights must be [out,in,kh,kw], got rank {}", weights.rank()),
            });
        }
        if stride == 0 {
            return Err(QfxError::Config("conv stride must be positive".into()));
        }
        let s = weights.shape();
        let (out_channels, in_channels, kernel_h, kernel_w) = (s[0], s[1], s[2], s[3]);
        if let Some(b) = &bias {
            if b.shape() != [out_channels] {
                return Err(QfxError::ShapeMismatch {
                    op: "ConvParams".into(),
                    detail: format!(
                        "bias shape {:?} != [out_channels = {out_channels}]",
                        b.shape()
                    ),
                });
            }
        }
        Ok(ConvParams {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weights,
            bias,
        })
    }
}

/// Network-wide fake-quantization switch: one format for weights, one for
/// activations. With `enabled` false every op is bit-identical to its float
/// form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    pub weight_format: QFormat,
    pub activation_format: QFormat,
    pub enabled: bool,
}

impl QuantConfig {
    pub fn new(weight_format: QFormat, activation_format: QFormat) -> Self {
        QuantConfig {
            weight_format,
            activation_format,
            enabled: true,
        }
    }

    /// Same format for weights and activations, as in the bit-width sweeps.
    pub fn uniform(format: QFormat) -> Self {
        QuantConfig::new(format, format)
    }

    pub fn off() -> Self {
        let fmt = QFormat::new(16, 16).expect("static format");
        QuantConfig {
            weight_format: fmt,
            activation_format: fmt,
            enabled: false,
        }
    }
}

/// Per-channel batch-norm statistics and affine parameters.
#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
    pub eps: f64,
}

impl BnParams {
    pub fn new(gamma: Tensor, beta: Tensor, mean: Tensor, var: Tensor, eps: f64) -> Result<Self> {
        let c = gamma.len();
        for (name, t) in [("beta", &beta), ("mean", &mean), ("var", &var)] {
            if t.len() != c || t.rank() != 1 {
                return Err(QfxError::ShapeMismatch {
                    op: "BnParams".into(),
                    detail: format!("{name} shape {:?} != [{c}]", t.shape()),
                });
            }
        }
        Ok(BnParams {
            gamma,
            beta,
            mean,
            var,
            eps,
        })
    }

    /// Identity statistics for `channels` (gamma 1, beta 0, mean 0, var 1).
    pub fn identity(channels: usize, eps: f64) -> Self {
        BnParams {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            mean: Tensor::zeros(&[channels]),
            var: Tensor::filled(&[channels], 1.0),
            eps,
        }
    }

    /// Per-channel (scale, shift) with y = scale * x + shift.
    pub fn scale_shift(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.gamma.len();
        let mut scale = vec![0.0; c];
        let mut shift = vec![0.0; c];
        for i in 0..c {
            let denom = self.var.data()[i] + self.eps;
            if denom <= 0.0 {
                return Err(QfxError::NonPositiveVariance(denom));
            }
            scale[i] = self.gamma.data()[i] / denom.sqrt();
            shift[i] = self.beta.data()[i] - self.mean.data()[i] * scale[i];
        }
        Ok((scale, shift))
    }
}

fn dims4(t: &Tensor, op: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(QfxError::ShapeMismatch {
            op: op.into(),
            detail: format!("expected rank-4 NCHW input, got shape {other:?}"),
        }),
    }
}

fn conv_out_dim(input: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// 2-D cross-correlation with zero padding: output [N, O, H', W'] with
/// H' = (H + 2 pad - kh) / stride + 1.
pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    conv2d_with(input, &p.weights, p.bias.as_ref(), p)
}

/// Fake-quantized convolution: weights rounded to the weight grid, bias to
/// the activation grid, exact real accumulation, output rounded to the
/// activation grid. The input is assumed to be on the activation grid
/// already.
pub fn conv2d_quant(input: &Tensor, p: &ConvParams, qc: &QuantConfig) -> Result<Tensor> {
    if !qc.enabled {
        return conv2d(input, p);
    }
    let wq = quantize_tensor(&p.weights, qc.weight_format)?;
    let bq = match &p.bias {
        Some(b) => Some(quantize_tensor(b, qc.activation_format)?),
        None => None,
    };
    let out = conv2d_with(input, &wq, bq.as_ref(), p)?;
    quantize_tensor(&out, qc.activation_format)
}

fn conv2d_with(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    p: &ConvParams,
) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "conv2d")?;
    if c != p.in_channels {
        return Err(QfxError::ShapeMismatch {
            op: "conv2d".into(),
            detail: format!("input channel dim {c} != layer in_channels {}", p.in_channels),
        });
    }
    let out_h = conv_out_dim(h, p.padding, p.kernel_h, p.stride).ok_or_else(|| {
        QfxError::ShapeMismatch {
            op: "conv2d".into(),
            detail: format!(
                "input height {h} (+2*{}) smaller than kernel height {}",
                p.padding, p.kernel_h
            ),
        }
    })?;
    let out_w = conv_out_dim(w, p.padding, p.kernel_w, p.stride).ok_or_else(|| {
        QfxError::ShapeMismatch {
            op: "conv2d".into(),
            detail: format!(
                "input width {w} (+2*{}) smaller than kernel width {}",
                p.padding, p.kernel_w
            ),
        }
    })?;

    let k = c * p.kernel_h * p.kernel_w;
    let out_hw = out_h * out_w;
    let mut output = Tensor::zeros(&[n, p.out_channels, out_h, out_w]);
    let in_stride = c * h * w;

    let run_one = |batch_input: &[f64], batch_output: &mut [f64]| {
        let mut col = vec![0.0; k * out_hw];
        im2col_into(
            batch_input,
            c,
            h,
            w,
            p.kernel_h,
            p.kernel_w,
            p.stride,
            p.padding,
            out_h,
            out_w,
            &mut col,
        );
        gemm_rows(
            weights.data(),
            &col,
            bias.map(Tensor::data),
            p.out_channels,
            k,
            out_hw,
            batch_output,
        );
    };

    let out_stride = p.out_channels * out_hw;
    if n >= 2 {
        output
            .data_mut()
            .par_chunks_mut(out_stride)
            .enumerate()
            .for_each(|(bi, out_slice)| {
                run_one(&input.data()[bi * in_stride..][..in_stride], out_slice);
            });
    } else {
        for bi in 0..n {
            let (in_off, out_off) = (bi * in_stride, bi * out_stride);
            let mut out_slice = vec![0.0; out_stride];
            run_one(&input.data()[in_off..][..in_stride], &mut out_slice);
            output.data_mut()[out_off..][..out_stride].copy_from_slice(&out_slice);
        }
    }
    output.check_finite("conv2d output")?;
    Ok(output)
}

/// Unfold padded input patches into a [k x out_hw] column matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col_into(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    col: &mut [f64],
) {
    let out_hw = out_h * out_w;
    for ic in 0..c {
        let plane = &input[ic * h * w..][..h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ic * kh + dy) * kw + dx;
                let dst = &mut col[row * out_hw..][..out_hw];
                for oy in 0..out_h {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    let seg = &mut dst[oy * out_w..][..out_w];
                    if iy < 0 || iy >= h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..][..w];
                    for (ox, slot) in seg.iter_mut().enumerate() {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        *slot = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// out[o, j] = bias[o] + sum_k weights[o, k] * col[k, j], k ascending, so the
/// accumulation order per output element is fixed.
fn gemm_rows(
    weights: &[f64],
    col: &[f64],
    bias: Option<&[f64]>,
    rows: usize,
    k: usize,
    cols: usize,
    out: &mut [f64],
) {
    for o in 0..rows {
        let orow = &mut out[o * cols..][..cols];
        orow.fill(bias.map_or(0.0, |b| b[o]));
        let wrow = &weights[o * k..][..k];
        for (ki, &wv) in wrow.iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            let crow = &col[ki * cols..][..cols];
            for (ov, &cv) in orow.iter_mut().zip(crow) {
                *ov += wv * cv;
            }
        }
    }
}

/// Elementwise max(0, x).
pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// ReLU then rounding onto the activation grid.
pub fn relu_quant(input: &Tensor, qc: &QuantConfig) -> Result<Tensor> {
    if !qc.enabled {
        return Ok(relu(input));
    }
    quantize_tensor(&relu(input), qc.activation_format)
}

/// Max pooling with window (wh, ww), no padding.
pub fn maxpool2d(input: &Tensor, window: (usize, usize), stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "maxpool2d")?;
    let (wh, ww) = window;
    if wh == 0 || ww == 0 || stride == 0 {
        return Err(QfxError::Config("maxpool window and stride must be positive".into()));
    }
    if wh > h || ww > w {
        return Err(QfxError::ShapeMismatch {
            op: "maxpool2d".into(),
            detail: format!("window {wh}x{ww} larger than input {h}x{w}"),
        });
    }
    let out_h = (h - wh) / stride + 1;
    let out_w = (w - ww) / stride + 1;
    let mut output = Tensor::zeros(&[n, c, out_h, out_w]);
    let odata = output.data_mut();
    let idata = input.data();
    for bi in 0..n {
        for ci in 0..c {
            let plane = &idata[(bi * c + ci) * h * w..][..h * w];
            let oplane = &mut odata[(bi * c + ci) * out_h * out_w..][..out_h * out_w];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..wh {
                        let row = &plane[(oy * stride + dy) * w..][..w];
                        for dx in 0..ww {
                            let v = row[ox * stride + dx];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    oplane[oy * out_w + ox] = best;
                }
            }
        }
    }
    Ok(output)
}

/// Mean over all spatial positions: [N,C,H,W] -> [N,C].
pub fn global_avgpool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "global_avgpool")?;
    let hw = (h * w) as f64;
    let mut output = Tensor::zeros(&[n, c]);
    let odata = output.data_mut();
    for bi in 0..n {
        for ci in 0..c {
            let plane = &input.data()[(bi * c + ci) * h * w..][..h * w];
            odata[bi * c + ci] = plane.iter().sum::<f64>() / hw;
        }
    }
    Ok(output)
}

/// Inference-mode batch norm: y = scale_c * x + shift_c with
/// scale = gamma / sqrt(var + eps), shift = beta - mean * scale.
pub fn batchnorm2d(input: &Tensor, bn: &BnParams) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "batchnorm2d")?;
    if c != bn.gamma.len() {
        return Err(QfxError::ShapeMismatch {
            op: "batchnorm2d".into(),
            detail: format!("input channel dim {c} != bn channels {}", bn.gamma.len()),
        });
    }
    let (scale, shift) = bn.scale_shift()?;
    let mut output = Tensor::zeros(&[n, c, h, w]);
    let odata = output.data_mut();
    for bi in 0..n {
        for ci in 0..c {
            let off = (bi * c + ci) * h * w;
            let (s, t) = (scale[ci], shift[ci]);
            for (ov, &iv) in odata[off..][..h * w].iter_mut().zip(&input.data()[off..][..h * w]) {
                *ov = s * iv + t;
            }
        }
    }
    Ok(output)
}

/// Fold inference-mode batch norm into the preceding convolution:
/// w' = w * scale_o, b' = (b - mean_o) * scale_o + beta_o.
pub fn batchnorm_fold(p: &ConvParams, bn: &BnParams) -> Result<ConvParams> {
    if bn.gamma.len() != p.out_channels {
        return Err(QfxError::ShapeMismatch {
            op: "batchnorm_fold".into(),
            detail: format!(
                "bn channels {} != conv out_channels {}",
                bn.gamma.len(),
                p.out_channels
            ),
        });
    }
    let (scale, shift) = bn.scale_shift()?;
    let per_filter = p.in_channels * p.kernel_h * p.kernel_w;
    let mut weights = p.weights.clone();
    for o in 0..p.out_channels {
        for wv in &mut weights.data_mut()[o * per_filter..][..per_filter] {
            *wv *= scale[o];
        }
    }
    let mut bias = vec![0.0; p.out_channels];
    for o in 0..p.out_channels {
        let b0 = p.bias.as_ref().map_or(0.0, |b| b.data()[o]);
        // shift already carries beta - mean*scale.
        bias[o] = b0 * scale[o] + shift[o];
    }
    ConvParams::new(
        weights,
        Some(Tensor::from_vec(&[p.out_channels], bias)?),
        p.stride,
        p.padding,
    )
}

/// Fully connected layer: input [N, D] x weight [K, D] + bias [K] -> [N, K].
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d) = match input.shape() {
        [n, d] => (*n, *d),
        other => {
            return Err(QfxError::ShapeMismatch {
                op: "linear".into(),
                detail: format!("expected rank-2 input, got {other:?}"),
            })
        }
    };
    let (kk, dd) = match weight.shape() {
        [k, d2] => (*k, *d2),
        other => {
            return Err(QfxError::ShapeMismatch {
                op: "linear".into(),
                detail: format!("expected rank-2 weight, got {other:?}"),
            })
        }
    };
    if d != dd {
        return Err(QfxError::ShapeMismatch {
            op: "linear".into(),
            detail: format!("input feature dim {d} != weight in dim {dd}"),
        });
    }
    let mut output = Tensor::zeros(&[n, kk]);
    let odata = output.data_mut();
    for bi in 0..n {
        let row = &input.data()[bi * d..][..d];
        for ko in 0..kk {
            let wrow = &weight.data()[ko * d..][..d];
            let mut acc = bias.map_or(0.0, |b| b.data()[ko]);
            for (x, wv) in row.iter().zip(wrow) {
                acc += x * wv;
            }
            odata[bi * kk + ko] = acc;
        }
    }
    Ok(output)
}

/// Elementwise sum of two tensors of identical shape.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(QfxError::ShapeMismatch {
            op: "add".into(),
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Elementwise fixed-point rounding onto the grid of `q`.
pub fn quantize_tensor(t: &Tensor, q: QFormat) -> Result<Tensor> {
    let mut data = Vec::with_capacity(t.len());
    for &x in t.data() {
        data.push(fixedpoint::quantize(x, q)?);
    }
    Tensor::from_vec(t.shape(), data)
}
