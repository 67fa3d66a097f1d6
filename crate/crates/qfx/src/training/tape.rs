//! Recorded forward pass and exact reverse-mode gradients for the backbone
//! operator set.
//!
//! `tape_forward` mirrors the inference interpreter but runs batch-norm on
//! batch statistics and records per-layer values; `tape_backward` walks the
//! record in reverse. In QAT mode every quantization point caches its
//! pre-quantization tensor and the backward pass applies the clipped
//! straight-through estimator there.

use crate::backbone::{BackboneModel, ConvSpec, LayerSpec};
use crate::error::{QfxError, Result};
use crate::fixedpoint::QFormat;
use crate::tensor::{self, QuantConfig, Tensor};
use std::collections::BTreeMap;

/// Gradients keyed by weight-store name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Straight-through estimator, clipped at the saturation boundary: gradient
/// passes where the pre-quantization input is strictly inside
/// (min_value, max_value) of `q`, and is zero where the quantizer saturated.
pub fn ste_backward(grad_out: &Tensor, pre_quant_input: &Tensor, q: QFormat) -> Tensor {
    assert_eq!(
        grad_out.shape(),
        pre_quant_input.shape(),
        "ste_backward shape mismatch"
    );
    let data = grad_out
        .data()
        .iter()
        .zip(pre_quant_input.data())
        .map(|(&g, &x)| if q.is_interior(x) { g } else { 0.0 })
        .collect();
    Tensor::from_vec(grad_out.shape(), data).expect("same shape")
}

struct ConvCache {
    spec: ConvSpec,
    input: Tensor,
    /// Weights actually used in the forward (quantized under QAT).
    used_weights: Tensor,
    /// Float master weights, kept for the weight-quantizer STE mask.
    float_weights: Option<Tensor>,
    /// Conv output before activation quantization (QAT only).
    pre_q_out: Option<Tensor>,
}

struct BnCache {
    name: String,
    gamma: Tensor,
    x_hat: Tensor,
    inv_std: Vec<f64>,
    per_channel_count: usize,
    pre_q_out: Option<Tensor>,
}

enum Step {
    Conv(ConvCache),
    Bn(BnCache),
    Relu {
        input: Tensor,
        pre_q_out: Option<Tensor>,
    },
    MaxPool {
        argmax: Vec<usize>,
        in_shape: Vec<usize>,
    },
    ResBegin,
    ResAdd {
        projection: Option<(ConvCache, BnCache)>,
        pre_q_out: Option<Tensor>,
    },
    AvgPool {
        in_shape: Vec<usize>,
        pre_q_out: Option<Tensor>,
    },
}

/// Recorded forward values sufficient for exact reverse-mode gradients.
pub struct Tape {
    steps: Vec<Step>,
    qc: Option<QuantConfig>,
    pub features: Tensor,
    /// (bn name, batch mean, unbiased batch var) per batch-norm layer, in
    /// execution order; the trainer folds these into running statistics.
    pub bn_batch_stats: Vec<(String, Tensor, Tensor)>,
}

/// Training-mode forward: batch-norm uses batch statistics; in QAT mode the
/// quantization points match the inference interpreter exactly.
pub fn tape_forward(
    model: &BackboneModel,
    input: &Tensor,
    qc: Option<&QuantConfig>,
) -> Result<Tape> {
    let qc = qc.filter(|c| c.enabled).copied();
    let mut current = match &qc {
        Some(c) => tensor::quantize_tensor(input, c.activation_format)?,
        None => input.clone(),
    };
    let mut steps = Vec::with_capacity(model.layers.len());
    let mut bn_batch_stats = Vec::new();
    let mut residual_stack: Vec<Tensor> = Vec::new();

    for layer in &model.layers {
        match layer {
            LayerSpec::Conv(spec) => {
                let (out, cache) = conv_forward(model, spec, &current, &qc)?;
                steps.push(Step::Conv(cache));
                current = out;
            }
            LayerSpec::BatchNorm(spec) => {
                let (out, cache, stats) =
                    bn_train_forward(model, &spec.name, spec.eps, &current, &qc)?;
                bn_batch_stats.push(stats);
                steps.push(Step::Bn(cache));
                current = out;
            }
            LayerSpec::Relu => {
                let activated = tensor::relu(&current);
                let (out, pre_q_out) = match &qc {
                    Some(c) => (
                        tensor::quantize_tensor(&activated, c.activation_format)?,
                        Some(activated),
                    ),
                    None => (activated, None),
                };
                steps.push(Step::Relu {
                    input: current,
                    pre_q_out,
                });
                current = out;
            }
            LayerSpec::MaxPool { window, stride } => {
                let (out, argmax) = maxpool_forward(&current, (*window, *window), *stride)?;
                steps.push(Step::MaxPool {
                    argmax,
                    in_shape: current.shape().to_vec(),
                });
                current = out;
            }
            LayerSpec::ResidualBegin => {
                residual_stack.push(current.clone());
                steps.push(Step::ResBegin);
            }
            LayerSpec::ResidualAdd { projection } => {
                let skip = residual_stack
                    .pop()
                    .ok_or_else(|| QfxError::Config("residual add without begin".into()))?;
                let (skip_out, proj_cache) = match projection {
                    Some(proj) => {
                        let bspec = proj.bn.as_ref().ok_or_else(|| {
                            QfxError::Config(
                                "training expects batch norm on shortcut projections".into(),
                            )
                        })?;
                        let (conv_out, conv_cache) = conv_forward(model, &proj.conv, &skip, &qc)?;
                        let (bn_out, bn_cache, stats) =
                            bn_train_forward(model, &bspec.name, bspec.eps, &conv_out, &qc)?;
                        bn_batch_stats.push(stats);
                        (bn_out, Some((conv_cache, bn_cache)))
                    }
                    None => (skip, None),
                };
                let sum = tensor::add(&current, &skip_out)?;
                let (out, pre_q_out) = match &qc {
                    Some(c) => (
                        tensor::quantize_tensor(&sum, c.activation_format)?,
                        Some(sum),
                    ),
                    None => (sum, None),
                };
                steps.push(Step::ResAdd {
                    projection: proj_cache,
                    pre_q_out,
                });
                current = out;
            }
            LayerSpec::GlobalAvgPool => {
                let pooled = tensor::global_avgpool(&current)?;
                let (out, pre_q_out) = match &qc {
                    Some(c) => (
                        tensor::quantize_tensor(&pooled, c.activation_format)?,
                        Some(pooled),
                    ),
                    None => (pooled, None),
                };
                steps.push(Step::AvgPool {
                    in_shape: current.shape().to_vec(),
                    pre_q_out,
                });
                current = out;
            }
        }
    }
    current.check_finite("training features")?;
    Ok(Tape {
        steps,
        qc,
        features: current,
        bn_batch_stats,
    })
}

/// Reverse pass: returns gradients for every conv weight and batch-norm
/// gamma/beta, keyed by store name. Running statistics get no gradient.
pub fn tape_backward(tape: &Tape, d_features: &Tensor) -> Result<GradMap> {
    let mut grads = GradMap::new();
    let mut grad = d_features.clone();
    let mut skip_grads: Vec<Tensor> = Vec::new();

    for step in tape.steps.iter().rev() {
        grad = match step {
            Step::Conv(cache) => conv_backward(cache, &grad, &tape.qc, &mut grads)?,
            Step::Bn(cache) => bn_backward(cache, &grad, &tape.qc, &mut grads),
            Step::Relu { input, pre_q_out } => {
                let d_act = apply_output_ste(&grad, pre_q_out, &tape.qc);
                let data = d_act
                    .data()
                    .iter()
                    .zip(input.data())
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::from_vec(input.shape(), data)?
            }
            Step::MaxPool { argmax, in_shape } => {
                let mut d_in = Tensor::zeros(in_shape);
                for (out_idx, &in_idx) in argmax.iter().enumerate() {
                    d_in.data_mut()[in_idx] += grad.data()[out_idx];
                }
                d_in
            }
            Step::ResBegin => {
                let pending = skip_grads
                    .pop()
                    .ok_or_else(|| QfxError::Config("residual gradient underflow".into()))?;
                tensor::add(&grad, &pending)?
            }
            Step::ResAdd {
                projection,
                pre_q_out,
            } => {
                let d_sum = apply_output_ste(&grad, pre_q_out, &tape.qc);
                let d_skip = match projection {
                    Some((conv_cache, bn_cache)) => {
                        let d_bn = bn_backward(bn_cache, &d_sum, &tape.qc, &mut grads);
                        conv_backward(conv_cache, &d_bn, &tape.qc, &mut grads)?
                    }
                    None => d_sum.clone(),
                };
                skip_grads.push(d_skip);
                d_sum
            }
            Step::AvgPool {
                in_shape,
                pre_q_out,
            } => {
                let d_pool = apply_output_ste(&grad, pre_q_out, &tape.qc);
                let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let inv = 1.0 / (h * w) as f64;
                let mut d_in = Tensor::zeros(in_shape);
                for bi in 0..n {
                    for ci in 0..c {
                        let g = d_pool.data()[bi * c + ci] * inv;
                        for v in &mut d_in.data_mut()[(bi * c + ci) * h * w..][..h * w] {
                            *v = g;
                        }
                    }
                }
                d_in
            }
        };
    }
    if !skip_grads.is_empty() {
        return Err(QfxError::Config("residual gradient stack not drained".into()));
    }
    Ok(grads)
}

fn apply_output_ste(grad: &Tensor, pre_q_out: &Option<Tensor>, qc: &Option<QuantConfig>) -> Tensor {
    match (pre_q_out, qc) {
        (Some(pre), Some(c)) => ste_backward(grad, pre, c.activation_format),
        _ => grad.clone(),
    }
}

fn conv_forward(
    model: &BackboneModel,
    spec: &ConvSpec,
    input: &Tensor,
    qc: &Option<QuantConfig>,
) -> Result<(Tensor, ConvCache)> {
    let float_weights = model.tensor(&format!("{}.weight", spec.name))?.clone();
    debug_assert!(!spec.has_bias, "trainable convs carry no bias");
    let used_weights = match qc {
        Some(c) => tensor::quantize_tensor(&float_weights, c.weight_format)?,
        None => float_weights.clone(),
    };
    let params = tensor::ConvParams::new(
        used_weights.clone(),
        None,
        spec.stride,
        spec.padding,
    )?;
    let raw = tensor::conv2d(input, &params)?;
    let (out, pre_q_out) = match qc {
        Some(c) => (tensor::quantize_tensor(&raw, c.activation_format)?, Some(raw)),
        None => (raw, None),
    };
    let cache = ConvCache {
        spec: spec.clone(),
        input: input.clone(),
        used_weights,
        float_weights: qc.as_ref().map(|_| float_weights),
        pre_q_out,
    };
    Ok((out, cache))
}

/// Gradients of the convolution via the same im2col decomposition as the
/// forward: dW = dY . col^T accumulated over the batch, dX = col2im(W^T . dY).
fn conv_backward(
    cache: &ConvCache,
    grad_out: &Tensor,
    qc: &Option<QuantConfig>,
    grads: &mut GradMap,
) -> Result<Tensor> {
    let d_out = apply_output_ste(grad_out, &cache.pre_q_out, qc);
    let spec = &cache.spec;
    let (n, c, h, w) = match cache.input.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(QfxError::ShapeMismatch {
                op: "conv_backward".into(),
                detail: format!("input shape {other:?}"),
            })
        }
    };
    let (out_h, out_w) = match d_out.shape() {
        [_, _, oh, ow] => (*oh, *ow),
        other => {
            return Err(QfxError::ShapeMismatch {
                op: "conv_backward".into(),
                detail: format!("grad shape {other:?}"),
            })
        }
    };
    let k = c * spec.kernel * spec.kernel;
    let j = out_h * out_w;
    let o = spec.out_channels;

    let mut d_weights = vec![0.0; o * k];
    let mut d_input = Tensor::zeros(cache.input.shape());
    let mut col = vec![0.0; k * j];
    let mut d_col = vec![0.0; k * j];
    let in_stride = c * h * w;
    let out_stride = o * j;

    for bi in 0..n {
        let x = &cache.input.data()[bi * in_stride..][..in_stride];
        let dy = &d_out.data()[bi * out_stride..][..out_stride];
        tensor::im2col_into(
            x,
            c,
            h,
            w,
            spec.kernel,
            spec.kernel,
            spec.stride,
            spec.padding,
            out_h,
            out_w,
            &mut col,
        );
        // dW[o,k] += dot(dy[o,:], col[k,:])
        for oi in 0..o {
            let dy_row = &dy[oi * j..][..j];
            let dw_row = &mut d_weights[oi * k..][..k];
            for ki in 0..k {
                let col_row = &col[ki * j..][..j];
                let mut acc = 0.0;
                for (a, b) in dy_row.iter().zip(col_row) {
                    acc += a * b;
                }
                dw_row[ki] += acc;
            }
        }
        // dCol[k,:] = sum_o W[o,k] * dy[o,:]
        d_col.fill(0.0);
        for oi in 0..o {
            let dy_row = &dy[oi * j..][..j];
            let w_row = &cache.used_weights.data()[oi * k..][..k];
            for (ki, &wv) in w_row.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let dst = &mut d_col[ki * j..][..j];
                for (d, &g) in dst.iter_mut().zip(dy_row) {
                    *d += wv * g;
                }
            }
        }
        col2im_add(
            &d_col,
            c,
            h,
            w,
            spec.kernel,
            spec.kernel,
            spec.stride,
            spec.padding,
            out_h,
            out_w,
            &mut d_input.data_mut()[bi * in_stride..][..in_stride],
        );
    }

    let mut d_w = Tensor::from_vec(cache.used_weights.shape(), d_weights)?;
    // Weight-quantizer STE: mask against the float master weights.
    if let (Some(fw), Some(c)) = (&cache.float_weights, qc) {
        d_w = ste_backward(&d_w, fw, c.weight_format);
    }
    accumulate(grads, &format!("{}.weight", spec.name), d_w)?;
    Ok(d_input)
}

/// Scatter a column-matrix gradient back to input layout (inverse of im2col).
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    input_grad: &mut [f64],
) {
    let j = out_h * out_w;
    for ic in 0..c {
        let plane = &mut input_grad[ic * h * w..][..h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = &col[((ic * kh + dy) * kw + dx) * j..][..j];
                for oy in 0..out_h {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy as usize * w + ix as usize] += row[oy * out_w + ox];
                    }
                }
            }
        }
    }
}

#[allow(clippy::type_complexity)]
fn bn_train_forward(
    model: &BackboneModel,
    name: &str,
    eps: f64,
    input: &Tensor,
    qc: &Option<QuantConfig>,
) -> Result<(Tensor, BnCache, (String, Tensor, Tensor))> {
    let gamma = model.tensor(&format!("{name}.gamma"))?.clone();
    let beta = model.tensor(&format!("{name}.beta"))?;
    let (n, c, h, w) = match input.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(QfxError::ShapeMismatch {
                op: "batchnorm".into(),
                detail: format!("expected NCHW, got {other:?}"),
            })
        }
    };
    if c != gamma.len() {
        return Err(QfxError::ShapeMismatch {
            op: "batchnorm".into(),
            detail: format!("input channel dim {c} != bn channels {}", gamma.len()),
        });
    }
    let m = n * h * w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut sum = 0.0;
        for bi in 0..n {
            let plane = &input.data()[(bi * c + ci) * h * w..][..h * w];
            sum += plane.iter().sum::<f64>();
        }
        mean[ci] = sum / m as f64;
        let mut sq = 0.0;
        for bi in 0..n {
            let plane = &input.data()[(bi * c + ci) * h * w..][..h * w];
            for &x in plane {
                let d = x - mean[ci];
                sq += d * d;
            }
        }
        var[ci] = sq / m as f64;
    }

    let mut inv_std = vec![0.0; c];
    for ci in 0..c {
        let denom = var[ci] + eps;
        if denom <= 0.0 {
            return Err(QfxError::NonPositiveVariance(denom));
        }
        inv_std[ci] = 1.0 / denom.sqrt();
    }

    let mut x_hat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    for bi in 0..n {
        for ci in 0..c {
            let off = (bi * c + ci) * h * w;
            let (mu, is) = (mean[ci], inv_std[ci]);
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for idx in off..off + h * w {
                let xh = (input.data()[idx] - mu) * is;
                x_hat.data_mut()[idx] = xh;
                out.data_mut()[idx] = g * xh + b;
            }
        }
    }

    let (out, pre_q_out) = match qc {
        Some(cfg) => (
            tensor::quantize_tensor(&out, cfg.activation_format)?,
            Some(out),
        ),
        None => (out, None),
    };

    // Unbiased variance for the running-statistics update.
    let bessel = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
    let var_unbiased: Vec<f64> = var.iter().map(|v| v * bessel).collect();
    let stats = (
        name.to_string(),
        Tensor::from_vec(&[c], mean)?,
        Tensor::from_vec(&[c], var_unbiased)?,
    );
    let cache = BnCache {
        name: name.to_string(),
        gamma,
        x_hat,
        inv_std,
        per_channel_count: m,
        pre_q_out,
    };
    Ok((out, cache, stats))
}

/// Training-mode batch-norm backward, differentiating through the batch
/// statistics: dx = gamma*inv_std*(dy - dbeta/m - x_hat*dgamma/m).
fn bn_backward(
    cache: &BnCache,
    grad_out: &Tensor,
    qc: &Option<QuantConfig>,
    grads: &mut GradMap,
) -> Tensor {
    let dy = apply_output_ste(grad_out, &cache.pre_q_out, qc);
    let shape = cache.x_hat.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let m = cache.per_channel_count as f64;

    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for bi in 0..n {
        for ci in 0..c {
            let off = (bi * c + ci) * h * w;
            for idx in off..off + h * w {
                d_gamma[ci] += dy.data()[idx] * cache.x_hat.data()[idx];
                d_beta[ci] += dy.data()[idx];
            }
        }
    }

    let mut d_in = Tensor::zeros(shape);
    for bi in 0..n {
        for ci in 0..c {
            let off = (bi * c + ci) * h * w;
            let scale = cache.gamma.data()[ci] * cache.inv_std[ci];
            let (dg, db) = (d_gamma[ci] / m, d_beta[ci] / m);
            for idx in off..off + h * w {
                d_in.data_mut()[idx] =
                    scale * (dy.data()[idx] - db - cache.x_hat.data()[idx] * dg);
            }
        }
    }

    accumulate(
        grads,
        &format!("{}.gamma", cache.name),
        Tensor::from_vec(&[c], d_gamma).expect("len c"),
    )
    .expect("shape consistent");
    accumulate(
        grads,
        &format!("{}.beta", cache.name),
        Tensor::from_vec(&[c], d_beta).expect("len c"),
    )
    .expect("shape consistent");
    d_in
}

fn maxpool_forward(
    input: &Tensor,
    window: (usize, usize),
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let out = tensor::maxpool2d(input, window, stride)?;
    let (n, c, h, w) = match input.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        _ => unreachable!("maxpool2d validated rank"),
    };
    let (out_h, out_w) = (out.shape()[2], out.shape()[3]);
    // First maximum in scan order, matching the value maxpool2d returns.
    let mut argmax = vec![0usize; out.len()];
    for bi in 0..n {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            let obase = (bi * c + ci) * out_h * out_w;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..window.0 {
                        for dx in 0..window.1 {
                            let idx = base + (oy * stride + dy) * w + (ox * stride + dx);
                            let v = input.data()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    argmax[obase + oy * out_w + ox] = best_idx;
                }
            }
        }
    }
    Ok((out, argmax))
}

fn accumulate(grads: &mut GradMap, name: &str, delta: Tensor) -> Result<()> {
    match grads.get_mut(name) {
        Some(existing) => {
            *existing = tensor::add(existing, &delta)?;
        }
        None => {
            grads.insert(name.to_string(), delta);
        }
    }
    Ok(())
}
