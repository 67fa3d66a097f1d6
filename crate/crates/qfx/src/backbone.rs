//! Declarative backbone graphs and their forward passes.
//!
//! A backbone is an ordered list of [`LayerSpec`]s plus a named weight store.
//! Layer parameters live in the store under the naming convention
//! `block{b}.conv{c}.weight`, `block{b}.bn{c}.gamma` and so on, which is also
//! the on-disk convention of the weight files.

use crate::error::{QfxError, Result};
use crate::io::WeightStore;
use crate::rng::Rng;
use crate::tensor::{self, BnParams, ConvParams, QuantConfig, Tensor};

/// Structural description of a convolution; weights are looked up by name.
#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub name: String,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }
}

/// Structural description of a batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnSpec {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

/// Shortcut projection: 1x1 conv, plus batch norm until folding removes it.
#[derive(Debug, Clone)]
pub struct Projection {
    pub conv: ConvSpec,
    pub bn: Option<BnSpec>,
}

/// One step of the sequential backbone program.
#[derive(Debug, Clone)]
pub enum LayerSpec {
    Conv(ConvSpec),
    BatchNorm(BnSpec),
    Relu,
    MaxPool { window: usize, stride: usize },
    /// Fork: remember the current activation for the matching ResidualAdd.
    ResidualBegin,
    /// Join: add the remembered activation, optionally through a projection
    /// when the shape changed inside the block.
    ResidualAdd { projection: Option<Projection> },
    GlobalAvgPool,
}

/// Forward execution mode.
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode {
    Float,
    Quantized(QuantConfig),
}

impl ForwardMode {
    pub fn quant_config(&self) -> Option<&QuantConfig> {
        match self {
            ForwardMode::Float => None,
            ForwardMode::Quantized(qc) if qc.enabled => Some(qc),
            ForwardMode::Quantized(_) => None,
        }
    }
}

/// A layer graph plus its weights.
#[derive(Debug, Clone)]
pub struct BackboneModel {
    pub layers: Vec<LayerSpec>,
    pub weights: WeightStore,
    pub feature_dim: usize,
}

impl BackboneModel {
    /// Validate the graph structure and that the store holds exactly the
    /// declared tensors with the declared shapes.
    pub fn validate(&self) -> Result<()> {
        let mut depth = 0usize;
        let mut pools = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::ResidualBegin => depth += 1,
                LayerSpec::ResidualAdd { .. } => {
                    depth = depth.checked_sub(1).ok_or_else(|| {
                        QfxError::Config(format!("unmatched residual add at layer {i}"))
                    })?;
                }
                LayerSpec::GlobalAvgPool => {
                    pools += 1;
                    if i + 1 != self.layers.len() {
                        return Err(QfxError::Config(
                            "global average pool must be the terminal layer".into(),
                        ));
                    }
                }
                _ => {}
            }
        }
        if depth != 0 {
            return Err(QfxError::Config("unmatched residual begin".into()));
        }
        if pools != 1 {
            return Err(QfxError::Config(format!(
                "expected exactly one terminal global average pool, found {pools}"
            )));
        }

        let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
        for layer in &self.layers {
            collect_expected(layer, &mut expected);
        }
        let mut missing = Vec::new();
        for (name, shape) in &expected {
            match self.weights.get(name) {
                None => missing.push(name.clone()),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(QfxError::ShapeMismatch {
                        op: "BackboneModel::validate".into(),
                        detail: format!(
                            "{name}: store shape {:?} != declared {shape:?}",
                            t.shape()
                        ),
                    });
                }
                Some(_) => {}
            }
        }
        let declared: std::collections::BTreeSet<&str> =
            expected.iter().map(|(n, _)| n.as_str()).collect();
        let extra: Vec<String> = self
            .weights
            .keys()
            .filter(|k| !declared.contains(k.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(QfxError::WeightMismatch { missing, extra });
        }
        Ok(())
    }

    /// Number of scalar parameters in the weight store.
    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv(_) => 1,
                LayerSpec::ResidualAdd {
                    projection: Some(_),
                } => 1,
                _ => 0,
            })
            .sum()
    }

    fn conv_params(&self, spec: &ConvSpec) -> Result<ConvParams> {
        let weights = self.tensor(&format!("{}.weight", spec.name))?.clone();
        let bias = if spec.has_bias {
            Some(self.tensor(&format!("{}.bias", spec.name))?.clone())
        } else {
            None
        };
        ConvParams::new(weights, bias, spec.stride, spec.padding)
    }

    fn bn_params(&self, spec: &BnSpec) -> Result<BnParams> {
        BnParams::new(
            self.tensor(&format!("{}.gamma", spec.name))?.clone(),
            self.tensor(&format!("{}.beta", spec.name))?.clone(),
            self.tensor(&format!("{}.mean", spec.name))?.clone(),
            self.tensor(&format!("{}.var", spec.name))?.clone(),
            spec.eps,
        )
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.weights.get(name).ok_or_else(|| QfxError::WeightMismatch {
            missing: vec![name.to_string()],
            extra: vec![],
        })
    }
}

fn collect_expected(layer: &LayerSpec, out: &mut Vec<(String, Vec<usize>)>) {
    match layer {
        LayerSpec::Conv(c) => {
            out.push((format!("{}.weight", c.name), c.weight_shape()));
            if c.has_bias {
                out.push((format!("{}.bias", c.name), vec![c.out_channels]));
            }
        }
        LayerSpec::BatchNorm(b) => {
            for field in ["gamma", "beta", "mean", "var"] {
                out.push((format!("{}.{field}", b.name), vec![b.channels]));
            }
        }
        LayerSpec::ResidualAdd {
            projection: Some(p),
        } => {
            out.push((format!("{}.weight", p.conv.name), p.conv.weight_shape()));
            if p.conv.has_bias {
                out.push((format!("{}.bias", p.conv.name), vec![p.conv.out_channels]));
            }
            if let Some(b) = &p.bn {
                for field in ["gamma", "beta", "mean", "var"] {
                    out.push((format!("{}.{field}", b.name), vec![b.channels]));
                }
            }
        }
        _ => {}
    }
}

/// Run the backbone on an NCHW input batch, producing [batch, feature_dim]
/// feature vectors. In quantized mode the input is first rounded onto the
/// activation grid and every layer output is re-quantized, so the returned
/// features lie on the grid.
pub fn forward(model: &BackboneModel, input: &Tensor, mode: ForwardMode) -> Result<Tensor> {
    let qc = mode.quant_config();
    let mut current = match qc {
        Some(qc) => tensor::quantize_tensor(input, qc.activation_format)?,
        None => input.clone(),
    };
    let mut residual_stack: Vec<Tensor> = Vec::new();

    for layer in &model.layers {
        current = match layer {
            LayerSpec::Conv(spec) => {
                let p = model.conv_params(spec)?;
                match qc {
                    Some(qc) => tensor::conv2d_quant(&current, &p, qc)?,
                    None => tensor::conv2d(&current, &p)?,
                }
            }
            LayerSpec::BatchNorm(spec) => {
                let bn = model.bn_params(spec)?;
                let out = tensor::batchnorm2d(&current, &bn)?;
                maybe_quantize(out, qc)?
            }
            LayerSpec::Relu => match qc {
                Some(qc) => tensor::relu_quant(&current, qc)?,
                None => tensor::relu(&current),
            },
            LayerSpec::MaxPool { window, stride } => {
                // Max of on-grid values is on-grid; no re-quantization needed.
                tensor::maxpool2d(&current, (*window, *window), *stride)?
            }
            LayerSpec::ResidualBegin => {
                residual_stack.push(current.clone());
                current
            }
            LayerSpec::ResidualAdd { projection } => {
                let skip = residual_stack
                    .pop()
                    .ok_or_else(|| QfxError::Config("residual add without begin".into()))?;
                let skip = match projection {
                    Some(proj) => {
                        let p = model.conv_params(&proj.conv)?;
                        let conv_out = match qc {
                            Some(qc) => tensor::conv2d_quant(&skip, &p, qc)?,
                            None => tensor::conv2d(&skip, &p)?,
                        };
                        match &proj.bn {
                            Some(bspec) => {
                                let bn = model.bn_params(bspec)?;
                                maybe_quantize(tensor::batchnorm2d(&conv_out, &bn)?, qc)?
                            }
                            None => conv_out,
                        }
                    }
                    None => skip,
                };
                maybe_quantize(tensor::add(&current, &skip)?, qc)?
            }
            LayerSpec::GlobalAvgPool => maybe_quantize(tensor::global_avgpool(&current)?, qc)?,
        };
    }
    current.check_finite("backbone features")?;
    Ok(current)
}

fn maybe_quantize(t: Tensor, qc: Option<&QuantConfig>) -> Result<Tensor> {
    match qc {
        Some(qc) => tensor::quantize_tensor(&t, qc.activation_format),
        None => Ok(t),
    }
}

/// Residual block used by both builders: three 3x3 conv/BN stages with ReLU
/// after the first two, a projected shortcut, ReLU after the join, then a 2x2
/// max pool.
fn push_block(
    layers: &mut Vec<LayerSpec>,
    block: usize,
    in_channels: usize,
    out_channels: usize,
) {
    let conv = |c: usize, in_c: usize| {
        LayerSpec::Conv(ConvSpec {
            name: format!("block{block}.conv{c}"),
            out_channels,
            in_channels: in_c,
            kernel: 3,
            stride: 1,
            padding: 1,
            has_bias: false,
        })
    };
    let bn = |c: usize| {
        LayerSpec::BatchNorm(BnSpec {
            name: format!("block{block}.bn{c}"),
            channels: out_channels,
            eps: 1e-5,
        })
    };
    layers.push(LayerSpec::ResidualBegin);
    layers.push(conv(1, in_channels));
    layers.push(bn(1));
    layers.push(LayerSpec::Relu);
    layers.push(conv(2, out_channels));
    layers.push(bn(2));
    layers.push(LayerSpec::Relu);
    layers.push(conv(3, out_channels));
    layers.push(bn(3));
    layers.push(LayerSpec::ResidualAdd {
        projection: Some(Projection {
            conv: ConvSpec {
                name: format!("block{block}.shortcut"),
                out_channels,
                in_channels,
                kernel: 1,
                stride: 1,
                padding: 0,
                has_bias: false,
            },
            bn: Some(BnSpec {
                name: format!("block{block}.shortcut_bn"),
                channels: out_channels,
                eps: 1e-5,
            }),
        }),
    });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::MaxPool { window: 2, stride: 2 });
}

fn build(input_channels: usize, widths: &[usize], seed: u64) -> BackboneModel {
    let mut layers = Vec::new();
    let mut in_c = input_channels;
    for (b, &w) in widths.iter().enumerate() {
        push_block(&mut layers, b + 1, in_c, w);
        in_c = w;
    }
    layers.push(LayerSpec::GlobalAvgPool);
    let mut model = BackboneModel {
        layers,
        weights: WeightStore::new(),
        feature_dim: *widths.last().expect("at least one block"),
    };
    init_weights(&mut model, seed);
    model
}

/// Four residual blocks of three 3x3 convolutions each: twelve convolutional
/// layers, widths [w, 2w, 4w, 8w], projected shortcuts, terminal global
/// average pool.
pub fn build_resnet12(input_channels: usize, base_width: usize, seed: u64) -> BackboneModel {
    build(
        input_channels,
        &[base_width, 2 * base_width, 4 * base_width, 8 * base_width],
        seed,
    )
}

/// Two-block variant (six convolutions) with small width, sized for 32x32
/// inputs on a desk machine.
pub fn build_resnet_lite(input_channels: usize, base_width: usize, seed: u64) -> BackboneModel {
    build(input_channels, &[base_width, 2 * base_width], seed)
}

/// Kaiming fan-in init for conv weights, identity init for batch norms.
fn init_weights(model: &mut BackboneModel, seed: u64) {
    let mut expected = Vec::new();
    for layer in &model.layers {
        collect_expected(layer, &mut expected);
    }
    let mut stream = 0u64;
    for (name, shape) in expected {
        stream += 1;
        let mut rng = Rng::substream(seed, stream);
        let tensor = if name.ends_with(".weight") {
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..shape.iter().product::<usize>())
                .map(|_| std * rng.next_normal())
                .collect();
            Tensor::from_vec(&shape, data).expect("shape/data consistent")
        } else if name.ends_with(".gamma") || name.ends_with(".var") {
            Tensor::filled(&shape, 1.0)
        } else {
            Tensor::zeros(&shape)
        };
        model.weights.insert(name, tensor);
    }
}
