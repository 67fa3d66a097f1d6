//! Post-training quantization pipeline: load a float checkpoint, fold batch
//! norms, transfer weights onto the fixed-point grid, build the feature mean
//! vector from the base split, standardize, and score with NCM.

use crate::backbone::{BackboneModel, ForwardMode, LayerSpec};
use crate::error::{QfxError, Result};
use crate::fewshot::{self, AccuracyStat, FeatureTransform, Protocol};
use crate::fixedpoint::QFormat;
use crate::io::{store_hash, ImageDataset, WeightStore};
use crate::tensor::{self, QuantConfig, Tensor};
use serde::{Deserialize, Serialize};

/// How features are standardized against the base-split mean vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizeMode {
    CenterOnly,
    CenterNormalize,
}

/// Center rows by `mean` and, in [`StandardizeMode::CenterNormalize`], scale
/// each row to unit L2 norm. A row with zero norm after centering is passed
/// through centered-only with a warning. The quantized variant re-rounds the
/// result onto the activation grid.
pub fn standardize(
    features: &Tensor,
    mean: &Tensor,
    mode: StandardizeMode,
    quant: Option<QFormat>,
) -> Result<Tensor> {
    let (n, d) = match features.shape() {
        [n, d] => (*n, *d),
        other => {
            return Err(QfxError::ShapeMismatch {
                op: "standardize".into(),
                detail: format!("expected [n, d] features, got {other:?}"),
            })
        }
    };
    if mean.shape() != [d] {
        return Err(QfxError::ShapeMismatch {
            op: "standardize".into(),
            detail: format!("mean shape {:?} != [{d}]", mean.shape()),
        });
    }
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let row = &features.data()[i * d..][..d];
        let dst = &mut out.data_mut()[i * d..][..d];
        let mut norm_sq = 0.0;
        for (slot, (&x, &m)) in dst.iter_mut().zip(row.iter().zip(mean.data())) {
            let c = x - m;
            *slot = c;
            norm_sq += c * c;
        }
        if mode == StandardizeMode::CenterNormalize {
            if norm_sq == 0.0 {
                log::warn!("standardize: row {i} equals the mean vector; left unnormalized");
            } else {
                let inv = 1.0 / norm_sq.sqrt();
                for slot in dst.iter_mut() {
                    *slot *= inv;
                }
            }
        }
    }
    match quant {
        Some(fmt) => tensor::quantize_tensor(&out, fmt),
        None => Ok(out),
    }
}

/// Feature preprocessing handle used by the evaluation pipeline.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean_vector: Tensor,
    pub mode: StandardizeMode,
    pub quant: Option<QFormat>,
}

impl FeatureTransform for Standardizer {
    fn apply(&self, features: &Tensor) -> Result<Tensor> {
        standardize(features, &self.mean_vector, self.mode, self.quant)
    }
}

/// Structure of the folded graph: every conv/BN pair becomes a biased conv,
/// projection BNs disappear, everything else is unchanged.
pub fn fold_layers(layers: &[LayerSpec]) -> Result<Vec<LayerSpec>> {
    let mut out = Vec::with_capacity(layers.len());
    let mut i = 0;
    while i < layers.len() {
        match (&layers[i], layers.get(i + 1)) {
            (LayerSpec::Conv(c), Some(LayerSpec::BatchNorm(b))) => {
                if b.channels != c.out_channels {
                    return Err(QfxError::ShapeMismatch {
                        op: "fold_layers".into(),
                        detail: format!(
                            "conv {} out_channels {} != bn {} channels {}",
                            c.name, c.out_channels, b.name, b.channels
                        ),
                    });
                }
                let mut folded = c.clone();
                folded.has_bias = true;
                out.push(LayerSpec::Conv(folded));
                i += 2;
            }
            (LayerSpec::BatchNorm(b), _) => {
                return Err(QfxError::Config(format!(
                    "batch norm {} has no preceding conv to fold into",
                    b.name
                )));
            }
            (LayerSpec::ResidualAdd { projection }, _) => {
                let projection = match projection {
                    Some(p) => {
                        let mut conv = p.conv.clone();
                        if p.bn.is_some() {
                            conv.has_bias = true;
                        }
                        Some(crate::backbone::Projection { conv, bn: None })
                    }
                    None => None,
                };
                out.push(LayerSpec::ResidualAdd { projection });
                i += 1;
            }
            (other, _) => {
                out.push(other.clone());
                i += 1;
            }
        }
    }
    Ok(out)
}

/// Fold every batch norm of `model` into its preceding convolution,
/// returning a BN-free model whose float output matches within rounding.
pub fn fold_model(model: &BackboneModel) -> Result<BackboneModel> {
    let layers = fold_layers(&model.layers)?;
    let mut weights = WeightStore::new();

    let mut fold_conv = |cspec: &crate::backbone::ConvSpec,
                         bspec: Option<&crate::backbone::BnSpec>|
     -> Result<()> {
        let params = conv_params_of(model, cspec)?;
        let folded = match bspec {
            Some(b) => {
                let bn = bn_params_of(model, b)?;
                tensor::batchnorm_fold(&params, &bn)?
            }
            None => params,
        };
        weights.insert(format!("{}.weight", cspec.name), folded.weights);
        if let Some(bias) = folded.bias {
            weights.insert(format!("{}.bias", cspec.name), bias);
        }
        Ok(())
    };

    let mut i = 0;
    while i < model.layers.len() {
        match (&model.layers[i], model.layers.get(i + 1)) {
            (LayerSpec::Conv(c), Some(LayerSpec::BatchNorm(b))) => {
                fold_conv(c, Some(b))?;
                i += 2;
            }
            (LayerSpec::Conv(c), _) => {
                fold_conv(c, None)?;
                i += 1;
            }
            (LayerSpec::ResidualAdd { projection }, _) => {
                if let Some(p) = projection {
                    fold_conv(&p.conv, p.bn.as_ref())?;
                }
                i += 1;
            }
            _ => {
                i += 1;
            }
        }
    }

    let folded = BackboneModel {
        layers,
        weights,
        feature_dim: model.feature_dim,
    };
    folded.validate()?;
    Ok(folded)
}

/// Per-tensor maximum absolute quantization error introduced by the transfer.
#[derive(Debug, Clone)]
pub struct TransferReport {
    pub per_tensor_max_error: Vec<(String, f64)>,
}

impl TransferReport {
    pub fn worst(&self) -> f64 {
        self.per_tensor_max_error
            .iter()
            .map(|(_, e)| *e)
            .fold(0.0, f64::max)
    }
}

/// Steps 2-3 of the pipeline: attach the float store to the architecture,
/// fold batch norms, and round every weight onto the weight grid (biases onto
/// the activation grid). Name mismatches are reported exhaustively.
pub fn weight_transfer(
    float_store: &WeightStore,
    arch: &BackboneModel,
    qc: &QuantConfig,
) -> Result<(BackboneModel, TransferReport)> {
    let float_model = BackboneModel {
        layers: arch.layers.clone(),
        weights: float_store.clone(),
        feature_dim: arch.feature_dim,
    };
    float_model.validate()?;
    let mut folded = fold_model(&float_model)?;

    let mut per_tensor_max_error = Vec::new();
    if qc.enabled {
        for (name, t) in folded.weights.iter_mut() {
            let fmt = if name.ends_with(".bias") {
                qc.activation_format
            } else {
                qc.weight_format
            };
            let quantized = tensor::quantize_tensor(t, fmt)?;
            let err = quantized.max_abs_diff(t);
            per_tensor_max_error.push((name.clone(), err));
            *t = quantized;
        }
    } else {
        per_tensor_max_error
            .extend(folded.weights.keys().map(|name| (name.clone(), 0.0)));
    }
    Ok((folded, TransferReport { per_tensor_max_error }))
}

/// Everything the PTQ pipeline produces besides the accuracy number.
#[derive(Debug, Clone)]
pub struct PtqArtifacts {
    pub quantized_model: BackboneModel,
    pub qc: QuantConfig,
    pub mean_vector: Tensor,
    pub standardize: StandardizeMode,
    pub source_hash: String,
}

/// JSON sidecar stored next to the quantized weight file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PtqSidecar {
    pub mean_vector: Vec<f64>,
    pub weight_format: String,
    pub activation_format: String,
    pub standardize: StandardizeMode,
    pub source_hash: String,
}

impl PtqArtifacts {
    pub fn sidecar(&self) -> PtqSidecar {
        PtqSidecar {
            mean_vector: self.mean_vector.data().to_vec(),
            weight_format: self.qc.weight_format.to_string(),
            activation_format: self.qc.activation_format.to_string(),
            standardize: self.standardize,
            source_hash: self.source_hash.clone(),
        }
    }

    pub fn standardizer(&self) -> Standardizer {
        Standardizer {
            mean_vector: self.mean_vector.clone(),
            mode: self.standardize,
            quant: self.qc.enabled.then_some(self.qc.activation_format),
        }
    }
}

#[derive(Debug)]
pub struct PtqOutcome {
    pub artifacts: PtqArtifacts,
    pub accuracy: AccuracyStat,
    pub transfer: TransferReport,
}

/// Steps 4-6 of the pipeline for any model and mode: average the base-split
/// features into the mean vector (quantized onto the activation grid in
/// quantized mode), standardize the novel features against it, and score
/// with NCM. Returns the accuracy and the mean vector. The same routine
/// evaluates float baselines and QAT-trained models, which keeps the three
/// modes comparable.
pub fn evaluate_standardized(
    model: &BackboneModel,
    base_data: &ImageDataset,
    novel_data: &ImageDataset,
    mode: ForwardMode,
    protocol: &Protocol,
    seed: u64,
    standardize_mode: StandardizeMode,
) -> Result<(AccuracyStat, Tensor)> {
    if base_data.is_empty() {
        return Err(QfxError::Dataset(
            "mean-vector step needs a non-empty base dataset".into(),
        ));
    }
    let quant = match mode {
        ForwardMode::Quantized(qc) if qc.enabled => Some(qc.activation_format),
        _ => None,
    };

    let base_features = fewshot::extract_features(model, base_data, mode, 32)?;
    let (m, d) = (base_features.shape()[0], base_features.shape()[1]);
    let mut mean = vec![0.0; d];
    for i in 0..m {
        for (acc, &x) in mean.iter_mut().zip(&base_features.data()[i * d..][..d]) {
            *acc += x;
        }
    }
    for acc in mean.iter_mut() {
        *acc /= m as f64;
    }
    let mut mean_vector = Tensor::from_vec(&[d], mean)?;
    if let Some(fmt) = quant {
        mean_vector = tensor::quantize_tensor(&mean_vector, fmt)?;
    }

    let standardizer = Standardizer {
        mean_vector: mean_vector.clone(),
        mode: standardize_mode,
        quant,
    };
    let accuracy = fewshot::evaluate(model, novel_data, mode, Some(&standardizer), protocol, seed)?;
    Ok((accuracy, mean_vector))
}

/// The six-step pipeline. With quantization disabled this degenerates to the
/// plain float evaluation (no folding, no rounding), which keeps the
/// disabled path bit-identical to a float run.
#[allow(clippy::too_many_arguments)]
pub fn run_ptq(
    float_store: &WeightStore,
    arch: &BackboneModel,
    qc: &QuantConfig,
    base_data: &ImageDataset,
    novel_data: &ImageDataset,
    protocol: &Protocol,
    seed: u64,
    standardize_mode: StandardizeMode,
) -> Result<PtqOutcome> {
    if base_data.is_empty() {
        return Err(QfxError::Dataset(
            "mean-vector step needs a non-empty base dataset".into(),
        ));
    }
    // Steps 1-3: float model in, folded fixed-point model out.
    let (model, transfer, mode) = if qc.enabled {
        let (qmodel, transfer) = weight_transfer(float_store, arch, qc)?;
        (qmodel, transfer, ForwardMode::Quantized(*qc))
    } else {
        let float_model = BackboneModel {
            layers: arch.layers.clone(),
            weights: float_store.clone(),
            feature_dim: arch.feature_dim,
        };
        float_model.validate()?;
        let report = TransferReport {
            per_tensor_max_error: float_model
                .weights
                .keys()
                .map(|n| (n.clone(), 0.0))
                .collect(),
        };
        (float_model, report, ForwardMode::Float)
    };

    // Steps 4-6 on the transferred model.
    let (accuracy, mean_vector) = evaluate_standardized(
        &model,
        base_data,
        novel_data,
        mode,
        protocol,
        seed,
        standardize_mode,
    )?;

    let artifacts = PtqArtifacts {
        quantized_model: model,
        qc: *qc,
        mean_vector,
        standardize: standardize_mode,
        source_hash: store_hash(float_store)?,
    };
    Ok(PtqOutcome {
        artifacts,
        accuracy,
        transfer,
    })
}

fn conv_params_of(
    model: &BackboneModel,
    spec: &crate::backbone::ConvSpec,
) -> Result<tensor::ConvParams> {
    let weights = model.tensor(&format!("{}.weight", spec.name))?.clone();
    let bias = if spec.has_bias {
        Some(model.tensor(&format!("{}.bias", spec.name))?.clone())
    } else {
        None
    };
    tensor::ConvParams::new(weights, bias, spec.stride, spec.padding)
}

fn bn_params_of(
    model: &BackboneModel,
    spec: &crate::backbone::BnSpec,
) -> Result<tensor::BnParams> {
    tensor::BnParams::new(
        model.tensor(&format!("{}.gamma", spec.name))?.clone(),
        model.tensor(&format!("{}.beta", spec.name))?.clone(),
        model.tensor(&format!("{}.mean", spec.name))?.clone(),
        model.tensor(&format!("{}.var", spec.name))?.clone(),
        spec.eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_resnet_lite, forward};
    use crate::rng::Rng;

    fn q(i: u32, f: u32) -> QFormat {
        QFormat::new(i, f).unwrap()
    }

    #[test]
    fn standardize_zero_residual_row_passes_through_with_warning() {
        let mean = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let features = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let out = standardize(&features, &mean, StandardizeMode::CenterNormalize, None).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_residual_row_maps_to_basis_vector() {
        let mean = Tensor::from_vec(&[3], vec![0.5, -0.5, 2.0]).unwrap();
        let features = Tensor::from_vec(&[1, 3], vec![1.5, -0.5, 2.0]).unwrap();
        let out = standardize(&features, &mean, StandardizeMode::CenterNormalize, None).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn standardized_rows_have_unit_norm() {
        let mut rng = Rng::new(31);
        let features = Tensor::from_vec(
            &[10, 6],
            (0..60).map(|_| rng.next_normal()).collect(),
        )
        .unwrap();
        let mean = Tensor::from_vec(&[6], (0..6).map(|_| rng.next_normal()).collect()).unwrap();
        let out = standardize(&features, &mean, StandardizeMode::CenterNormalize, None).unwrap();
        for i in 0..10 {
            let norm: f64 = out.data()[i * 6..][..6].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6, "row {i} norm {norm}");
        }
    }

    #[test]
    fn folded_model_matches_unfolded_forward() {
        let model = build_resnet_lite(1, 8, 41);
        // Give running stats non-trivial values so folding is exercised.
        let mut model = model;
        let mut rng = Rng::new(43);
        for (name, t) in model.weights.iter_mut() {
            if name.ends_with(".mean") {
                for v in t.data_mut() {
                    *v = 0.2 * rng.next_normal();
                }
            }
            if name.ends_with(".var") {
                for v in t.data_mut() {
                    *v = 0.5 + rng.next_f64();
                }
            }
        }
        let folded = fold_model(&model).unwrap();
        assert!(folded
            .layers
            .iter()
            .all(|l| !matches!(l, LayerSpec::BatchNorm(_))));
        let input = Tensor::from_vec(
            &[2, 1, 16, 16],
            (0..2 * 256).map(|_| rng.next_f64()).collect(),
        )
        .unwrap();
        let a = forward(&model, &input, ForwardMode::Float).unwrap();
        let b = forward(&folded, &input, ForwardMode::Float).unwrap();
        let rel = a.max_abs_diff(&b)
            / a.data().iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-9);
        assert!(rel <= 1e-6, "fold drift {rel}");
    }

    #[test]
    fn transfer_of_on_grid_weights_is_lossless() {
        let mut model = build_resnet_lite(1, 4, 47);
        let fmt = q(4, 4);
        for t in model.weights.values_mut() {
            *t = tensor::quantize_tensor(t, fmt).unwrap();
        }
        // Identity batch norms so folding does not move weights off-grid.
        for (name, t) in model.weights.iter_mut() {
            if name.ends_with(".gamma") || name.ends_with(".var") {
                *t = Tensor::filled(t.shape(), 1.0);
            }
            if name.ends_with(".beta") || name.ends_with(".mean") {
                *t = Tensor::zeros(t.shape());
            }
        }
        // eps shifts the folded scale off 1; zero it for exactness.
        let mut arch = model.clone();
        for layer in arch.layers.iter_mut() {
            if let LayerSpec::BatchNorm(b) = layer {
                b.eps = 0.0;
            }
            if let LayerSpec::ResidualAdd {
                projection: Some(p),
            } = layer
            {
                if let Some(b) = &mut p.bn {
                    b.eps = 0.0;
                }
            }
        }
        let (qmodel, report) =
            weight_transfer(&model.weights, &arch, &QuantConfig::uniform(fmt)).unwrap();
        assert_eq!(report.worst(), 0.0, "{:?}", report.per_tensor_max_error);
        for (name, t) in &qmodel.weights {
            if name.ends_with(".weight") {
                let orig = &model.weights[name];
                assert_eq!(t.data(), orig.data(), "{name}");
            }
        }
    }

    #[test]
    fn transfer_error_is_bounded_by_half_step() {
        let model = build_resnet_lite(1, 4, 53);
        let fmt = q(3, 3);
        let (qmodel, report) =
            weight_transfer(&model.weights, &model, &QuantConfig::uniform(fmt)).unwrap();
        for (name, err) in &report.per_tensor_max_error {
            let t = &qmodel.weights[name];
            let saturated = t
                .data()
                .iter()
                .any(|&v| v <= fmt.min_value() || v >= fmt.max_value());
            if !saturated {
                assert!(
                    *err <= fmt.step() / 2.0 + 1e-15,
                    "{name}: err {err} > half step"
                );
            }
        }
        // Quantized weights are on the grid (weight and activation formats
        // share a step here).
        for (name, t) in &qmodel.weights {
            for &v in t.data() {
                let code = v / fmt.step();
                assert_eq!(code, code.round(), "{name} value {v} off-grid");
            }
        }
    }

    #[test]
    fn transfer_reports_mismatched_names_exhaustively() {
        let model = build_resnet_lite(1, 4, 59);
        let mut store = model.weights.clone();
        store.remove("block1.conv2.weight");
        store.remove("block2.bn1.gamma");
        store.insert("bogus".into(), Tensor::zeros(&[1]));
        let err =
            weight_transfer(&store, &model, &QuantConfig::uniform(q(4, 4))).unwrap_err();
        match err {
            QfxError::WeightMismatch { missing, extra } => {
                assert_eq!(
                    missing,
                    vec![
                        "block1.conv2.weight".to_string(),
                        "block2.bn1.gamma".to_string()
                    ]
                );
                assert_eq!(extra, vec!["bogus".to_string()]);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    fn tiny_datasets() -> (ImageDataset, ImageDataset) {
        use crate::io::{generate_synthetic, SyntheticDatasetSpec};
        let base = generate_synthetic(&SyntheticDatasetSpec {
            classes: 3,
            samples_per_class: 4,
            size: 16,
            noise: 0.05,
            seed: 61,
            class_offset: 0,
        })
        .unwrap();
        let novel = generate_synthetic(&SyntheticDatasetSpec {
            classes: 4,
            samples_per_class: 6,
            size: 16,
            noise: 0.05,
            seed: 61,
            class_offset: 3,
        })
        .unwrap();
        (base, novel)
    }

    #[test]
    fn single_sample_base_mean_is_that_feature() {
        let (mut base, novel) = tiny_datasets();
        base.images.truncate(1);
        base.labels.truncate(1);
        let model = build_resnet_lite(1, 4, 67);
        let qc = QuantConfig::uniform(q(8, 8));
        let protocol = Protocol {
            way: 2,
            shot: 1,
            queries: 2,
            episodes: 4,
        };
        let out = run_ptq(
            &model.weights,
            &model,
            &qc,
            &base,
            &novel,
            &protocol,
            5,
            StandardizeMode::CenterNormalize,
        )
        .unwrap();
        let feats = fewshot::extract_features(
            &out.artifacts.quantized_model,
            &base,
            ForwardMode::Quantized(qc),
            8,
        )
        .unwrap();
        assert_eq!(out.artifacts.mean_vector.data(), feats.data());
    }

    #[test]
    fn pipeline_is_deterministic() {
        let (base, novel) = tiny_datasets();
        let model = build_resnet_lite(1, 4, 71);
        let qc = QuantConfig::uniform(q(5, 5));
        let protocol = Protocol {
            way: 2,
            shot: 1,
            queries: 2,
            episodes: 10,
        };
        let a = run_ptq(
            &model.weights, &model, &qc, &base, &novel, &protocol, 9,
            StandardizeMode::CenterNormalize,
        )
        .unwrap();
        let b = run_ptq(
            &model.weights, &model, &qc, &base, &novel, &protocol, 9,
            StandardizeMode::CenterNormalize,
        )
        .unwrap();
        assert_eq!(a.artifacts.mean_vector.data(), b.artifacts.mean_vector.data());
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.artifacts.source_hash, b.artifacts.source_hash);
    }

    #[test]
    fn disabled_quantization_equals_the_float_pipeline() {
        let (base, novel) = tiny_datasets();
        let model = build_resnet_lite(1, 4, 73);
        let protocol = Protocol {
            way: 2,
            shot: 1,
            queries: 2,
            episodes: 10,
        };
        let ptq_out = run_ptq(
            &model.weights,
            &model,
            &QuantConfig::off(),
            &base,
            &novel,
            &protocol,
            13,
            StandardizeMode::CenterNormalize,
        )
        .unwrap();
        // Float reference path, same preprocessing.
        let feats = fewshot::extract_features(&model, &base, ForwardMode::Float, 32).unwrap();
        let (m, d) = (feats.shape()[0], feats.shape()[1]);
        let mut mean = vec![0.0; d];
        for i in 0..m {
            for (acc, &x) in mean.iter_mut().zip(&feats.data()[i * d..][..d]) {
                *acc += x;
            }
        }
        for acc in mean.iter_mut() {
            *acc /= m as f64;
        }
        let standardizer = Standardizer {
            mean_vector: Tensor::from_vec(&[d], mean).unwrap(),
            mode: StandardizeMode::CenterNormalize,
            quant: None,
        };
        let float_stat = fewshot::evaluate(
            &model,
            &novel,
            ForwardMode::Float,
            Some(&standardizer),
            &protocol,
            13,
        )
        .unwrap();
        assert_eq!(ptq_out.accuracy, float_stat);
    }

    #[test]
    fn empty_base_data_is_rejected() {
        let (mut base, novel) = tiny_datasets();
        base.images.clear();
        base.labels.clear();
        let model = build_resnet_lite(1, 4, 79);
        let err = run_ptq(
            &model.weights,
            &model,
            &QuantConfig::uniform(q(4, 4)),
            &base,
            &novel,
            &Protocol {
                way: 2,
                shot: 1,
                queries: 2,
                episodes: 2,
            },
            1,
            StandardizeMode::CenterNormalize,
        )
        .unwrap_err();
        assert!(err.to_string().contains("base dataset"), "{err}");
    }
}
