//! Labeled image datasets and the raw on-disk layout.
//!
//! A dataset directory holds `meta.json` (height, width, channels, classes)
//! plus one record file per class, `class_<k>.bin`. Each record is one label
//! byte followed by channels*height*width pixel bytes (channel planes,
//! row-major); pixels load as value/255 so 255 maps to exactly 1.0.

use crate::error::{QfxError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
}

/// In-memory labeled image pool. Images are [C,H,W] tensors in [0,1].
#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub meta: DatasetMeta,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Sample indices grouped by class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.meta.classes];
        for (i, &label) in self.labels.iter().enumerate() {
            by_class[label].push(i);
        }
        by_class
    }

    /// Stack a list of sample indices into one [N,C,H,W] batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let m = &self.meta;
        let plane = m.channels * m.height * m.width;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
        }
        Tensor::from_vec(&[indices.len(), m.channels, m.height, m.width], data)
            .expect("images share the dataset shape")
    }
}

/// Load a dataset directory in the raw per-class record layout.
pub fn load_cifar_like(dir: &Path) -> Result<ImageDataset> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = fs::read(&meta_path)
        .map_err(|e| QfxError::Dataset(format!("cannot read {}: {e}", meta_path.display())))?;
    let meta: DatasetMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| QfxError::Dataset(format!("bad meta.json: {e}")))?;
    if meta.classes == 0 || meta.channels == 0 || meta.height == 0 || meta.width == 0 {
        return Err(QfxError::Dataset("meta.json has zero dimensions".into()));
    }

    let record_len = 1 + meta.channels * meta.height * meta.width;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for class in 0..meta.classes {
        let path = dir.join(format!("class_{class}.bin"));
        let bytes = fs::read(&path)
            .map_err(|e| QfxError::Dataset(format!("cannot read {}: {e}", path.display())))?;
        if bytes.len() % record_len != 0 {
            return Err(QfxError::Dataset(format!(
                "{}: length {} is not a multiple of record size {record_len}",
                path.display(),
                bytes.len()
            )));
        }
        for record in bytes.chunks_exact(record_len) {
            let label = record[0] as usize;
            if label >= meta.classes {
                return Err(QfxError::Dataset(format!(
                    "{}: label {label} out of range (classes = {})",
                    path.display(),
                    meta.classes
                )));
            }
            let data: Vec<f64> = record[1..].iter().map(|&b| b as f64 / 255.0).collect();
            images.push(Tensor::from_vec(
                &[meta.channels, meta.height, meta.width],
                data,
            )?);
            labels.push(label);
        }
    }
    Ok(ImageDataset { meta, images, labels })
}

/// Export a dataset in the same layout `load_cifar_like` reads.
/// Pixel values are rounded to the nearest byte.
pub fn save_cifar_like(dir: &Path, dataset: &ImageDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta_json = serde_json::to_string_pretty(&dataset.meta)
        .map_err(|e| QfxError::Dataset(format!("meta serialization: {e}")))?;
    fs::write(dir.join("meta.json"), meta_json)?;

    let m = &dataset.meta;
    if m.classes > 256 {
        return Err(QfxError::Dataset(
            "record label byte limits the layout to 256 classes".into(),
        ));
    }
    let mut per_class: Vec<Vec<u8>> = vec![Vec::new(); m.classes];
    for (img, &label) in dataset.images.iter().zip(&dataset.labels) {
        let buf = &mut per_class[label];
        buf.push(label as u8);
        for &v in img.data() {
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    for (class, buf) in per_class.iter().enumerate() {
        fs::write(dir.join(format!("class_{class}.bin")), buf)?;
    }
    Ok(())
}
