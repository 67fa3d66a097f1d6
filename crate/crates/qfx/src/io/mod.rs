//! Persistence and data: named-tensor weight files, the seeded synthetic
//! grating dataset, and the raw binary image-dataset layout.

mod dataset;
mod synthetic;
mod weights;

pub use dataset::{load_cifar_like, save_cifar_like, DatasetMeta, ImageDataset};
pub use synthetic::{generate_synthetic, SyntheticDatasetSpec};
pub use weights::{load_weights, save_weights, store_hash, WeightStore, WEIGHT_MAGIC};
