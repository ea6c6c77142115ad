//! Dataset ingestion: manifests, images, augmentation and batch sampling.

pub mod augment;
pub mod imageio;
pub mod manifest;
pub mod sampler;

pub use augment::{augment, AugmentConfig};
pub use imageio::{load_image, resize, save_image, CHANNELS};
pub use manifest::{load_manifest, scan_tree, write_manifest, Dataset, ImageRecord, ManifestEntry, Split};
pub use sampler::{label_batch, Batch, PkSampler};
