//! Persistence and file formats: checkpoints, image and sound codecs,
//! configuration files and dataset manifests.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use codec::{decode_image, decode_wav, encode_image, encode_wav};
pub use config::{ObservationConfig, ObservationKind, TrainConfig};
pub use dataset::{Dataset, DatasetManifest};
