//! Dataset manifest, synthetic corpus, configuration and binary containers.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod manifest;

pub use checkpoint::{load_bank, save_bank, Checkpoint, NamedTensor, Precision, BANK_MAGIC, CHECKPOINT_MAGIC};
pub use config::{FrameMode, InputMode, RunConfig, DEFAULT_CLASSES};
pub use corpus::generate_synthetic_corpus;
pub use manifest::{DatasetManifest, ManifestEntry, Split};
