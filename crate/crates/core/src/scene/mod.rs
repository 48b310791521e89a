//! Deterministic synthetic scenes and the on-disk dataset built from them.

mod codec;
mod dataset;
mod render;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use codec::{decode_fmap, decode_png, encode_fmap, encode_png, read_fmap, read_png, write_fmap, write_png, FMAP_MAGIC};
pub use dataset::{
    sample_id, save_sample, scene_seed, synthesize_dataset, Dataset, DatasetConfig, DatasetManifest, SampleMeta,
    Split, SplitCounts, MANIFEST_FILE, SEALED_DIR,
};
pub use render::{render_scene, BoxLabel, Domain, SceneSample, SceneSpec, CLASS_NAMES};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error at {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt file {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },
    #[error("image codec error at {}: {reason}", path.display())]
    Image { path: PathBuf, reason: String },
    #[error("invalid JSON in {}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("checksum mismatch for {}: expected {expected}, found {actual}", path.display())]
    Checksum { path: PathBuf, expected: String, actual: String },
    #[error("unknown sample id `{0}`")]
    NotFound(String),
    #[error("output directory {} is not empty (pass overwrite to replace it)", .0.display())]
    OutDirNotEmpty(PathBuf),
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn at(self, path: &Path) -> Self {
        match self {
            Self::Image { reason, .. } => Self::Image { path: path.to_path_buf(), reason },
            other => other,
        }
    }
}
