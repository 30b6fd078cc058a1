//! Hyperspectral cubes, annotations, band matching and synthetic scenes.

mod annotations;
mod bands;
mod cube;
mod sample;
mod synth;

use std::path::Path;

use thiserror::Error;

pub use annotations::{
    annotation_file_for, cube_file_name, default_categories, load_annotations, load_dataset, save_annotations,
    save_dataset, AnnotationEntry, AnnotationFile, Category, ImageEntry, ANNOTATION_FILE,
};
pub use bands::{band_mapping, match_bands};
pub use cube::{read_cube, write_cube, HyperCube, CUBE_MAGIC, CUBE_VERSION};
pub use sample::{AnnotatedSample, LabelAccess, Object};
pub use synth::{band_centers, generate_domain_pair, spectral_angle, DomainPair, Signature, SynthConfig};

#[derive(Debug, Error)]
pub enum HsiError {
    #[error("not a cube file (bad magic)")]
    BadMagic,
    #[error("unsupported cube format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("cube dimensions must be positive, got {width}x{height}x{bands}")]
    EmptyDimension { width: usize, height: usize, bands: usize },
    #[error("malformed annotation JSON: {0}")]
    Json(String),
    #[error("image {image_id}: box {bbox:?} exceeds {width}x{height}")]
    BoxOutOfBounds {
        image_id: u64,
        bbox: [f32; 4],
        width: usize,
        height: usize,
    },
    #[error("image {image_id}: box {bbox:?} has non-positive size")]
    DegenerateBox { image_id: u64, bbox: [f32; 4] },
    #[error("annotation refers to unknown image {0}")]
    UnknownImage(u64),
    #[error("image {image_id}: unknown category {category_id}")]
    BadCategory { image_id: u64, category_id: usize },
    #[error("labels of held-out sample {0} requested by training code")]
    HeldOutLabels(u64),
    #[error("{0}")]
    Mismatch(String),
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HsiError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HsiError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
