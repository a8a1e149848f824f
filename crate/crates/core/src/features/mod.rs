//! Keypoint detection and description (pipeline stage 1).
//!
//! Two backends sit behind one interface: a built-in classical detector
//! (difference-of-Gaussians extrema with upright gradient descriptors) and
//! a plug-in slot for an external pretrained model. The external contract
//! is a serialized inference graph mapping a 1xHxW grayscale tensor to a
//! keypoint heatmap plus a dense descriptor map; no inference runtime is
//! linked into this build, so loading any model file reports it as
//! incompatible. Implement [`ExternalFeatureModel`] and extend
//! [`load_external_model`] to plug one in.

mod descriptor;
mod dog;
pub mod index;

pub use index::{build_index, load_index, FeatureIndex, ImageFeatures, IndexError};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gray::GrayImage;

pub use descriptor::DESCRIPTOR_DIM;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image is {width}x{height}; the scale pyramid needs at least 32 px per side")]
    ImageTooSmall { width: u32, height: u32 },
    #[error("external model file {path} is unreadable: {reason}")]
    ModelUnreadable { path: PathBuf, reason: String },
    #[error("external model file {path} is incompatible: {reason}")]
    ModelIncompatible { path: PathBuf, reason: String },
    #[error("backend config invalid: {0}")]
    InvalidBackend(String),
}

/// A detected interest point in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    /// Detection scale in pixels.
    pub scale: f32,
    /// Detector strength, non-negative.
    pub response: f32,
}

/// Row-major matrix of unit-norm descriptors, one row per keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    data: Vec<f32>,
}

impl DescriptorSet {
    pub fn new(dim: usize, data: Vec<f32>) -> Self {
        assert!(dim > 0 && data.len() % dim == 0, "descriptor data shape mismatch");
        DescriptorSet { dim, data }
    }

    pub fn empty(dim: usize) -> Self {
        DescriptorSet { dim, data: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureBackendKind {
    #[serde(rename = "builtin-classical")]
    BuiltinClassical,
    #[serde(rename = "external-model")]
    ExternalModel,
}

/// Feature extraction backend configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureBackend {
    pub kind: FeatureBackendKind,
    pub model_path: Option<PathBuf>,
    /// Keep at most this many keypoints, highest response first.
    pub max_keypoints: usize,
}

impl Default for FeatureBackend {
    fn default() -> Self {
        FeatureBackend {
            kind: FeatureBackendKind::BuiltinClassical,
            model_path: None,
            max_keypoints: 1024,
        }
    }
}

impl FeatureBackend {
    pub fn builtin(max_keypoints: usize) -> Self {
        FeatureBackend { max_keypoints, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.max_keypoints < 8 {
            return Err(FeatureError::InvalidBackend(format!(
                "max_keypoints {} below minimum 8",
                self.max_keypoints
            )));
        }
        if self.kind == FeatureBackendKind::ExternalModel && self.model_path.is_none() {
            return Err(FeatureError::InvalidBackend(
                "external-model backend requires model_path".into(),
            ));
        }
        Ok(())
    }

    /// Stable fingerprint over everything that affects extraction output;
    /// persisted into feature indexes and checked on reload.
    pub fn fingerprint(&self) -> Result<String, FeatureError> {
        let mut hasher = Sha256::new();
        hasher.update(b"feature-backend-v2\x00");
        match self.kind {
            FeatureBackendKind::BuiltinClassical => {
                hasher.update(b"builtin-classical\x00");
                let mut params = String::new();
                write!(
                    params,
                    "octaves={};intervals={};sigma0={};contrast={};edge={};dim={}",
                    dog::MAX_OCTAVES,
                    dog::INTERVALS,
                    dog::SIGMA0,
                    dog::CONTRAST_THRESHOLD,
                    dog::EDGE_RATIO,
                    DESCRIPTOR_DIM,
                )
                .expect("write to string");
                hasher.update(params.as_bytes());
            }
            FeatureBackendKind::ExternalModel => {
                hasher.update(b"external-model\x00");
                let path = self.model_path.as_ref().ok_or_else(|| {
                    FeatureError::InvalidBackend("external-model backend requires model_path".into())
                })?;
                let bytes = std::fs::read(path).map_err(|e| FeatureError::ModelUnreadable {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                hasher.update(&bytes);
            }
        }
        hasher.update(self.max_keypoints.to_le_bytes());
        Ok(hex_digest(hasher))
    }
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    let digest = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").expect("write to string");
    }
    s
}

/// Inference interface an external keypoint model must provide. The heatmap
/// is decoded with the same non-maximum suppression as the built-in
/// detector; descriptors are read off the dense map at keypoint locations.
pub trait ExternalFeatureModel: Send + Sync {
    /// Returns (heatmap, descriptor map, descriptor dim). Both maps are
    /// row-major at input resolution.
    fn infer(&self, image: &GrayImage) -> (Vec<f32>, Vec<f32>, usize);
}

/// Load an external model file. No inference runtime is linked into this
/// build, so every format is reported as incompatible; the file must at
/// least be readable to distinguish the two error cases.
pub fn load_external_model(path: &Path) -> Result<Box<dyn ExternalFeatureModel>, FeatureError> {
    let bytes = std::fs::read(path).map_err(|e| FeatureError::ModelUnreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let head = &bytes[..bytes.len().min(16)];
    Err(FeatureError::ModelIncompatible {
        path: path.to_path_buf(),
        reason: format!(
            "no inference runtime linked in this build (file starts with {:02x?})",
            head
        ),
    })
}

/// Detect keypoints and compute descriptors for one image.
///
/// Keypoints come back sorted by descending response, capped at
/// `max_keypoints`, with descriptor rows aligned to keypoints. The result is
/// a pure function of (image, backend).
pub fn extract_features(
    image: &GrayImage,
    backend: &FeatureBackend,
) -> Result<(Vec<Keypoint>, DescriptorSet), FeatureError> {
    backend.validate()?;
    if image.width() < 32 || image.height() < 32 {
        return Err(FeatureError::ImageTooSmall {
            width: image.width(),
            height: image.height(),
        });
    }
    match backend.kind {
        FeatureBackendKind::BuiltinClassical => Ok(extract_builtin(image, backend.max_keypoints)),
        FeatureBackendKind::ExternalModel => {
            let path = backend.model_path.as_ref().expect("validated above");
            let _model = load_external_model(path)?;
            unreachable!("load_external_model currently always errors")
        }
    }
}

fn extract_builtin(image: &GrayImage, max_keypoints: usize) -> (Vec<Keypoint>, DescriptorSet) {
    let pyramid = dog::build_pyramid(image);
    let mut points = dog::detect(&pyramid);
    points.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.octave.cmp(&b.octave))
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    points.truncate(max_keypoints);
    let (keypoints, data) = descriptor::compute(&pyramid, &points);
    let descriptors = DescriptorSet::new(DESCRIPTOR_DIM, data);
    (keypoints, descriptors)
}
