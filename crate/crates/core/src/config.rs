//! Pipeline configuration: one serializable struct covering every stage's
//! thresholds. Unknown keys are rejected so stale config files fail loudly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::SimilarityBackend;
use crate::features::FeatureBackend;
use crate::matching::CoarseFilterPolicy;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config {path}: {reason}")]
    Malformed { path: std::path::PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingConfig {
    /// Lowe ratio-test threshold in (0, 1].
    pub ratio: f64,
    pub coarse: CoarseFilterPolicy,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        MatchingConfig { ratio: 0.85, coarse: CoarseFilterPolicy::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    /// RANSAC inlier tolerance, pixels.
    pub inlier_tol: f64,
    pub max_iters: usize,
    /// Global seed; per-pair seeds are derived from it and the image ids.
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig { inlier_tol: 3.0, max_iters: 500, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContentConfig {
    /// Minimum IoU for a source/target region association.
    pub min_iou: f64,
}

impl Default for ContentConfig {
    fn default() -> Self {
        ContentConfig { min_iou: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    /// Default ranked-list depth.
    pub k: usize,
    /// Minimum final score for `discover` to report a pair.
    pub discover_threshold: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { k: 25, discover_threshold: 0.5 }
    }
}

/// Everything the pipeline needs to score pairs, rank candidates, and run
/// evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Display name used as the method row in report tables.
    pub name: String,
    pub features: FeatureBackend,
    pub similarity: SimilarityBackend,
    pub matching: MatchingConfig,
    pub alignment: AlignmentConfig,
    pub content: ContentConfig,
    pub retrieval: RetrievalConfig,
    /// Worker threads for pair scoring; 0 uses the default pool size.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            name: "builtin".to_string(),
            features: FeatureBackend::default(),
            similarity: SimilarityBackend::default(),
            matching: MatchingConfig::default(),
            alignment: AlignmentConfig::default(),
            content: ContentConfig::default(),
            retrieval: RetrievalConfig::default(),
            workers: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.features
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.similarity
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.matching.ratio > 0.0 && self.matching.ratio <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "matching.ratio {} outside (0, 1]",
                self.matching.ratio
            )));
        }
        let coarse = &self.matching.coarse;
        if coarse.min_matches < 4 {
            return Err(ConfigError::Invalid(format!(
                "coarse.min_matches {} below minimum 4 (affine fitting needs 3 plus a spare)",
                coarse.min_matches
            )));
        }
        if !(0.0..=1.0).contains(&coarse.min_match_ratio) {
            return Err(ConfigError::Invalid(format!(
                "coarse.min_match_ratio {} outside [0, 1]",
                coarse.min_match_ratio
            )));
        }
        if !(-1.0..=1.0).contains(&coarse.min_mean_similarity) {
            return Err(ConfigError::Invalid(format!(
                "coarse.min_mean_similarity {} outside [-1, 1]",
                coarse.min_mean_similarity
            )));
        }
        if self.alignment.inlier_tol <= 0.0 {
            return Err(ConfigError::Invalid("alignment.inlier_tol must be positive".into()));
        }
        if self.alignment.max_iters == 0 {
            return Err(ConfigError::Invalid("alignment.max_iters must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.content.min_iou) {
            return Err(ConfigError::Invalid(format!(
                "content.min_iou {} outside [0, 1]",
                self.content.min_iou
            )));
        }
        if self.retrieval.k == 0 {
            return Err(ConfigError::Invalid("retrieval.k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.retrieval.discover_threshold) {
            return Err(ConfigError::Invalid(format!(
                "retrieval.discover_threshold {} outside [0, 1]",
                self.retrieval.discover_threshold
            )));
        }
        Ok(())
    }

    /// Load and validate a JSON config file.
    pub fn load(path: &Path) -> Result<PipelineConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Malformed {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization")
    }
}
