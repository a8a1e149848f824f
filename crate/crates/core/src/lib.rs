//! Coarse-to-fine duplicate discovery for scanned manuscript images.
//!
//! Candidate image pairs flow through four stages:
//!
//! 1. keypoint detection and description (difference-of-Gaussians extrema
//!    with upright gradient descriptors, or an external pretrained model);
//! 2. mutual-nearest-neighbor descriptor matching with a ratio test, plus a
//!    coarse filter that prunes pairs with a low overall degree of match;
//! 3. robust affine alignment (RANSAC) mapping the fewer-keypoint image's
//!    coordinates into the other image's frame;
//! 4. character-level content similarity: annotated character regions are
//!    associated by IoU across the aligned pair and scored by normalized
//!    cross-correlation (or an external embedding model), aggregated as
//!    `coverage * mean similarity`.
//!
//! Around the pipeline sit a corpus model with a deterministic synthetic
//! generator, a persistent feature index, group-scoped search and
//! group-wide discovery, and a Recall@K / Rank@K evaluation harness.

pub mod alignment;
pub mod config;
pub mod content;
pub mod corpus;
pub mod evaluation;
pub mod features;
pub mod geom;
pub mod gray;
pub mod matching;
pub mod retrieval;

pub use alignment::{apply_affine, estimate_affine, transform_region, AffineModel, Direction};
pub use config::PipelineConfig;
pub use content::{
    associate_regions, content_score, iou, localize_characters, patch_similarity, CharacterMatch,
    ContentScore, SimilarityBackend, SimilarityBackendKind,
};
pub use corpus::{
    generate_synthetic, load_corpus, load_ground_truth, write_corpus, CharRegion, Corpus,
    CorpusError, ImageRecord, SynthConfig,
};
pub use evaluation::{benchmark, rank_at_k, recall_at_k, EvalReport, TimingMode};
pub use features::{
    build_index, extract_features, load_index, DescriptorSet, FeatureBackend, FeatureBackendKind,
    FeatureIndex, Keypoint,
};
pub use geom::{Affine2, Rect};
pub use gray::GrayImage;
pub use matching::{
    coarse_filter, match_descriptors, CoarseFilterPolicy, FilterDecision, MatchSet,
};
pub use retrieval::{discover, score_pair, search, CandidateScore, RankedList, Stage};
