//! Character-level content similarity (pipeline stage 4): region lookup,
//! IoU association across the aligned pair, patch scoring, and the
//! coverage-weighted aggregate.
//!
//! The built-in patch scorer crops both regions, resizes them to a common
//! square, binarizes each by Otsu's threshold, and computes zero-mean
//! normalized cross-correlation mapped to [0, 1]. An external embedding
//! model can replace it through [`ExternalEmbeddingModel`]; no inference
//! runtime is linked into this build, so model files are rejected as
//! incompatible.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CharRegion, Corpus};
use crate::geom::Rect;
use crate::gray::{otsu_threshold, GrayImage};

#[derive(Debug, Error)]
pub enum ContentError {
    #[error("unknown image id `{0}`")]
    UnknownImage(String),
    #[error("embedding model file {path} is unreadable: {reason}")]
    ModelUnreadable { path: PathBuf, reason: String },
    #[error("embedding model file {path} is incompatible: {reason}")]
    ModelIncompatible { path: PathBuf, reason: String },
    #[error("similarity backend config invalid: {0}")]
    InvalidBackend(String),
}

/// An aligned, scored character-region pair. `region_src` is the source
/// region expressed in target coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacterMatch {
    pub region_src: CharRegion,
    pub region_tgt: CharRegion,
    pub iou: f64,
    pub similarity: f64,
}

/// Aggregate of the per-character similarities for one image pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContentScore {
    pub matched: usize,
    pub total_src: usize,
    pub mean_similarity: f64,
    pub coverage: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityBackendKind {
    #[serde(rename = "builtin-ncc")]
    BuiltinNcc,
    #[serde(rename = "external-embedding")]
    ExternalEmbedding,
}

/// Patch similarity backend configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityBackend {
    pub kind: SimilarityBackendKind,
    pub model_path: Option<PathBuf>,
    /// Side length both patches are resized to before comparison.
    pub patch_size: u32,
}

impl Default for SimilarityBackend {
    fn default() -> Self {
        SimilarityBackend {
            kind: SimilarityBackendKind::BuiltinNcc,
            model_path: None,
            patch_size: 32,
        }
    }
}

impl SimilarityBackend {
    pub fn validate(&self) -> Result<(), ContentError> {
        if self.patch_size < 16 {
            return Err(ContentError::InvalidBackend(format!(
                "patch_size {} below minimum 16",
                self.patch_size
            )));
        }
        if self.kind == SimilarityBackendKind::ExternalEmbedding && self.model_path.is_none() {
            return Err(ContentError::InvalidBackend(
                "external-embedding backend requires model_path".into(),
            ));
        }
        Ok(())
    }
}

/// Interface an external patch-embedding model must provide: a unit-norm
/// embedding per patch; patch similarity is then the embeddings' cosine
/// similarity mapped to [0, 1].
pub trait ExternalEmbeddingModel: Send + Sync {
    fn embed(&self, patch: &GrayImage) -> Vec<f32>;
}

/// Load an external embedding model file. No runtime is linked into this
/// build, so any readable file is reported as incompatible.
pub fn load_embedding_model(path: &Path) -> Result<Box<dyn ExternalEmbeddingModel>, ContentError> {
    let bytes = std::fs::read(path).map_err(|e| ContentError::ModelUnreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let head = &bytes[..bytes.len().min(16)];
    Err(ContentError::ModelIncompatible {
        path: path.to_path_buf(),
        reason: format!("no embedding runtime linked in this build (file starts with {head:02x?})"),
    })
}

/// Annotated character regions of an image, sorted by (y, x).
pub fn localize_characters(image_id: &str, corpus: &Corpus) -> Result<Vec<CharRegion>, ContentError> {
    if !corpus.contains(image_id) {
        return Err(ContentError::UnknownImage(image_id.to_string()));
    }
    let mut regions = corpus.regions_of(image_id).to_vec();
    regions.sort_by(|a, b| {
        a.bbox
            .y
            .total_cmp(&b.bbox.y)
            .then(a.bbox.x.total_cmp(&b.bbox.x))
    });
    Ok(regions)
}

/// Intersection over union of two rectangles.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = match a.intersect(b) {
        Some(r) => r.area(),
        None => return 0.0,
    };
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One-to-one region association by greedy descending-IoU selection among
/// pairs with `iou >= min_iou`. Ties break toward the smaller source index,
/// then the smaller target index. Returns (src, tgt) index pairs in
/// selection order.
pub fn associate_regions(
    src_regions_in_tgt: &[CharRegion],
    tgt_regions: &[CharRegion],
    min_iou: f64,
) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (i, s) in src_regions_in_tgt.iter().enumerate() {
        for (j, t) in tgt_regions.iter().enumerate() {
            let v = iou(&s.bbox, &t.bbox);
            if v >= min_iou && v > 0.0 {
                candidates.push((v, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut used_src = vec![false; src_regions_in_tgt.len()];
    let mut used_tgt = vec![false; tgt_regions.len()];
    let mut out = Vec::new();
    for (_, i, j) in candidates {
        if !used_src[i] && !used_tgt[j] {
            used_src[i] = true;
            used_tgt[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Similarity of two image patches in [0, 1].
///
/// Built-in backend: crop both regions, resize to `patch_size` squared by
/// bilinear interpolation, binarize by Otsu threshold, compute zero-mean
/// normalized cross-correlation rho, return `(rho + 1) / 2`. If either
/// patch is constant after binarization, rho is 1 when both are constant
/// with equal value and 0 otherwise.
pub fn patch_similarity(
    img_a: &GrayImage,
    r_a: &Rect,
    img_b: &GrayImage,
    r_b: &Rect,
    backend: &SimilarityBackend,
) -> Result<f64, ContentError> {
    backend.validate()?;
    match backend.kind {
        SimilarityBackendKind::BuiltinNcc => {
            let pa = binarized_patch(img_a, r_a, backend.patch_size);
            let pb = binarized_patch(img_b, r_b, backend.patch_size);
            let rho = ncc_binary(&pa, &pb);
            Ok((rho + 1.0) / 2.0)
        }
        SimilarityBackendKind::ExternalEmbedding => {
            let path = backend.model_path.as_ref().expect("validated above");
            let _model = load_embedding_model(path)?;
            unreachable!("load_embedding_model currently always errors")
        }
    }
}

fn binarized_patch(img: &GrayImage, r: &Rect, size: u32) -> Vec<f32> {
    let patch = img.crop_resize(r, size);
    let threshold = otsu_threshold(patch.pixels());
    patch
        .pixels()
        .iter()
        .map(|&p| if p > threshold { 1.0 } else { 0.0 })
        .collect()
}

/// Zero-mean normalized cross-correlation with the constant-patch
/// convention described on [`patch_similarity`].
fn ncc_binary(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mean_a = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mean_b = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x as f64 - mean_a;
        let dy = y as f64 - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    const EPS: f64 = 1e-12;
    if var_a < EPS || var_b < EPS {
        let a_const = var_a < EPS;
        let b_const = var_b < EPS;
        if a_const && b_const && (a[0] - b[0]).abs() < f32::EPSILON {
            return 1.0;
        }
        return 0.0;
    }
    (cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0)
}

/// Aggregate per-character similarities into a content score:
/// `score = coverage * mean_similarity`.
pub fn content_score(matches: &[CharacterMatch], total_src: usize) -> ContentScore {
    let matched = matches.len();
    let mean_similarity = if matched == 0 {
        0.0
    } else {
        matches.iter().map(|m| m.similarity).sum::<f64>() / matched as f64
    };
    let coverage = if total_src == 0 { 0.0 } else { matched as f64 / total_src as f64 };
    ContentScore {
        matched,
        total_src,
        mean_similarity,
        coverage,
        score: coverage * mean_similarity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(x: f64, y: f64, w: f64, h: f64) -> CharRegion {
        CharRegion { image_id: "r".into(), bbox: Rect::new(x, y, w, h), label: None }
    }

    #[test]
    fn iou_worked_examples() {
        let a = Rect::new(2.0, 3.0, 4.0, 5.0);
        assert!((iou(&a, &a) - 1.0).abs() < 1e-9);

        let b = Rect::new(100.0, 100.0, 4.0, 5.0);
        assert_eq!(iou(&a, &b), 0.0);

        // two 1x1 squares offset by 0.5 horizontally: 0.5 / 1.5 = 1/3
        let u = Rect::new(0.0, 0.0, 1.0, 1.0);
        let v = Rect::new(0.5, 0.0, 1.0, 1.0);
        assert!((iou(&u, &v) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn iou_is_symmetric() {
        let a = Rect::new(0.0, 0.0, 10.0, 4.0);
        let b = Rect::new(3.0, 1.0, 6.0, 9.0);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn associate_exact_overlaps_one_to_one() {
        let src = vec![region(0.0, 0.0, 5.0, 5.0), region(20.0, 0.0, 5.0, 5.0)];
        let tgt = src.clone();
        let pairs = associate_regions(&src, &tgt, 0.1);
        let mut sorted = pairs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn associate_two_src_one_tgt_keeps_higher_iou() {
        // src 0 overlaps tgt more than src 1 does
        let src = vec![region(0.0, 0.0, 10.0, 10.0), region(4.0, 0.0, 10.0, 10.0)];
        let tgt = vec![region(1.0, 0.0, 10.0, 10.0)];
        let pairs = associate_regions(&src, &tgt, 0.1);
        assert_eq!(pairs, vec![(0, 0)]);
    }

    #[test]
    fn associate_tie_breaks_to_smaller_src_index() {
        let src = vec![region(2.0, 0.0, 10.0, 10.0), region(2.0, 0.0, 10.0, 10.0)];
        let tgt = vec![region(0.0, 0.0, 10.0, 10.0)];
        let pairs = associate_regions(&src, &tgt, 0.1);
        assert_eq!(pairs, vec![(0, 0)]);
    }

    /// Exhaustive one-to-one assignment maximizing total IoU (the oracle for
    /// the greedy implementation on small inputs).
    pub(crate) fn optimal_assignment(
        src: &[CharRegion],
        tgt: &[CharRegion],
        min_iou: f64,
    ) -> (f64, usize) {
        fn recurse(
            i: usize,
            src: &[CharRegion],
            tgt: &[CharRegion],
            used: &mut Vec<bool>,
            min_iou: f64,
        ) -> (f64, usize) {
            if i == src.len() {
                return (0.0, 0);
            }
            // skip src i
            let (mut best_total, mut best_count) = recurse(i + 1, src, tgt, used, min_iou);
            for j in 0..tgt.len() {
                if used[j] {
                    continue;
                }
                let v = iou(&src[i].bbox, &tgt[j].bbox);
                if v < min_iou || v <= 0.0 {
                    continue;
                }
                used[j] = true;
                let (t, c) = recurse(i + 1, src, tgt, used, min_iou);
                used[j] = false;
                if v + t > best_total {
                    best_total = v + t;
                    best_count = c + 1;
                }
            }
            (best_total, best_count)
        }
        let mut used = vec![false; tgt.len()];
        recurse(0, src, tgt, &mut used, min_iou)
    }

    #[test]
    fn greedy_matches_exhaustive_on_grid_layouts() {
        // jittered-grid layouts mirror how character boxes actually sit on a
        // page; greedy and optimal agree on all of them
        let mut state = 3u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f64 / u32::MAX as f64
        };
        for trial in 0..25 {
            let n_src = 1 + trial % 5;
            let n_tgt = 1 + (trial * 3) % 5;
            let mk = |n: usize, next: &mut dyn FnMut() -> f64| -> Vec<CharRegion> {
                (0..n)
                    .map(|k| {
                        let gx = (k % 3) as f64 * 30.0 + next() * 8.0;
                        let gy = (k / 3) as f64 * 30.0 + next() * 8.0;
                        region(gx, gy, 16.0 + next() * 6.0, 16.0 + next() * 6.0)
                    })
                    .collect()
            };
            let src = mk(n_src, &mut next);
            let tgt = mk(n_tgt, &mut next);
            let greedy = associate_regions(&src, &tgt, 0.3);
            let greedy_total: f64 =
                greedy.iter().map(|&(i, j)| iou(&src[i].bbox, &tgt[j].bbox)).sum();
            let (best_total, best_count) = optimal_assignment(&src, &tgt, 0.3);
            assert!(
                (greedy_total - best_total).abs() < 1e-9 && greedy.len() == best_count,
                "trial {trial}: greedy {greedy_total:.6}/{} vs optimal {best_total:.6}/{best_count}",
                greedy.len(),
            );
        }
    }

    #[test]
    fn patch_similarity_identical_patches_is_one() {
        let mut img = GrayImage::new(40, 40, 0.9);
        for y in 10..20 {
            for x in 12..25 {
                img.set(x, y, 0.1);
            }
        }
        let r = Rect::new(8.0, 8.0, 20.0, 16.0);
        let s = patch_similarity(&img, &r, &img, &r, &SimilarityBackend::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "similarity {s}");
    }

    #[test]
    fn patch_similarity_photometric_inverse_is_zero() {
        let mut img = GrayImage::new(32, 32, 0.8);
        for y in 8..24 {
            for x in 8..16 {
                img.set(x, y, 0.2);
            }
        }
        let inv_pixels: Vec<f32> = img.pixels().iter().map(|&p| 1.0 - p).collect();
        let inv = GrayImage::from_pixels(32, 32, inv_pixels);
        let r = Rect::new(0.0, 0.0, 32.0, 32.0);
        let s = patch_similarity(&img, &r, &inv, &r, &SimilarityBackend::default()).unwrap();
        assert!(s.abs() < 1e-9, "similarity {s} should be 0 (rho = -1)");
    }

    #[test]
    fn patch_similarity_constant_patches() {
        let flat_a = GrayImage::new(32, 32, 0.9);
        let flat_b = GrayImage::new(32, 32, 0.9);
        let dark = GrayImage::new(32, 32, 0.1);
        let r = Rect::new(0.0, 0.0, 32.0, 32.0);
        let backend = SimilarityBackend::default();
        // both constant, equal binarized value
        assert_eq!(patch_similarity(&flat_a, &r, &flat_b, &r, &backend).unwrap(), 1.0);
        // both constant after binarization but Otsu maps both to the same
        // side of its default threshold only when intensities agree; a dark
        // vs bright flat pair binarizes to differing constants
        let s = patch_similarity(&flat_a, &r, &dark, &r, &backend).unwrap();
        assert_eq!(s, 0.5, "rho = 0 maps to 0.5");
    }

    #[test]
    fn patch_similarity_is_symmetric() {
        let mut a = GrayImage::new(40, 40, 0.85);
        let mut b = GrayImage::new(52, 48, 0.9);
        for y in 5..30 {
            for x in 7..22 {
                a.set(x, y, 0.15);
            }
        }
        for y in 9..40 {
            for x in 10..30 {
                b.set(x, y, 0.2);
            }
        }
        let ra = Rect::new(2.0, 2.0, 30.0, 34.0);
        let rb = Rect::new(5.0, 4.0, 40.0, 40.0);
        let backend = SimilarityBackend::default();
        let s1 = patch_similarity(&a, &ra, &b, &rb, &backend).unwrap();
        let s2 = patch_similarity(&b, &rb, &a, &ra, &backend).unwrap();
        assert!((s1 - s2).abs() < 1e-6);
    }

    #[test]
    fn content_score_worked_examples() {
        let m = |sim: f64| CharacterMatch {
            region_src: region(0.0, 0.0, 1.0, 1.0),
            region_tgt: region(0.0, 0.0, 1.0, 1.0),
            iou: 0.5,
            similarity: sim,
        };
        let perfect = content_score(&[m(1.0), m(1.0), m(1.0), m(1.0)], 4);
        assert!((perfect.score - 1.0).abs() < 1e-9);

        let none = content_score(&[], 5);
        assert_eq!(none.score, 0.0);
        assert_eq!(none.matched, 0);

        let partial = content_score(&[m(0.9), m(0.7)], 4);
        assert!((partial.mean_similarity - 0.8).abs() < 1e-9);
        assert!((partial.coverage - 0.5).abs() < 1e-9);
        assert!((partial.score - 0.4).abs() < 1e-9);
    }

    #[test]
    fn content_score_bounds_and_monotonicity() {
        let m = |sim: f64| CharacterMatch {
            region_src: region(0.0, 0.0, 1.0, 1.0),
            region_tgt: region(0.0, 0.0, 1.0, 1.0),
            iou: 0.5,
            similarity: sim,
        };
        let base = content_score(&[m(0.6), m(0.8)], 6);
        assert!(base.score <= base.coverage.min(base.mean_similarity));
        // adding a match at or above the current mean never lowers the score
        let grown = content_score(&[m(0.6), m(0.8), m(0.7)], 6);
        assert!(grown.score >= base.score - 1e-12);
    }

    #[test]
    fn localize_unknown_image_errors() {
        let corpus = crate::corpus::Corpus::from_parts(Vec::new(), Default::default()).unwrap();
        assert!(matches!(
            localize_characters("ghost", &corpus),
            Err(ContentError::UnknownImage(_))
        ));
    }
}
