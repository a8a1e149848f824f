//! Corpus model and I/O: manifests, character-region annotations, ground
//! truth, and retrieval groups.
//!
//! On-disk layout:
//! - manifest: JSON Lines, one `{"id", "group", "path"}` object per image;
//! - annotations: one JSON document `{image_id: [{x, y, w, h, label?}]}`
//!   (a region may instead carry `quad: [[x,y]; 4]`, which is collapsed to
//!   its bounding rectangle at load time);
//! - ground truth: JSON `{query_id: [duplicate_id, ...]}`;
//! - images: 8-bit grayscale PNG. Color inputs are converted by averaging
//!   the RGB channels.

mod synth;

pub use synth::{generate_synthetic, generate_synthetic_detailed, PlantedDuplicate, SynthConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Rect;
use crate::gray::GrayImage;

/// Minimum image side length the pipeline accepts.
pub const MIN_IMAGE_SIDE: u32 = 32;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed manifest record: {reason}")]
    MalformedRecord { path: PathBuf, line: usize, reason: String },
    #[error("duplicate image id `{id}` ({path}:{line})")]
    DuplicateId { id: String, path: PathBuf, line: usize },
    #[error("image file {path} referenced by `{id}` could not be decoded: {reason}")]
    BadImage { id: String, path: PathBuf, reason: String },
    #[error("image `{id}` is {width}x{height}; both sides must be at least {MIN_IMAGE_SIDE} px")]
    ImageTooSmall { id: String, width: u32, height: u32 },
    #[error("malformed annotations in {path}: {reason}")]
    MalformedAnnotations { path: PathBuf, reason: String },
    #[error("annotation region out of bounds for image `{id}`: {reason}")]
    RegionOutOfBounds { id: String, reason: String },
    #[error("annotations reference unknown image id `{id}`")]
    UnknownAnnotatedImage { id: String },
    #[error("unknown image id `{id}`")]
    UnknownImage { id: String },
    #[error("ground truth references unknown image id `{id}`")]
    UnknownGroundTruthImage { id: String },
    #[error("ground-truth pair ({query}, {duplicate}) spans groups `{qg}` and `{dg}`")]
    CrossGroupTruth { query: String, duplicate: String, qg: String, dg: String },
}

/// One grayscale manuscript image with identity and group membership.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub group: String,
    pub image: GrayImage,
    pub source_path: PathBuf,
}

impl ImageRecord {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }
}

/// A localized character region inside one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CharRegion {
    pub image_id: String,
    pub bbox: Rect,
    pub label: Option<String>,
}

/// An immutable image collection with annotations, retrieval groups, and
/// optional ground truth. Construction validates all cross-references, so a
/// `Corpus` value always satisfies its invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    images: Vec<ImageRecord>,
    regions: BTreeMap<String, Vec<CharRegion>>,
    groups: BTreeMap<String, Vec<String>>,
    ground_truth: Option<BTreeMap<String, BTreeSet<String>>>,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    /// Assemble a corpus from records and annotations, building the group
    /// partition from each record's group field.
    pub fn from_parts(
        images: Vec<ImageRecord>,
        regions: BTreeMap<String, Vec<CharRegion>>,
    ) -> Result<Corpus, CorpusError> {
        let mut by_id = BTreeMap::new();
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, rec) in images.iter().enumerate() {
            if rec.width() < MIN_IMAGE_SIDE || rec.height() < MIN_IMAGE_SIDE {
                return Err(CorpusError::ImageTooSmall {
                    id: rec.id.clone(),
                    width: rec.width(),
                    height: rec.height(),
                });
            }
            if by_id.insert(rec.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId {
                    id: rec.id.clone(),
                    path: rec.source_path.clone(),
                    line: 0,
                });
            }
            groups.entry(rec.group.clone()).or_default().push(rec.id.clone());
        }
        for (id, regs) in &regions {
            let idx = *by_id
                .get(id)
                .ok_or_else(|| CorpusError::UnknownAnnotatedImage { id: id.clone() })?;
            let rec = &images[idx];
            for r in regs {
                validate_region_bounds(id, &r.bbox, rec.width(), rec.height())?;
            }
        }
        Ok(Corpus { images, regions, groups, ground_truth: None, by_id })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.by_id.get(id).map(|&i| &self.images[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Annotated regions for an image; empty when the image carries none.
    pub fn regions_of(&self, id: &str) -> &[CharRegion] {
        self.regions.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn regions(&self) -> &BTreeMap<String, Vec<CharRegion>> {
        &self.regions
    }

    pub fn groups(&self) -> &BTreeMap<String, Vec<String>> {
        &self.groups
    }

    pub fn group_members(&self, group: &str) -> Option<&[String]> {
        self.groups.get(group).map(Vec::as_slice)
    }

    /// The unique group containing `id`.
    pub fn group_of(&self, id: &str) -> Result<&str, CorpusError> {
        self.by_id
            .get(id)
            .map(|&i| self.images[i].group.as_str())
            .ok_or_else(|| CorpusError::UnknownImage { id: id.to_string() })
    }

    pub fn ground_truth(&self) -> Option<&BTreeMap<String, BTreeSet<String>>> {
        self.ground_truth.as_ref()
    }

    /// Attach a ground-truth map, validating that every id exists and that
    /// each (query, duplicate) pair shares a group.
    pub fn set_ground_truth(
        &mut self,
        truth: BTreeMap<String, BTreeSet<String>>,
    ) -> Result<(), CorpusError> {
        for (query, dups) in &truth {
            let qg = self
                .group_of(query)
                .map_err(|_| CorpusError::UnknownGroundTruthImage { id: query.clone() })?
                .to_string();
            for dup in dups {
                let dg = self
                    .group_of(dup)
                    .map_err(|_| CorpusError::UnknownGroundTruthImage { id: dup.clone() })?;
                if dg != qg {
                    return Err(CorpusError::CrossGroupTruth {
                        query: query.clone(),
                        duplicate: dup.clone(),
                        qg,
                        dg: dg.to_string(),
                    });
                }
            }
        }
        self.ground_truth = Some(truth);
        Ok(())
    }

    /// Drop every character annotation (used to exercise the keypoint-only
    /// fallback path).
    pub fn strip_annotations(&mut self) {
        self.regions.clear();
    }
}

fn validate_region_bounds(
    id: &str,
    bbox: &Rect,
    width: u32,
    height: u32,
) -> Result<(), CorpusError> {
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(CorpusError::RegionOutOfBounds {
            id: id.to_string(),
            reason: format!("non-positive size {}x{}", bbox.w, bbox.h),
        });
    }
    if bbox.x < 0.0 || bbox.y < 0.0 || bbox.right() > width as f64 || bbox.bottom() > height as f64
    {
        return Err(CorpusError::RegionOutOfBounds {
            id: id.to_string(),
            reason: format!(
                "box ({}, {}, {}, {}) exceeds {}x{}",
                bbox.x, bbox.y, bbox.w, bbox.h, width, height
            ),
        });
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    group: String,
    path: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationEntry {
    #[serde(default)]
    x: Option<f64>,
    #[serde(default)]
    y: Option<f64>,
    #[serde(default)]
    w: Option<f64>,
    #[serde(default)]
    h: Option<f64>,
    /// Quadrilateral alternative to x/y/w/h; collapsed to its bounding box.
    #[serde(default)]
    quad: Option<[[f64; 2]; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

/// Load a corpus from a JSONL manifest and an optional annotations file.
pub fn load_corpus(
    manifest_path: &Path,
    annotations_path: Option<&Path>,
) -> Result<Corpus, CorpusError> {
    let file = fs::File::open(manifest_path).map_err(|source| CorpusError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let base_dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut images = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestLine =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                path: manifest_path.to_path_buf(),
                line: lineno,
                reason: e.to_string(),
            })?;
        if !seen.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId {
                id: rec.id,
                path: manifest_path.to_path_buf(),
                line: lineno,
            });
        }
        let img_path = base_dir.join(&rec.path);
        let image = load_gray_png(&img_path, &rec.id)?;
        images.push(ImageRecord {
            id: rec.id,
            group: rec.group,
            image,
            source_path: img_path,
        });
    }

    let mut regions: BTreeMap<String, Vec<CharRegion>> = BTreeMap::new();
    if let Some(ann_path) = annotations_path {
        let text = fs::read_to_string(ann_path).map_err(|source| CorpusError::Io {
            path: ann_path.to_path_buf(),
            source,
        })?;
        let parsed: BTreeMap<String, Vec<AnnotationEntry>> = serde_json::from_str(&text)
            .map_err(|e| CorpusError::MalformedAnnotations {
                path: ann_path.to_path_buf(),
                reason: e.to_string(),
            })?;
        for (id, entries) in parsed {
            let mut regs = Vec::with_capacity(entries.len());
            for e in entries {
                let bbox = annotation_bbox(&id, &e)?;
                regs.push(CharRegion { image_id: id.clone(), bbox, label: e.label });
            }
            regions.insert(id, regs);
        }
    }

    Corpus::from_parts(images, regions)
}

fn annotation_bbox(id: &str, e: &AnnotationEntry) -> Result<Rect, CorpusError> {
    if let Some(quad) = e.quad {
        let pts: Vec<(f64, f64)> = quad.iter().map(|p| (p[0], p[1])).collect();
        return Ok(Rect::bounding(&pts).expect("four points"));
    }
    match (e.x, e.y, e.w, e.h) {
        (Some(x), Some(y), Some(w), Some(h)) => Ok(Rect::new(x, y, w, h)),
        _ => Err(CorpusError::RegionOutOfBounds {
            id: id.to_string(),
            reason: "region needs either x/y/w/h or quad".to_string(),
        }),
    }
}

/// Load a ground-truth JSON map and attach it to the corpus.
pub fn load_ground_truth(corpus: &mut Corpus, path: &Path) -> Result<(), CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parsed: BTreeMap<String, BTreeSet<String>> =
        serde_json::from_str(&text).map_err(|e| CorpusError::MalformedAnnotations {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    corpus.set_ground_truth(parsed)
}

fn load_gray_png(path: &Path, id: &str) -> Result<GrayImage, CorpusError> {
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => CorpusError::Io { path: path.to_path_buf(), source },
        other => CorpusError::BadImage {
            id: id.to_string(),
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let (w, h) = (dynimg.width(), dynimg.height());
    let pixels = match dynimg {
        image::DynamicImage::ImageLuma8(g) => {
            g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
        }
        other => {
            // Channel-average conversion for color inputs.
            let rgb = other.into_rgb8();
            rgb.pixels()
                .map(|p| (p.0[0] as f32 + p.0[1] as f32 + p.0[2] as f32) / (3.0 * 255.0))
                .collect()
        }
    };
    Ok(GrayImage::from_pixels(w, h, pixels))
}

/// Replace characters that are awkward in file names. Collisions are caught
/// by the duplicate-id check when the directory is read back.
pub fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Write a corpus as a directory: `manifest.jsonl`, `annotations.json`,
/// optional `ground_truth.json`, and one PNG per image under `images/`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    let io_err = |path: &Path, source: std::io::Error| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| io_err(&images_dir, e))?;

    let mut manifest = String::new();
    for rec in corpus.images() {
        let rel = format!("images/{}.png", sanitize_id(&rec.id));
        let png_path = dir.join(&rel);
        write_gray_png(&rec.image, &png_path).map_err(|e| io_err(&png_path, e))?;
        let line = serde_json::to_string(&ManifestLine {
            id: rec.id.clone(),
            group: rec.group.clone(),
            path: rel,
        })
        .expect("manifest line serialization");
        manifest.push_str(&line);
        manifest.push('\n');
    }
    let manifest_path = dir.join("manifest.jsonl");
    fs::write(&manifest_path, manifest).map_err(|e| io_err(&manifest_path, e))?;

    let mut annotations: BTreeMap<String, Vec<AnnotationEntry>> = BTreeMap::new();
    for (id, regs) in corpus.regions() {
        let entries = regs
            .iter()
            .map(|r| AnnotationEntry {
                x: Some(r.bbox.x),
                y: Some(r.bbox.y),
                w: Some(r.bbox.w),
                h: Some(r.bbox.h),
                quad: None,
                label: r.label.clone(),
            })
            .collect();
        annotations.insert(id.clone(), entries);
    }
    let ann_path = dir.join("annotations.json");
    let ann_text = serde_json::to_string_pretty(&annotations).expect("annotation serialization");
    fs::write(&ann_path, ann_text).map_err(|e| io_err(&ann_path, e))?;

    if let Some(truth) = corpus.ground_truth() {
        let gt_path = dir.join("ground_truth.json");
        let gt_text = serde_json::to_string_pretty(truth).expect("ground truth serialization");
        fs::write(&gt_path, gt_text).map_err(|e| io_err(&gt_path, e))?;
    }
    Ok(())
}

fn write_gray_png(img: &GrayImage, path: &Path) -> Result<(), std::io::Error> {
    let mut buf = image::GrayImage::new(img.width(), img.height());
    for (x, y, px) in buf.enumerate_pixels_mut() {
        px.0[0] = (img.get(x, y) * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| std::io::Error::other(e.to_string()))
}
