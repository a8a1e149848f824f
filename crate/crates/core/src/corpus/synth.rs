//! Deterministic synthetic corpus generator.
//!
//! Base images are grids of glyphs drawn as random polyline strokes; each
//! duplicate is an affine-warped copy with stroke-thickness jitter and
//! additive noise. A configurable fraction of duplicates is split into two
//! fragments, giving one base image two ground-truth duplicates (the
//! one-to-many case). The planted affine of every duplicate is returned so
//! alignment can be checked against a known transform.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geom::{Affine2, Rect};
use crate::gray::GrayImage;

use super::{CharRegion, Corpus, ImageRecord};

const BACKGROUND: f32 = 0.95;
const INK: f32 = 0.06;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

/// Parameters for the synthetic corpus generator. Identical configs always
/// produce byte-identical corpora.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_base: usize,
    pub duplicates_per_base: usize,
    /// Maximum absolute rotation, degrees.
    pub rotation_max: f64,
    /// Uniform scale factor range, must lie within [0.5, 2.0].
    pub scale_range: (f64, f64),
    /// Maximum absolute translation along each axis, pixels.
    pub translation_max: f64,
    /// Additive Gaussian noise sigma in intensity units.
    pub noise_sigma: f64,
    /// Dilation/erosion radius applied to duplicate strokes, pixels.
    pub stroke_jitter: u32,
    /// Fraction of duplicates split into two fragments.
    pub fragment_fraction: f64,
    /// Square canvas side, pixels.
    pub image_size: u32,
    /// Number of retrieval groups; each base image and all of its
    /// duplicates land in one uniformly random group.
    pub n_groups: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_base: 10,
            duplicates_per_base: 1,
            rotation_max: 10.0,
            scale_range: (0.9, 1.1),
            translation_max: 10.0,
            noise_sigma: 0.02,
            stroke_jitter: 1,
            fragment_fraction: 0.0,
            image_size: 256,
            n_groups: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_base < 1 || self.duplicates_per_base < 1 || self.n_groups < 1 {
            return err("n_base, duplicates_per_base and n_groups must be >= 1".into());
        }
        let (lo, hi) = self.scale_range;
        if !(0.5..=2.0).contains(&lo) || !(0.5..=2.0).contains(&hi) || lo > hi {
            return err(format!("scale_range ({lo}, {hi}) must lie within [0.5, 2.0]"));
        }
        if !(0.0..=1.0).contains(&self.fragment_fraction) {
            return err(format!("fragment_fraction {} outside [0, 1]", self.fragment_fraction));
        }
        if !(0.0..=45.0).contains(&self.rotation_max) {
            return err(format!("rotation_max {} outside [0, 45] degrees", self.rotation_max));
        }
        if self.translation_max < 0.0 || self.noise_sigma < 0.0 {
            return err("translation_max and noise_sigma must be non-negative".into());
        }
        if self.image_size < 96 {
            return err(format!("image_size {} too small; need >= 96", self.image_size));
        }
        Ok(())
    }
}

/// The planted transform of one emitted duplicate image.
#[derive(Debug, Clone)]
pub struct PlantedDuplicate {
    pub base_id: String,
    pub dup_id: String,
    /// Maps base-image coordinates into the duplicate image's frame.
    pub affine: Affine2,
    /// Pairs of (base region index, duplicate region index) for the base
    /// regions that survived warping and clipping.
    pub region_map: Vec<(usize, usize)>,
}

/// Generate a synthetic corpus with planted duplicates and ground truth.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Corpus, SynthError> {
    generate_synthetic_detailed(config).map(|(corpus, _)| corpus)
}

/// As [`generate_synthetic`], additionally returning the planted transform
/// of every duplicate for oracle-style verification.
pub fn generate_synthetic_detailed(
    config: &SynthConfig,
) -> Result<(Corpus, Vec<PlantedDuplicate>), SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let size = config.image_size;

    // Decide up front which duplicates get fragmented so the count is exact.
    let total_dups = config.n_base * config.duplicates_per_base;
    let n_fragmented = (config.fragment_fraction * total_dups as f64).round() as usize;
    let mut fragment_flags = vec![false; total_dups];
    for flag in fragment_flags.iter_mut().take(n_fragmented) {
        *flag = true;
    }
    fragment_flags.shuffle(&mut rng);

    let mut images = Vec::new();
    let mut regions: BTreeMap<String, Vec<CharRegion>> = BTreeMap::new();
    let mut truth: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut planted = Vec::new();

    for base_idx in 0..config.n_base {
        let group = format!("g{:02}", rng.gen_range(0..config.n_groups));
        let base_id = format!("base_{base_idx:04}");
        let (mut base_img, base_boxes) = render_base(&mut rng, size);
        base_img.quantize_u8();

        let base_regions: Vec<CharRegion> = base_boxes
            .iter()
            .map(|b| CharRegion { image_id: base_id.clone(), bbox: *b, label: None })
            .collect();

        for dup_idx in 0..config.duplicates_per_base {
            let global_dup = base_idx * config.duplicates_per_base + dup_idx;
            let dup_id = format!("dup_{base_idx:04}_{dup_idx}");
            let (dup_img, affine) = make_duplicate(&mut rng, config, &base_img);

            if fragment_flags[global_dup] {
                let split_vertical = rng.gen_bool(0.5);
                let cut_frac = rng.gen_range(0.45..0.55);
                let halves = split_image(&dup_img, split_vertical, cut_frac);
                for (suffix, (frag_img, offset)) in ["a", "b"].iter().zip(halves) {
                    let frag_id = format!("{dup_id}_{suffix}");
                    let frag_affine =
                        Affine2::translation(-offset.0, -offset.1).compose(&affine);
                    let (frag_regions, region_map) = transfer_regions(
                        &base_boxes,
                        &frag_affine,
                        frag_img.width(),
                        frag_img.height(),
                        &frag_id,
                    );
                    truth.entry(base_id.clone()).or_default().insert(frag_id.clone());
                    planted.push(PlantedDuplicate {
                        base_id: base_id.clone(),
                        dup_id: frag_id.clone(),
                        affine: frag_affine,
                        region_map,
                    });
                    regions.insert(frag_id.clone(), frag_regions);
                    images.push(ImageRecord {
                        id: frag_id,
                        group: group.clone(),
                        image: frag_img,
                        source_path: PathBuf::new(),
                    });
                }
            } else {
                let (dup_regions, region_map) =
                    transfer_regions(&base_boxes, &affine, size, size, &dup_id);
                truth.entry(base_id.clone()).or_default().insert(dup_id.clone());
                planted.push(PlantedDuplicate {
                    base_id: base_id.clone(),
                    dup_id: dup_id.clone(),
                    affine,
                    region_map,
                });
                regions.insert(dup_id.clone(), dup_regions);
                images.push(ImageRecord {
                    id: dup_id,
                    group: group.clone(),
                    image: dup_img,
                    source_path: PathBuf::new(),
                });
            }
        }

        regions.insert(base_id.clone(), base_regions);
        images.push(ImageRecord {
            id: base_id,
            group,
            image: base_img,
            source_path: PathBuf::new(),
        });
    }

    let mut corpus = Corpus::from_parts(images, regions)
        .expect("generated corpus must satisfy invariants");
    corpus.set_ground_truth(truth).expect("generated truth must be in-group");
    Ok((corpus, planted))
}

/// Render one base image: a jittered, per-image-varying grid of polyline
/// glyphs. Returns the image and one bounding box per glyph.
///
/// Layout geometry (row/column counts, glyph size range, placement) varies
/// per image: pages from different sources do not share a lattice, and a
/// shared pitch would let a wrong alignment overlap many boxes at once.
fn render_base(rng: &mut ChaCha8Rng, size: u32) -> (GrayImage, Vec<Rect>) {
    let mut img = GrayImage::new(size, size, BACKGROUND);
    let margin = 0.17 * size as f64;
    let inner = size as f64 - 2.0 * margin;
    let n_nominal = (inner / 42.0).round() as i64;
    let pick_n = |rng: &mut ChaCha8Rng| {
        (n_nominal + rng.gen_range(-1..=1)).clamp(3, 10) as u32
    };
    let n_cols = pick_n(rng);
    let n_rows = pick_n(rng);
    let cell_w = inner / n_cols as f64;
    let cell_h = inner / n_rows as f64;
    let frac_lo = rng.gen_range(0.45..0.58);
    let frac_hi = frac_lo + rng.gen_range(0.12..0.22);

    let mut boxes = Vec::new();
    for row in 0..n_rows {
        for col in 0..n_cols {
            if !rng.gen_bool(0.92) {
                continue;
            }
            let gw = cell_w * rng.gen_range(frac_lo..frac_hi);
            let gh = cell_h * rng.gen_range(frac_lo..frac_hi);
            let gx = margin + col as f64 * cell_w + rng.gen_range(0.0..cell_w - gw);
            let gy = margin + row as f64 * cell_h + rng.gen_range(0.0..cell_h - gh);

            let strokes = glyph_strokes(rng, gx, gy, gw, gh);
            let mut pts_all: Vec<(f64, f64)> = Vec::new();
            let mut max_width = 0.0f64;
            for (pts, width) in &strokes {
                max_width = max_width.max(*width);
                for seg in pts.windows(2) {
                    draw_segment(&mut img, seg[0], seg[1], *width);
                }
                pts_all.extend_from_slice(pts);
            }

            let hull = Rect::bounding(&pts_all).expect("glyph has points");
            let pad_out = max_width / 2.0 + 2.0;
            let bbox = Rect::new(
                (hull.x - pad_out).floor().max(0.0),
                (hull.y - pad_out).floor().max(0.0),
                0.0,
                0.0,
            );
            let x1 = (hull.right() + pad_out).ceil().min(size as f64);
            let y1 = (hull.bottom() + pad_out).ceil().min(size as f64);
            boxes.push(Rect::new(bbox.x, bbox.y, x1 - bbox.x, y1 - bbox.y));
        }
    }
    (img, boxes)
}

/// Stroke set for one glyph, drawn from one of several structural families
/// so that different glyphs binarize to clearly distinct shapes (as real
/// character classes do). Returns polylines with their stroke widths.
fn glyph_strokes(
    rng: &mut ChaCha8Rng,
    gx: f64,
    gy: f64,
    gw: f64,
    gh: f64,
) -> Vec<(Vec<(f64, f64)>, f64)> {
    let mut strokes = Vec::new();
    let width = |rng: &mut ChaCha8Rng| rng.gen_range(2.2..3.0);
    let family = rng.gen_range(0..5u8);
    match family {
        // frame: box outline plus one inner stroke
        0 => {
            let w = width(rng);
            strokes.push((
                vec![(gx, gy), (gx + gw, gy), (gx + gw, gy + gh), (gx, gy + gh), (gx, gy)],
                w,
            ));
            let inner: Vec<(f64, f64)> = (0..2)
                .map(|_| {
                    (
                        gx + rng.gen_range(0.2..0.8) * gw,
                        gy + rng.gen_range(0.2..0.8) * gh,
                    )
                })
                .collect();
            strokes.push((inner, width(rng)));
        }
        // radial: spokes from a common hub
        1 => {
            let hub = (
                gx + rng.gen_range(0.35..0.65) * gw,
                gy + rng.gen_range(0.35..0.65) * gh,
            );
            for _ in 0..rng.gen_range(3..=5) {
                let tip = (gx + rng.gen_range(0.0..gw), gy + rng.gen_range(0.0..gh));
                strokes.push((vec![hub, tip], width(rng)));
            }
        }
        // rails: parallel near-vertical or near-horizontal strokes
        2 => {
            let vertical = rng.gen_bool(0.5);
            for i in 0..rng.gen_range(2..=3u32) {
                let t = (i as f64 + rng.gen_range(0.2..0.8)) / 3.0;
                let jig = rng.gen_range(-0.1..0.1);
                let pts = if vertical {
                    vec![
                        (gx + t * gw, gy),
                        (gx + (t + jig) * gw, gy + gh),
                    ]
                } else {
                    vec![
                        (gx, gy + t * gh),
                        (gx + gw, gy + (t + jig) * gh),
                    ]
                };
                strokes.push((pts, width(rng)));
            }
            let cross: Vec<(f64, f64)> = (0..2)
                .map(|_| (gx + rng.gen_range(0.0..gw), gy + rng.gen_range(0.0..gh)))
                .collect();
            strokes.push((cross, width(rng)));
        }
        // zigzag: one dense path
        3 => {
            let n_pts = rng.gen_range(4..=6);
            let pts: Vec<(f64, f64)> = (0..n_pts)
                .map(|i| {
                    let t = i as f64 / (n_pts - 1) as f64;
                    (
                        gx + (if i % 2 == 0 { rng.gen_range(0.0..0.35) } else { rng.gen_range(0.65..1.0) }) * gw,
                        gy + t * gh,
                    )
                })
                .collect();
            strokes.push((pts, width(rng)));
        }
        // scatter: random short polylines
        _ => {
            for _ in 0..rng.gen_range(3..=5) {
                let n_pts = rng.gen_range(2..=3);
                let pts: Vec<(f64, f64)> = (0..n_pts)
                    .map(|_| (gx + rng.gen_range(0.0..gw), gy + rng.gen_range(0.0..gh)))
                    .collect();
                strokes.push((pts, width(rng)));
            }
        }
    }
    strokes
}

/// Transform the base glyph boxes into a duplicate's frame, keeping only the
/// boxes that land fully inside the duplicate image. Returns the emitted
/// regions plus (base index, emitted index) pairs.
fn transfer_regions(
    base_boxes: &[Rect],
    affine: &Affine2,
    width: u32,
    height: u32,
    image_id: &str,
) -> (Vec<CharRegion>, Vec<(usize, usize)>) {
    let mut out = Vec::new();
    let mut map = Vec::new();
    for (base_idx, bbox) in base_boxes.iter().enumerate() {
        let mapped = affine.map_rect(bbox);
        let x0 = mapped.x.floor();
        let y0 = mapped.y.floor();
        let x1 = mapped.right().ceil();
        let y1 = mapped.bottom().ceil();
        let inside = x0 >= 0.0 && y0 >= 0.0 && x1 <= width as f64 && y1 <= height as f64;
        if inside && x1 - x0 >= 3.0 && y1 - y0 >= 3.0 {
            map.push((base_idx, out.len()));
            out.push(CharRegion {
                image_id: image_id.to_string(),
                bbox: Rect::new(x0, y0, x1 - x0, y1 - y0),
                label: None,
            });
        }
    }
    (out, map)
}

fn make_duplicate(
    rng: &mut ChaCha8Rng,
    config: &SynthConfig,
    base: &GrayImage,
) -> (GrayImage, Affine2) {
    let size = config.image_size;
    let rot = config.rotation_max.to_radians();
    let theta = if rot > 0.0 { rng.gen_range(-rot..=rot) } else { 0.0 };
    let (lo, hi) = config.scale_range;
    let scale = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let t = config.translation_max;
    let (tx, ty) = if t > 0.0 {
        (rng.gen_range(-t..=t), rng.gen_range(-t..=t))
    } else {
        (0.0, 0.0)
    };
    let center = ((size as f64 - 1.0) / 2.0, (size as f64 - 1.0) / 2.0);
    let affine = Affine2::similarity_about(center, theta, scale, tx, ty);

    let mut dup = base.warp_affine(&affine, size, size, BACKGROUND);
    if config.stroke_jitter > 0 {
        dup = if rng.gen_bool(0.5) {
            dup.morph_min(config.stroke_jitter) // thicken strokes
        } else {
            dup.morph_max(config.stroke_jitter) // thin strokes
        };
    }
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f64, config.noise_sigma).expect("valid sigma");
        let pixels: Vec<f32> = dup
            .pixels()
            .iter()
            .map(|&p| (p + normal.sample(rng) as f32).clamp(0.0, 1.0))
            .collect();
        dup = GrayImage::from_pixels(size, size, pixels);
    }
    dup.quantize_u8();
    (dup, affine)
}

/// Split into two crops along the given axis at `cut_frac` of the side.
/// Returns each crop with its origin offset in the original frame.
fn split_image(img: &GrayImage, vertical: bool, cut_frac: f64) -> Vec<(GrayImage, (f64, f64))> {
    if vertical {
        let cut = (img.width() as f64 * cut_frac).round() as u32;
        vec![
            (img.crop(0, 0, cut, img.height()), (0.0, 0.0)),
            (img.crop(cut, 0, img.width() - cut, img.height()), (cut as f64, 0.0)),
        ]
    } else {
        let cut = (img.height() as f64 * cut_frac).round() as u32;
        vec![
            (img.crop(0, 0, img.width(), cut), (0.0, 0.0)),
            (img.crop(0, cut, img.width(), img.height() - cut), (0.0, cut as f64)),
        ]
    }
}

/// Draw an anti-aliased thick segment by compositing coverage against the
/// distance to the segment.
fn draw_segment(img: &mut GrayImage, p0: (f64, f64), p1: (f64, f64), width: f64) {
    let half = width / 2.0;
    let pad = half + 1.5;
    let x0 = ((p0.0.min(p1.0) - pad).floor().max(0.0)) as u32;
    let y0 = ((p0.1.min(p1.1) - pad).floor().max(0.0)) as u32;
    let x1 = ((p0.0.max(p1.0) + pad).ceil().min(img.width() as f64 - 1.0)) as u32;
    let y1 = ((p0.1.max(p1.1) + pad).ceil().min(img.height() as f64 - 1.0)) as u32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = dist_point_segment((x as f64, y as f64), p0, p1);
            let alpha = (half + 0.5 - d).clamp(0.0, 1.0) as f32;
            if alpha > 0.0 {
                let cur = img.get(x, y);
                let shaded = cur * (1.0 - alpha) + INK * alpha;
                img.set(x, y, cur.min(shaded));
            }
        }
    }
}

fn dist_point_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let (apx, apy) = (p.0 - a.0, p.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 { ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.0 + t * abx, a.1 + t * aby);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_config_same_seed_is_byte_identical() {
        let cfg = SynthConfig { seed: 7, n_base: 3, fragment_fraction: 0.5, ..Default::default() };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_synthetic(&SynthConfig { seed: 1, n_base: 2, ..Default::default() }).unwrap();
        let b = generate_synthetic(&SynthConfig { seed: 2, n_base: 2, ..Default::default() }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn counting_without_fragments() {
        let cfg = SynthConfig {
            seed: 3,
            n_base: 10,
            duplicates_per_base: 1,
            fragment_fraction: 0.0,
            image_size: 128,
            ..Default::default()
        };
        let corpus = generate_synthetic(&cfg).unwrap();
        assert_eq!(corpus.len(), 20);
        let truth = corpus.ground_truth().unwrap();
        assert_eq!(truth.len(), 10);
        assert!(truth.values().all(|d| d.len() == 1));
    }

    #[test]
    fn counting_with_all_fragments() {
        let cfg = SynthConfig {
            seed: 4,
            n_base: 4,
            duplicates_per_base: 1,
            fragment_fraction: 1.0,
            image_size: 128,
            ..Default::default()
        };
        let corpus = generate_synthetic(&cfg).unwrap();
        assert_eq!(corpus.len(), 12, "4 base + 8 fragment images");
        let truth = corpus.ground_truth().unwrap();
        assert_eq!(truth.len(), 4);
        assert!(truth.values().all(|d| d.len() == 2), "each base maps to 2 duplicates");
    }

    #[test]
    fn groups_partition_the_corpus() {
        let cfg = SynthConfig { seed: 5, n_base: 12, n_groups: 4, image_size: 128, ..Default::default() };
        let corpus = generate_synthetic(&cfg).unwrap();
        let total: usize = corpus.groups().values().map(Vec::len).sum();
        assert_eq!(total, corpus.len());
        let mut seen = std::collections::BTreeSet::new();
        for members in corpus.groups().values() {
            for id in members {
                assert!(seen.insert(id.clone()), "{id} appears in two groups");
            }
        }
        // ground-truth pairs stay in-group (set_ground_truth validated this,
        // re-check directly)
        for (q, dups) in corpus.ground_truth().unwrap() {
            for d in dups {
                assert_eq!(corpus.group_of(q).unwrap(), corpus.group_of(d).unwrap());
            }
        }
    }

    #[test]
    fn planted_affine_maps_glyph_centers_into_emitted_regions() {
        let cfg = SynthConfig {
            seed: 6,
            n_base: 4,
            duplicates_per_base: 2,
            fragment_fraction: 0.5,
            ..Default::default()
        };
        let (corpus, planted) = generate_synthetic_detailed(&cfg).unwrap();
        assert!(!planted.is_empty());
        let mut checked = 0;
        for dup in &planted {
            let base_regions = corpus.regions_of(&dup.base_id);
            let dup_regions = corpus.regions_of(&dup.dup_id);
            for &(base_idx, dup_idx) in &dup.region_map {
                let center = base_regions[base_idx].bbox.center();
                let mapped = dup.affine.apply(center);
                let target = &dup_regions[dup_idx].bbox;
                assert!(
                    target.contains_point(mapped.0, mapped.1),
                    "{} -> {}: glyph center {mapped:?} outside {target:?}",
                    dup.base_id,
                    dup.dup_id
                );
                checked += 1;
            }
        }
        assert!(checked > 20, "soundness check must cover many regions, got {checked}");
    }

    #[test]
    fn fragments_are_large_enough_and_regions_in_bounds() {
        let cfg = SynthConfig {
            seed: 8,
            n_base: 3,
            fragment_fraction: 1.0,
            image_size: 96,
            ..Default::default()
        };
        let corpus = generate_synthetic(&cfg).unwrap();
        for rec in corpus.images() {
            assert!(rec.width() >= 32 && rec.height() >= 32);
            for r in corpus.regions_of(&rec.id) {
                assert!(r.bbox.x >= 0.0 && r.bbox.y >= 0.0);
                assert!(r.bbox.right() <= rec.width() as f64);
                assert!(r.bbox.bottom() <= rec.height() as f64);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_scale = SynthConfig { scale_range: (0.3, 1.0), ..Default::default() };
        assert!(bad_scale.validate().is_err());
        let bad_frac = SynthConfig { fragment_fraction: 1.5, ..Default::default() };
        assert!(bad_frac.validate().is_err());
        let bad_count = SynthConfig { n_base: 0, ..Default::default() };
        assert!(bad_count.validate().is_err());
    }
}
