//! Robust affine estimation (pipeline stage 3): RANSAC over minimal
//! three-point samples followed by a least-squares refit on the consensus
//! set. The image with fewer keypoints is always the source side of the
//! fitted map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::CharRegion;
use crate::features::Keypoint;
use crate::geom::Affine2;
use crate::matching::MatchSet;

/// RANSAC success confidence used for the adaptive iteration bound.
const CONFIDENCE: f64 = 0.99;
/// Minimum |det| of the linear part for a model to count as non-degenerate.
const MIN_DET: f64 = 1e-6;
/// Minimum triangle area (in squared pixels) for a usable minimal sample.
const MIN_TRIANGLE_AREA: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("need at least 3 matches to fit an affine model, got {0}")]
    TooFewMatches(usize),
    #[error("no affine model with >= 3 inliers and a non-degenerate linear part")]
    NoConsensus,
    #[error("all usable samples were collinear or degenerate")]
    DegenerateGeometry,
}

/// Which input image is the source of the fitted map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AToB,
    BToA,
}

/// A fitted affine map from the source image's coordinates to the target's.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineModel {
    pub transform: Affine2,
    /// Indices into the `MatchSet::pairs` the model was estimated from.
    pub inliers: Vec<usize>,
    /// Root-mean-square reprojection error over the inliers, pixels.
    pub rms_residual: f64,
    pub direction: Direction,
}

impl AffineModel {
    pub fn identity(n_inliers: usize, direction: Direction) -> Self {
        AffineModel {
            transform: Affine2::identity(),
            inliers: (0..n_inliers).collect(),
            rms_residual: 0.0,
            direction,
        }
    }

    /// The six parameters `[a, b, tx, c, d, ty]`.
    pub fn matrix(&self) -> [f64; 6] {
        self.transform.params()
    }
}

/// Apply the model's map to a point.
pub fn apply_affine(model: &AffineModel, point: (f64, f64)) -> (f64, f64) {
    model.transform.apply(point)
}

/// Map a character region through the model: the four corners are mapped
/// and their axis-aligned bounding box is returned. The caller clips to the
/// target image and drops regions that end up with zero area.
pub fn transform_region(model: &AffineModel, region: &CharRegion) -> CharRegion {
    CharRegion {
        image_id: region.image_id.clone(),
        bbox: model.transform.map_rect(&region.bbox),
        label: region.label.clone(),
    }
}

/// Derive a per-pair RANSAC seed from the global seed and the two image
/// ids (FNV-1a), so results never depend on scheduling order.
pub fn pair_seed(global_seed: u64, query_id: &str, candidate_id: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    eat(&global_seed.to_le_bytes());
    eat(query_id.as_bytes());
    eat(&[0x1f]);
    eat(candidate_id.as_bytes());
    h
}

/// Least-squares affine fit mapping `src[i] -> tgt[i]`. Solves the two
/// independent 3-parameter normal-equation systems sharing one 3x3 matrix.
/// Returns `None` when the source points are (near-)collinear.
pub fn fit_affine_lsq(points: &[((f64, f64), (f64, f64))]) -> Option<Affine2> {
    if points.len() < 3 {
        return None;
    }
    let mut m = [[0.0f64; 3]; 3];
    let mut bx = [0.0f64; 3];
    let mut by = [0.0f64; 3];
    for &((x, y), (u, v)) in points {
        m[0][0] += x * x;
        m[0][1] += x * y;
        m[0][2] += x;
        m[1][1] += y * y;
        m[1][2] += y;
        m[2][2] += 1.0;
        bx[0] += x * u;
        bx[1] += y * u;
        bx[2] += u;
        by[0] += x * v;
        by[1] += y * v;
        by[2] += v;
    }
    m[1][0] = m[0][1];
    m[2][0] = m[0][2];
    m[2][1] = m[1][2];

    let row_x = solve3_sym(&m, &bx)?;
    let row_y = solve3_sym(&m, &by)?;
    Some(Affine2 {
        a: row_x[0],
        b: row_x[1],
        tx: row_x[2],
        c: row_y[0],
        d: row_y[1],
        ty: row_y[2],
    })
}

fn solve3_sym(a: &[[f64; 3]; 3], b: &[f64; 3]) -> Option<[f64; 3]> {
    let mut m = [
        [a[0][0], a[0][1], a[0][2], b[0]],
        [a[1][0], a[1][1], a[1][2], b[1]],
        [a[2][0], a[2][1], a[2][2], b[2]],
    ];
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        for row in 0..3 {
            if row == col {
                continue;
            }
            let f = m[row][col] / m[col][col];
            for c in col..4 {
                m[row][c] -= f * m[col][c];
            }
        }
    }
    Some([m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]])
}

fn triangle_area(p0: (f64, f64), p1: (f64, f64), p2: (f64, f64)) -> f64 {
    ((p1.0 - p0.0) * (p2.1 - p0.1) - (p2.0 - p0.0) * (p1.1 - p0.1)).abs() / 2.0
}

fn reprojection_error(m: &Affine2, src: (f64, f64), tgt: (f64, f64)) -> f64 {
    let (x, y) = m.apply(src);
    ((x - tgt.0).powi(2) + (y - tgt.1).powi(2)).sqrt()
}

/// Standard adaptive RANSAC iteration bound at 99% confidence.
fn adaptive_iterations(inlier_ratio: f64, current_best: usize, max_iters: usize) -> usize {
    if inlier_ratio >= 1.0 {
        return current_best.min(max_iters);
    }
    let p_good = inlier_ratio.powi(3);
    if p_good <= f64::EPSILON {
        return max_iters;
    }
    let n = (1.0 - CONFIDENCE).ln() / (1.0 - p_good).ln();
    (n.ceil() as usize).clamp(1, max_iters)
}

/// Fit a robust affine transform from matched keypoints.
///
/// The source side is the image with fewer keypoints (`a` on ties; callers
/// that need the lexicographic tie-break order their arguments before
/// calling). RANSAC samples minimal 3-point subsets; an inlier is a pair
/// with reprojection error at most `inlier_tol`. The returned model is the
/// least-squares refit over a consensus set iterated to a fixed point, so
/// every reported inlier re-projects within tolerance under the final
/// matrix. Deterministic for a given `rng_seed`.
pub fn estimate_affine(
    kp_a: &[Keypoint],
    kp_b: &[Keypoint],
    matches: &MatchSet,
    inlier_tol: f64,
    max_iters: usize,
    rng_seed: u64,
) -> Result<AffineModel, AlignmentError> {
    if matches.pairs.len() < 3 {
        return Err(AlignmentError::TooFewMatches(matches.pairs.len()));
    }
    let a_is_source = kp_a.len() <= kp_b.len();
    let direction = if a_is_source { Direction::AToB } else { Direction::BToA };
    let points: Vec<((f64, f64), (f64, f64))> = matches
        .pairs
        .iter()
        .map(|p| {
            let pa = (kp_a[p.index_a].x as f64, kp_a[p.index_a].y as f64);
            let pb = (kp_b[p.index_b].x as f64, kp_b[p.index_b].y as f64);
            if a_is_source { (pa, pb) } else { (pb, pa) }
        })
        .collect();
    let n = points.len();

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    struct Candidate {
        inlier_count: usize,
        rms: f64,
        inliers: Vec<usize>,
    }
    let mut best: Option<Candidate> = None;
    let mut degenerate_only = true;
    let mut needed = max_iters;
    let mut iter = 0usize;

    while iter < needed {
        iter += 1;
        let sample = rand::seq::index::sample(&mut rng, n, 3);
        let (i0, i1, i2) = (sample.index(0), sample.index(1), sample.index(2));
        if triangle_area(points[i0].0, points[i1].0, points[i2].0) < MIN_TRIANGLE_AREA {
            continue;
        }
        let Some(model) = fit_affine_lsq(&[points[i0], points[i1], points[i2]]) else {
            continue;
        };
        if model.det().abs() <= MIN_DET {
            continue;
        }
        degenerate_only = false;

        let mut inliers = Vec::new();
        let mut sq_sum = 0.0f64;
        for (idx, &(src, tgt)) in points.iter().enumerate() {
            let err = reprojection_error(&model, src, tgt);
            if err <= inlier_tol {
                inliers.push(idx);
                sq_sum += err * err;
            }
        }
        if inliers.len() < 3 {
            continue;
        }
        let rms = (sq_sum / inliers.len() as f64).sqrt();
        let improves = match &best {
            None => true,
            Some(b) => {
                inliers.len() > b.inlier_count
                    || (inliers.len() == b.inlier_count && rms < b.rms)
            }
        };
        if improves {
            let ratio = inliers.len() as f64 / n as f64;
            needed = adaptive_iterations(ratio, iter, max_iters).max(iter);
            best = Some(Candidate { inlier_count: inliers.len(), rms, inliers });
        }
    }

    let Some(best) = best else {
        return Err(if degenerate_only {
            AlignmentError::DegenerateGeometry
        } else {
            AlignmentError::NoConsensus
        });
    };

    // Refit to a fixed point: two expansion passes pick up inliers the
    // minimal sample missed, then intersection passes shrink until the
    // fitted matrix and its consensus set agree.
    let refit = |set: &[usize]| -> Option<Affine2> {
        let pts: Vec<_> = set.iter().map(|&i| points[i]).collect();
        let m = fit_affine_lsq(&pts)?;
        (m.det().abs() > MIN_DET).then_some(m)
    };
    let inliers_of = |m: &Affine2| -> Vec<usize> {
        points
            .iter()
            .enumerate()
            .filter(|(_, &(src, tgt))| reprojection_error(m, src, tgt) <= inlier_tol)
            .map(|(i, _)| i)
            .collect()
    };

    let mut set = best.inliers;
    for _ in 0..2 {
        let Some(m) = refit(&set) else { break };
        let grown = inliers_of(&m);
        if grown.len() >= 3 {
            set = grown;
        }
    }
    let model = loop {
        let m = refit(&set).ok_or(AlignmentError::NoConsensus)?;
        let consensus = inliers_of(&m);
        let keep: Vec<usize> = set.iter().copied().filter(|i| consensus.contains(i)).collect();
        if keep.len() < 3 {
            return Err(AlignmentError::NoConsensus);
        }
        if keep == set {
            break m;
        }
        set = keep;
    };

    let sq_sum: f64 = set
        .iter()
        .map(|&i| reprojection_error(&model, points[i].0, points[i].1).powi(2))
        .sum();
    let rms = (sq_sum / set.len() as f64).sqrt();
    Ok(AffineModel {
        transform: model,
        inliers: set,
        rms_residual: rms,
        direction,
    })
}
