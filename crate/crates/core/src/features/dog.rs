//! Difference-of-Gaussians keypoint detector: a 3-octave scale pyramid,
//! 3x3x3 non-maximum suppression, and sub-pixel quadratic refinement.

use crate::gray::GrayImage;

/// DoG layers per octave that can host extrema.
pub(crate) const INTERVALS: usize = 3;
/// Base blur of the first pyramid level.
pub(crate) const SIGMA0: f64 = 1.6;
/// Blur assumed to be present in the input image.
const ASSUMED_BLUR: f64 = 0.5;
pub(crate) const MAX_OCTAVES: usize = 3;
/// Reject refined extrema with |DoG| below this.
pub(crate) const CONTRAST_THRESHOLD: f32 = 0.02;
/// Principal-curvature ratio bound (edge response rejection).
pub(crate) const EDGE_RATIO: f64 = 10.0;
/// Smallest octave side worth processing.
const MIN_OCTAVE_SIDE: u32 = 16;

pub(crate) struct Octave {
    pub gauss: Vec<GrayImage>,
    pub dog: Vec<GrayImage>,
}

pub(crate) struct Pyramid {
    pub octaves: Vec<Octave>,
    /// Dimensions of the original image (octave 0 is its 2x upsample).
    pub orig_width: u32,
    pub orig_height: u32,
}

/// Scale factor from octave-local coordinates to original-image
/// coordinates. Octave 0 is the doubled seed image, so its factor is 0.5.
pub(crate) fn octave_factor(oct_idx: usize) -> f64 {
    2f64.powi(oct_idx as i32 - 1)
}

/// A refined scale-space extremum carrying both base-image and octave-local
/// coordinates (the latter feed the descriptor).
#[derive(Debug, Clone, Copy)]
pub(crate) struct ScaleSpacePoint {
    pub x: f32,
    pub y: f32,
    pub scale: f32,
    pub response: f32,
    pub octave: usize,
    pub layer: usize,
    pub x_oct: f32,
    pub y_oct: f32,
    pub scale_oct: f32,
}

pub(crate) fn build_pyramid(img: &GrayImage) -> Pyramid {
    let k = 2f64.powf(1.0 / INTERVALS as f64);
    // The first octave works on the 2x upsampled image so that structure a
    // couple of pixels wide still lands inside the detectable scale range.
    let doubled = img.upsample2();
    let seed_blur = 2.0 * ASSUMED_BLUR;
    let initial = (SIGMA0 * SIGMA0 - seed_blur * seed_blur).sqrt();
    let mut base = doubled.gaussian_blur(initial);

    let mut octaves = Vec::new();
    for _ in 0..MAX_OCTAVES {
        if base.width() < MIN_OCTAVE_SIDE || base.height() < MIN_OCTAVE_SIDE {
            break;
        }
        let mut gauss = vec![base.clone()];
        for i in 1..INTERVALS + 3 {
            let sigma_prev = SIGMA0 * k.powi(i as i32 - 1);
            let sigma_inc = sigma_prev * (k * k - 1.0).sqrt();
            gauss.push(gauss[i - 1].gaussian_blur(sigma_inc));
        }
        let dog = gauss
            .windows(2)
            .map(|w| {
                let px = w[0]
                    .pixels()
                    .iter()
                    .zip(w[1].pixels())
                    .map(|(a, b)| b - a)
                    .collect();
                GrayImage::from_pixels(w[0].width(), w[0].height(), px)
            })
            .collect();
        // The (INTERVALS)-th gaussian has twice the base blur; decimating it
        // seeds the next octave.
        base = gauss[INTERVALS].downsample2();
        octaves.push(Octave { gauss, dog });
    }
    Pyramid { octaves, orig_width: img.width(), orig_height: img.height() }
}

/// Detect extrema and refine them. Results are unsorted; the caller orders
/// by response and applies the keypoint cap.
pub(crate) fn detect(pyr: &Pyramid) -> Vec<ScaleSpacePoint> {
    let k = 2f64.powf(1.0 / INTERVALS as f64);
    let prefilter = 0.5 * CONTRAST_THRESHOLD;
    let mut out = Vec::new();

    for (oct_idx, oct) in pyr.octaves.iter().enumerate() {
        let w = oct.dog[0].width() as i64;
        let h = oct.dog[0].height() as i64;
        for layer in 1..=INTERVALS {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let v = oct.dog[layer].get(x as u32, y as u32);
                    if v.abs() < prefilter || !is_extremum(oct, layer, x, y, v) {
                        continue;
                    }
                    if let Some(p) =
                        refine(oct, oct_idx, layer, x, y, k, pyr.orig_width, pyr.orig_height)
                    {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// Strict 26-neighbor comparison in the 3x3x3 DoG neighborhood.
fn is_extremum(oct: &Octave, layer: usize, x: i64, y: i64, v: f32) -> bool {
    let check = |greater: bool| -> bool {
        for dl in -1i64..=1 {
            let img = &oct.dog[(layer as i64 + dl) as usize];
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dl == 0 && dy == 0 && dx == 0 {
                        continue;
                    }
                    let n = img.get((x + dx) as u32, (y + dy) as u32);
                    if (greater && v <= n) || (!greater && v >= n) {
                        return false;
                    }
                }
            }
        }
        true
    };
    if v > 0.0 {
        check(true)
    } else {
        check(false)
    }
}

/// Iterative 3D quadratic refinement. Returns `None` when the point drifts
/// out of bounds, fails the contrast test, or sits on an edge.
#[allow(clippy::too_many_arguments)]
fn refine(
    oct: &Octave,
    oct_idx: usize,
    layer0: usize,
    x0: i64,
    y0: i64,
    k: f64,
    orig_width: u32,
    orig_height: u32,
) -> Option<ScaleSpacePoint> {
    let w = oct.dog[0].width() as i64;
    let h = oct.dog[0].height() as i64;
    let (mut layer, mut x, mut y) = (layer0 as i64, x0, y0);
    let mut delta = [0.0f64; 3];
    let mut converged = false;
    let mut grad = [0.0f64; 3];
    let mut hess = [[0.0f64; 3]; 3];

    for _ in 0..5 {
        let d = |l: i64, px: i64, py: i64| oct.dog[l as usize].get(px as u32, py as u32) as f64;
        let v = d(layer, x, y);
        grad = [
            (d(layer, x + 1, y) - d(layer, x - 1, y)) / 2.0,
            (d(layer, x, y + 1) - d(layer, x, y - 1)) / 2.0,
            (d(layer + 1, x, y) - d(layer - 1, x, y)) / 2.0,
        ];
        let dxx = d(layer, x + 1, y) + d(layer, x - 1, y) - 2.0 * v;
        let dyy = d(layer, x, y + 1) + d(layer, x, y - 1) - 2.0 * v;
        let dss = d(layer + 1, x, y) + d(layer - 1, x, y) - 2.0 * v;
        let dxy = (d(layer, x + 1, y + 1) - d(layer, x - 1, y + 1) - d(layer, x + 1, y - 1)
            + d(layer, x - 1, y - 1))
            / 4.0;
        let dxs = (d(layer + 1, x + 1, y) - d(layer + 1, x - 1, y) - d(layer - 1, x + 1, y)
            + d(layer - 1, x - 1, y))
            / 4.0;
        let dys = (d(layer + 1, x, y + 1) - d(layer + 1, x, y - 1) - d(layer - 1, x, y + 1)
            + d(layer - 1, x, y - 1))
            / 4.0;
        hess = [[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]];

        delta = solve3(&hess, &[-grad[0], -grad[1], -grad[2]])?;
        if delta[0].abs() < 0.5 && delta[1].abs() < 0.5 && delta[2].abs() < 0.5 {
            converged = true;
            break;
        }
        x += delta[0].round().clamp(-1.0, 1.0) as i64;
        y += delta[1].round().clamp(-1.0, 1.0) as i64;
        layer += delta[2].round().clamp(-1.0, 1.0) as i64;
        if !(1..=INTERVALS as i64).contains(&layer) || x < 1 || y < 1 || x > w - 2 || y > h - 2 {
            return None;
        }
    }
    if !converged {
        return None;
    }

    let d0 = oct.dog[layer as usize].get(x as u32, y as u32) as f64;
    let contrast = d0 + 0.5 * (grad[0] * delta[0] + grad[1] * delta[1] + grad[2] * delta[2]);
    if contrast.abs() < CONTRAST_THRESHOLD as f64 {
        return None;
    }
    // Edge rejection on the 2D spatial Hessian.
    let (dxx, dyy, dxy) = (hess[0][0], hess[1][1], hess[0][1]);
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    if det <= 0.0 || tr * tr / det >= (EDGE_RATIO + 1.0).powi(2) / EDGE_RATIO {
        return None;
    }

    let x_oct = x as f64 + delta[0];
    let y_oct = y as f64 + delta[1];
    let scale_oct = SIGMA0 * k.powf(layer as f64 + delta[2]);
    let factor = octave_factor(oct_idx);
    let x_img = x_oct * factor;
    let y_img = y_oct * factor;
    if x_img < 0.0 || y_img < 0.0 || x_img >= orig_width as f64 || y_img >= orig_height as f64 {
        return None;
    }
    Some(ScaleSpacePoint {
        x: x_img as f32,
        y: y_img as f32,
        scale: (scale_oct * factor) as f32,
        response: contrast.abs() as f32,
        octave: oct_idx,
        layer: (layer as usize).clamp(1, INTERVALS),
        x_oct: x_oct as f32,
        y_oct: y_oct as f32,
        scale_oct: scale_oct as f32,
    })
}

/// Solve a 3x3 linear system by Gaussian elimination with partial pivoting.
fn solve3(a: &[[f64; 3]; 3], b: &[f64; 3]) -> Option<[f64; 3]> {
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
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for c in col..4 {
                m[row][c] -= f * m[col][c];
            }
        }
    }
    let mut x = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut acc = m[row][3];
        for c in row + 1..3 {
            acc -= m[row][c] * x[c];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}
