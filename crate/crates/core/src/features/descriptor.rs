//! Upright gradient-histogram descriptors: a 4x4 spatial grid of 8-bin
//! orientation histograms (128 dimensions) over a scale-proportional patch,
//! unit-normalized. No dominant-orientation normalization: duplicates of
//! published page images are close to upright.

use super::dog::{Pyramid, ScaleSpacePoint};
use super::Keypoint;

const N_HIST: usize = 4;
const N_ORI: usize = 8;
/// Descriptor length: 4x4 spatial cells times 8 orientation bins.
pub const DESCRIPTOR_DIM: usize = N_HIST * N_HIST * N_ORI;
/// Magnitude clamp after the first normalization pass.
const CLAMP: f32 = 0.2;

/// Compute one descriptor per point; points whose patch has no gradient
/// energy are dropped so that every returned row is exactly unit-norm.
pub(crate) fn compute(pyr: &Pyramid, points: &[ScaleSpacePoint]) -> (Vec<Keypoint>, Vec<f32>) {
    let mut keypoints = Vec::with_capacity(points.len());
    let mut data = Vec::with_capacity(points.len() * DESCRIPTOR_DIM);
    for p in points {
        if let Some(desc) = describe(pyr, p) {
            keypoints.push(Keypoint {
                x: p.x,
                y: p.y,
                scale: p.scale,
                response: p.response,
            });
            data.extend_from_slice(&desc);
        }
    }
    (keypoints, data)
}

fn describe(pyr: &Pyramid, p: &ScaleSpacePoint) -> Option<[f32; DESCRIPTOR_DIM]> {
    let img = &pyr.octaves[p.octave].gauss[p.layer];
    let w = img.width() as i64;
    let h = img.height() as i64;
    let hist_width = 3.0 * p.scale_oct as f64;
    let radius = (hist_width * (N_HIST as f64 + 1.0) / 2.0 + 0.5).round() as i64;
    let weight_denom = 2.0 * (0.5 * N_HIST as f64 * hist_width).powi(2);
    let xc = p.x_oct.round() as i64;
    let yc = p.y_oct.round() as i64;

    let mut hist = [0.0f64; (N_HIST + 2) * (N_HIST + 2) * N_ORI];
    let idx = |r: usize, c: usize, o: usize| (r * (N_HIST + 2) + c) * N_ORI + o;

    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let px = xc + dx;
            let py = yc + dy;
            if px < 1 || py < 1 || px > w - 2 || py > h - 2 {
                continue;
            }
            // Bin coordinates over the 4x4 grid, centered on the keypoint.
            let r_bin = dy as f64 / hist_width + (N_HIST as f64 - 1.0) / 2.0;
            let c_bin = dx as f64 / hist_width + (N_HIST as f64 - 1.0) / 2.0;
            if r_bin <= -1.0 || r_bin >= N_HIST as f64 || c_bin <= -1.0 || c_bin >= N_HIST as f64
            {
                continue;
            }
            let gx = (img.get((px + 1) as u32, py as u32) - img.get((px - 1) as u32, py as u32))
                as f64;
            let gy = (img.get(px as u32, (py + 1) as u32) - img.get(px as u32, (py - 1) as u32))
                as f64;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag < 1e-12 {
                continue;
            }
            let mut ori = gy.atan2(gx);
            if ori < 0.0 {
                ori += std::f64::consts::TAU;
            }
            let o_bin = ori / std::f64::consts::TAU * N_ORI as f64;
            let weight = (-(dx * dx + dy * dy) as f64 / weight_denom).exp() * mag;

            // Trilinear scatter; orientation wraps, spatial bins use a
            // one-cell apron that is discarded afterwards.
            let r0 = r_bin.floor();
            let c0 = c_bin.floor();
            let o0 = o_bin.floor();
            let (fr, fc, fo) = (r_bin - r0, c_bin - c0, o_bin - o0);
            for (ri, rw) in [(r0 as i64, 1.0 - fr), (r0 as i64 + 1, fr)] {
                if !(-1..=N_HIST as i64).contains(&ri) {
                    continue;
                }
                for (ci, cw) in [(c0 as i64, 1.0 - fc), (c0 as i64 + 1, fc)] {
                    if !(-1..=N_HIST as i64).contains(&ci) {
                        continue;
                    }
                    for (oi, ow) in [(o0 as usize % N_ORI, 1.0 - fo), ((o0 as usize + 1) % N_ORI, fo)]
                    {
                        hist[idx((ri + 1) as usize, (ci + 1) as usize, oi)] += weight * rw * cw * ow;
                    }
                }
            }
        }
    }

    // Gather the inner 4x4 cells.
    let mut desc = [0.0f32; DESCRIPTOR_DIM];
    for r in 0..N_HIST {
        for c in 0..N_HIST {
            for o in 0..N_ORI {
                desc[(r * N_HIST + c) * N_ORI + o] = hist[idx(r + 1, c + 1, o)] as f32;
            }
        }
    }

    normalize(&mut desc)?;
    for v in desc.iter_mut() {
        *v = v.min(CLAMP);
    }
    normalize(&mut desc)?;
    Some(desc)
}

fn normalize(desc: &mut [f32; DESCRIPTOR_DIM]) -> Option<()> {
    let norm = desc.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return None;
    }
    for v in desc.iter_mut() {
        *v = (*v as f64 / norm) as f32;
    }
    Some(())
}
