//! Grayscale f32 image buffer and the pixel-level operations the pipeline
//! needs: separable Gaussian blur, decimation, bilinear sampling, affine
//! warping, grayscale morphology and Otsu thresholding.

use crate::geom::{Affine2, Rect};

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, fill: f32) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![fill; (width * height) as usize],
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), (width * height) as usize, "pixel count mismatch");
        GrayImage { width, height, pixels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.pixels[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: f32) {
        self.pixels[(y * self.width + x) as usize] = v;
    }

    /// Clamped integer access: coordinates outside the image replicate the
    /// nearest edge pixel.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> f32 {
        let xc = x.clamp(0, self.width as i64 - 1) as u32;
        let yc = y.clamp(0, self.height as i64 - 1) as u32;
        self.get(xc, yc)
    }

    /// Bilinear sample at continuous pixel coordinates, edge-clamped.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (xi, yi) = (x0 as i64, y0 as i64);
        let p00 = self.get_clamped(xi, yi);
        let p10 = self.get_clamped(xi + 1, yi);
        let p01 = self.get_clamped(xi, yi + 1);
        let p11 = self.get_clamped(xi + 1, yi + 1);
        let top = p00 + (p10 - p00) * fx;
        let bot = p01 + (p11 - p01) * fx;
        top + (bot - top) * fy
    }

    /// Bilinear sample where coordinates outside the image return `border`
    /// instead of edge-replicating. Used by the warp.
    pub fn sample_bilinear_border(&self, x: f64, y: f64, border: f32) -> f32 {
        if x < -1.0 || y < -1.0 || x > self.width as f64 || y > self.height as f64 {
            return border;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (xi, yi) = (x0 as i64, y0 as i64);
        let at = |px: i64, py: i64| -> f32 {
            if px < 0 || py < 0 || px >= self.width as i64 || py >= self.height as i64 {
                border
            } else {
                self.get(px as u32, py as u32)
            }
        };
        let p00 = at(xi, yi);
        let p10 = at(xi + 1, yi);
        let p01 = at(xi, yi + 1);
        let p11 = at(xi + 1, yi + 1);
        let top = p00 + (p10 - p00) * fx;
        let bot = p01 + (p11 - p01) * fx;
        top + (bot - top) * fy
    }

    /// Separable Gaussian blur with edge replication. Kernel radius is
    /// `ceil(4*sigma)`, which keeps truncation error well below quantization.
    pub fn gaussian_blur(&self, sigma: f64) -> GrayImage {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (4.0 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let denom = 2.0 * sigma * sigma;
        let mut sum = 0.0f64;
        for i in -radius..=radius {
            let w = (-(i as f64) * (i as f64) / denom).exp();
            kernel.push(w);
            sum += w;
        }
        let kernel: Vec<f32> = kernel.iter().map(|w| (w / sum) as f32).collect();

        let w = self.width as i64;
        let h = self.height as i64;
        // Horizontal pass.
        let mut tmp = vec![0.0f32; self.pixels.len()];
        for y in 0..h {
            let row = &self.pixels[(y * w) as usize..((y + 1) * w) as usize];
            for x in 0..w {
                let mut acc = 0.0f32;
                for (ki, kw) in kernel.iter().enumerate() {
                    let xi = (x + ki as i64 - radius).clamp(0, w - 1) as usize;
                    acc += row[xi] * kw;
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        // Vertical pass.
        let mut out = vec![0.0f32; self.pixels.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (ki, kw) in kernel.iter().enumerate() {
                    let yi = (y + ki as i64 - radius).clamp(0, h - 1);
                    acc += tmp[(yi * w + x) as usize] * kw;
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        GrayImage::from_pixels(self.width, self.height, out)
    }

    /// Bilinear 2x upsample (seed image for the first pyramid octave).
    pub fn upsample2(&self) -> GrayImage {
        let nw = self.width * 2;
        let nh = self.height * 2;
        let mut out = Vec::with_capacity((nw * nh) as usize);
        for y in 0..nh {
            for x in 0..nw {
                out.push(self.sample_bilinear(x as f64 / 2.0, y as f64 / 2.0));
            }
        }
        GrayImage::from_pixels(nw, nh, out)
    }

    /// Decimate by 2 (every other pixel), as scale pyramids do.
    pub fn downsample2(&self) -> GrayImage {
        let nw = (self.width / 2).max(1);
        let nh = (self.height / 2).max(1);
        let mut out = Vec::with_capacity((nw * nh) as usize);
        for y in 0..nh {
            for x in 0..nw {
                out.push(self.get((x * 2).min(self.width - 1), (y * 2).min(self.height - 1)));
            }
        }
        GrayImage::from_pixels(nw, nh, out)
    }

    /// Resample the sub-rectangle `src` into a `size` x `size` patch with
    /// bilinear interpolation (pixel-center convention).
    pub fn crop_resize(&self, src: &Rect, size: u32) -> GrayImage {
        let mut out = Vec::with_capacity((size * size) as usize);
        for j in 0..size {
            for i in 0..size {
                let sx = src.x + (i as f64 + 0.5) * src.w / size as f64 - 0.5;
                let sy = src.y + (j as f64 + 0.5) * src.h / size as f64 - 0.5;
                out.push(self.sample_bilinear(sx, sy));
            }
        }
        GrayImage::from_pixels(size, size, out)
    }

    /// Warp through `forward` (a map from this image's coordinates to the
    /// output's): each output pixel pulls from `forward^-1`, with `border`
    /// fill. Panics if `forward` is singular.
    pub fn warp_affine(&self, forward: &Affine2, out_w: u32, out_h: u32, border: f32) -> GrayImage {
        let inv = forward.inverse().expect("warp transform must be invertible");
        let mut out = Vec::with_capacity((out_w * out_h) as usize);
        for y in 0..out_h {
            for x in 0..out_w {
                let (sx, sy) = inv.apply((x as f64, y as f64));
                out.push(self.sample_bilinear_border(sx, sy, border));
            }
        }
        GrayImage::from_pixels(out_w, out_h, out)
    }

    /// Grayscale erosion (local maximum over a disk): thins dark strokes.
    pub fn morph_max(&self, radius: u32) -> GrayImage {
        self.morph(radius, f32::max, f32::MIN)
    }

    /// Grayscale dilation of dark structure (local minimum over a disk):
    /// thickens dark strokes.
    pub fn morph_min(&self, radius: u32) -> GrayImage {
        self.morph(radius, f32::min, f32::MAX)
    }

    fn morph(&self, radius: u32, fold: fn(f32, f32) -> f32, init: f32) -> GrayImage {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as i64;
        let r2 = r * r;
        let mut out = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                let mut acc = init;
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx * dx + dy * dy <= r2 {
                            acc = fold(acc, self.get_clamped(x + dx, y + dy));
                        }
                    }
                }
                out.push(acc);
            }
        }
        GrayImage::from_pixels(self.width, self.height, out)
    }

    /// Crop the integer sub-rectangle `[x0, x0+w) x [y0, y0+h)`.
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> GrayImage {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut out = Vec::with_capacity((w * h) as usize);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) as usize;
            out.extend_from_slice(&self.pixels[start..start + w as usize]);
        }
        GrayImage::from_pixels(w, h, out)
    }

    /// Snap every intensity to the 8-bit grid. Generated corpora are
    /// quantized before use so that a PNG write/read round-trip is exact.
    pub fn quantize_u8(&mut self) {
        for p in &mut self.pixels {
            *p = (*p * 255.0).round().clamp(0.0, 255.0) / 255.0;
        }
    }
}

/// Otsu's threshold over intensities in `[0, 1]` using a 256-bin histogram.
/// Returns the threshold value; pixels strictly above it are foreground.
pub fn otsu_threshold(pixels: &[f32]) -> f32 {
    let mut hist = [0u32; 256];
    for &p in pixels {
        let bin = (p.clamp(0.0, 1.0) * 255.0).round() as usize;
        hist[bin.min(255)] += 1;
    }
    let total: u64 = pixels.len() as u64;
    if total == 0 {
        return 0.5;
    }
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut sum_bg = 0.0f64;
    let mut w_bg = 0u64;
    let mut best_var = -1.0f64;
    let mut best_t = 127usize;
    for t in 0..256 {
        w_bg += hist[t] as u64;
        if w_bg == 0 {
            continue;
        }
        let w_fg = total - w_bg;
        if w_fg == 0 {
            break;
        }
        sum_bg += t as f64 * hist[t] as f64;
        let mean_bg = sum_bg / w_bg as f64;
        let mean_fg = (sum_all - sum_bg) / w_fg as f64;
        let between = w_bg as f64 * w_fg as f64 * (mean_bg - mean_fg).powi(2);
        if between > best_var {
            best_var = between;
            best_t = t;
        }
    }
    best_t as f32 / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_interpolates_midpoint() {
        let img = GrayImage::from_pixels(2, 1, vec![0.0, 1.0]);
        assert!((img.sample_bilinear(0.5, 0.0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn blur_preserves_mean_of_constant_image() {
        let img = GrayImage::new(16, 16, 0.25);
        let blurred = img.gaussian_blur(1.6);
        for &p in blurred.pixels() {
            assert!((p - 0.25).abs() < 1e-5);
        }
    }

    #[test]
    fn otsu_splits_bimodal() {
        let mut px = vec![0.1f32; 100];
        px.extend(vec![0.9f32; 100]);
        let t = otsu_threshold(&px);
        assert!(t > 0.1 && t < 0.9, "threshold {t} should separate the modes");
    }

    #[test]
    fn warp_identity_is_noop_inside() {
        let mut img = GrayImage::new(8, 8, 0.0);
        img.set(3, 4, 1.0);
        let warped = img.warp_affine(&Affine2::identity(), 8, 8, 0.0);
        assert_eq!(img, warped);
    }

    #[test]
    fn morph_min_expands_dark_spot() {
        let mut img = GrayImage::new(9, 9, 1.0);
        img.set(4, 4, 0.0);
        let dilated = img.morph_min(1);
        assert_eq!(dilated.get(4, 3), 0.0);
        assert_eq!(dilated.get(3, 4), 0.0);
        assert_eq!(dilated.get(3, 3), 1.0); // corner outside the disk
    }
}
