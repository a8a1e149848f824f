//! Axis-aligned rectangles and the 2D affine map primitive shared across stages.

use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle in pixel coordinates.
///
/// Coordinates are real-valued: annotated character boxes carry integer
/// values, but rectangles produced by affine mapping do not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Rect { x, y, w, h }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.x, self.y),
            (self.right(), self.y),
            (self.right(), self.bottom()),
            (self.x, self.bottom()),
        ]
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x && x <= self.right() && y >= self.y && y <= self.bottom()
    }

    /// Intersection rectangle, or `None` when the overlap has zero area.
    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 > x0 && y1 > y0 {
            Some(Rect::new(x0, y0, x1 - x0, y1 - y0))
        } else {
            None
        }
    }

    /// Smallest rectangle containing all `points`. Empty input yields `None`.
    pub fn bounding(points: &[(f64, f64)]) -> Option<Rect> {
        let (first, rest) = points.split_first()?;
        let (mut x0, mut y0) = *first;
        let (mut x1, mut y1) = *first;
        for &(x, y) in rest {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        Some(Rect::new(x0, y0, x1 - x0, y1 - y0))
    }

    /// Clip to the image rectangle `[0,w] x [0,h]`; `None` when nothing remains.
    pub fn clip_to_bounds(&self, width: u32, height: u32) -> Option<Rect> {
        self.intersect(&Rect::new(0.0, 0.0, width as f64, height as f64))
    }
}

/// Row-major 2x3 affine transform `[a b tx; c d ty]` acting on column
/// vectors: `(x', y') = (a*x + b*y + tx, c*x + d*y + ty)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub c: f64,
    pub d: f64,
    pub ty: f64,
}

impl Affine2 {
    pub fn identity() -> Self {
        Affine2 { a: 1.0, b: 0.0, tx: 0.0, c: 0.0, d: 1.0, ty: 0.0 }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine2 { a: 1.0, b: 0.0, tx, c: 0.0, d: 1.0, ty }
    }

    /// Rotation by `theta` radians and uniform scale `s` about `center`,
    /// followed by translation `(tx, ty)`.
    pub fn similarity_about(center: (f64, f64), theta: f64, s: f64, tx: f64, ty: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        let (a, b, c, d) = (s * cos, -s * sin, s * sin, s * cos);
        let (cx, cy) = center;
        Affine2 {
            a,
            b,
            tx: cx - a * cx - b * cy + tx,
            c,
            d,
            ty: cy - c * cx - d * cy + ty,
        }
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        (
            self.a * p.0 + self.b * p.1 + self.tx,
            self.c * p.0 + self.d * p.1 + self.ty,
        )
    }

    /// Determinant of the linear part.
    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    /// Inverse map; `None` when the linear part is singular.
    pub fn inverse(&self) -> Option<Affine2> {
        let det = self.det();
        if det.abs() < 1e-12 {
            return None;
        }
        let (ia, ib, ic, id) = (self.d / det, -self.b / det, -self.c / det, self.a / det);
        Some(Affine2 {
            a: ia,
            b: ib,
            tx: -(ia * self.tx + ib * self.ty),
            c: ic,
            d: id,
            ty: -(ic * self.tx + id * self.ty),
        })
    }

    /// Composition `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Affine2) -> Affine2 {
        Affine2 {
            a: self.a * other.a + self.b * other.c,
            b: self.a * other.b + self.b * other.d,
            tx: self.a * other.tx + self.b * other.ty + self.tx,
            c: self.c * other.a + self.d * other.c,
            d: self.c * other.b + self.d * other.d,
            ty: self.c * other.tx + self.d * other.ty + self.ty,
        }
    }

    /// Map a rectangle and return the axis-aligned bounding box of the four
    /// mapped corners.
    pub fn map_rect(&self, r: &Rect) -> Rect {
        let mapped: Vec<(f64, f64)> = r.corners().iter().map(|&p| self.apply(p)).collect();
        Rect::bounding(&mapped).expect("four corners")
    }

    pub fn params(&self) -> [f64; 6] {
        [self.a, self.b, self.tx, self.c, self.d, self.ty]
    }

    pub fn from_params(p: [f64; 6]) -> Self {
        Affine2 { a: p[0], b: p[1], tx: p[2], c: p[3], d: p[4], ty: p[5] }
    }
}
