use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use tensorcore::Tensor;

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Polygon,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Polygon];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Polygon => "polygon",
        }
    }
}

/// A parametric foreground shape. Lengths are relative to the canvas side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Diameter of the circumscribed circle, in (0, 0.5].
    pub scale: f64,
    /// Minor-to-major axis ratio (ellipse, rectangle), in (0, 1].
    pub aspect: f64,
    /// Radians.
    pub rotation: f64,
    /// Centre `(x, y)` as fractions of the width and height.
    pub position: (f64, f64),
    /// Vertex radii relative to the circumscribed radius (polygons only).
    pub vertices: Vec<f64>,
}

impl ShapeSpec {
    /// Circumscribed radius in pixels for a canvas side of `side`.
    pub fn radius(&self, side: usize) -> f64 {
        0.5 * self.scale * side as f64
    }

    /// Major and minor extents (full lengths, pixels) of ellipses and rectangles.
    fn axes(&self, side: usize) -> (f64, f64) {
        let r = self.radius(side);
        match self.kind {
            // Rectangle corners lie on the circumscribed circle.
            ShapeKind::Rectangle => {
                let major = 2.0 * r / (1.0 + self.aspect * self.aspect).sqrt();
                (major, major * self.aspect)
            }
            _ => (2.0 * r, 2.0 * r * self.aspect),
        }
    }

    fn contains(&self, side: usize, cx: f64, cy: f64, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        // Rotate into the shape frame.
        let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
        let (major, minor) = self.axes(side);
        match self.kind {
            ShapeKind::Ellipse => (u / (major / 2.0)).powi(2) + (v / (minor / 2.0)).powi(2) <= 1.0,
            ShapeKind::Rectangle => u.abs() <= major / 2.0 && v.abs() <= minor / 2.0,
            ShapeKind::Polygon => {
                let pts = self.polygon(side);
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let ((xi, yi), (xj, yj)) = (pts[i], pts[j]);
                    if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }

    fn polygon(&self, side: usize) -> Vec<(f64, f64)> {
        let r = self.radius(side);
        let k = self.vertices.len();
        self.vertices
            .iter()
            .enumerate()
            .map(|(i, &rho)| {
                let a = 2.0 * PI * i as f64 / k as f64;
                (r * rho * a.cos(), r * rho * a.sin())
            })
            .collect()
    }
}

/// Rasterize `spec` on an `m × n` canvas (pixel centres) and return the
/// object (1 inside) and its binary mask, both `[1, m, n]`.
pub fn gen_shape(spec: &ShapeSpec, m: usize, n: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if !(spec.scale > 0.0 && spec.scale <= 0.5) {
        return Err(contract(format!("shape scale {} outside (0, 0.5]", spec.scale)));
    }
    if !(spec.aspect > 0.0 && spec.aspect <= 1.0) {
        return Err(contract(format!("shape aspect {} outside (0, 1]", spec.aspect)));
    }
    if spec.kind == ShapeKind::Polygon && (spec.vertices.len() < 3 || spec.vertices.iter().any(|&r| !(r > 0.0 && r <= 1.0))) {
        return Err(contract("polygons need at least 3 vertex radii in (0, 1]"));
    }
    let side = m.min(n);
    let (cx, cy) = (spec.position.0 * n as f64, spec.position.1 * m as f64);
    let r = spec.radius(side);
    if cx - r < 0.0 || cy - r < 0.0 || cx + r > n as f64 || cy + r > m as f64 {
        return Err(contract(format!("shape of radius {r:.2} at ({cx:.2}, {cy:.2}) leaves the {m}x{n} canvas")));
    }
    let mask = Tensor::from_fn(vec![1, m, n], |i| {
        let (y, x) = ((i / n) as f64 + 0.5, (i % n) as f64 + 0.5);
        spec.contains(side, cx, cy, x, y) as u8 as f32
    });
    Ok((mask.clone(), mask))
}
