//! Parametric 2D sketches: generation, perturbation, and rasterization.
//!
//! A sketch is a list of entities (lines, arcs, circles) whose lengths and
//! angles are the parameters the perturbation levels act on, plus
//! endpoint-coincidence links resolved by chain propagation.

mod dataset;
mod generate;
mod perturb;
mod raster;

pub use dataset::{gen_dataset, load_split, DatasetConfig, Manifest, ManifestEntry};
pub use generate::sample_sketch;
pub use perturb::{perturb, resolve_constraints, PerturbationLevel};
pub use raster::{rasterize, RasterImage};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SketchError {
    #[error("degenerate sketch: bounding box has no extent")]
    DegenerateInput,
    #[error("unsatisfiable coincidence link between entities {a} and {b}: residual {residual:.3e}")]
    UnsatisfiableConstraint { a: usize, b: usize, residual: f64 },
    #[error("raster size {width}x{height} is below the 16x16 minimum")]
    RasterTooSmall { width: usize, height: usize },
    #[error("dataset configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityKind {
    Line,
    Arc,
    Circle,
}

/// One sketch primitive.
///
/// Interpretation of the parameter slots by kind:
/// - `Line`: anchor = start point, lengths = `[length]`, angles = `[direction°]`
/// - `Arc`: anchor = center, lengths = `[radius]`, angles = `[start°, sweep°]`
/// - `Circle`: anchor = center, lengths = `[radius]`, angles = `[]`
#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub kind: EntityKind,
    pub anchor: (f64, f64),
    pub lengths: Vec<f64>,
    pub angles: Vec<f64>,
}

impl Entity {
    pub fn line(anchor: (f64, f64), length: f64, direction_deg: f64) -> Self {
        assert!(length > 0.0);
        Entity { kind: EntityKind::Line, anchor, lengths: vec![length], angles: vec![direction_deg] }
    }

    pub fn arc(center: (f64, f64), radius: f64, start_deg: f64, sweep_deg: f64) -> Self {
        assert!(radius > 0.0);
        assert!(sweep_deg > 0.0 && sweep_deg < 360.0);
        Entity {
            kind: EntityKind::Arc,
            anchor: center,
            lengths: vec![radius],
            angles: vec![start_deg, sweep_deg],
        }
    }

    pub fn circle(center: (f64, f64), radius: f64) -> Self {
        assert!(radius > 0.0);
        Entity { kind: EntityKind::Circle, anchor: center, lengths: vec![radius], angles: vec![] }
    }

    /// Point where the entity's stroke begins. Circles expose their
    /// leftmost point so they can sit in a chain like a bead.
    pub fn start(&self) -> (f64, f64) {
        match self.kind {
            EntityKind::Line => self.anchor,
            EntityKind::Arc => offset(self.anchor, self.lengths[0], self.angles[0]),
            EntityKind::Circle => offset(self.anchor, self.lengths[0], 180.0),
        }
    }

    /// Point where the entity's stroke ends (rightmost point for circles).
    pub fn end(&self) -> (f64, f64) {
        match self.kind {
            EntityKind::Line => offset(self.anchor, self.lengths[0], self.angles[0]),
            EntityKind::Arc => offset(self.anchor, self.lengths[0], self.angles[0] + self.angles[1]),
            EntityKind::Circle => offset(self.anchor, self.lengths[0], 0.0),
        }
    }

    pub fn endpoint(&self, which: usize) -> (f64, f64) {
        match which {
            0 => self.start(),
            1 => self.end(),
            _ => panic!("endpoint index {which} out of range"),
        }
    }

    /// Tight axis-aligned bounds of the stroke centerline.
    pub fn bounds(&self) -> Bounds {
        match self.kind {
            EntityKind::Line => Bounds::of_points(&[self.start(), self.end()]),
            EntityKind::Circle => {
                let (cx, cy) = self.anchor;
                let r = self.lengths[0];
                Bounds { min_x: cx - r, min_y: cy - r, max_x: cx + r, max_y: cy + r }
            }
            EntityKind::Arc => {
                let (cx, cy) = self.anchor;
                let r = self.lengths[0];
                let mut b = Bounds::of_points(&[self.start(), self.end()]);
                // axis extremes the arc actually sweeps through
                for (deg, px, py) in [
                    (0.0, cx + r, cy),
                    (90.0, cx, cy + r),
                    (180.0, cx - r, cy),
                    (270.0, cx, cy - r),
                ] {
                    if arc_contains_angle(self.angles[0], self.angles[1], deg) {
                        b.include((px, py));
                    }
                }
                b
            }
        }
    }
}

/// Pair of entity endpoints constrained to coincide. Endpoints are
/// `(entity index, 0 for start / 1 for end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoincidenceLink {
    pub a: (usize, usize),
    pub b: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sketch {
    pub entities: Vec<Entity>,
    pub links: Vec<CoincidenceLink>,
    pub seed: u64,
}

impl Sketch {
    /// Bounding box of all stroke centerlines.
    pub fn bounds(&self) -> Bounds {
        let mut b = Bounds::empty();
        for e in &self.entities {
            b.merge(&e.bounds());
        }
        b
    }

    /// Longest side of the bounding box; the reference scale for
    /// perturbation magnitudes.
    pub fn max_bbox_side(&self) -> f64 {
        let b = self.bounds();
        (b.max_x - b.min_x).max(b.max_y - b.min_y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bounds {
    pub fn empty() -> Self {
        Bounds {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        }
    }

    pub fn of_points(points: &[(f64, f64)]) -> Self {
        let mut b = Bounds::empty();
        for &p in points {
            b.include(p);
        }
        b
    }

    pub fn include(&mut self, (x, y): (f64, f64)) {
        self.min_x = self.min_x.min(x);
        self.min_y = self.min_y.min(y);
        self.max_x = self.max_x.max(x);
        self.max_y = self.max_y.max(y);
    }

    pub fn merge(&mut self, other: &Bounds) {
        self.min_x = self.min_x.min(other.min_x);
        self.min_y = self.min_y.min(other.min_y);
        self.max_x = self.max_x.max(other.max_x);
        self.max_y = self.max_y.max(other.max_y);
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }
}

pub(crate) fn offset((x, y): (f64, f64), dist: f64, angle_deg: f64) -> (f64, f64) {
    let rad = angle_deg.to_radians();
    (x + dist * rad.cos(), y + dist * rad.sin())
}

/// Whether `angle_deg` lies on the arc spanning `[start, start + sweep]`.
pub(crate) fn arc_contains_angle(start_deg: f64, sweep_deg: f64, angle_deg: f64) -> bool {
    let rel = (angle_deg - start_deg).rem_euclid(360.0);
    rel <= sweep_deg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_endpoints_follow_direction() {
        let l = Entity::line((1.0, 2.0), 3.0, 0.0);
        assert_eq!(l.start(), (1.0, 2.0));
        let (ex, ey) = l.end();
        assert!((ex - 4.0).abs() < 1e-12);
        assert!((ey - 2.0).abs() < 1e-12);

        let up = Entity::line((0.0, 0.0), 2.0, 90.0);
        let (ex, ey) = up.end();
        assert!(ex.abs() < 1e-12);
        assert!((ey - 2.0).abs() < 1e-12);
    }

    #[test]
    fn circle_chains_left_to_right() {
        let c = Entity::circle((5.0, 5.0), 2.0);
        let (sx, sy) = c.start();
        let (ex, ey) = c.end();
        assert!((sx - 3.0).abs() < 1e-12 && (sy - 5.0).abs() < 1e-12);
        assert!((ex - 7.0).abs() < 1e-12 && (ey - 5.0).abs() < 1e-12);
    }

    #[test]
    fn arc_bounds_include_swept_extremes() {
        // upper half circle of radius 1 about the origin: 0° → 180°
        let a = Entity::arc((0.0, 0.0), 1.0, 0.0, 180.0);
        let b = a.bounds();
        assert!((b.min_x + 1.0).abs() < 1e-12);
        assert!((b.max_x - 1.0).abs() < 1e-12);
        assert!((b.max_y - 1.0).abs() < 1e-12);
        // bottom extreme (270°) is not swept; lower bound sits on the chord
        assert!(b.min_y.abs() < 1e-12);
    }

    #[test]
    fn arc_angle_containment_wraps() {
        assert!(arc_contains_angle(350.0, 20.0, 0.0));
        assert!(arc_contains_angle(350.0, 20.0, 355.0));
        assert!(arc_contains_angle(350.0, 20.0, 10.0));
        assert!(!arc_contains_angle(350.0, 20.0, 180.0));
    }

    #[test]
    fn sketch_bounds_merge_entities() {
        let s = Sketch {
            entities: vec![
                Entity::line((0.0, 0.0), 4.0, 0.0),
                Entity::circle((6.0, 1.0), 1.0),
            ],
            links: vec![],
            seed: 0,
        };
        let b = s.bounds();
        assert_eq!((b.min_x, b.min_y), (0.0, 0.0));
        assert_eq!((b.max_x, b.max_y), (7.0, 2.0));
        assert!((s.max_bbox_side() - 7.0).abs() < 1e-12);
    }
}
