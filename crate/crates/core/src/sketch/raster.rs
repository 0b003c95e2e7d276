//! Distance-field rasterization of sketches to grayscale images.

use std::path::Path;

use super::{Entity, EntityKind, Sketch, SketchError};

/// Grayscale image with pixels in [0, 1], 1.0 = white background,
/// row-major from the top-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl RasterImage {
    pub fn white(width: usize, height: usize) -> Self {
        RasterImage { width, height, pixels: vec![1.0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Snaps every pixel to the 8-bit grid a PNG round trip produces, so
    /// in-memory pipelines see the same values as disk-based ones.
    pub fn quantize(&self) -> RasterImage {
        RasterImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| (v * 255.0).round() / 255.0).collect(),
        }
    }

    /// Mean absolute per-pixel difference between two images of equal size.
    pub fn mean_l1(&self, other: &RasterImage) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len());
        let sum: f64 = self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).abs()).sum();
        sum / self.pixels.len() as f64
    }

    pub fn save_png(&self, path: &Path) -> Result<(), SketchError> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<RasterImage, SketchError> {
        let img = image::open(path)?.into_luma8();
        let (width, height) = (img.width() as usize, img.height() as usize);
        let pixels = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Ok(RasterImage { width, height, pixels })
    }
}

/// Renders `s` scaled and centered into a `width`×`height` canvas.
///
/// Strokes are black on white with a one-pixel linear anti-aliasing ramp.
/// The content box is inset from every edge by 5% of the axis extent plus
/// half the stroke width plus the ramp, which keeps all border pixels pure
/// white at any accepted size.
pub fn rasterize(
    s: &Sketch,
    width: usize,
    height: usize,
    stroke_width_px: f64,
) -> Result<RasterImage, SketchError> {
    if width < 16 || height < 16 {
        return Err(SketchError::RasterTooSmall { width, height });
    }
    assert!(stroke_width_px > 0.0, "stroke width must be positive");
    let bounds = s.bounds();
    let (bw, bh) = (bounds.width(), bounds.height());
    if !(bw.max(bh) > 0.0) || !bw.is_finite() || !bh.is_finite() {
        return Err(SketchError::DegenerateInput);
    }

    let half = stroke_width_px / 2.0;
    let inset_x = 0.05 * width as f64 + half + 1.0;
    let inset_y = 0.05 * height as f64 + half + 1.0;
    let usable_w = width as f64 - 2.0 * inset_x;
    let usable_h = height as f64 - 2.0 * inset_y;
    if usable_w <= 0.0 || usable_h <= 0.0 {
        return Err(SketchError::Config(format!(
            "stroke width {stroke_width_px} leaves no usable area in {width}x{height}"
        )));
    }

    // uniform scale that fits both extents; flat axes impose no constraint
    let mut scale = f64::INFINITY;
    if bw > 0.0 {
        scale = scale.min(usable_w / bw);
    }
    if bh > 0.0 {
        scale = scale.min(usable_h / bh);
    }
    let off_x = (width as f64 - bw * scale) / 2.0;
    let off_y = (height as f64 - bh * scale) / 2.0;

    // pixel center → sketch coordinates (y axis points up in sketch space)
    let to_sketch = |px: f64, py: f64| -> (f64, f64) {
        (bounds.min_x + (px - off_x) / scale, bounds.max_y - (py - off_y) / scale)
    };
    // sketch → pixel, for per-entity dirty rectangles
    let to_pixel_x = |x: f64| off_x + (x - bounds.min_x) * scale;
    let to_pixel_y = |y: f64| off_y + (bounds.max_y - y) * scale;

    let mut img = RasterImage::white(width, height);
    let reach = half + 1.0;
    for entity in &s.entities {
        let eb = entity.bounds();
        let x0 = (to_pixel_x(eb.min_x) - reach).floor().max(0.0) as usize;
        let x1 = (to_pixel_x(eb.max_x) + reach).ceil().min(width as f64 - 1.0) as usize;
        let y0 = (to_pixel_y(eb.max_y) - reach).floor().max(0.0) as usize;
        let y1 = (to_pixel_y(eb.min_y) + reach).ceil().min(height as f64 - 1.0) as usize;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let (sx, sy) = to_sketch(px as f64 + 0.5, py as f64 + 0.5);
                let d = distance_to_entity(entity, (sx, sy)) * scale;
                let ink = (half - d + 0.5).clamp(0.0, 1.0);
                let slot = &mut img.pixels[py * width + px];
                *slot = slot.min(1.0 - ink);
            }
        }
    }
    Ok(img)
}

fn distance_to_entity(e: &Entity, p: (f64, f64)) -> f64 {
    match e.kind {
        EntityKind::Line => segment_distance(p, e.start(), e.end()),
        EntityKind::Circle => {
            let r = e.lengths[0];
            (hypot(p, e.anchor) - r).abs()
        }
        EntityKind::Arc => {
            let r = e.lengths[0];
            let phi = (p.1 - e.anchor.1).atan2(p.0 - e.anchor.0).to_degrees();
            if super::arc_contains_angle(e.angles[0], e.angles[1], phi) {
                (hypot(p, e.anchor) - r).abs()
            } else {
                hypot(p, e.start()).min(hypot(p, e.end()))
            }
        }
    }
}

fn hypot(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let (apx, apy) = (p.0 - a.0, p.1 - a.1);
    let len_sq = abx * abx + aby * aby;
    if len_sq == 0.0 {
        return hypot(p, a);
    }
    let t = ((apx * abx + apy * aby) / len_sq).clamp(0.0, 1.0);
    hypot(p, (a.0 + t * abx, a.1 + t * aby))
}
