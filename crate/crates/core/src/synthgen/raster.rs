use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ElementClass, Instance, Point};

/// Grid geometry of a BEV raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterSpec {
    /// Meters per cell.
    pub resolution: f64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Default for RasterSpec {
    fn default() -> Self {
        RasterSpec {
            resolution: 0.3,
            x_range: (-15.0, 15.0),
            y_range: (-30.0, 30.0),
        }
    }
}

impl RasterSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.resolution.is_finite()
            && self.resolution > 0.0
            && self.x_range.0 < self.x_range.1
            && self.y_range.0 < self.y_range.1;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid raster spec: {self:?}")));
        }
        Ok(())
    }

    /// Cells along y.
    pub fn height(&self) -> usize {
        cells(self.y_range.1 - self.y_range.0, self.resolution)
    }

    /// Cells along x.
    pub fn width(&self) -> usize {
        cells(self.x_range.1 - self.x_range.0, self.resolution)
    }

    /// Cell center of row `r`, column `c`. Row 0 is at `y_range.0`.
    pub fn cell_center(&self, r: usize, c: usize) -> Point {
        Point::new(
            self.x_range.0 + (c as f64 + 0.5) * self.resolution,
            self.y_range.0 + (r as f64 + 0.5) * self.resolution,
        )
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x_range.0 && p.x <= self.x_range.1 && p.y >= self.y_range.0 && p.y <= self.y_range.1
    }
}

fn cells(span: f64, res: f64) -> usize {
    // 30 / 0.3 is 100.00000000000001 in binary floating point
    ((span / res) - 1e-9).ceil().max(1.0) as usize
}

/// H×W×C grid stored row-major as `[H][W][C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevRaster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub resolution: f64,
    pub data: Vec<f32>,
}

impl BevRaster {
    pub fn zeros(height: usize, width: usize, channels: usize, resolution: f64) -> Self {
        BevRaster {
            height,
            width,
            channels,
            resolution,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn index(&self, r: usize, c: usize, ch: usize) -> usize {
        (r * self.width + c) * self.channels + ch
    }

    pub fn get(&self, r: usize, c: usize, ch: usize) -> f32 {
        self.data[self.index(r, c, ch)]
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    pub fn bit_eq(&self, other: &BevRaster) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
            && self.resolution.to_bits() == other.resolution.to_bits()
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RasterDiagnostic {
    /// A vertex lies outside the raster range; the drawing is clipped.
    OutOfRange { instance: usize, point: Point },
}

impl fmt::Display for RasterDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RasterDiagnostic::OutOfRange { instance, point } => write!(
                f,
                "instance {instance}: point ({}, {}) outside raster range, clipped",
                point.x, point.y
            ),
        }
    }
}

/// Draws every instance into its class channel.
///
/// Cell intensity is `clamp(1 - d / resolution, 0, 1)` where `d` is the
/// distance from the cell center to the nearest segment of any instance of
/// that class.
pub fn rasterize(instances: &[Instance], spec: &RasterSpec) -> Result<(BevRaster, Vec<RasterDiagnostic>)> {
    spec.validate()?;
    let (h, w) = (spec.height(), spec.width());
    let mut raster = BevRaster::zeros(h, w, ElementClass::COUNT, spec.resolution);
    let mut diags = Vec::new();
    let res = spec.resolution;

    for (idx, inst) in instances.iter().enumerate() {
        if let Some(&p) = inst.points.iter().find(|p| !spec.contains(**p)) {
            diags.push(RasterDiagnostic::OutOfRange { instance: idx, point: p });
        }
        let ch = inst.class.index();
        for seg in inst.points.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            if !(a.x.is_finite() && a.y.is_finite() && b.x.is_finite() && b.y.is_finite()) {
                continue;
            }
            // only cells whose centers lie within one resolution of the segment can light up
            let lo_x = a.x.min(b.x) - res;
            let hi_x = a.x.max(b.x) + res;
            let lo_y = a.y.min(b.y) - res;
            let hi_y = a.y.max(b.y) + res;
            let Some((c0, c1)) = cell_span(lo_x, hi_x, spec.x_range.0, res, w) else {
                continue;
            };
            let Some((r0, r1)) = cell_span(lo_y, hi_y, spec.y_range.0, res, h) else {
                continue;
            };
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let d = point_segment_dist(spec.cell_center(r, c), a, b);
                    let v = (1.0 - d / res).clamp(0.0, 1.0) as f32;
                    let i = raster.index(r, c, ch);
                    if v > raster.data[i] {
                        raster.data[i] = v;
                    }
                }
            }
        }
    }
    Ok((raster, diags))
}

fn cell_span(lo: f64, hi: f64, origin: f64, res: f64, n: usize) -> Option<(usize, usize)> {
    let first = ((lo - origin) / res - 0.5).floor().max(0.0);
    let last = ((hi - origin) / res - 0.5).ceil().min(n as f64 - 1.0);
    (first <= last).then_some((first as usize, last as usize))
}

/// Euclidean distance from `p` to segment `ab`, using only `+ - * / sqrt`.
pub fn point_segment_dist(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (a.x + t * dx - p.x, a.y + t * dy - p.y);
    (ex * ex + ey * ey).sqrt()
}
