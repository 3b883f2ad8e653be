//! Bounding-box types shared by every stage of the pipeline.
//!
//! [`NormBox`] is the canonical representation: corners expressed as
//! fractions of the image width and height. [`PixelBox`] is derived on
//! demand when pixels have to be touched.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    /// The box has no area once clamped into the unit square.
    #[error("degenerate box ({x1}, {y1}, {x2}, {y2})")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

/// Axis-aligned box in normalized image coordinates.
///
/// Always satisfies `0 <= x1 < x2 <= 1` and `0 <= y1 < y2 <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct NormBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl NormBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let coords = [x1, y1, x2, y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::InvalidBox(format!(
                "non-finite coordinate in {coords:?}"
            )));
        }
        if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(GeometryError::InvalidBox(format!(
                "coordinate outside [0, 1] in {coords:?}"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// The whole image.
    pub fn full() -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for NormBox {
    type Error = GeometryError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        NormBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<NormBox> for [f64; 4] {
    fn from(b: NormBox) -> Self {
        b.to_array()
    }
}

/// Axis-aligned box in integer pixel coordinates of a specific image.
///
/// Corners are half-open: the box covers columns `x1..x2` and rows `y1..y2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct PixelBox {
    x1: u32,
    y1: u32,
    x2: u32,
    y2: u32,
    image_w: u32,
    image_h: u32,
}

impl PixelBox {
    pub fn new(
        x1: u32,
        y1: u32,
        x2: u32,
        y2: u32,
        image_w: u32,
        image_h: u32,
    ) -> Result<Self, GeometryError> {
        if x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::InvalidBox(format!(
                "empty pixel box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x2 > image_w || y2 > image_h {
            return Err(GeometryError::InvalidBox(format!(
                "pixel box ({x1}, {y1}, {x2}, {y2}) exceeds {image_w}x{image_h} image"
            )));
        }
        Ok(Self {
            x1,
            y1,
            x2,
            y2,
            image_w,
            image_h,
        })
    }

    pub fn x1(&self) -> u32 {
        self.x1
    }

    pub fn y1(&self) -> u32 {
        self.y1
    }

    pub fn x2(&self) -> u32 {
        self.x2
    }

    pub fn y2(&self) -> u32 {
        self.y2
    }

    pub fn image_w(&self) -> u32 {
        self.image_w
    }

    pub fn image_h(&self) -> u32 {
        self.image_h
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    /// Intersection over union with another box on the same image.
    pub fn iou(&self, other: &PixelBox) -> f64 {
        let ix1 = self.x1.max(other.x1);
        let iy1 = self.y1.max(other.y1);
        let ix2 = self.x2.min(other.x2);
        let iy2 = self.y2.min(other.y2);
        let inter = if ix1 < ix2 && iy1 < iy2 {
            u64::from(ix2 - ix1) * u64::from(iy2 - iy1)
        } else {
            0
        };
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }
}

pub fn normalize(pb: &PixelBox) -> NormBox {
    let w = f64::from(pb.image_w);
    let h = f64::from(pb.image_h);
    NormBox {
        x1: f64::from(pb.x1) / w,
        y1: f64::from(pb.y1) / h,
        x2: f64::from(pb.x2) / w,
        y2: f64::from(pb.y2) / h,
    }
}

/// Maps a normalized box onto an `image_w` x `image_h` pixel grid.
///
/// Corners are rounded to the nearest pixel. If rounding collapses an
/// extent, the box is widened to one pixel, preferring to grow toward the
/// bottom/right edge.
///
/// # Panics
///
/// Panics if either image dimension is zero.
pub fn denormalize(nb: &NormBox, image_w: u32, image_h: u32) -> PixelBox {
    assert!(image_w >= 1 && image_h >= 1, "image dimensions must be >= 1");
    let (x1, x2) = round_span(nb.x1, nb.x2, image_w);
    let (y1, y2) = round_span(nb.y1, nb.y2, image_h);
    PixelBox {
        x1,
        y1,
        x2,
        y2,
        image_w,
        image_h,
    }
}

fn round_span(lo: f64, hi: f64, dim: u32) -> (u32, u32) {
    let scale = f64::from(dim);
    let to_px = |v: f64| ((v * scale).round().max(0.0) as u32).min(dim);
    let (mut a, mut b) = (to_px(lo), to_px(hi));
    if b <= a {
        if a < dim {
            b = a + 1;
        } else {
            a = dim - 1;
            b = dim;
        }
    }
    (a, b)
}

/// Clamps raw model-emitted coordinates into the unit square.
pub fn clamp_to_unit(raw: [f64; 4]) -> Result<NormBox, GeometryError> {
    if raw.iter().any(|c| !c.is_finite()) {
        return Err(GeometryError::InvalidBox(format!(
            "non-finite coordinate in {raw:?}"
        )));
    }
    let [x1, y1, x2, y2] = raw.map(|c| c.clamp(0.0, 1.0));
    NormBox::new(x1, y1, x2, y2)
}
