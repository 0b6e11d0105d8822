//! Normalized bounding boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates, `x` to the right and
/// `y` downward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl NormBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = NormBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    /// Box covering pixels `[px0, px1) x [py0, py1)` of a `size x size` canvas.
    pub fn from_pixels(px0: usize, py0: usize, px1: usize, py1: usize, size: usize) -> Self {
        let s = size as f64;
        NormBox {
            x0: px0 as f64 / s,
            y0: py0 as f64 / s,
            x1: px1 as f64 / s,
            y1: py1 as f64 / s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.x0, self.y0, self.x1, self.y1];
        if c.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::validation(format!("box {self:?} leaves the unit square")));
        }
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::validation(format!("box {self:?} has zero area")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersection(&self, other: &NormBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, other: &NormBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn in_unit_square(&self) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= 1.0 && self.y1 <= 1.0
    }

    /// Parses `x0,y0,x1,y1`.
    pub fn parse(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::validation(format!("bad box coordinate {p:?}")))
            })
            .collect::<Result<_>>()?;
        if v.len() != 4 {
            return Err(Error::validation(format!("box {s:?} needs four coordinates")));
        }
        NormBox::new(v[0], v[1], v[2], v[3])
    }
}
