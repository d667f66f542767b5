use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Axis-aligned box in cell coordinates, half-open: `[x_min, x_max) × [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: i32,
    pub y_min: i32,
    pub x_max: i32,
    pub y_max: i32,
}

impl BBox {
    pub const fn new(x_min: i32, y_min: i32, x_max: i32, y_max: i32) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Box from the row/column/height/width form used by `BOX(r,c,h,w)` tokens.
    pub const fn from_rchw(row: i32, col: i32, h: i32, w: i32) -> Self {
        Self::new(col, row, col + w, row + h)
    }

    pub fn width(&self) -> i32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> i32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> i64 {
        (self.width().max(0) as i64) * (self.height().max(0) as i64)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) as f64 / 2.0,
            (self.y_min + self.y_max) as f64 / 2.0,
        )
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() <= 0 || self.height() <= 0
    }

    pub fn fits(&self, grid_w: usize, grid_h: usize) -> bool {
        !self.is_degenerate()
            && self.x_min >= 0
            && self.y_min >= 0
            && self.x_max <= grid_w as i32
            && self.y_max <= grid_h as i32
    }

    pub fn translate(&self, dx: i32, dy: i32) -> Self {
        Self::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0) as i64;
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0) as i64;
        w * h
    }

    pub fn contains_cell(&self, x: usize, y: usize) -> bool {
        let (x, y) = (x as i32, y as i32);
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({},{},{},{})",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

/// Intersection-over-union by interval arithmetic. Symmetric; errors on zero-area input.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if bx.is_degenerate() {
            return Err(Error::DegenerateBox(bx.to_string()));
        }
    }
    let inter = a.intersection_area(b) as f64;
    let union = a.area() as f64 + b.area() as f64 - inter;
    Ok(inter / union)
}
