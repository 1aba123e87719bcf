use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RANGE_TOL: f64 = 1e-9;

/// Axis-aligned box in normalized center/size form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form `(x0, y0, x1, y1)`, unconstrained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Corners {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
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

    pub fn to_center(&self) -> BBox {
        BBox {
            cx: 0.5 * (self.x0 + self.x1),
            cy: 0.5 * (self.y0 + self.y1),
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
        }
    }

    /// Intersection with the unit square.
    pub fn clip_unit(&self) -> Corners {
        Corners {
            x0: self.x0.clamp(0.0, 1.0),
            y0: self.y0.clamp(0.0, 1.0),
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
        }
    }
}

impl BBox {
    /// Validated constructor: center in `[0,1]`, extents in `(0,1]`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (-RANGE_TOL..=1.0 + RANGE_TOL).contains(&v);
        if !(self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite())
        {
            return Err(Error::InvalidBox(format!("non-finite {self:?}")));
        }
        if !in_unit(self.cx) || !in_unit(self.cy) {
            return Err(Error::InvalidBox(format!("center outside [0,1]: {self:?}")));
        }
        if !(self.w > 0.0 && self.h > 0.0) || !in_unit(self.w) || !in_unit(self.h) {
            return Err(Error::InvalidBox(format!("extent outside (0,1]: {self:?}")));
        }
        Ok(())
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Corners::new(x0, y0, x1, y1).to_center();
        b.validate()?;
        Ok(b)
    }

    pub fn corners(&self) -> Corners {
        Corners {
            x0: self.cx - 0.5 * self.w,
            y0: self.cy - 0.5 * self.h,
            x1: self.cx + 0.5 * self.w,
            y1: self.cy + 0.5 * self.h,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            cx: a[0],
            cy: a[1],
            w: a[2],
            h: a[3],
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let c = self.corners();
        x >= c.x0 && x <= c.x1 && y >= c.y0 && y <= c.y1
    }

    /// Same center, extents multiplied by `factor`.
    pub fn expanded(&self, factor: f64) -> Corners {
        BBox {
            w: self.w * factor,
            h: self.h * factor,
            ..*self
        }
        .corners()
    }

    pub fn l1(&self, other: &BBox) -> f64 {
        (self.cx - other.cx).abs()
            + (self.cy - other.cy).abs()
            + (self.w - other.w).abs()
            + (self.h - other.h).abs()
    }
}

fn check_area(c: &Corners) -> Result<()> {
    if !(c.width() > 0.0 && c.height() > 0.0) {
        return Err(Error::InvalidBox(format!("degenerate box {c:?}")));
    }
    Ok(())
}

pub fn iou_corners(a: &Corners, b: &Corners) -> Result<f64> {
    check_area(a)?;
    check_area(b)?;
    let inter = Corners::new(
        a.x0.max(b.x0),
        a.y0.max(b.y0),
        a.x1.min(b.x1),
        a.y1.min(b.y1),
    )
    .area();
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Generalized IoU: `IoU − |C \ (A ∪ B)| / |C|` with `C` the enclosing box.
pub fn giou_corners(a: &Corners, b: &Corners) -> Result<f64> {
    check_area(a)?;
    check_area(b)?;
    let inter = Corners::new(
        a.x0.max(b.x0),
        a.y0.max(b.y0),
        a.x1.min(b.x1),
        a.y1.min(b.y1),
    )
    .area();
    let union = a.area() + b.area() - inter;
    let hull = Corners::new(
        a.x0.min(b.x0),
        a.y0.min(b.y0),
        a.x1.max(b.x1),
        a.y1.max(b.y1),
    )
    .area();
    Ok(inter / union - (hull - union) / hull)
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    iou_corners(&a.corners(), &b.corners())
}

pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    giou_corners(&a.corners(), &b.corners())
}
