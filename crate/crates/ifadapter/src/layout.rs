//! Normalized bounding boxes, layout specifications, and their rasterization
//! onto the latent grid: binary region masks, additive attention masks with a
//! -1e9 sentinel, union areas, and background masks.

use serde::{Deserialize, Serialize};

use crate::tensor::NEG_INF;
use crate::{Error, Result};

/// Axis-aligned box in normalized image coordinates; `(x, y)` is the top-left
/// corner, all of `[x, x+w] x [y, y+h]` lies inside the unit canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<BBox> {
        for (v, name) in [(x, "x"), (y, "y"), (w, "w"), (h, "h")] {
            if !v.is_finite() {
                return Err(Error::Validation(format!("bbox {name} is not finite")));
            }
        }
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::Validation(format!(
                "bbox corner ({x}, {y}) outside the unit canvas"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Validation(format!(
                "bbox extent ({w}, {h}) must be positive"
            )));
        }
        const EPS: f64 = 1e-12;
        if x + w > 1.0 + EPS || y + h > 1.0 + EPS {
            return Err(Error::Validation(format!(
                "bbox ({x}, {y}, {w}, {h}) extends past the canvas"
            )));
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn x1(&self) -> f64 {
        self.x + self.w
    }

    pub fn y1(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> [f64; 4] {
        [b.x, b.y, b.w, b.h]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<BBox> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

/// One instance of a layout: where it goes and what it looks like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub desc: String,
}

/// A global caption plus an ordered list of localized instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub caption: String,
    pub instances: Vec<Instance>,
}

impl LayoutSpec {
    pub fn validate(&self, max_instances: usize) -> Result<()> {
        if self.caption.trim().is_empty() {
            return Err(Error::Validation("layout caption is empty".into()));
        }
        if self.instances.len() > max_instances {
            return Err(Error::Validation(format!(
                "layout has {} instances, limit is {max_instances}",
                self.instances.len()
            )));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.desc.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "instance {i} has an empty description"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<LayoutSpec> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Binary occupancy of a box on an `h x w` cell grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    h: usize,
    w: usize,
    cells: Vec<bool>,
}

/// Mark every cell whose center falls inside the box. A box so small that it
/// catches no center still claims the single cell containing its own center,
/// so no instance ever vanishes from the grid.
pub fn rasterize(bbox: &BBox, h: usize, w: usize) -> Result<RegionMask> {
    if h == 0 || w == 0 {
        return Err(Error::Validation(format!("rasterize: empty grid {h}x{w}")));
    }
    let mut cells = vec![false; h * w];
    let mut any = false;
    for r in 0..h {
        let cy = (r as f64 + 0.5) / h as f64;
        if cy < bbox.y || cy >= bbox.y1() {
            continue;
        }
        for c in 0..w {
            let cx = (c as f64 + 0.5) / w as f64;
            if cx >= bbox.x && cx < bbox.x1() {
                cells[r * w + c] = true;
                any = true;
            }
        }
    }
    if !any {
        let (cx, cy) = bbox.center();
        let c = ((cx * w as f64).floor() as usize).min(w - 1);
        let r = ((cy * h as f64).floor() as usize).min(h - 1);
        cells[r * w + c] = true;
    }
    Ok(RegionMask { h, w, cells })
}

impl RegionMask {
    pub fn from_cells(h: usize, w: usize, cells: Vec<bool>) -> Result<RegionMask> {
        if cells.len() != h * w {
            return Err(Error::Shape(format!(
                "region mask: {} cells for {h}x{w} grid",
                cells.len()
            )));
        }
        Ok(RegionMask { h, w, cells })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn covers(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.w + c]
    }

    /// Number of covered cells (the instance area `|a_i|`, in cells).
    pub fn area(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    /// Additive attention mask over cells: 0 inside the region, -1e9 outside.
    pub fn additive_mask(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|&b| if b { 0.0 } else { NEG_INF })
            .collect()
    }

    /// Cell-wise OR of several masks on the same grid.
    pub fn union(masks: &[RegionMask]) -> Result<RegionMask> {
        let Some(first) = masks.first() else {
            return Err(Error::Usage("union of zero region masks".into()));
        };
        let (h, w) = (first.h, first.w);
        let mut cells = vec![false; h * w];
        for m in masks {
            if (m.h, m.w) != (h, w) {
                return Err(Error::Shape(format!(
                    "union: grid mismatch {}x{} vs {h}x{w}",
                    m.h, m.w
                )));
            }
            for (dst, &src) in cells.iter_mut().zip(&m.cells) {
                *dst |= src;
            }
        }
        Ok(RegionMask { h, w, cells })
    }
}

/// Background weights over cells: 1.0 where no instance covers, else 0.0.
/// With no instances the whole grid is background.
pub fn background_mask(masks: &[RegionMask], h: usize, w: usize) -> Result<Vec<f64>> {
    let mut bg = vec![1.0; h * w];
    for m in masks {
        if (m.h, m.w) != (h, w) {
            return Err(Error::Shape(format!(
                "background_mask: grid mismatch {}x{} vs {h}x{w}",
                m.h, m.w
            )));
        }
        for (dst, &covered) in bg.iter_mut().zip(&m.cells) {
            if covered {
                *dst = 0.0;
            }
        }
    }
    Ok(bg)
}
