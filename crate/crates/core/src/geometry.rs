//! Box arithmetic, IoU, crop-region computation, and the coordinate
//! transform between response-map cells and image pixels.

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates, stored center-form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    /// From corner form (x, y, w, h) where (x, y) is the top-left corner.
    pub fn from_corner(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox {
            cx: x + w / 2.0,
            cy: y + h / 2.0,
            w,
            h,
        }
    }

    /// To corner form (x, y, w, h). Round-trips exactly with `from_corner`
    /// (w/2 is an exact binary operation).
    pub fn to_corner(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.w,
            self.h,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidBox {
                w: self.w,
                h: self.h,
            })
        }
    }

    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Same center, size scaled by `s` on both axes.
    pub fn scaled(&self, s: f64) -> BBox {
        BBox {
            cx: self.cx,
            cy: self.cy,
            w: self.w * s,
            h: self.h * s,
        }
    }

    /// Box translated by (dx, dy).
    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            cx: self.cx + dx,
            cy: self.cy + dy,
            w: self.w,
            h: self.h,
        }
    }
}

/// Intersection-over-union of two valid boxes. Symmetric, in [0, 1],
/// 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let ix = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let iy = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Square crop request: where to cut and what size to resample to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropSpec {
    pub center: (f64, f64),
    pub side: f64,
    pub out_size: usize,
}

/// Square crop around the target center with side = factor * sqrt(w * h)
/// (geometric mean keeps the crop area proportional for elongated targets).
/// Context factor 2 with out_size 127 crops exemplars; factor 4 with 255
/// crops search patches.
pub fn crop_region(target: &BBox, context_factor: f64, out_size: usize) -> Result<CropSpec> {
    target.validate()?;
    if !(context_factor > 0.0) {
        return Err(Error::Config(format!(
            "context factor must be positive, got {context_factor}"
        )));
    }
    Ok(CropSpec {
        center: (target.cx, target.cy),
        side: context_factor * (target.w * target.h).sqrt(),
        out_size,
    })
}

/// Geometry of the response grid over the search patch: `cells` per side
/// (odd, so a unique center cell exists), `stride` pixels between cell
/// centers, and `origin` = the search-patch pixel of cell (0, 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub cells: usize,
    pub stride: f64,
    pub origin: f64,
}

impl GridSpec {
    pub fn new(cells: usize, stride: f64, origin: f64) -> Self {
        assert!(cells % 2 == 1, "grid cells must be odd, got {cells}");
        GridSpec {
            cells,
            stride,
            origin,
        }
    }

    /// The 17-cell stride-8 grid the correlation response lives on, anchored
    /// so the center cell sits on the 255-patch center (origin 63 = 127 - 8*8).
    pub fn response_default() -> Self {
        GridSpec::new(17, 8.0, 63.0)
    }

    pub fn center_cell(&self) -> usize {
        (self.cells - 1) / 2
    }
}

/// Map a response-grid cell to pixel coordinates. `cell.0` indexes x
/// (columns) and `cell.1` indexes y (rows), matching the (px, py) output
/// order. The grid's center cell lands exactly on `patch_center`; each cell
/// step moves `stride * patch_scale` pixels (`patch_scale` = crop side /
/// patch size converts patch pixels to original-frame pixels; use 1.0 to get
/// search-patch coordinates).
pub fn cell_to_image(
    cell: (usize, usize),
    grid: &GridSpec,
    patch_center: (f64, f64),
    patch_scale: f64,
) -> Result<(f64, f64)> {
    let (i, j) = cell;
    if i >= grid.cells || j >= grid.cells {
        return Err(Error::OutOfGrid {
            i: i as i64,
            j: j as i64,
            cells: grid.cells,
        });
    }
    let c = grid.center_cell() as f64;
    let px = patch_center.0 + (i as f64 - c) * grid.stride * patch_scale;
    let py = patch_center.1 + (j as f64 - c) * grid.stride * patch_scale;
    Ok((px, py))
}

/// Inverse of `cell_to_image`, rounding to the nearest cell. Returned
/// indices may fall outside the grid (caller decides how to clamp).
pub fn image_to_cell(
    pt: (f64, f64),
    grid: &GridSpec,
    patch_center: (f64, f64),
    patch_scale: f64,
) -> (i64, i64) {
    let c = grid.center_cell() as f64;
    let i = ((pt.0 - patch_center.0) / (grid.stride * patch_scale) + c).round() as i64;
    let j = ((pt.1 - patch_center.1) / (grid.stride * patch_scale) + c).round() as i64;
    (i, j)
}

/// Parse one "x,y,w,h" line (comma, tab, or whitespace separated) into a box.
pub fn parse_rect_line(line: &str) -> std::result::Result<BBox, String> {
    let fields: Vec<&str> = line
        .split(|ch: char| ch == ',' || ch == '\t' || ch.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    if fields.len() != 4 {
        return Err(format!(
            "expected 4 fields 'x,y,w,h', got {} in {line:?}",
            fields.len()
        ));
    }
    let mut v = [0.0f64; 4];
    for (k, f) in fields.iter().enumerate() {
        v[k] = f
            .parse::<f64>()
            .map_err(|e| format!("bad number {f:?}: {e}"))?;
    }
    let b = BBox::from_corner(v[0], v[1], v[2], v[3]);
    b.validate().map_err(|e| e.to_string())?;
    Ok(b)
}

/// Format a box as one corner-form "x,y,w,h" line (the same dialect the
/// ground-truth files use).
pub fn format_rect_line(b: &BBox) -> String {
    let (x, y, w, h) = b.to_corner();
    format!("{x},{y},{w},{h}")
}
