//! Training targets and loss: binary response-map labels from ground-truth
//! boxes, and the numerically stable sigmoid cross-entropy over a batch of
//! logit maps.

use crate::error::{Error, Result};
use crate::geometry::{cell_to_image, iou, BBox, GridSpec};
use crate::tensor::{Scalar, Tensor};

/// Overlap threshold above which a cell is labeled positive.
pub const DEFAULT_ALPHA: f64 = 0.7;

/// Binary labels over the response grid, stored row-major (y * cells + x).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub cells: usize,
    pub labels: Vec<u8>,
    pub alpha: f64,
}

impl LabelMap {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.cells + x]
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }
}

/// Label each grid cell by whether a box of the ground truth's size, centered
/// on that cell, overlaps the ground truth with IoU strictly above `alpha`.
/// `gt` is in search-patch pixel coordinates.
pub fn groundtruth_map(gt: &BBox, grid: &GridSpec, alpha: f64) -> Result<LabelMap> {
    gt.validate()?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Numeric(format!(
            "label threshold must be in (0,1), got {alpha}"
        )));
    }
    let c = grid.center_cell() as f64;
    let center = grid.origin + grid.stride * c;
    let mut labels = vec![0u8; grid.cells * grid.cells];
    for y in 0..grid.cells {
        for x in 0..grid.cells {
            let (px, py) = cell_to_image((x, y), grid, (center, center), 1.0)?;
            let candidate = BBox {
                cx: px,
                cy: py,
                w: gt.w,
                h: gt.h,
            };
            if iou(&candidate, gt)? > alpha {
                labels[y * grid.cells + x] = 1;
            }
        }
    }
    Ok(LabelMap {
        cells: grid.cells,
        labels,
        alpha,
    })
}

/// Stable per-element sigmoid cross-entropy:
/// max(z, 0) - z*y + ln(1 + exp(-|z|)).
fn ce_element(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Sigmoid cross-entropy of one batch of logit maps [n, cells, cells]
/// against per-sample labels. Cell losses are summed within each map and the
/// result is averaged over the batch; the returned gradient (sigma(z) - y,
/// scaled by 1/n) matches that reduction. With `balanced`, each map's
/// positive and negative cells are reweighted so both classes contribute
/// equally (weights n_total/(2*n_pos) and n_total/(2*n_neg); maps with a
/// single class fall back to unweighted).
pub fn loss_and_grad<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[LabelMap],
    balanced: bool,
) -> Result<(f64, Tensor<T>)> {
    let d = logits.dims();
    if d.len() != 3
        || labels.len() != d[0]
        || labels.iter().any(|l| l.cells != d[1])
        || d[1] != d[2]
    {
        let c = labels.first().map_or(0, |l| l.cells);
        return Err(Error::ShapeMismatch {
            what: "loss logits/labels".into(),
            expected: vec![labels.len(), c, c],
            got: d.to_vec(),
        });
    }
    let n = d[0];
    let per_map = d[1] * d[2];
    for lm in labels {
        if let Some(&bad) = lm.labels.iter().find(|&&v| v > 1) {
            return Err(Error::Numeric(format!(
                "label map contains non-binary value {bad}"
            )));
        }
    }
    let mut grad = Tensor::zeros(d);
    let mut total = 0.0f64;
    let inv_n = 1.0 / n as f64;
    for (s, lm) in labels.iter().enumerate() {
        let (w_pos, w_neg) = if balanced {
            let pos = lm.positives();
            let neg = per_map - pos;
            if pos == 0 || neg == 0 {
                (1.0, 1.0)
            } else {
                (
                    per_map as f64 / (2.0 * pos as f64),
                    per_map as f64 / (2.0 * neg as f64),
                )
            }
        } else {
            (1.0, 1.0)
        };
        for i in 0..per_map {
            let z = logits.data()[s * per_map + i].to_f64();
            let y = lm.labels[i] as f64;
            let w = if lm.labels[i] == 1 { w_pos } else { w_neg };
            total += w * ce_element(z, y) * inv_n;
            let sig = if z >= 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            };
            grad.data_mut()[s * per_map + i] = T::from_f64(w * (sig - y) * inv_n);
        }
    }
    Ok((total, grad))
}
