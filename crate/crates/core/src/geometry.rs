//! BBox algebra, overlap measures, and bilinear RoI pooling.

use crate::numerics::{SparsePlan, Tape, TensorError, Var};

/// Axis-aligned box in normalized center form; coordinates are fractions of
/// the image extent.
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

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Intersection with the unit square.
    pub fn clipped(&self) -> BBox {
        let (x0, y0, x1, y1) = self.corners();
        let x0 = x0.clamp(0.0, 1.0);
        let y0 = y0.clamp(0.0, 1.0);
        let x1 = x1.clamp(x0, 1.0);
        let y1 = y1.clamp(y0, 1.0);
        BBox::from_corners(x0, y0, x1, y1)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> BBox {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

fn intersection_union(a: &BBox, b: &BBox) -> (f64, f64) {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax1 - ax0).max(0.0) * (ay1 - ay0).max(0.0);
    let area_b = (bx1 - bx0).max(0.0) * (by1 - by0).max(0.0);
    (inter, area_a + area_b - inter)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union) = intersection_union(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - (hull - union) / hull`, in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union) = intersection_union(a, b);
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if hull <= 0.0 {
        return iou;
    }
    iou - (hull - union) / hull
}

/// Element-wise pooling geometry shared by the fast path and the tape op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoiAlignSpec {
    pub out_h: usize,
    pub out_w: usize,
    pub samples_per_bin: usize,
}

impl Default for RoiAlignSpec {
    fn default() -> Self {
        RoiAlignSpec {
            out_h: 7,
            out_w: 7,
            samples_per_bin: 2,
        }
    }
}

/// Bilinear interpolation weights for a point in continuous map coordinates,
/// where cell `(i, j)` has its centre at `(i + 0.5, j + 0.5)`.
fn bilinear_terms(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let y = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let x = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    [
        (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
        (y0 * w + x1, (1.0 - ly) * lx),
        (y1 * w + x0, ly * (1.0 - lx)),
        (y1 * w + x1, ly * lx),
    ]
}

/// Sampling plan for pooling `boxes` out of an `h × w` map: one output per
/// `(box, bin_y, bin_x)`, each the mean of `s²` bilinear samples.
pub fn roi_align_plan(h: usize, w: usize, boxes: &[BBox], spec: RoiAlignSpec) -> SparsePlan {
    let mut plan = SparsePlan::new();
    let s = spec.samples_per_bin.max(1);
    let norm = 1.0 / (s * s) as f64;
    for b in boxes {
        let (x0, y0, x1, y1) = b.clipped().corners();
        let (x0, x1) = (x0 * w as f64, x1 * w as f64);
        let (y0, y1) = (y0 * h as f64, y1 * h as f64);
        let bin_h = (y1 - y0) / spec.out_h as f64;
        let bin_w = (x1 - x0) / spec.out_w as f64;
        for by in 0..spec.out_h {
            for bx in 0..spec.out_w {
                let mut terms: Vec<(usize, f64)> = Vec::with_capacity(4 * s * s);
                for sy in 0..s {
                    let y = y0 + bin_h * (by as f64 + (sy as f64 + 0.5) / s as f64);
                    for sx in 0..s {
                        let x = x0 + bin_w * (bx as f64 + (sx as f64 + 0.5) / s as f64);
                        for (i, wgt) in bilinear_terms(y, x, h, w) {
                            if wgt != 0.0 {
                                terms.push((i, wgt * norm));
                            }
                        }
                    }
                }
                plan.push_output(terms);
            }
        }
    }
    plan
}

/// RoIAlign on a single-channel `h × w` map stored row-major.
///
/// Returns `boxes.len() * out_h * out_w` values. Boxes are clipped to the
/// unit square first; a zero-area box degenerates to point samples at its
/// centre.
pub fn roi_align(map: &[f64], h: usize, w: usize, boxes: &[BBox], spec: RoiAlignSpec) -> Vec<f64> {
    assert_eq!(map.len(), h * w, "map size does not match {h}x{w}");
    roi_align_plan(h, w, boxes, spec).apply(map)
}

/// Differentiable RoIAlign: `map` is an `h × w` tensor on the tape, output is
/// `n × out_h × out_w`. Gradient flows to the map only.
pub fn roi_align_var(tape: &mut Tape, map: Var, boxes: &[BBox], spec: RoiAlignSpec) -> Result<Var, TensorError> {
    let shape = tape.shape(map).to_vec();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(TensorError::Invalid {
            op: "roi_align",
            detail: format!("expected a non-empty 2-D map, got {shape:?}"),
        });
    }
    let plan = roi_align_plan(shape[0], shape[1], boxes, spec);
    tape.sparse_linear(map, plan, &[boxes.len(), spec.out_h, spec.out_w])
}
