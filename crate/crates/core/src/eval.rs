//! Per-class average precision at a single IoU threshold and its mean.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::detector::{Detector, DetectorParams};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::matching::Labels;

/// A scored box of one class in one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub image: usize,
    /// 1-based class.
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    /// Predictions scoring below this are not counted.
    pub score_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            score_floor: 0.05,
        }
    }
}

/// Descending score; ties keep insertion order.
fn ranked(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

/// True-positive flag per prediction in ranked order. Each prediction goes to
/// its highest-IoU ground truth in the same image; it is a true positive only
/// if that IoU reaches the threshold and the box is still unclaimed, so a
/// duplicate of a matched prediction is always a false positive.
pub fn match_predictions(preds: &[Detection], gts: &[Vec<BBox>], iou_thresh: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked(preds)
        .into_iter()
        .map(|i| {
            let p = &preds[i];
            let Some(cands) = gts.get(p.image) else {
                return false;
            };
            let best = cands
                .iter()
                .enumerate()
                .map(|(j, g)| (j, iou(&p.bbox, g)))
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                });
            match best {
                Some((j, v)) if v >= iou_thresh && !used[p.image][j] => {
                    used[p.image][j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// `(precision, recall)` after each ranked prediction.
pub fn pr_curve(tp: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut hits = 0usize;
    tp.iter()
        .enumerate()
        .map(|(i, &t)| {
            hits += t as usize;
            (hits as f64 / (i + 1) as f64, hits as f64 / n_gt.max(1) as f64)
        })
        .collect()
}

/// Area under the monotone precision envelope over recall. `None` without
/// ground truth.
pub fn ap_from_matches(tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let curve = pr_curve(tp, n_gt);
    let mut envelope: Vec<f64> = curve.iter().map(|c| c.0).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(_, r)) in curve.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
    }
    Some(ap)
}

/// AP of one class given its predictions and per-image ground-truth boxes.
pub fn average_precision(preds: &[Detection], gts: &[Vec<BBox>], iou_thresh: f64) -> Option<f64> {
    let n_gt = gts.iter().map(Vec::len).sum();
    ap_from_matches(&match_predictions(preds, gts, iou_thresh), n_gt)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean over classes with ground truth; 0 when there are none.
    pub map50: f64,
    pub gt_count: usize,
    pub prediction_count: usize,
    pub true_positives: usize,
}

impl EvalReport {
    /// Single-line `key=value` record.
    pub fn to_record(&self) -> String {
        let mut s = format!(
            "map50={:.6} gt={} predictions={} tp={}",
            self.map50, self.gt_count, self.prediction_count, self.true_positives
        );
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            match ap {
                Some(v) => write!(s, " ap{}={v:.6}", c + 1).unwrap(),
                None => write!(s, " ap{}=na", c + 1).unwrap(),
            }
        }
        s
    }
}

/// Scores detections against labels, one entry of each per image.
pub fn evaluate_detections(dets: &[Detection], labels: &[Labels], num_classes: usize, iou_thresh: f64) -> Result<EvalReport> {
    if let Some(d) = dets.iter().find(|d| d.class == 0 || d.class > num_classes || d.image >= labels.len()) {
        return Err(Error::Mismatch(format!(
            "detection of class {} in image {} outside {num_classes} classes / {} images",
            d.class,
            d.image,
            labels.len()
        )));
    }
    let mut per_class_ap = Vec::with_capacity(num_classes);
    let mut gt_count = 0;
    let mut true_positives = 0;
    for c in 1..=num_classes {
        let gts: Vec<Vec<BBox>> = labels
            .iter()
            .map(|l| l.boxes.iter().zip(&l.classes).filter(|(_, &k)| k == c).map(|(b, _)| *b).collect())
            .collect();
        let preds: Vec<Detection> = dets.iter().filter(|d| d.class == c).copied().collect();
        let n_gt: usize = gts.iter().map(Vec::len).sum();
        let tp = match_predictions(&preds, &gts, iou_thresh);
        gt_count += n_gt;
        true_positives += tp.iter().filter(|&&t| t).count();
        per_class_ap.push(ap_from_matches(&tp, n_gt));
    }
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map50 = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(EvalReport {
        per_class_ap,
        map50,
        gt_count,
        prediction_count: dets.len(),
        true_positives,
    })
}

/// One detection per query: its top-1 class and score, kept at or above the
/// floor.
pub fn detect(det: &Detector, params: &DetectorParams, image: &[f64], image_index: usize, floor: f64) -> Result<Vec<Detection>> {
    let out = det.forward(params, image)?;
    let boxes = out.final_boxes();
    Ok(out
        .top1()
        .into_iter()
        .zip(boxes)
        .filter(|((_, s), _)| *s >= floor)
        .map(|((c, s), b)| Detection {
            image: image_index,
            class: c + 1,
            score: s,
            bbox: *b,
        })
        .collect())
}

/// Runs the detector over every sample of `data`.
pub fn evaluate(det: &Detector, params: &DetectorParams, data: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let mc = params.config();
    if data.num_classes != mc.num_classes || data.image_h != mc.image_h || data.image_w != mc.image_w {
        return Err(Error::Mismatch(format!(
            "dataset has {} classes at {}x{}, model expects {} at {}x{}",
            data.num_classes, data.image_h, data.image_w, mc.num_classes, mc.image_h, mc.image_w
        )));
    }
    let mut dets = Vec::new();
    for (i, s) in data.samples.iter().enumerate() {
        dets.extend(detect(det, params, &s.image, i, cfg.score_floor)?);
    }
    let labels: Vec<Labels> = data.samples.iter().map(|s| s.labels.clone()).collect();
    evaluate_detections(&dets, &labels, data.num_classes, cfg.iou_thresh)
}
