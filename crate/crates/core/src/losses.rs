//! Detection losses: sigmoid focal classification (optionally reweighted per
//! query), L1 + GIoU box regression, and per-layer auxiliary terms.

use crate::detector::ForwardVars;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::matching::{detection_cost, hungarian, Assignment, CostWeights, Labels};
use crate::numerics::{sigmoid, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("focal alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("focal gamma {} is negative", self.gamma)));
        }
        Ok(())
    }
}

/// Binary focal term of one `(query, class)` entry with probability `p`.
pub fn focal_term(p: f64, positive: bool, fp: FocalParams) -> f64 {
    let (a, pt) = if positive { (fp.alpha, p) } else { (1.0 - fp.alpha, 1.0 - p) };
    if pt <= 0.0 {
        return f64::INFINITY;
    }
    -a * (1.0 - pt).powf(fp.gamma) * pt.ln()
}

/// Denominator of the classification loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClsNorm {
    /// Divide by the number of queries.
    Queries,
    /// Divide by the number of matched queries, at least 1.
    Matched,
}

/// Per-query focal mass `Σ_c focal(p_qc)`, an `n_q` vector on the tape.
///
/// `targets[q]` is the 0-based class of query `q`, or `None` for an
/// all-negative query.
pub fn focal_terms(tape: &mut Tape, logits: Var, targets: &[Option<usize>], fp: FocalParams) -> Result<Var> {
    fp.validate()?;
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Mismatch(format!(
            "logits {shape:?} against {} query targets",
            targets.len()
        )));
    }
    let k = shape[1];
    let mut onehot = Tensor::zeros(&shape);
    for (q, t) in targets.iter().enumerate() {
        if let Some(c) = *t {
            if c >= k {
                return Err(Error::Mismatch(format!("target class {} for {k} classes", c + 1)));
            }
            onehot.data_mut()[q * k + c] = 1.0;
        }
    }
    let balance = onehot.map(|y| y * fp.alpha + (1.0 - y) * (1.0 - fp.alpha));
    let neg_mask = onehot.map(|y| 1.0 - y);

    let y = tape.constant(onehot);
    let not_y = tape.constant(neg_mask);
    let a = tape.constant(balance);
    // p_t and ln p_t, built from log-sigmoids for stability.
    let p = tape.sigmoid(logits)?;
    let q = tape.neg(p)?;
    let q = tape.add_scalar(q, 1.0)?;
    let pos = tape.mul(y, p)?;
    let neg = tape.mul(not_y, q)?;
    let pt = tape.add(pos, neg)?;
    let ls_pos = tape.log_sigmoid(logits)?;
    let minus = tape.neg(logits)?;
    let ls_neg = tape.log_sigmoid(minus)?;
    let lp = tape.mul(y, ls_pos)?;
    let ln_ = tape.mul(not_y, ls_neg)?;
    let log_pt = tape.add(lp, ln_)?;
    let one_minus = tape.neg(pt)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let modulator = tape.pow(one_minus, fp.gamma)?;
    let t = tape.mul(modulator, log_pt)?;
    let t = tape.mul(a, t)?;
    let t = tape.neg(t)?;
    Ok(tape.sum_axis(t, 1)?)
}

/// `(1/N)·Σ_q w_q·focal_q`, with `N` chosen by `norm`.
pub fn weighted_cls_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[Option<usize>],
    weights: &[f64],
    fp: FocalParams,
    norm: ClsNorm,
) -> Result<Var> {
    if weights.len() != targets.len() {
        return Err(Error::Mismatch(format!(
            "{} weights for {} queries",
            weights.len(),
            targets.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Config(format!("negative sample weight {w}")));
    }
    let terms = focal_terms(tape, logits, targets, fp)?;
    let w = tape.constant(Tensor::vector(weights.to_vec()));
    let weighted = tape.mul(terms, w)?;
    let s = tape.sum(weighted)?;
    let denom = match norm {
        ClsNorm::Queries => targets.len().max(1),
        ClsNorm::Matched => targets.iter().filter(|t| t.is_some()).count().max(1),
    };
    Ok(tape.scale(s, 1.0 / denom as f64)?)
}

/// Focal loss averaged over matched queries (at least 1).
pub fn focal_loss(tape: &mut Tape, logits: Var, targets: &[Option<usize>], fp: FocalParams) -> Result<Var> {
    let ones = vec![1.0; targets.len()];
    weighted_cls_loss(tape, logits, targets, &ones, fp, ClsNorm::Matched)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxLossWeights {
    pub l1: f64,
    pub giou: f64,
}

impl Default for BoxLossWeights {
    fn default() -> Self {
        BoxLossWeights { l1: 5.0, giou: 2.0 }
    }
}

/// Mean over `pairs` of `c_l1·‖b − t‖₁ + c_giou·(1 − GIoU(b, t))`.
///
/// `boxes` is an `n × 4` tensor of `(cx, cy, w, h)` rows. Without pairs the
/// result is a constant zero.
pub fn box_loss(
    tape: &mut Tape,
    boxes: Var,
    targets: &[BBox],
    pairs: &[(usize, usize)],
    w: BoxLossWeights,
) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let n = tape.shape(boxes)[0];
    if let Some(&(q, t)) = pairs.iter().find(|&&(q, t)| q >= n || t >= targets.len()) {
        return Err(Error::Mismatch(format!("pair ({q}, {t}) out of range")));
    }
    let m = pairs.len();
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let pred = tape.gather_rows(boxes, &rows)?;
    let tgt_t = Tensor::from_rows(&pairs.iter().map(|p| targets[p.1].to_array().to_vec()).collect::<Vec<_>>())?;
    let tgt = tape.constant(tgt_t.clone());

    let diff = tape.sub(pred, tgt)?;
    let l1 = tape.abs(diff)?;
    let l1 = tape.sum(l1)?;

    // (cx, cy, w, h) → (x0, y0, x1, y1)
    let to_corners = Tensor::from_rows(&[
        vec![1.0, 0.0, 1.0, 0.0],
        vec![0.0, 1.0, 0.0, 1.0],
        vec![-0.5, 0.0, 0.5, 0.0],
        vec![0.0, -0.5, 0.0, 0.5],
    ])?;
    let conv = tape.constant(to_corners);
    let pc = tape.matmul(pred, conv)?;
    let col = |tape: &mut Tape, v: Var, i: usize| tape.slice_cols(v, i, 1);
    let (px0, py0, px1, py1) = (col(tape, pc, 0)?, col(tape, pc, 1)?, col(tape, pc, 2)?, col(tape, pc, 3)?);
    let tc: Vec<[f64; 4]> = pairs
        .iter()
        .map(|p| {
            let (a, b, c, d) = targets[p.1].corners();
            [a, b, c, d]
        })
        .collect();
    let tcol = |tape: &mut Tape, i: usize| {
        tape.constant(Tensor::new(vec![m, 1], tc.iter().map(|r| r[i]).collect()).expect("m×1"))
    };
    let (tx0, ty0, tx1, ty1) = (tcol(tape, 0), tcol(tape, 1), tcol(tape, 2), tcol(tape, 3));
    let t_area = tape.constant(Tensor::new(
        vec![m, 1],
        tc.iter().map(|r| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0)).collect(),
    )?);

    let span = |tape: &mut Tape, lo: Var, hi: Var| -> Result<Var> {
        let d = tape.sub(hi, lo)?;
        Ok(tape.relu(d)?)
    };
    let ix0 = tape.maximum(px0, tx0)?;
    let iy0 = tape.maximum(py0, ty0)?;
    let ix1 = tape.minimum(px1, tx1)?;
    let iy1 = tape.minimum(py1, ty1)?;
    let iw = span(tape, ix0, ix1)?;
    let ih = span(tape, iy0, iy1)?;
    let inter = tape.mul(iw, ih)?;
    let pw = span(tape, px0, px1)?;
    let ph = span(tape, py0, py1)?;
    let p_area = tape.mul(pw, ph)?;
    let union = tape.add(p_area, t_area)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;
    let hx0 = tape.minimum(px0, tx0)?;
    let hy0 = tape.minimum(py0, ty0)?;
    let hx1 = tape.maximum(px1, tx1)?;
    let hy1 = tape.maximum(py1, ty1)?;
    let hw = tape.sub(hx1, hx0)?;
    let hh = tape.sub(hy1, hy0)?;
    let hull = tape.mul(hw, hh)?;
    let slack = tape.sub(hull, union)?;
    let penalty = tape.div(slack, hull)?;
    let g = tape.sub(iou, penalty)?;
    let g = tape.sum(g)?;

    // Σ c_l1·L1 + c_giou·(1 − giou), then the mean over pairs.
    let a = tape.scale(l1, w.l1)?;
    let b = tape.scale(g, -w.giou)?;
    let s = tape.add(a, b)?;
    let s = tape.add_scalar(s, w.giou * m as f64)?;
    Ok(tape.scale(s, 1.0 / m as f64)?)
}

/// Weights and settings of the supervised detection objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionLossConfig {
    pub focal: FocalParams,
    pub cls_coef: f64,
    pub boxes: BoxLossWeights,
    pub cost: CostWeights,
    pub norm: ClsNorm,
    pub aux: bool,
}

impl Default for DetectionLossConfig {
    fn default() -> Self {
        DetectionLossConfig {
            focal: FocalParams::default(),
            cls_coef: 2.0,
            boxes: BoxLossWeights::default(),
            cost: CostWeights::default(),
            norm: ClsNorm::Matched,
            aux: true,
        }
    }
}

/// Tape handles of the detection objective plus the final-layer matching.
#[derive(Clone, Debug)]
pub struct DetectionLoss {
    pub wcls: Var,
    pub reg: Var,
    pub aux: Var,
    pub assignment: Assignment,
}

/// Hungarian matching of one decoder layer's predictions against `labels`.
pub fn match_layer(tape: &Tape, vars: &ForwardVars, layer: usize, labels: &Labels, cost: CostWeights) -> Assignment {
    let logits = tape.value(vars.class_logits[layer]);
    let boxes_t = tape.value(vars.boxes[layer]);
    let n = logits.rows();
    if labels.is_empty() {
        return Assignment {
            pairs: vec![],
            unmatched_queries: (0..n).collect(),
        };
    }
    let probs: Vec<Vec<f64>> = (0..n).map(|i| logits.row(i).iter().map(|&x| sigmoid(x)).collect()).collect();
    let boxes: Vec<BBox> = (0..n).map(|i| BBox::from_slice(boxes_t.row(i))).collect();
    hungarian(&detection_cost(&probs, &boxes, labels, cost))
}

fn layer_terms(
    tape: &mut Tape,
    vars: &ForwardVars,
    layer: usize,
    labels: &Labels,
    weights: Option<&[f64]>,
    cfg: &DetectionLossConfig,
) -> Result<(Var, Var, Assignment)> {
    let assignment = match_layer(tape, vars, layer, labels, cfg.cost);
    let n = tape.shape(vars.class_logits[layer])[0];
    let targets: Vec<Option<usize>> = assignment
        .target_of(n)
        .into_iter()
        .map(|t| t.map(|j| labels.classes[j] - 1))
        .collect();
    let ones;
    let w = match weights {
        Some(w) => w,
        None => {
            ones = vec![1.0; n];
            &ones
        }
    };
    let cls = weighted_cls_loss(tape, vars.class_logits[layer], &targets, w, cfg.focal, cfg.norm)?;
    let cls = tape.scale(cls, cfg.cls_coef)?;
    let reg = box_loss(tape, vars.boxes[layer], &labels.boxes, &assignment.pairs, cfg.boxes)?;
    Ok((cls, reg, assignment))
}

/// Final-layer classification (optionally reweighted) and box losses, plus
/// the unweighted sum of both over every earlier layer, each layer matched
/// independently.
pub fn detection_loss(
    tape: &mut Tape,
    vars: &ForwardVars,
    labels: &Labels,
    weights: Option<&[f64]>,
    cfg: &DetectionLossConfig,
) -> Result<DetectionLoss> {
    if let Some(&c) = labels.classes.iter().find(|&&c| c == 0) {
        return Err(Error::Mismatch(format!("label class {c} is not 1-based")));
    }
    let last = vars.last_layer();
    let (wcls, reg, assignment) = layer_terms(tape, vars, last, labels, weights, cfg)?;
    let mut aux = tape.constant(Tensor::scalar(0.0));
    if cfg.aux {
        for layer in 0..last {
            let (c, r, _) = layer_terms(tape, vars, layer, labels, None, cfg)?;
            let s = tape.add(c, r)?;
            aux = tape.add(aux, s)?;
        }
    }
    Ok(DetectionLoss {
        wcls,
        reg,
        aux,
        assignment,
    })
}

/// Scalar values of every loss component of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub wcls: f64,
    pub reg: f64,
    pub aux: f64,
    pub cont: f64,
    pub fdis: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Fills `total = wcls + reg + aux + ω₁·cont + ω₂·fdis`.
    pub fn assemble(wcls: f64, reg: f64, aux: f64, cont: f64, fdis: f64, omega1: f64, omega2: f64) -> Self {
        LossBreakdown {
            wcls,
            reg,
            aux,
            cont,
            fdis,
            total: wcls + reg + aux + omega1 * cont + omega2 * fdis,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.wcls, self.reg, self.aux, self.cont, self.fdis, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}
