//! Finite-difference gradient suite over every loss and the detector forward.
//!
//! Each check draws its own random instances from a seeded generator, so a
//! suite run is reproducible and independent of check order.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cmmb::{contrastive_loss, AssignedQueries, BankStrategy, MemoryBankSet};
use crate::detector::{Detector, DetectorConfig, DetectorParams, ForwardVars};
use crate::error::Result;
use crate::geometry::{roi_align_var, BBox, RoiAlignSpec};
use crate::losses::{box_loss, focal_loss, weighted_cls_loss, BoxLossWeights, ClsNorm, FocalParams};
use crate::numerics::{finite_difference_grad, gradient_error, Tape, Tensor, TensorError, Var, GRAD_RTOL};
use crate::uqfd::distill_loss;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub instances: usize,
    /// Worst [`gradient_error`] over all instances and coordinates.
    pub max_error: f64,
    pub seconds: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= GRAD_RTOL
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<14} instances={} max_rel_err={:.3e} time={:.2}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_error,
            self.seconds
        )
    }
}

/// Names accepted by [`run_check`], in suite order.
pub const CHECKS: [&str; 7] = ["focal", "weighted_focal", "box", "contrastive", "distill", "roi_align", "detector"];

/// Runs every check with `instances` random cases each.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<GradCheck>> {
    CHECKS.iter().map(|n| run_check(n, seed, instances)).collect()
}

/// Runs one check by name. Unknown names are a configuration error.
pub fn run_check(name: &str, seed: u64, instances: usize) -> Result<GradCheck> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv(name));
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let e = match name {
            "focal" => focal_case(&mut rng)?,
            "weighted_focal" => weighted_case(&mut rng)?,
            "box" => box_case(&mut rng)?,
            "contrastive" => contrastive_case(&mut rng)?,
            "distill" => distill_case(&mut rng)?,
            "roi_align" => roi_case(&mut rng)?,
            "detector" => detector_case(&mut rng)?,
            other => return Err(crate::Error::Config(format!("unknown gradient check '{other}'"))),
        };
        // NaN must fail, so fold with an explicit comparison.
        if !(e <= worst) {
            worst = e;
        }
    }
    let name = CHECKS.iter().copied().find(|n| *n == name).unwrap_or("unknown");
    Ok(GradCheck {
        name,
        instances,
        max_error: worst,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Analytic gradient of `build` at `x` against a central difference with step `h`.
fn compare(x: &Tensor, h: f64, build: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let l = build(&mut tape, v)?;
    // A loss that ignores its input (e.g. no anchors) has a zero gradient.
    let analytic = match tape.backward(l) {
        Ok(g) => g.get_or_zeros(v, x.shape()),
        Err(TensorError::DetachedLoss) => Tensor::zeros(x.shape()),
        Err(e) => return Err(e.into()),
    };
    let numeric = finite_difference_grad(
        |p| {
            let mut tape = Tape::new();
            let v = tape.constant(p.clone());
            build(&mut tape, v).map(|l| tape.value(l).item()).unwrap_or(f64::NAN)
        },
        x,
        h,
    );
    Ok(gradient_error(&analytic, &numeric))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

fn targets(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Option<usize>> {
    (0..n).map(|_| rng.gen_bool(0.4).then(|| rng.gen_range(0..k))).collect()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4))
}

fn focal(rng: &mut ChaCha8Rng) -> FocalParams {
    FocalParams {
        alpha: rng.gen_range(0.05..0.95),
        gamma: rng.gen_range(0.0..3.0),
    }
}

fn focal_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, k) = (rng.gen_range(1..7), rng.gen_range(1..5));
    let logits = uniform(rng, &[n, k], -4.0, 4.0);
    let t = targets(rng, n, k);
    let fp = focal(rng);
    compare(&logits, 1e-5, |tape, l| focal_loss(tape, l, &t, fp))
}

fn weighted_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, k) = (rng.gen_range(1..7), rng.gen_range(1..5));
    let logits = uniform(rng, &[n, k], -4.0, 4.0);
    let t = targets(rng, n, k);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let fp = focal(rng);
    let norm = if rng.gen_bool(0.5) { ClsNorm::Queries } else { ClsNorm::Matched };
    compare(&logits, 1e-5, |tape, l| weighted_cls_loss(tape, l, &t, &w, fp, norm))
}

fn box_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.gen_range(1..6);
    let boxes: Vec<f64> = (0..n).flat_map(|_| random_box(rng).to_array()).collect();
    let x = Tensor::new(vec![n, 4], boxes)?;
    let tg: Vec<BBox> = (0..n).map(|_| random_box(rng)).collect();
    let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    pairs.truncate(rng.gen_range(1..=n));
    let w = BoxLossWeights {
        l1: rng.gen_range(0.0..6.0),
        giou: rng.gen_range(0.0..3.0),
    };
    compare(&x, 1e-6, |tape, b| box_loss(tape, b, &tg, &pairs, w))
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn contrastive_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (k, dim, n) = (rng.gen_range(1..4), rng.gen_range(2..6), rng.gen_range(2..8));
    let mut banks = MemoryBankSet::new(k, dim, 6, BankStrategy::Fifo, 0)?;
    for _ in 0..rng.gen_range(0..10) {
        let c = rng.gen_range(0..=k);
        banks.insert(c, &unit(rng, dim))?;
    }
    let mut foreground = Vec::new();
    let mut background = Vec::new();
    for q in 0..n {
        if rng.gen_bool(0.6) {
            foreground.push((q, rng.gen_range(1..=k)));
        } else {
            background.push(q);
        }
    }
    let assigned = AssignedQueries { foreground, background };
    let raw = uniform(rng, &[n, dim], -1.0, 1.0);
    let tau = rng.gen_range(0.05..1.0);
    compare(&raw, 1e-6, |tape, v| {
        let u = tape.l2_normalize_rows(v)?;
        contrastive_loss(tape, &banks, u, &assigned, tau)
    })
}

fn distill_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (hw, c, nq) = (rng.gen_range(4..17), rng.gen_range(2..6), rng.gen_range(1..5));
    let t = uniform(rng, &[hw, c], -1.0, 1.0);
    let s = uniform(rng, &[hw, c], -1.0, 1.0);
    let q = uniform(rng, &[nq, c], -1.0, 1.0);
    let w: Vec<f64> = (0..nq).map(|_| rng.gen_range(0.0..1.0)).collect();
    compare(&s, 1e-6, |tape, sv| distill_loss(tape, &t, sv, &q, &w))
}

fn roi_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w) = (rng.gen_range(3..9), rng.gen_range(3..9));
    let map = uniform(rng, &[h, w], -1.0, 1.0);
    let boxes: Vec<BBox> = (0..rng.gen_range(1..4)).map(|_| random_box(rng)).collect();
    let spec = RoiAlignSpec {
        out_h: rng.gen_range(1..4),
        out_w: rng.gen_range(1..4),
        samples_per_bin: rng.gen_range(1..3),
    };
    let n = boxes.len() * spec.out_h * spec.out_w;
    let probe = uniform(rng, &[boxes.len(), spec.out_h, spec.out_w], -1.0, 1.0);
    debug_assert_eq!(probe.len(), n);
    compare(&map, 1e-5, |tape, m| {
        let r = roi_align_var(tape, m, &boxes, spec)?;
        let p = tape.constant(probe.clone());
        let prod = tape.mul(r, p)?;
        Ok(tape.sum(prod)?)
    })
}

/// Reduced detector: a random linear probe of the final logits, boxes and
/// query features, differentiated with respect to every parameter tensor.
fn detector_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = DetectorConfig {
        image_h: 16,
        image_w: 16,
        hidden: 8,
        n_queries: 4,
        dec_layers: 2,
        num_classes: rng.gen_range(1..4),
        ffn_dim: 8,
    };
    let det = Detector::new(cfg)?;
    let params = DetectorParams::init(cfg, rng.gen())?;
    let img: Vec<f64> = (0..cfg.image_len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let probes: Vec<Tensor> = [cfg.num_classes, 4, cfg.hidden]
        .iter()
        .map(|&c| uniform(rng, &[cfg.n_queries, c], -1.0, 1.0))
        .collect();
    let probe = |tape: &mut Tape, v: &ForwardVars| -> Result<Var> {
        let l = v.last_layer();
        let mut total: Option<Var> = None;
        for (part, w) in [v.class_logits[l], v.boxes[l], v.query_feats[l]].into_iter().zip(&probes) {
            let wv = tape.constant(w.clone());
            let m = tape.mul(part, wv)?;
            let s = tape.sum(m)?;
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        Ok(total.expect("three probe terms"))
    };
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let out = det.forward_on_tape(&mut tape, &vars, &img)?;
    let loss = probe(&mut tape, &out)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for i in 0..params.tensors().len() {
        let analytic = grads.get_or_zeros(vars[i], params.tensors()[i].shape());
        let numeric = finite_difference_grad(
            |x| {
                let mut p = params.clone();
                p.tensors_mut()[i] = x.clone();
                let mut tape = Tape::new();
                let v = p.bind(&mut tape, false);
                det.forward_on_tape(&mut tape, &v, &img)
                    .and_then(|o| probe(&mut tape, &o))
                    .map(|l| tape.value(l).item())
                    .unwrap_or(f64::NAN)
            },
            &params.tensors()[i],
            1e-5,
        );
        let e = gradient_error(&analytic, &numeric);
        if !(e <= worst) {
            worst = e;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        for name in CHECKS.iter().filter(|n| **n != "detector") {
            let c = run_check(name, 1, 5).unwrap();
            assert!(c.passed(), "{}", c.line());
        }
    }

    #[test]
    fn unknown_check_is_rejected() {
        assert!(run_check("nope", 0, 1).is_err());
    }

    #[test]
    fn line_format() {
        let c = GradCheck {
            name: "focal",
            instances: 3,
            max_error: f64::NAN,
            seconds: 0.0,
        };
        assert!(!c.passed());
        assert!(c.line().starts_with("FAIL focal"));
    }
}
