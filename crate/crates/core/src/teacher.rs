//! Mean Teacher adaptation: pseudo-labels from the teacher's weak view, a
//! student trained on the strong view, and EMA teacher updates on a
//! dynamic or fixed interval.
//!
//! Every random draw is keyed by `(seed, iteration, slot)`, so a run resumed
//! from an epoch-end checkpoint replays the uninterrupted run exactly.

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use crate::archive::Archive;
use crate::cmmb::{assign_pairs, batch_insertions, contrastive_loss, fuse_query_vars, AssignedQueries, BankStrategy, MemoryBankSet};
use crate::data::{strong_view, weak_view, AugmentConfig, Dataset, View};
use crate::detector::{Detector, DetectorOutput, DetectorParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::geometry::{BBox, RoiAlignSpec};
use crate::losses::{detection_loss, match_layer, DetectionLossConfig, LossBreakdown};
use crate::matching::Labels;
use crate::numerics::{Tape, Tensor};
use crate::optim::{AdamW, AdamWConfig};
use crate::ossr::{objectness_weights, ObjectnessMode};
use crate::train::{epoch_batches, read_counter, visit_rng};
use crate::uqfd::{distill_loss, query_uncertainty_weights};

/// Teacher predictions kept as supervision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabels {
    pub labels: Labels,
    pub scores: Vec<f64>,
    /// Teacher query each label came from.
    pub queries: Vec<usize>,
}

impl PseudoLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Keeps every query whose top class probability reaches `c_thresh`. No
/// suppression: each query predicts a distinct set element.
pub fn pseudo_label(out: &DetectorOutput, c_thresh: f64) -> PseudoLabels {
    let mut pl = PseudoLabels::default();
    for (q, ((c, s), b)) in out.top1().into_iter().zip(out.final_boxes()).enumerate() {
        if s >= c_thresh {
            pl.labels.boxes.push(*b);
            pl.labels.classes.push(c + 1);
            pl.scores.push(s);
            pl.queries.push(q);
        }
    }
    pl
}

/// Pseudo-label yield of a model at one confidence threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub c_thresh: f64,
    pub n_pseudo: usize,
    /// Labels matching an unclaimed same-class ground truth at IoU ≥ 0.5,
    /// taken in descending score order.
    pub correct: usize,
    pub n_gt: usize,
}

impl SweepRow {
    pub fn precision(&self) -> f64 {
        if self.n_pseudo == 0 {
            0.0
        } else {
            self.correct as f64 / self.n_pseudo as f64
        }
    }

    pub fn to_record(&self) -> String {
        format!(
            "c={} n_pseudo={} correct={} precision={:.4} gt={}",
            self.c_thresh,
            self.n_pseudo,
            self.correct,
            self.precision(),
            self.n_gt
        )
    }
}

/// The thresholds 0.1, 0.2, ..., 0.9, each computed as `i/10`.
pub fn sweep_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Pseudo-labels `params` would emit on the raw images of `data` at each
/// threshold. One forward pass per image serves every threshold.
pub fn threshold_sweep(det: &Detector, params: &DetectorParams, data: &Dataset, thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    let mut rows: Vec<SweepRow> = thresholds
        .iter()
        .map(|&c| SweepRow {
            c_thresh: c,
            n_pseudo: 0,
            correct: 0,
            n_gt: 0,
        })
        .collect();
    for s in &data.samples {
        let out = det.forward(params, &s.image)?;
        for row in rows.iter_mut() {
            let pl = pseudo_label(&out, row.c_thresh);
            let mut order: Vec<usize> = (0..pl.len()).collect();
            order.sort_by(|&a, &b| pl.scores[b].total_cmp(&pl.scores[a]).then(a.cmp(&b)));
            let mut claimed = vec![false; s.labels.len()];
            for i in order {
                let hit = (0..s.labels.len())
                    .filter(|&g| !claimed[g] && s.labels.classes[g] == pl.labels.classes[i])
                    .map(|g| (g, crate::geometry::iou(&pl.labels.boxes[i], &s.labels.boxes[g])))
                    .filter(|&(_, v)| v >= 0.5)
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((g, _)) = hit {
                    claimed[g] = true;
                    row.correct += 1;
                }
            }
            row.n_pseudo += pl.len();
            row.n_gt += s.labels.len();
        }
    }
    Ok(rows)
}

/// `δ + ⌊e/ε⌋` student steps between teacher updates.
pub fn dtui_interval(epoch: u64, delta: u64, eps: u64) -> u64 {
    delta + epoch / eps.max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherSchedule {
    /// Interval grows by one every `eps` completed epochs.
    Dynamic { delta: u64, eps: u64 },
    Fixed(u64),
}

impl TeacherSchedule {
    pub fn interval(&self, epoch: u64) -> u64 {
        match *self {
            TeacherSchedule::Dynamic { delta, eps } => dtui_interval(epoch, delta, eps),
            TeacherSchedule::Fixed(n) => n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            TeacherSchedule::Dynamic { delta, eps } => delta >= 1 && eps >= 1,
            TeacherSchedule::Fixed(n) => n >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("teacher schedule {self} needs intervals ≥ 1")))
        }
    }
}

impl FromStr for TeacherSchedule {
    type Err = Error;
    /// `dtui` (with Table defaults 5/5) or `fixed:N`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "dtui" {
            return Ok(TeacherSchedule::Dynamic { delta: 5, eps: 5 });
        }
        s.strip_prefix("fixed:")
            .and_then(|n| n.parse().ok())
            .map(TeacherSchedule::Fixed)
            .ok_or_else(|| Error::Config(format!("unknown teacher schedule '{s}' (dtui or fixed:N)")))
    }
}

impl std::fmt::Display for TeacherSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TeacherSchedule::Dynamic { .. } => f.write_str("dtui"),
            TeacherSchedule::Fixed(n) => write!(f, "fixed:{n}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modules {
    pub cmmb: bool,
    pub ossr: bool,
    pub uqfd: bool,
}

impl Modules {
    pub const NONE: Modules = Modules {
        cmmb: false,
        ossr: false,
        uqfd: false,
    };
    pub const ALL: Modules = Modules {
        cmmb: true,
        ossr: true,
        uqfd: true,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub modules: Modules,
    pub schedule: TeacherSchedule,
    pub c_thresh: f64,
    pub alpha_ema: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub tau: f64,
    pub beta: f64,
    pub beta_prime: f64,
    pub bank_capacity: usize,
    pub bank_strategy: BankStrategy,
    pub ossr_mode: ObjectnessMode,
    pub roi: RoiAlignSpec,
    pub loss: DetectionLossConfig,
    pub optim: AdamWConfig,
    pub augment: AugmentConfig,
    pub epochs: u64,
    pub batch: usize,
    pub seed: u64,
    /// A metrics line every this many iterations; 0 logs epoch ends only.
    pub log_every: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            modules: Modules::ALL,
            schedule: TeacherSchedule::Dynamic { delta: 5, eps: 5 },
            c_thresh: 0.3,
            alpha_ema: 0.999,
            omega1: 0.4,
            omega2: 0.1,
            tau: 0.07,
            beta: 0.2,
            beta_prime: 1.0,
            bank_capacity: 100,
            bank_strategy: BankStrategy::Fifo,
            ossr_mode: ObjectnessMode::AssignedQueries,
            roi: RoiAlignSpec::default(),
            loss: DetectionLossConfig::default(),
            optim: AdamWConfig {
                lr: 5e-5,
                ..AdamWConfig::default()
            },
            augment: AugmentConfig::default(),
            epochs: 30,
            batch: 2,
            seed: 0,
            log_every: 1,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.optim.validate()?;
        self.loss.focal.validate()?;
        let checks = [
            ((0.0..=1.0).contains(&self.c_thresh), "c_thresh must lie in [0, 1]"),
            ((0.0..=1.0).contains(&self.alpha_ema), "EMA rate must lie in [0, 1]"),
            (self.omega1 >= 0.0 && self.omega2 >= 0.0, "loss weights must be non-negative"),
            (self.tau > 0.0, "temperature must be positive"),
            (self.beta > 0.0 && self.beta_prime > 0.0, "smoothing exponents must be positive"),
            (self.bank_capacity >= 1, "bank capacity must be positive"),
            (self.batch >= 1, "batch size must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

/// Teacher and student parameters, student optimizer, memory banks and
/// schedule counters.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudentState {
    pub teacher: DetectorParams,
    pub student: DetectorParams,
    pub optim: AdamW,
    pub banks: MemoryBankSet,
    pub iteration: u64,
    /// Completed passes over the target training set.
    pub epoch: u64,
    pub updates_since_ema: u64,
    pub ema_updates: u64,
}

impl TeacherStudentState {
    /// Teacher and student both start as exact copies of `source`.
    pub fn new(source: &DetectorParams, cfg: &AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        let mc = source.config();
        Ok(TeacherStudentState {
            teacher: source.clone(),
            student: source.clone(),
            optim: AdamW::new(cfg.optim, source.tensors())?,
            banks: MemoryBankSet::new(mc.num_classes, mc.hidden, cfg.bank_capacity, cfg.bank_strategy, cfg.seed)?,
            iteration: 0,
            epoch: 0,
            updates_since_ema: 0,
            ema_updates: 0,
        })
    }

    pub fn write_archive(&self, archive: &mut Archive) {
        self.teacher.write_archive(archive, "teacher/");
        self.student.write_archive(archive, "student/");
        self.optim.write_archive(archive, self.student.names(), "optim/");
        self.banks.write_archive(archive);
        for (k, v) in [
            ("iteration", self.iteration),
            ("epoch", self.epoch),
            ("updates_since_ema", self.updates_since_ema),
            ("ema_updates", self.ema_updates),
        ] {
            archive.insert(format!("progress/{k}"), Tensor::scalar(v as f64));
        }
    }

    pub fn read_archive(archive: &Archive, cfg: &AdaptConfig) -> Result<Self> {
        let teacher = DetectorParams::read_archive(archive, "teacher/")?;
        let student = DetectorParams::read_archive(archive, "student/")?;
        if teacher.config() != student.config() {
            return Err(Error::Mismatch("teacher and student configurations differ".into()));
        }
        let mut s = Self::new(&student, cfg)?;
        s.teacher = teacher;
        s.optim.read_archive(archive, s.student.names(), "optim/")?;
        s.banks.read_archive(archive)?;
        s.iteration = read_counter(archive, "progress/iteration")?;
        s.epoch = read_counter(archive, "progress/epoch")?;
        s.updates_since_ema = read_counter(archive, "progress/updates_since_ema")?;
        s.ema_updates = read_counter(archive, "progress/ema_updates")?;
        Ok(s)
    }
}

/// What one adaptation step did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub n_pseudo: usize,
    pub i_ema: u64,
    pub ema_applied: bool,
    /// Per image: objectness scores and weights, empty when the module is off.
    pub ossr: Vec<(Vec<f64>, Vec<f64>)>,
}

/// One student update on a batch of weak/strong view pairs, followed by the
/// bank update and, when due, the EMA teacher update.
pub fn adaptation_step(
    det: &Detector,
    state: &mut TeacherStudentState,
    weak: &[View],
    strong: &[View],
    cfg: &AdaptConfig,
) -> Result<StepReport> {
    if weak.len() != strong.len() || weak.is_empty() {
        return Err(Error::Mismatch(format!("{} weak and {} strong views", weak.len(), strong.len())));
    }
    let n_q = state.student.config().n_queries;
    let mut tape = Tape::new();
    let p = state.student.bind(&mut tape, true);
    let mut det_terms = Vec::new();
    let mut fdis_terms = Vec::new();
    let mut fused_rows = Vec::new();
    let mut assigned = AssignedQueries::default();
    let (mut wcls, mut reg, mut aux, mut fdis) = (0.0, 0.0, 0.0, 0.0);
    let mut n_pseudo = 0;
    let mut ossr = Vec::new();

    for (b, (wv, sv)) in weak.iter().zip(strong).enumerate() {
        let t_weak = det.forward(&state.teacher, &wv.image)?;
        let pl = pseudo_label(&t_weak, cfg.c_thresh);
        n_pseudo += pl.len();
        let vars = det.forward_on_tape(&mut tape, &p, &sv.image)?;
        let last = vars.last_layer();

        let weights = if cfg.modules.ossr {
            let m = match_layer(&tape, &vars, last, &pl.labels, cfg.loss.cost);
            let qf = tape.value(vars.query_feats[last]).clone();
            let bt = tape.value(vars.boxes[last]);
            let boxes: Vec<BBox> = (0..bt.rows()).map(|i| BBox::from_slice(bt.row(i))).collect();
            let matched: Vec<usize> = m.pairs.iter().map(|&(q, _)| q).collect();
            let s = objectness_weights(&t_weak.encoder_maps, &qf, &matched, &boxes, cfg.ossr_mode, cfg.roi, cfg.beta)?;
            ossr.push((s.scores, s.weights.clone()));
            Some(s.weights)
        } else {
            None
        };

        let dl = detection_loss(&mut tape, &vars, &pl.labels, weights.as_deref(), &cfg.loss)?;
        wcls += tape.value(dl.wcls).item();
        reg += tape.value(dl.reg).item();
        aux += tape.value(dl.aux).item();
        let s = tape.add(dl.wcls, dl.reg)?;
        det_terms.push(tape.add(s, dl.aux)?);

        if cfg.modules.cmmb {
            fused_rows.push(fuse_query_vars(&mut tape, &vars.query_feats)?);
            let a = assign_pairs(&dl.assignment, &pl.labels, n_q);
            assigned.foreground.extend(a.foreground.iter().map(|&(q, c)| (q + b * n_q, c)));
            assigned.background.extend(a.background.iter().map(|&q| q + b * n_q));
        }

        if cfg.modules.uqfd {
            let t_strong = det.forward(&state.teacher, &sv.image)?;
            let wq = query_uncertainty_weights(&t_strong.class_probs(), cfg.beta_prime)?;
            let f = distill_loss(&mut tape, &t_strong.encoder_maps[0].data, vars.encoder_maps[0], t_strong.final_query_feats(), &wq)?;
            fdis += tape.value(f).item();
            fdis_terms.push(f);
        }
    }

    let n = weak.len() as f64;
    let sum_all = |tape: &mut Tape, terms: &[crate::numerics::Var]| -> Result<crate::numerics::Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(tape.scale(acc, 1.0 / n)?)
    };
    let mut total = sum_all(&mut tape, &det_terms)?;
    let mut cont = 0.0;
    let mut fused_values = None;
    if cfg.modules.cmmb {
        let fused = tape.concat_rows(&fused_rows)?;
        fused_values = Some(tape.value(fused).clone());
        let c = contrastive_loss(&mut tape, &state.banks, fused, &assigned, cfg.tau)?;
        cont = tape.value(c).item();
        let c = tape.scale(c, cfg.omega1)?;
        total = tape.add(total, c)?;
    }
    if cfg.modules.uqfd {
        let f = sum_all(&mut tape, &fdis_terms)?;
        let f = tape.scale(f, cfg.omega2)?;
        total = tape.add(total, f)?;
    }
    let losses = LossBreakdown::assemble(wcls / n, reg / n, aux / n, cont, fdis / n, cfg.omega1, cfg.omega2);
    if !losses.is_finite() {
        return Err(Error::Numerics(format!("non-finite adaptation loss at iteration {}", state.iteration)));
    }

    let mut g = tape.backward(total)?;
    let grads: Vec<Tensor> = p
        .iter()
        .zip(state.student.tensors())
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    state.optim.update(state.student.tensors_mut(), &grads)?;

    if let Some(f) = fused_values {
        state.banks.update(&batch_insertions(&f, &assigned))?;
    }

    let i_ema = cfg.schedule.interval(state.epoch);
    state.updates_since_ema += 1;
    let ema_applied = state.updates_since_ema >= i_ema;
    if ema_applied {
        state.teacher.ema_blend(&state.student, cfg.alpha_ema)?;
        state.updates_since_ema = 0;
        state.ema_updates += 1;
    }
    state.iteration += 1;
    Ok(StepReport {
        losses,
        n_pseudo,
        i_ema,
        ema_applied,
        ossr,
    })
}

/// Weak and strong views of one sample visit.
pub fn visit_views(data: &Dataset, index: usize, aug: &AugmentConfig, seed: u64, iteration: u64, slot: usize) -> (View, View) {
    let mut rng = visit_rng(seed, iteration, slot);
    let weak = weak_view(&data.samples[index], data.image_h, data.image_w, aug, &mut rng);
    let strong = strong_view(&weak, data.image_h, data.image_w, aug, &mut rng);
    (weak, strong)
}

/// Periodic evaluation during adaptation.
pub struct EvalHook<'a> {
    pub data: &'a Dataset,
    pub config: EvalConfig,
    /// Evaluate the teacher after every epoch divisible by this.
    pub every: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptSummary {
    pub steps: u64,
    /// Wall time per step, in seconds, in step order.
    pub step_seconds: Vec<f64>,
}

impl AdaptSummary {
    pub fn mean_step_seconds(&self) -> f64 {
        if self.step_seconds.is_empty() {
            0.0
        } else {
            self.step_seconds.iter().sum::<f64>() / self.step_seconds.len() as f64
        }
    }
}

/// Runs from `state.epoch` to `cfg.epochs`. The metrics stream holds only
/// deterministic values; wall time is returned separately.
pub fn adapt(
    det: &Detector,
    state: &mut TeacherStudentState,
    data: &Dataset,
    cfg: &AdaptConfig,
    eval: Option<&EvalHook>,
    metrics: &mut dyn Write,
) -> Result<AdaptSummary> {
    cfg.validate()?;
    let mc = state.student.config();
    if data.num_classes != mc.num_classes || data.image_h != mc.image_h || data.image_w != mc.image_w {
        return Err(Error::Mismatch(format!(
            "target data has {} classes at {}x{}, checkpoint expects {} at {}x{}",
            data.num_classes, data.image_h, data.image_w, mc.num_classes, mc.image_h, mc.image_w
        )));
    }
    if data.is_empty() {
        return Err(Error::Config("empty target training split".into()));
    }
    let mut summary = AdaptSummary::default();
    while state.epoch < cfg.epochs {
        for batch in epoch_batches(data.len(), cfg.batch, cfg.seed, state.epoch) {
            let (weak, strong): (Vec<View>, Vec<View>) = batch
                .iter()
                .enumerate()
                .map(|(slot, &i)| visit_views(data, i, &cfg.augment, cfg.seed, state.iteration, slot))
                .unzip();
            let start = Instant::now();
            let r = adaptation_step(det, state, &weak, &strong, cfg)?;
            if !r.losses.total.is_finite() {
                return Err(Error::Numerics(format!("adaptation loss is {} at iteration {}", r.losses.total, state.iteration)));
            }
            summary.step_seconds.push(start.elapsed().as_secs_f64());
            summary.steps += 1;
            if cfg.log_every > 0 && state.iteration % cfg.log_every == 0 {
                let l = r.losses;
                writeln!(
                    metrics,
                    "iter={} epoch={} wcls={} reg={} aux={} cont={} fdis={} total={} i_ema={} n_pseudo={}",
                    state.iteration, state.epoch, l.wcls, l.reg, l.aux, l.cont, l.fdis, l.total, r.i_ema, r.n_pseudo
                )?;
            }
        }
        state.epoch += 1;
        if let Some(h) = eval {
            if h.every > 0 && state.epoch % h.every == 0 {
                let rep = evaluate(det, &state.teacher, h.data, &h.config)?;
                writeln!(metrics, "iter={} epoch={} map50_eval={}", state.iteration, state.epoch, rep.map50)?;
            }
        }
    }
    Ok(summary)
}
