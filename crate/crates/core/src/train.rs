//! Supervised source pretraining and helpers shared with adaptation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::data::{weak_view, AugmentConfig, Dataset, View};
use crate::detector::{Detector, DetectorParams};
use crate::error::{Error, Result};
use crate::losses::{detection_loss, DetectionLossConfig, LossBreakdown};
use crate::numerics::Tape;
use crate::optim::{AdamW, AdamWConfig};

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Sample order of `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(mix(seed, 0x0e0c), epoch)));
    order
}

/// Augmentation stream of one sample visit, a pure function of
/// `(seed, iteration, slot)` so that resumed runs replay it exactly.
pub fn visit_rng(seed: u64, iteration: u64, slot: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed, 0xa09), iteration), slot as u64))
}

/// Batches of `epoch`: consecutive chunks of the shuffled order; the last
/// may be short.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    epoch_order(n, seed, epoch).chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: u64,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub augment: AugmentConfig,
    pub loss: DetectionLossConfig,
    pub seed: u64,
    /// From this epoch on the learning rate is divided by ten; 0 disables.
    pub lr_drop: u64,
    /// A metrics line every this many iterations; 0 logs epoch ends only.
    pub log_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 50,
            batch: 2,
            optim: AdamWConfig::default(),
            augment: AugmentConfig {
                jitter_px: 3.0,
                flip: true,
                strong_noise: 0.0,
                channel_scale: 0.0,
                erase_prob: 0.0,
                ..AugmentConfig::default()
            },
            loss: DetectionLossConfig::default(),
            seed: 0,
            lr_drop: 0,
            log_every: 0,
        }
    }
}

/// Parameters, optimizer moments and progress of a pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainState {
    pub params: DetectorParams,
    pub optim: AdamW,
    pub epoch: u64,
    pub iteration: u64,
}

impl PretrainState {
    pub fn new(params: DetectorParams, optim: AdamWConfig) -> Result<Self> {
        let optim = AdamW::new(optim, params.tensors())?;
        Ok(PretrainState {
            params,
            optim,
            epoch: 0,
            iteration: 0,
        })
    }

    pub fn write_archive(&self, archive: &mut Archive) {
        self.params.write_archive(archive, "model/");
        self.optim.write_archive(archive, self.params.names(), "optim/");
        archive.insert("progress/epoch", crate::numerics::Tensor::scalar(self.epoch as f64));
        archive.insert("progress/iteration", crate::numerics::Tensor::scalar(self.iteration as f64));
    }

    /// Restores a state; `optim` supplies hyperparameters, which are not
    /// stored.
    pub fn read_archive(archive: &Archive, optim: AdamWConfig) -> Result<Self> {
        let params = DetectorParams::read_archive(archive, "model/")?;
        let mut s = Self::new(params, optim)?;
        if archive.get("optim/step").is_some() {
            s.optim.read_archive(archive, s.params.names(), "optim/")?;
        }
        s.epoch = read_counter(archive, "progress/epoch")?;
        s.iteration = read_counter(archive, "progress/iteration")?;
        Ok(s)
    }
}

pub(crate) fn read_counter(archive: &Archive, name: &str) -> Result<u64> {
    match archive.get(name) {
        None => Ok(0),
        Some(t) => {
            let v = t.item();
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as u64)
            } else {
                Err(Error::Format(format!("invalid counter {name} = {v}")))
            }
        }
    }
}

/// One supervised step on ground-truth labels; the loss is averaged over the
/// batch.
pub fn supervised_step(
    det: &Detector,
    state: &mut PretrainState,
    views: &[View],
    loss: &DetectionLossConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = state.params.bind(&mut tape, true);
    let mut terms = Vec::with_capacity(views.len());
    let (mut wcls, mut reg, mut aux) = (0.0, 0.0, 0.0);
    for v in views {
        let vars = det.forward_on_tape(&mut tape, &p, &v.image)?;
        let l = detection_loss(&mut tape, &vars, &v.labels, None, loss)?;
        wcls += tape.value(l.wcls).item();
        reg += tape.value(l.reg).item();
        aux += tape.value(l.aux).item();
        let s = tape.add(l.wcls, l.reg)?;
        terms.push(tape.add(s, l.aux)?);
    }
    let n = views.len().max(1) as f64;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let total = tape.scale(total, 1.0 / n)?;
    let b = LossBreakdown::assemble(wcls / n, reg / n, aux / n, 0.0, 0.0, 0.0, 0.0);
    if !b.is_finite() {
        return Err(Error::Numerics(format!("non-finite pretraining loss at iteration {}", state.iteration)));
    }
    let mut g = tape.backward(total)?;
    let grads: Vec<_> = p
        .iter()
        .zip(state.params.tensors())
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| crate::numerics::Tensor::zeros(t.shape())))
        .collect();
    state.optim.update(state.params.tensors_mut(), &grads)?;
    state.iteration += 1;
    Ok(b)
}

/// Trains from `state.epoch` to `cfg.epochs`, writing one metrics line per
/// logged iteration and per epoch end.
pub fn pretrain(
    det: &Detector,
    state: &mut PretrainState,
    data: &Dataset,
    cfg: &PretrainConfig,
    sink: &mut dyn Write,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let (h, w) = (data.image_h, data.image_w);
    while state.epoch < cfg.epochs {
        state.optim.config.lr = if cfg.lr_drop > 0 && state.epoch >= cfg.lr_drop {
            cfg.optim.lr * 0.1
        } else {
            cfg.optim.lr
        };
        let mut sum = LossBreakdown::default();
        let mut count = 0usize;
        for batch in epoch_batches(data.len(), cfg.batch, cfg.seed, state.epoch) {
            let views: Vec<View> = batch
                .iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let mut rng = visit_rng(cfg.seed, state.iteration, slot);
                    weak_view(&data.samples[i], h, w, &cfg.augment, &mut rng)
                })
                .collect();
            let b = supervised_step(det, state, &views, &cfg.loss)?;
            if !b.total.is_finite() {
                return Err(Error::Numerics(format!("training loss is {} at iteration {}", b.total, state.iteration)));
            }
            if cfg.log_every > 0 && state.iteration % cfg.log_every == 0 {
                writeln!(
                    sink,
                    "iter={} epoch={} wcls={:.6} reg={:.6} aux={:.6} total={:.6}",
                    state.iteration, state.epoch, b.wcls, b.reg, b.aux, b.total
                )?;
            }
            sum.total += b.total;
            sum.wcls += b.wcls;
            sum.reg += b.reg;
            sum.aux += b.aux;
            count += 1;
        }
        state.epoch += 1;
        let n = count as f64;
        writeln!(
            sink,
            "epoch_end={} iter={} wcls={:.6} reg={:.6} aux={:.6} total={:.6}",
            state.epoch,
            state.iteration,
            sum.wcls / n,
            sum.reg / n,
            sum.aux / n,
            sum.total / n
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SceneConfig, Split};
    use crate::detector::DetectorConfig;

    fn tiny() -> (Detector, DetectorParams, Dataset) {
        let cfg = DetectorConfig {
            image_h: 16,
            image_w: 16,
            hidden: 8,
            n_queries: 4,
            dec_layers: 2,
            num_classes: 3,
            ffn_dim: 16,
        };
        let scene = SceneConfig {
            image_h: 16,
            image_w: 16,
            ..SceneConfig::default()
        };
        let data = Dataset::generate(&scene, 1, Split::SourceTrain, 6).unwrap();
        (Detector::new(cfg).unwrap(), DetectorParams::init(cfg, 3).unwrap(), data)
    }

    #[test]
    fn orders_are_permutations_and_seeded() {
        let o = epoch_order(10, 1, 0);
        let mut s = o.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_eq!(o, epoch_order(10, 1, 0));
        assert_ne!(o, epoch_order(10, 1, 1));
        assert_eq!(epoch_batches(5, 2, 0, 0).iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let (det, params, data) = tiny();
        let mut st = PretrainState::new(params.clone(), AdamWConfig::default()).unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        pretrain(&det, &mut st, &data, &cfg, &mut Vec::new()).unwrap();
        assert_eq!(st.params, params);
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let (det, params, data) = tiny();
        let cfg = PretrainConfig {
            epochs: 2,
            log_every: 1,
            ..PretrainConfig::default()
        };
        let mut full = PretrainState::new(params.clone(), cfg.optim).unwrap();
        let mut log_full = Vec::new();
        pretrain(&det, &mut full, &data, &cfg, &mut log_full).unwrap();

        let mut half = PretrainState::new(params, cfg.optim).unwrap();
        let mut log = Vec::new();
        pretrain(&det, &mut half, &data, &PretrainConfig { epochs: 1, ..cfg.clone() }, &mut log).unwrap();
        let mut a = Archive::new();
        half.write_archive(&mut a);
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let mut resumed = PretrainState::read_archive(&Archive::read_from(&mut buf.as_slice()).unwrap(), cfg.optim).unwrap();
        pretrain(&det, &mut resumed, &data, &cfg, &mut log).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(log, log_full);
    }

    #[test]
    fn training_reduces_the_loss() {
        let (det, params, data) = tiny();
        let cfg = PretrainConfig {
            epochs: 15,
            optim: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            ..PretrainConfig::default()
        };
        let mut st = PretrainState::new(params, cfg.optim).unwrap();
        let mut log = Vec::new();
        pretrain(&det, &mut st, &data, &cfg, &mut log).unwrap();
        let text = String::from_utf8(log).unwrap();
        let totals: Vec<f64> = text
            .lines()
            .map(|l| l.rsplit("total=").next().unwrap().parse().unwrap())
            .collect();
        assert!(totals.last().unwrap() < &(0.8 * totals[0]), "{totals:?}");
    }
}
