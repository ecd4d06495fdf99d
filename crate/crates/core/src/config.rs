//! Flat `key = value` run configuration.
//!
//! Every setting of a run lives here under a dotted section prefix. Defaults
//! carry the published hyperparameter table unchanged; optimizer schedules
//! are scaled to the miniature benchmark. Any key can be overridden from the
//! environment as `SFOD_` + the key uppercased with `.` replaced by `__`
//! (`hp.c_thresh` becomes `SFOD_HP__C_THRESH`).

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::cmmb::BankStrategy;
use crate::data::{default_styles, AugmentConfig, SceneConfig, ShiftProfile, Split};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::geometry::RoiAlignSpec;
use crate::losses::{BoxLossWeights, ClsNorm, DetectionLossConfig, FocalParams};
use crate::matching::CostWeights;
use crate::optim::AdamWConfig;
use crate::ossr::ObjectnessMode;
use crate::teacher::{AdaptConfig, Modules, TeacherSchedule};
use crate::train::PretrainConfig;

/// Conversion between a typed setting and its text form.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! via_fromstr {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

via_fromstr!(f64, u64, usize, bool, ObjectnessMode, BankStrategy);

impl ConfigValue for ClsNorm {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "queries" => Ok(ClsNorm::Queries),
            "matched" => Ok(ClsNorm::Matched),
            _ => Err(format!("'{s}' is not queries or matched")),
        }
    }
    fn render(&self) -> String {
        match self {
            ClsNorm::Queries => "queries".into(),
            ClsNorm::Matched => "matched".into(),
        }
    }
}

impl ConfigValue for [[f64; 3]; 3] {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<f64> = s
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{e}")))
            .collect::<std::result::Result<_, _>>()?;
        if v.len() != 9 {
            return Err(format!("expected 9 comma-separated numbers, got {}", v.len()));
        }
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            row.copy_from_slice(&v[3 * i..3 * i + 3]);
        }
        Ok(m)
    }
    fn render(&self) -> String {
        self.iter().flatten().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Every setting of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_seed: u64,
    pub num_classes: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub max_objects: usize,
    pub overlap_cap: f64,
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub noise_sigma: f64,
    pub contrast_scale: f64,
    pub haze_blend: f64,
    pub channel_mix: [[f64; 3]; 3],

    pub hidden: usize,
    pub n_queries: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub model_seed: u64,

    pub l_m: usize,
    pub h_a: usize,
    pub w_a: usize,
    pub alpha_t: f64,
    pub gamma: f64,
    pub beta: f64,
    pub beta_prime: f64,
    pub tau: f64,
    pub alpha_ema: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub delta: u64,
    pub epsilon: u64,
    pub c_thresh: f64,

    pub roi_samples: usize,
    pub cls_coef: f64,
    pub l1_coef: f64,
    pub giou_coef: f64,
    pub aux_loss: bool,
    pub cls_norm: ClsNorm,

    pub pretrain_epochs: u64,
    pub pretrain_lr: f64,
    pub pretrain_lr_drop: u64,
    pub pretrain_batch: usize,
    pub pretrain_jitter_px: f64,
    pub pretrain_flip: bool,
    pub pretrain_seed: u64,

    pub adapt_epochs: u64,
    pub adapt_lr: f64,
    pub adapt_batch: usize,
    pub adapt_seed: u64,
    pub log_every: u64,
    pub eval_every: u64,

    pub weight_decay: f64,
    pub clip_norm: f64,

    pub cmmb: bool,
    pub ossr: bool,
    pub uqfd: bool,
    pub dtui: bool,
    pub fixed_interval: u64,
    pub ossr_mode: ObjectnessMode,
    pub bank_strategy: BankStrategy,

    pub jitter_px: f64,
    pub weak_noise: f64,
    pub strong_noise: f64,
    pub channel_scale: f64,
    pub contrast_jitter: f64,
    pub erase_prob: f64,
    pub erase_max: f64,

    pub iou_thresh: f64,
    pub score_floor: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        RunConfig {
            data_seed: 0,
            num_classes: 3,
            image_h: 32,
            image_w: 32,
            max_objects: 5,
            overlap_cap: 0.3,
            source_train: 200,
            source_test: 100,
            target_train: 200,
            target_test: 100,
            noise_sigma: 0.05,
            contrast_scale: 1.0,
            haze_blend: 0.5,
            channel_mix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],

            hidden: 32,
            n_queries: 16,
            dec_layers: 3,
            ffn_dim: 64,
            model_seed: 0,

            l_m: 100,
            h_a: 7,
            w_a: 7,
            alpha_t: 0.25,
            gamma: 2.0,
            beta: 0.2,
            beta_prime: 1.0,
            tau: 0.07,
            alpha_ema: 0.999,
            omega1: 0.4,
            omega2: 0.1,
            delta: 5,
            epsilon: 5,
            c_thresh: 0.3,

            roi_samples: 2,
            cls_coef: 2.0,
            l1_coef: 5.0,
            giou_coef: 2.0,
            aux_loss: true,
            cls_norm: ClsNorm::Matched,

            pretrain_epochs: 200,
            pretrain_lr: 1e-3,
            pretrain_lr_drop: 150,
            pretrain_batch: 2,
            pretrain_jitter_px: 3.0,
            pretrain_flip: true,
            pretrain_seed: 0,

            adapt_epochs: 100,
            adapt_lr: 2.5e-4,
            adapt_batch: 2,
            adapt_seed: 0,
            log_every: 1,
            eval_every: 10,

            weight_decay: 1e-4,
            clip_norm: 0.1,

            cmmb: true,
            ossr: true,
            uqfd: true,
            dtui: true,
            fixed_interval: 1,
            ossr_mode: ObjectnessMode::AssignedQueries,
            bank_strategy: BankStrategy::Fifo,

            jitter_px: aug.jitter_px,
            weak_noise: aug.weak_noise,
            strong_noise: aug.strong_noise,
            channel_scale: aug.channel_scale,
            contrast_jitter: 0.8,
            erase_prob: aug.erase_prob,
            erase_max: aug.erase_max,

            iou_thresh: 0.5,
            score_floor: 0.05,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident,)*) => {
        /// Every accepted key, in file order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $($key => {
                        self.$field = ConfigValue::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key '{key}'"))),
                }
                Ok(())
            }

            /// Text form of one key.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$field.render()),)*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    "data.seed" => data_seed,
    "data.num_classes" => num_classes,
    "data.image_h" => image_h,
    "data.image_w" => image_w,
    "data.max_objects" => max_objects,
    "data.overlap_cap" => overlap_cap,
    "data.source_train" => source_train,
    "data.source_test" => source_test,
    "data.target_train" => target_train,
    "data.target_test" => target_test,
    "shift.noise_sigma" => noise_sigma,
    "shift.contrast_scale" => contrast_scale,
    "shift.haze_blend" => haze_blend,
    "shift.channel_mix" => channel_mix,
    "model.hidden" => hidden,
    "model.n_queries" => n_queries,
    "model.dec_layers" => dec_layers,
    "model.ffn_dim" => ffn_dim,
    "model.seed" => model_seed,
    "hp.l_M" => l_m,
    "hp.H_a" => h_a,
    "hp.W_a" => w_a,
    "hp.alpha_t" => alpha_t,
    "hp.gamma" => gamma,
    "hp.beta" => beta,
    "hp.beta_prime" => beta_prime,
    "hp.tau" => tau,
    "hp.alpha_ema" => alpha_ema,
    "hp.omega1" => omega1,
    "hp.omega2" => omega2,
    "hp.delta" => delta,
    "hp.epsilon" => epsilon,
    "hp.c_thresh" => c_thresh,
    "ossr.roi_samples" => roi_samples,
    "ossr.mode" => ossr_mode,
    "cmmb.strategy" => bank_strategy,
    "loss.cls_coef" => cls_coef,
    "loss.l1" => l1_coef,
    "loss.giou" => giou_coef,
    "loss.aux" => aux_loss,
    "loss.cls_norm" => cls_norm,
    "optim.weight_decay" => weight_decay,
    "optim.clip_norm" => clip_norm,
    "pretrain.epochs" => pretrain_epochs,
    "pretrain.lr" => pretrain_lr,
    "pretrain.lr_drop" => pretrain_lr_drop,
    "pretrain.batch" => pretrain_batch,
    "pretrain.jitter_px" => pretrain_jitter_px,
    "pretrain.flip" => pretrain_flip,
    "pretrain.seed" => pretrain_seed,
    "adapt.epochs" => adapt_epochs,
    "adapt.lr" => adapt_lr,
    "adapt.batch" => adapt_batch,
    "adapt.seed" => adapt_seed,
    "adapt.log_every" => log_every,
    "adapt.eval_every" => eval_every,
    "modules.cmmb" => cmmb,
    "modules.ossr" => ossr,
    "modules.uqfd" => uqfd,
    "modules.dtui" => dtui,
    "teacher.fixed_interval" => fixed_interval,
    "aug.jitter_px" => jitter_px,
    "aug.weak_noise" => weak_noise,
    "aug.strong_noise" => strong_noise,
    "aug.channel_scale" => channel_scale,
    "aug.contrast_jitter" => contrast_jitter,
    "aug.erase_prob" => erase_prob,
    "aug.erase_max" => erase_max,
    "eval.iou" => iou_thresh,
    "eval.score_floor" => score_floor,
}

/// Environment variable overriding `key`.
pub fn env_name(key: &str) -> String {
    format!("SFOD_{}", key.replace('.', "__").to_uppercase())
}

impl RunConfig {
    /// Applies `key = value` lines; `#` starts a comment. Unknown or repeated
    /// keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
            }
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Applies every `SFOD_*` variable from `vars`; a variable naming no
    /// key is an error.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (name, value) in vars {
            if !name.starts_with("SFOD_") {
                continue;
            }
            let key = KEYS
                .iter()
                .find(|k| env_name(k) == name)
                .ok_or_else(|| Error::Config(format!("environment variable {name} names no config key")))?;
            self.set(key, &value)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then the environment.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut c = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            c.apply_text(&text)?;
        }
        c.apply_env(env)?;
        c.validate()?;
        Ok(c)
    }

    /// Fully resolved text form; parsing it reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for k in KEYS {
            let sec = k.split('.').next().unwrap_or("");
            if sec != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                writeln!(s, "# {sec}").unwrap();
                section = sec;
            }
            writeln!(s, "{k} = {}", self.get(k).expect("listed key")).unwrap();
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_config().validate()?;
        self.detector_config().validate()?;
        self.adapt_config().validate()?;
        self.pretrain_config().optim.validate()?;
        let checks = [
            (self.h_a >= 1 && self.w_a >= 1 && self.roi_samples >= 1, "RoIAlign sizes must be positive"),
            (self.pretrain_batch >= 1, "pretraining batch must be positive"),
            ((0.0..=1.0).contains(&self.iou_thresh), "eval.iou must lie in [0, 1]"),
            (self.score_floor >= 0.0, "eval.score_floor must be non-negative"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn shift(&self) -> ShiftProfile {
        ShiftProfile {
            noise_sigma: self.noise_sigma,
            contrast_scale: self.contrast_scale,
            haze_blend: self.haze_blend,
            channel_mix: self.channel_mix,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            num_classes: self.num_classes,
            image_h: self.image_h,
            image_w: self.image_w,
            max_objects: self.max_objects,
            overlap_cap: self.overlap_cap,
            styles: default_styles(self.num_classes),
            shift: self.shift(),
            ..SceneConfig::default()
        }
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::SourceTrain => self.source_train,
            Split::SourceTest => self.source_test,
            Split::TargetTrain => self.target_train,
            Split::TargetTest => self.target_test,
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            image_h: self.image_h,
            image_w: self.image_w,
            hidden: self.hidden,
            n_queries: self.n_queries,
            dec_layers: self.dec_layers,
            num_classes: self.num_classes,
            ffn_dim: self.ffn_dim,
        }
    }

    pub fn loss_config(&self) -> DetectionLossConfig {
        DetectionLossConfig {
            focal: FocalParams {
                alpha: self.alpha_t,
                gamma: self.gamma,
            },
            cls_coef: self.cls_coef,
            boxes: BoxLossWeights {
                l1: self.l1_coef,
                giou: self.giou_coef,
            },
            cost: CostWeights {
                class: self.cls_coef,
                l1: self.l1_coef,
                giou: self.giou_coef,
            },
            norm: self.cls_norm,
            aux: self.aux_loss,
        }
    }

    fn optim(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..AdamWConfig::default()
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            jitter_px: self.jitter_px,
            weak_noise: self.weak_noise,
            strong_noise: self.strong_noise,
            channel_scale: self.channel_scale,
            erase_prob: self.erase_prob,
            erase_max: self.erase_max,
            flip: false,
            contrast_jitter: self.contrast_jitter,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch: self.pretrain_batch,
            optim: self.optim(self.pretrain_lr),
            augment: AugmentConfig {
                jitter_px: self.pretrain_jitter_px,
                flip: self.pretrain_flip,
                weak_noise: self.weak_noise,
                ..AugmentConfig::identity()
            },
            loss: self.loss_config(),
            seed: self.pretrain_seed,
            lr_drop: self.pretrain_lr_drop,
            log_every: self.log_every,
        }
    }

    pub fn schedule(&self) -> TeacherSchedule {
        if self.dtui {
            TeacherSchedule::Dynamic {
                delta: self.delta,
                eps: self.epsilon,
            }
        } else {
            TeacherSchedule::Fixed(self.fixed_interval)
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            modules: Modules {
                cmmb: self.cmmb,
                ossr: self.ossr,
                uqfd: self.uqfd,
            },
            schedule: self.schedule(),
            c_thresh: self.c_thresh,
            alpha_ema: self.alpha_ema,
            omega1: self.omega1,
            omega2: self.omega2,
            tau: self.tau,
            beta: self.beta,
            beta_prime: self.beta_prime,
            bank_capacity: self.l_m,
            bank_strategy: self.bank_strategy,
            ossr_mode: self.ossr_mode,
            roi: RoiAlignSpec {
                out_h: self.h_a,
                out_w: self.w_a,
                samples_per_bin: self.roi_samples,
            },
            loss: self.loss_config(),
            optim: self.optim(self.adapt_lr),
            augment: self.augment_config(),
            epochs: self.adapt_epochs,
            batch: self.adapt_batch,
            seed: self.adapt_seed,
            log_every: self.log_every,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            iou_thresh: self.iou_thresh,
            score_floor: self.score_floor,
        }
    }

    /// Sets all seeds from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data_seed = seed;
        self.model_seed = seed;
        self.pretrain_seed = seed;
        self.adapt_seed = seed;
        self
    }
}

impl FromStr for RunConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::from_text(s)
    }
}
