//! Miniature query-based set-prediction detector.
//!
//! Encoder: three strided patch projections produce maps at 1/4, 1/8 and 1/16
//! of the input resolution (scales 3, 4, 5). Decoder: `dec_layers` post-norm
//! layers of self-attention, dense cross-attention over all encoder tokens,
//! and a feed-forward block. Class and box heads are shared by every layer.
//!
//! Each query owns a learned reference point. Its sinusoidal code is the
//! query's positional term, and its logit is the additive anchor of the box
//! centre, so permuting query rows permutes every output row.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::{Tape, Tensor, Var};

const PATCH: usize = 4;
pub(crate) const LN_EPS: f64 = 1e-5;
const CLASS_PRIOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetectorConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub hidden: usize,
    pub n_queries: usize,
    pub dec_layers: usize,
    pub num_classes: usize,
    pub ffn_dim: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_h: 32,
            image_w: 32,
            hidden: 32,
            n_queries: 16,
            dec_layers: 3,
            num_classes: 3,
            ffn_dim: 64,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_h == 0 || self.image_w == 0 || self.image_h % 16 != 0 || self.image_w % 16 != 0 {
            return bad(format!(
                "image {}x{} must be a positive multiple of 16 on each side",
                self.image_h, self.image_w
            ));
        }
        if self.hidden == 0 || self.hidden % 4 != 0 {
            return bad(format!("hidden width {} must be a positive multiple of 4", self.hidden));
        }
        if self.n_queries == 0 || self.dec_layers == 0 || self.num_classes == 0 || self.ffn_dim == 0 {
            return bad("n_queries, dec_layers, num_classes and ffn_dim must be positive".into());
        }
        Ok(())
    }

    /// `(h, w)` of the encoder map at scale index 0, 1, 2 (names 3, 4, 5).
    pub fn map_dims(&self) -> [(usize, usize); 3] {
        let (h, w) = (self.image_h / PATCH, self.image_w / PATCH);
        [(h, w), (h / 2, w / 2), (h / 4, w / 4)]
    }

    pub fn image_len(&self) -> usize {
        self.image_h * self.image_w * 3
    }

    fn to_tensor(self) -> Tensor {
        Tensor::vector(
            [
                self.image_h,
                self.image_w,
                self.hidden,
                self.n_queries,
                self.dec_layers,
                self.num_classes,
                self.ffn_dim,
            ]
            .iter()
            .map(|&v| v as f64)
            .collect(),
        )
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 7 || d.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(Error::Format("malformed detector config record".into()));
        }
        let u = |i: usize| d[i] as usize;
        let cfg = DetectorConfig {
            image_h: u(0),
            image_w: u(1),
            hidden: u(2),
            n_queries: u(3),
            dec_layers: u(4),
            num_classes: u(5),
            ffn_dim: u(6),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct LayerSlots {
    sa: [usize; 5],
    ln1: [usize; 2],
    ca: [usize; 5],
    ln2: [usize; 2],
    ffn: [usize; 4],
    ln3: [usize; 2],
}

/// Indices of each parameter in the flat ordered list.
#[derive(Clone, Debug)]
struct Slots {
    enc_w: [usize; 3],
    enc_b: [usize; 3],
    query_embed: usize,
    query_ref: usize,
    layers: Vec<LayerSlots>,
    cls: [usize; 2],
    box_head: [usize; 4],
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
    Gaussian,
    RefGrid,
    ClassPrior,
    BoxBias,
}

struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Layout {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }
}

fn layout(cfg: &DetectorConfig) -> (Layout, Slots) {
    let c = cfg.hidden;
    let mut l = Layout {
        names: vec![],
        shapes: vec![],
        inits: vec![],
    };
    let in_dims = [PATCH * PATCH * 3, 4 * c, 4 * c];
    let mut enc_w = [0; 3];
    let mut enc_b = [0; 3];
    for s in 0..3 {
        enc_w[s] = l.add(format!("encoder.s{}.weight", s + 3), &[in_dims[s], c], Init::Xavier);
        enc_b[s] = l.add(format!("encoder.s{}.bias", s + 3), &[c], Init::Zeros);
    }
    let query_embed = l.add("query.embed".into(), &[cfg.n_queries, c], Init::Gaussian);
    let query_ref = l.add("query.ref".into(), &[cfg.n_queries, 2], Init::RefGrid);
    let mut layers = Vec::new();
    for i in 0..cfg.dec_layers {
        let p = |s: &str| format!("decoder.{i}.{s}");
        let attn = |l: &mut Layout, tag: &str| {
            [
                l.add(p(&format!("{tag}.q")), &[c, c], Init::Xavier),
                l.add(p(&format!("{tag}.k")), &[c, c], Init::Xavier),
                l.add(p(&format!("{tag}.v")), &[c, c], Init::Xavier),
                l.add(p(&format!("{tag}.out")), &[c, c], Init::Xavier),
                l.add(p(&format!("{tag}.out_bias")), &[c], Init::Zeros),
            ]
        };
        let norm = |l: &mut Layout, tag: &str| {
            [
                l.add(p(&format!("{tag}.gamma")), &[c], Init::Ones),
                l.add(p(&format!("{tag}.beta")), &[c], Init::Zeros),
            ]
        };
        let sa = attn(&mut l, "self_attn");
        let ln1 = norm(&mut l, "norm1");
        let ca = attn(&mut l, "cross_attn");
        let ln2 = norm(&mut l, "norm2");
        let ffn = [
            l.add(p("ffn.w1"), &[c, cfg.ffn_dim], Init::Xavier),
            l.add(p("ffn.b1"), &[cfg.ffn_dim], Init::Zeros),
            l.add(p("ffn.w2"), &[cfg.ffn_dim, c], Init::Xavier),
            l.add(p("ffn.b2"), &[c], Init::Zeros),
        ];
        let ln3 = norm(&mut l, "norm3");
        layers.push(LayerSlots {
            sa,
            ln1,
            ca,
            ln2,
            ffn,
            ln3,
        });
    }
    let cls = [
        l.add("head.class.weight".into(), &[c, cfg.num_classes], Init::Xavier),
        l.add("head.class.bias".into(), &[cfg.num_classes], Init::ClassPrior),
    ];
    let box_head = [
        l.add("head.box.w1".into(), &[c, c], Init::Xavier),
        l.add("head.box.b1".into(), &[c], Init::Zeros),
        l.add("head.box.w2".into(), &[c, 4], Init::Xavier),
        l.add("head.box.b2".into(), &[4], Init::BoxBias),
    ];
    let slots = Slots {
        enc_w,
        enc_b,
        query_embed,
        query_ref,
        layers,
        cls,
        box_head,
    };
    (l, slots)
}

/// Number of scalar parameters for `cfg`.
pub fn parameter_count(cfg: &DetectorConfig) -> usize {
    layout(cfg)
        .0
        .shapes
        .iter()
        .map(|s| s.iter().product::<usize>())
        .sum()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Ordered named parameter tensors of one detector.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    config: DetectorConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl DetectorParams {
    /// Seeded initialization: Xavier-uniform weights, zero biases, unit norms,
    /// reference points on a regular grid, low class prior.
    pub fn init(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (l, _) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_q = config.n_queries;
        let grid = (n_q as f64).sqrt().ceil() as usize;
        let mut tensors = Vec::with_capacity(l.names.len());
        for (shape, init) in l.shapes.iter().zip(&l.inits) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Xavier => {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                Init::Gaussian => {
                    let a = 3f64.sqrt() * 0.5;
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::RefGrid => (0..n_q)
                    .flat_map(|i| {
                        let x = ((i % grid) as f64 + 0.5) / grid as f64;
                        let y = ((i / grid) as f64 + 0.5) / grid as f64;
                        [logit(x), logit(y)]
                    })
                    .collect(),
                Init::ClassPrior => vec![logit(CLASS_PRIOR); n],
                Init::BoxBias => vec![0.0, 0.0, -1.0, -1.0],
            };
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        Ok(DetectorParams {
            config,
            names: l.names,
            tensors,
        })
    }

    pub fn zeros(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let (l, _) = layout(&config);
        let tensors = l.shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Ok(DetectorParams {
            config,
            names: l.names,
            tensors,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    fn check_compatible(&self, other: &DetectorParams) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Mismatch(format!(
                "detector configs differ: {:?} vs {:?}",
                self.config, other.config
            )));
        }
        Ok(())
    }

    /// `self ← α·self + (1−α)·student`, parameter by parameter.
    pub fn ema_blend(&mut self, student: &DetectorParams, alpha: f64) -> Result<()> {
        self.check_compatible(student)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("EMA rate {alpha} outside [0, 1]")));
        }
        for (t, s) in self.tensors.iter_mut().zip(&student.tensors) {
            for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = alpha * *a + (1.0 - alpha) * b;
            }
        }
        Ok(())
    }

    pub fn write_archive(&self, archive: &mut Archive, prefix: &str) {
        archive.insert(format!("{prefix}config"), self.config.to_tensor());
        for (n, t) in self.names.iter().zip(&self.tensors) {
            archive.insert(format!("{prefix}param/{n}"), t.clone());
        }
    }

    /// Loads the model from a checkpoint file. Adaptation checkpoints hold a
    /// teacher and a student (teacher unless `student`); pretraining
    /// checkpoints hold a single model.
    pub fn load_checkpoint(path: &Path, student: bool) -> Result<Self> {
        let a = Archive::load(path)?;
        let prefix = if a.names_with_prefix("teacher/").next().is_some() {
            if student {
                "student/"
            } else {
                "teacher/"
            }
        } else if student {
            return Err(Error::Config("the student needs an adaptation checkpoint".into()));
        } else {
            "model/"
        };
        Self::read_archive(&a, prefix)
    }

    /// Reads parameters written by [`write_archive`](Self::write_archive),
    /// checking every shape and the total count against the stored config.
    pub fn read_archive(archive: &Archive, prefix: &str) -> Result<Self> {
        let config = DetectorConfig::from_tensor(archive.require(&format!("{prefix}config"))?)?;
        let mut params = DetectorParams::zeros(config)?;
        let stored = archive.names_with_prefix(&format!("{prefix}param/")).count();
        if stored != params.names.len() {
            return Err(Error::Mismatch(format!(
                "archive holds {stored} parameter tensors, config implies {}",
                params.names.len()
            )));
        }
        for (n, t) in params.names.iter().zip(params.tensors.iter_mut()) {
            let src = archive.require(&format!("{prefix}param/{n}"))?;
            if src.shape() != t.shape() {
                return Err(Error::Mismatch(format!(
                    "parameter '{n}' has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        debug_assert_eq!(params.scalar_count(), parameter_count(&config));
        Ok(params)
    }
}

/// One encoder map, stored as `h·w` rows of `c` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub data: Tensor,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    /// The `h × w` plane of channel `ch`.
    pub fn channel(&self, ch: usize) -> Vec<f64> {
        (0..self.h * self.w).map(|i| self.data.at2(i, ch)).collect()
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub encoder_maps: [Var; 3],
    pub query_feats: Vec<Var>,
    pub class_logits: Vec<Var>,
    pub boxes: Vec<Var>,
}

impl ForwardVars {
    pub fn last_layer(&self) -> usize {
        self.query_feats.len() - 1
    }
}

/// Values of one forward pass. Per-layer vectors are ordered first to last.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    pub encoder_maps: [FeatureMap; 3],
    pub query_feats: Vec<Tensor>,
    pub class_logits: Vec<Tensor>,
    pub boxes: Vec<Vec<BBox>>,
}

impl DetectorOutput {
    pub fn from_tape(tape: &Tape, vars: &ForwardVars, cfg: &DetectorConfig) -> Self {
        let dims = cfg.map_dims();
        let map = |s: usize| FeatureMap {
            h: dims[s].0,
            w: dims[s].1,
            data: tape.value(vars.encoder_maps[s]).clone(),
        };
        DetectorOutput {
            encoder_maps: [map(0), map(1), map(2)],
            query_feats: vars.query_feats.iter().map(|&v| tape.value(v).clone()).collect(),
            class_logits: vars.class_logits.iter().map(|&v| tape.value(v).clone()).collect(),
            boxes: vars
                .boxes
                .iter()
                .map(|&v| {
                    let t = tape.value(v);
                    (0..t.rows()).map(|i| BBox::from_slice(t.row(i))).collect()
                })
                .collect(),
        }
    }

    pub fn final_logits(&self) -> &Tensor {
        self.class_logits.last().expect("at least one decoder layer")
    }

    pub fn final_boxes(&self) -> &[BBox] {
        self.boxes.last().expect("at least one decoder layer")
    }

    pub fn final_query_feats(&self) -> &Tensor {
        self.query_feats.last().expect("at least one decoder layer")
    }

    /// Sigmoid class probabilities of the final layer, `n_q × k`.
    pub fn class_probs(&self) -> Tensor {
        self.final_logits().map(crate::numerics::sigmoid)
    }

    /// Top-1 `(class index from 0, score)` of every final-layer query.
    pub fn top1(&self) -> Vec<(usize, f64)> {
        let p = self.class_probs();
        (0..p.rows())
            .map(|i| {
                p.row(i)
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best })
            })
            .collect()
    }
}

/// Frequencies and phases of the sinusoidal position code, as the constant
/// `2 × C` projection `P` and `1 × C` phase row so that `code = sin(xy·P + φ)`.
fn position_basis(c: usize) -> (Tensor, Tensor) {
    let nf = c / 4;
    let mut p = Tensor::zeros(&[2, c]);
    let mut phase = Tensor::zeros(&[1, c]);
    for i in 0..nf {
        let f = if nf == 1 {
            std::f64::consts::PI
        } else {
            std::f64::consts::PI * 2f64.powf(4.0 * i as f64 / (nf - 1) as f64)
        };
        for (block, axis, shift) in [(0, 0, 0.0), (1, 0, 0.5), (2, 1, 0.0), (3, 1, 0.5)] {
            let col = block * nf + i;
            p.data_mut()[axis * c + col] = f;
            phase.data_mut()[col] = shift * std::f64::consts::PI;
        }
    }
    (p, phase)
}

fn encode_points(points: &[(f64, f64)], c: usize) -> Tensor {
    let (p, phase) = position_basis(c);
    let mut out = Tensor::zeros(&[points.len(), c]);
    for (r, &(x, y)) in points.iter().enumerate() {
        for j in 0..c {
            out.data_mut()[r * c + j] = (x * p.at2(0, j) + y * p.at2(1, j) + phase.data()[j]).sin();
        }
    }
    out
}

/// Structure of the network for one config: parameter slots, patch gather
/// indices and constant key positions. Holds no trainable state.
#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    slots: Slots,
    patch_index: [Vec<usize>; 3],
    key_pos: Tensor,
    pos_basis: (Tensor, Tensor),
    ref_expand: Tensor,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let (_, slots) = layout(&config);
        let c = config.hidden;
        let dims = config.map_dims();

        // Scale 3 patches from the HWC image: row = patch, col = (dy, dx, ch).
        let (ih, iw) = (config.image_h, config.image_w);
        let mut p3 = Vec::with_capacity(config.image_len());
        for py in 0..ih / PATCH {
            for px in 0..iw / PATCH {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        for ch in 0..3 {
                            p3.push(((py * PATCH + dy) * iw + px * PATCH + dx) * 3 + ch);
                        }
                    }
                }
            }
        }
        // Scales 4 and 5 merge 2×2 neighbouring rows of the finer map.
        let merge = |(h, w): (usize, usize)| {
            let mut idx = Vec::with_capacity(h * w * c);
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let row = (2 * y + dy) * w + 2 * x + dx;
                            idx.extend((0..c).map(|ch| row * c + ch));
                        }
                    }
                }
            }
            idx
        };
        let patch_index = [p3, merge(dims[0]), merge(dims[1])];

        let mut centres = Vec::new();
        for &(h, w) in &dims {
            for y in 0..h {
                for x in 0..w {
                    centres.push(((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64));
                }
            }
        }
        let key_pos = encode_points(&centres, c);
        let mut ref_expand = Tensor::zeros(&[2, 4]);
        ref_expand.data_mut()[0] = 1.0;
        ref_expand.data_mut()[5] = 1.0;
        Ok(Detector {
            config,
            slots,
            patch_index,
            key_pos,
            pos_basis: position_basis(c),
            ref_expand,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    fn check_params(&self, params: &DetectorParams) -> Result<()> {
        if params.config != self.config {
            return Err(Error::Mismatch(format!(
                "parameters built for {:?}, detector is {:?}",
                params.config, self.config
            )));
        }
        Ok(())
    }

    /// Records a full forward pass on `tape`. `p` must come from
    /// [`DetectorParams::bind`] for this config.
    pub fn forward_on_tape(&self, tape: &mut Tape, p: &[Var], image: &[f64]) -> Result<ForwardVars> {
        let cfg = &self.config;
        if image.len() != cfg.image_len() {
            return Err(Error::Mismatch(format!(
                "image has {} values, detector expects {}x{}x3 = {}",
                image.len(),
                cfg.image_h,
                cfg.image_w,
                cfg.image_len()
            )));
        }
        let c = cfg.hidden;
        let s = &self.slots;
        let dims = cfg.map_dims();

        let img = tape.constant(Tensor::vector(image.to_vec()));
        let mut maps = Vec::with_capacity(3);
        let mut prev = img;
        for scale in 0..3 {
            let rows = dims[scale].0 * dims[scale].1;
            let width = self.patch_index[scale].len() / rows;
            let patches = tape.gather(prev, self.patch_index[scale].clone(), &[rows, width])?;
            let z = tape.matmul(patches, p[s.enc_w[scale]])?;
            let z = tape.add(z, p[s.enc_b[scale]])?;
            prev = tape.relu(z)?;
            maps.push(prev);
        }
        let memory = tape.concat_rows(&maps)?;
        let key_pos = tape.constant(self.key_pos.clone());
        let keys_in = tape.add(memory, key_pos)?;

        let ref_logit = p[s.query_ref];
        let ref_xy = tape.sigmoid(ref_logit)?;
        let basis = tape.constant(self.pos_basis.0.clone());
        let phase = tape.constant(self.pos_basis.1.clone());
        let arg = tape.matmul(ref_xy, basis)?;
        let arg = tape.add(arg, phase)?;
        let query_pos = tape.sin(arg)?;
        let expand = tape.constant(self.ref_expand.clone());
        let ref_box = tape.matmul(ref_logit, expand)?;

        let scale = 1.0 / (c as f64).sqrt();
        let attend = |tape: &mut Tape, q_in: Var, k_in: Var, v_in: Var, w: &[usize; 5]| -> Result<Var> {
            let q = tape.matmul(q_in, p[w[0]])?;
            let k = tape.matmul(k_in, p[w[1]])?;
            let v = tape.matmul(v_in, p[w[2]])?;
            let kt = tape.transpose(k)?;
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, scale)?;
            let a = tape.softmax_rows(logits)?;
            let mixed = tape.matmul(a, v)?;
            let o = tape.matmul(mixed, p[w[3]])?;
            Ok(tape.add(o, p[w[4]])?)
        };

        let mut tgt = p[s.query_embed];
        let mut out = ForwardVars {
            encoder_maps: [maps[0], maps[1], maps[2]],
            query_feats: vec![],
            class_logits: vec![],
            boxes: vec![],
        };
        for layer in &s.layers {
            let qk = tape.add(tgt, query_pos)?;
            let sa = attend(tape, qk, qk, tgt, &layer.sa)?;
            let t = tape.add(tgt, sa)?;
            tgt = tape.layer_norm(t, p[layer.ln1[0]], p[layer.ln1[1]], LN_EPS)?;

            let q_in = tape.add(tgt, query_pos)?;
            let ca = attend(tape, q_in, keys_in, memory, &layer.ca)?;
            let t = tape.add(tgt, ca)?;
            tgt = tape.layer_norm(t, p[layer.ln2[0]], p[layer.ln2[1]], LN_EPS)?;

            let h = tape.matmul(tgt, p[layer.ffn[0]])?;
            let h = tape.add(h, p[layer.ffn[1]])?;
            let h = tape.relu(h)?;
            let h = tape.matmul(h, p[layer.ffn[2]])?;
            let h = tape.add(h, p[layer.ffn[3]])?;
            let t = tape.add(tgt, h)?;
            tgt = tape.layer_norm(t, p[layer.ln3[0]], p[layer.ln3[1]], LN_EPS)?;

            let logits = tape.matmul(tgt, p[s.cls[0]])?;
            let logits = tape.add(logits, p[s.cls[1]])?;
            let bh = tape.matmul(tgt, p[s.box_head[0]])?;
            let bh = tape.add(bh, p[s.box_head[1]])?;
            let bh = tape.relu(bh)?;
            let raw = tape.matmul(bh, p[s.box_head[2]])?;
            let raw = tape.add(raw, p[s.box_head[3]])?;
            let raw = tape.add(raw, ref_box)?;
            let boxes = tape.sigmoid(raw)?;

            out.query_feats.push(tgt);
            out.class_logits.push(logits);
            out.boxes.push(boxes);
        }
        Ok(out)
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, params: &DetectorParams, image: &[f64]) -> Result<DetectorOutput> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let vars = self.forward_on_tape(&mut tape, &p, image)?;
        Ok(DetectorOutput::from_tape(&tape, &vars, &self.config))
    }
}
