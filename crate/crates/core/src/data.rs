//! Synthetic detection scenes with a parameterized domain shift.
//!
//! Every sample is a pure function of `(seed, split, index)`: rendering and
//! shift noise draw from two independent ChaCha streams keyed by that triple.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::matching::Labels;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    SourceTrain,
    SourceTest,
    TargetTrain,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::SourceTrain, Split::SourceTest, Split::TargetTrain, Split::TargetTest];

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain | Split::SourceTest => Domain::Source,
            Split::TargetTrain | Split::TargetTest => Domain::Target,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::SourceTest => "source_test",
            Split::TargetTrain => "target_train",
            Split::TargetTest => "target_test",
        }
    }

    fn id(self) -> u64 {
        match self {
            Split::SourceTrain => 1,
            Split::SourceTest => 2,
            Split::TargetTrain => 3,
            Split::TargetTest => 4,
        }
    }
}

/// Appearance of one class: base colour and stripe frequency in cycles per
/// object width (0 = solid).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassStyle {
    pub color: [f64; 3],
    pub stripes: f64,
}

/// Fixed, well-separated styles. The first three are red solid, green with
/// two stripes, blue with four; further classes walk the hue circle.
pub fn default_styles(k: usize) -> Vec<ClassStyle> {
    let base = [
        ClassStyle {
            color: [0.95, 0.25, 0.2],
            stripes: 0.0,
        },
        ClassStyle {
            color: [0.25, 0.9, 0.3],
            stripes: 2.0,
        },
        ClassStyle {
            color: [0.3, 0.35, 0.95],
            stripes: 4.0,
        },
    ];
    (0..k)
        .map(|i| {
            if i < base.len() {
                base[i]
            } else {
                let h = (i as f64 * 0.618_034) % 1.0 * std::f64::consts::TAU;
                ClassStyle {
                    color: [
                        0.6 + 0.35 * h.cos(),
                        0.6 + 0.35 * (h + 2.094).cos(),
                        0.6 + 0.35 * (h + 4.189).cos(),
                    ],
                    stripes: (i % 4) as f64,
                }
            }
        })
        .collect()
}

/// Photometric shift applied to target renderings, in order: channel mix,
/// contrast about 0.5, additive Gaussian noise, blend toward gray 0.5, clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftProfile {
    pub noise_sigma: f64,
    pub contrast_scale: f64,
    pub haze_blend: f64,
    pub channel_mix: [[f64; 3]; 3],
}

const IDENTITY_MIX: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
const HAZE_GRAY: f64 = 0.5;

impl ShiftProfile {
    pub fn none() -> Self {
        ShiftProfile {
            noise_sigma: 0.0,
            contrast_scale: 1.0,
            haze_blend: 0.0,
            channel_mix: IDENTITY_MIX,
        }
    }

    /// Default benchmark shift.
    pub fn toy_fog() -> Self {
        ShiftProfile {
            noise_sigma: 0.05,
            haze_blend: 0.5,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.haze_blend) {
            return Err(Error::Config(format!("haze blend {} outside [0, 1]", self.haze_blend)));
        }
        if !(self.noise_sigma >= 0.0) || !self.contrast_scale.is_finite() {
            return Err(Error::Config("noise sigma must be non-negative and contrast finite".into()));
        }
        for row in &self.channel_mix {
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("channel mix row {row:?} does not sum to 1")));
            }
        }
        Ok(())
    }

    fn to_vec(self) -> Vec<f64> {
        let mut v = vec![self.noise_sigma, self.contrast_scale, self.haze_blend];
        v.extend(self.channel_mix.iter().flatten());
        v
    }

    fn from_slice(v: &[f64]) -> Self {
        let mut mix = [[0.0; 3]; 3];
        for (i, row) in mix.iter_mut().enumerate() {
            row.copy_from_slice(&v[3 + 3 * i..6 + 3 * i]);
        }
        ShiftProfile {
            noise_sigma: v[0],
            contrast_scale: v[1],
            haze_blend: v[2],
            channel_mix: mix,
        }
    }

    /// Applies the shift in place to an HWC image.
    pub fn apply(&self, image: &mut [f64], rng: &mut ChaCha8Rng) {
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("non-negative sigma");
        // Identity steps are skipped so the null profile is bit-exact.
        let mix = self.channel_mix != IDENTITY_MIX;
        let contrast = self.contrast_scale != 1.0;
        for px in image.chunks_mut(3) {
            let src = [px[0], px[1], px[2]];
            for (c, out) in px.iter_mut().enumerate() {
                let mut v = if mix {
                    (0..3).map(|j| self.channel_mix[c][j] * src[j]).sum()
                } else {
                    src[c]
                };
                if contrast {
                    v = 0.5 + self.contrast_scale * (v - 0.5);
                }
                if self.noise_sigma > 0.0 {
                    v += noise.sample(rng);
                }
                v = (1.0 - self.haze_blend) * v + self.haze_blend * HAZE_GRAY;
                *out = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// Scene and split parameters of a synthetic benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub num_classes: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub max_objects: usize,
    pub overlap_cap: f64,
    pub min_size: f64,
    pub max_size: f64,
    pub styles: Vec<ClassStyle>,
    pub shift: ShiftProfile,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_classes: 3,
            image_h: 32,
            image_w: 32,
            max_objects: 5,
            overlap_cap: 0.3,
            min_size: 0.15,
            max_size: 0.4,
            styles: default_styles(3),
            shift: ShiftProfile::toy_fog(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        if self.styles.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} class styles for {} classes",
                self.styles.len(),
                self.num_classes
            )));
        }
        if self.image_h == 0 || self.image_w == 0 || self.max_objects == 0 {
            return Err(Error::Config("image size and max objects must be positive".into()));
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return Err(Error::Config("object sizes must satisfy 0 < min ≤ max ≤ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_cap) {
            return Err(Error::Config("overlap cap outside [0, 1]".into()));
        }
        self.shift.validate()
    }

    pub fn image_len(&self) -> usize {
        self.image_h * self.image_w * 3
    }
}

/// One rendered image with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `H × W × 3`, row-major, values in `[0, 1]`.
    pub image: Vec<f64>,
    pub labels: Labels,
    pub domain: Domain,
    pub index: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of stream `stream` for sample `(seed, split, index)`.
pub fn sample_seed(seed: u64, split: Split, index: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ split.id()) ^ index) ^ splitmix64(stream)
}

const PLACEMENT_TRIES: usize = 64;
/// Largest fraction of a box that a later box may cover.
const MAX_COVER: f64 = 0.5;

fn covered_fraction(a: &BBox, by: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = by.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    iw * ih / a.area()
}

/// Renders the source-domain appearance of a scene.
pub fn render_scene(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, Labels) {
    let n = rng.gen_range(1..=cfg.max_objects);
    let mut labels = Labels::default();
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let w = rng.gen_range(cfg.min_size..=cfg.max_size);
            let h = rng.gen_range(cfg.min_size..=cfg.max_size);
            let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
            let b = BBox::new(cx, cy, w, h);
            let ok = labels
                .boxes
                .iter()
                .all(|o| iou(o, &b) <= cfg.overlap_cap && covered_fraction(o, &b) <= MAX_COVER);
            if ok {
                labels.boxes.push(b);
                labels.classes.push(rng.gen_range(1..=cfg.num_classes));
                placed = true;
                break;
            }
        }
        // A crowded scene keeps the objects placed so far.
        if !placed {
            break;
        }
    }

    let (hh, ww) = (cfg.image_h, cfg.image_w);
    let level = rng.gen_range(0.15..0.35);
    let gx = rng.gen_range(-0.1..0.1);
    let gy = rng.gen_range(-0.1..0.1);
    let grain = Normal::new(0.0, 0.02).expect("positive sigma");
    let mut img = vec![0.0; cfg.image_len()];
    for y in 0..hh {
        for x in 0..ww {
            let u = (x as f64 + 0.5) / ww as f64 - 0.5;
            let v = (y as f64 + 0.5) / hh as f64 - 0.5;
            let base = level + gx * u + gy * v;
            for c in 0..3 {
                img[(y * ww + x) * 3 + c] = base + grain.sample(rng);
            }
        }
    }
    for (b, &cls) in labels.boxes.iter().zip(&labels.classes) {
        let style = cfg.styles[cls - 1];
        let (x0, y0, x1, y1) = b.corners();
        for y in 0..hh {
            let py = (y as f64 + 0.5) / hh as f64;
            if py < y0 || py >= y1 {
                continue;
            }
            for x in 0..ww {
                let px = (x as f64 + 0.5) / ww as f64;
                if px < x0 || px >= x1 {
                    continue;
                }
                let local = (px - x0) / (x1 - x0);
                let tex = 0.7 + 0.3 * (std::f64::consts::TAU * style.stripes * local).cos();
                for c in 0..3 {
                    img[(y * ww + x) * 3 + c] = style.color[c] * tex + grain.sample(rng);
                }
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    (img, labels)
}

const RENDER_STREAM: u64 = 0;
const SHIFT_STREAM: u64 = 1;

/// Deterministic sample `index` of `split`. Target splits apply `cfg.shift`
/// after rendering.
pub fn generate_scene(cfg: &SceneConfig, seed: u64, split: Split, index: u64) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, split, index, RENDER_STREAM));
    let (mut image, labels) = render_scene(cfg, &mut rng);
    if split.domain() == Domain::Target {
        let mut srng = ChaCha8Rng::seed_from_u64(sample_seed(seed, split, index, SHIFT_STREAM));
        cfg.shift.apply(&mut image, &mut srng);
    }
    SceneSample {
        image,
        labels,
        domain: split.domain(),
        index,
    }
}

/// Photometric and geometric augmentation constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Largest translation, in pixels, on each axis.
    pub jitter_px: f64,
    pub weak_noise: f64,
    pub strong_noise: f64,
    /// Channels are scaled by a factor drawn from `[1 − s, 1 + s]`.
    pub channel_scale: f64,
    /// Probability of erasing one random rectangle.
    pub erase_prob: f64,
    /// Largest erased side as a fraction of the image side.
    pub erase_max: f64,
    /// Random horizontal and vertical mirroring of the weak view.
    pub flip: bool,
    /// Strong views blend toward gray 0.5 by a factor drawn from `[0, c]`.
    pub contrast_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            jitter_px: 1.0,
            weak_noise: 0.01,
            strong_noise: 0.06,
            channel_scale: 0.2,
            erase_prob: 0.5,
            erase_max: 0.25,
            flip: false,
            contrast_jitter: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            jitter_px: 0.0,
            weak_noise: 0.0,
            strong_noise: 0.0,
            channel_scale: 0.0,
            erase_prob: 0.0,
            erase_max: 0.0,
            flip: false,
            contrast_jitter: 0.0,
        }
    }
}

/// An augmented image with correspondingly adjusted labels.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Vec<f64>,
    pub labels: Labels,
}

/// Translates the image by `(dx, dy)` pixels with bilinear resampling and
/// edge clamping, shifting and clipping every box.
pub fn translate(image: &[f64], labels: &Labels, h: usize, w: usize, dx: f64, dy: f64) -> View {
    let mut out = vec![0.0; image.len()];
    let at = |x: usize, y: usize, c: usize| image[(y * w + x) * 3 + c];
    for y in 0..h {
        for x in 0..w {
            let sx = (x as f64 - dx).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 - dy).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..3 {
                let top = at(x0, y0, c) * (1.0 - fx) + at(x1, y0, c) * fx;
                let bot = at(x0, y1, c) * (1.0 - fx) + at(x1, y1, c) * fx;
                out[(y * w + x) * 3 + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let shifted = Labels {
        boxes: labels
            .boxes
            .iter()
            .map(|b| b.translated(dx / w as f64, dy / h as f64).clipped())
            .collect(),
        classes: labels.classes.clone(),
    };
    View {
        image: out,
        labels: shifted,
    }
}

/// Mirrors the image and labels left-right and/or top-bottom.
pub fn mirror(view: &View, h: usize, w: usize, horizontal: bool, vertical: bool) -> View {
    let mut out = vec![0.0; view.image.len()];
    for y in 0..h {
        let sy = if vertical { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if horizontal { w - 1 - x } else { x };
            out[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&view.image[(sy * w + sx) * 3..(sy * w + sx) * 3 + 3]);
        }
    }
    let boxes = view
        .labels
        .boxes
        .iter()
        .map(|b| {
            BBox::new(
                if horizontal { 1.0 - b.cx } else { b.cx },
                if vertical { 1.0 - b.cy } else { b.cy },
                b.w,
                b.h,
            )
        })
        .collect();
    View {
        image: out,
        labels: Labels {
            boxes,
            classes: view.labels.classes.clone(),
        },
    }
}

fn add_noise(image: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    for v in image.iter_mut() {
        *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
    }
}

/// Weak view: optional mirroring, random sub-pixel translation plus light
/// noise.
pub fn weak_view(sample: &SceneSample, h: usize, w: usize, aug: &AugmentConfig, rng: &mut ChaCha8Rng) -> View {
    let (dx, dy) = if aug.jitter_px > 0.0 {
        (
            rng.gen_range(-aug.jitter_px..=aug.jitter_px),
            rng.gen_range(-aug.jitter_px..=aug.jitter_px),
        )
    } else {
        (0.0, 0.0)
    };
    let mut v = View {
        image: sample.image.clone(),
        labels: sample.labels.clone(),
    };
    if aug.flip {
        let (fh, fv) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
        v = mirror(&v, h, w, fh, fv);
    }
    if dx != 0.0 || dy != 0.0 {
        v = translate(&v.image, &v.labels, h, w, dx, dy);
    }
    add_noise(&mut v.image, aug.weak_noise, rng);
    v
}

/// Strong view built on the weak view's geometry so that labels stay aligned:
/// heavier noise, per-channel scaling and optional rectangular erasing.
pub fn strong_view(weak: &View, h: usize, w: usize, aug: &AugmentConfig, rng: &mut ChaCha8Rng) -> View {
    let mut img = weak.image.clone();
    if aug.channel_scale > 0.0 {
        let s: Vec<f64> = (0..3)
            .map(|_| rng.gen_range(1.0 - aug.channel_scale..=1.0 + aug.channel_scale))
            .collect();
        for px in img.chunks_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] * s[c]).clamp(0.0, 1.0);
            }
        }
    }
    if aug.contrast_jitter > 0.0 {
        let t = rng.gen_range(0.0..=aug.contrast_jitter);
        for v in &mut img {
            *v = (1.0 - t) * *v + t * HAZE_GRAY;
        }
    }
    if aug.erase_prob > 0.0 && rng.gen_bool(aug.erase_prob.min(1.0)) {
        let eh = ((rng.gen_range(0.0..=aug.erase_max) * h as f64).round() as usize).max(1).min(h);
        let ew = ((rng.gen_range(0.0..=aug.erase_max) * w as f64).round() as usize).max(1).min(w);
        let y0 = rng.gen_range(0..=h - eh);
        let x0 = rng.gen_range(0..=w - ew);
        let fill = rng.gen_range(0.0..1.0);
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                for c in 0..3 {
                    img[(y * w + x) * 3 + c] = fill;
                }
            }
        }
    }
    add_noise(&mut img, aug.strong_noise, rng);
    View {
        image: img,
        labels: weak.labels.clone(),
    }
}

/// A generated split together with the parameters that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub seed: u64,
    pub num_classes: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub shift: ShiftProfile,
    pub samples: Vec<SceneSample>,
}

const DATA_MAGIC: &[u8; 8] = b"SFODDATA";
pub const DATA_VERSION: u32 = 1;

impl Dataset {
    pub fn generate(cfg: &SceneConfig, seed: u64, split: Split, count: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Dataset {
            split,
            seed,
            num_classes: cfg.num_classes,
            image_h: cfg.image_h,
            image_w: cfg.image_w,
            shift: cfg.shift,
            samples: (0..count as u64).map(|i| generate_scene(cfg, seed, split, i)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATA_MAGIC)?;
        w.write_u32::<LittleEndian>(DATA_VERSION)?;
        w.write_u32::<LittleEndian>(self.split.id() as u32)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u32::<LittleEndian>(self.num_classes as u32)?;
        w.write_u32::<LittleEndian>(self.image_h as u32)?;
        w.write_u32::<LittleEndian>(self.image_w as u32)?;
        for v in self.shift.to_vec() {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_u32::<LittleEndian>(self.samples.len() as u32)?;
        for s in &self.samples {
            w.write_u64::<LittleEndian>(s.index)?;
            w.write_u32::<LittleEndian>(s.labels.len() as u32)?;
            for (b, &c) in s.labels.boxes.iter().zip(&s.labels.classes) {
                w.write_u32::<LittleEndian>(c as u32)?;
                for v in b.to_array() {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
            for &v in &s.image {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATA_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != DATA_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let split = match r.read_u32::<LittleEndian>()? {
            1 => Split::SourceTrain,
            2 => Split::SourceTest,
            3 => Split::TargetTrain,
            4 => Split::TargetTest,
            other => return Err(Error::Format(format!("unknown split id {other}"))),
        };
        let seed = r.read_u64::<LittleEndian>()?;
        let num_classes = r.read_u32::<LittleEndian>()? as usize;
        let image_h = r.read_u32::<LittleEndian>()? as usize;
        let image_w = r.read_u32::<LittleEndian>()? as usize;
        if num_classes == 0 || image_h == 0 || image_w == 0 || image_h * image_w > 1 << 24 {
            return Err(Error::Format("invalid dataset header".into()));
        }
        let mut sv = [0.0; 12];
        r.read_f64_into::<LittleEndian>(&mut sv)?;
        let shift = ShiftProfile::from_slice(&sv);
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let index = r.read_u64::<LittleEndian>()?;
            let n = r.read_u32::<LittleEndian>()? as usize;
            if n > 1 << 16 {
                return Err(Error::Format(format!("sample with {n} objects")));
            }
            let mut labels = Labels::default();
            for _ in 0..n {
                let c = r.read_u32::<LittleEndian>()? as usize;
                if c == 0 || c > num_classes {
                    return Err(Error::Format(format!("class {c} outside 1..={num_classes}")));
                }
                let mut b = [0.0; 4];
                r.read_f64_into::<LittleEndian>(&mut b)?;
                labels.boxes.push(BBox::from_slice(&b));
                labels.classes.push(c);
            }
            let mut image = vec![0.0; image_h * image_w * 3];
            r.read_f64_into::<LittleEndian>(&mut image)?;
            samples.push(SceneSample {
                image,
                labels,
                domain: split.domain(),
                index,
            });
        }
        Ok(Dataset {
            split,
            seed,
            num_classes,
            image_h,
            image_w,
            shift,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}
