//! Adaptive-moment descent with bias correction, decoupled weight decay and
//! global-norm gradient clipping.

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to matrices only; vectors (biases, norms) are not decayed.
    pub weight_decay: f64,
    /// Gradients are rescaled to this global L2 norm when larger; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment estimates for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        })
    }

    /// Global L2 norm of a gradient list.
    pub fn grad_norm(grads: &[Tensor]) -> f64 {
        grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// One update. Returns the pre-clipping gradient norm.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Mismatch(format!(
                "{} parameters and {} gradients for an optimizer over {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        let norm = Self::grad_norm(grads);
        if !norm.is_finite() {
            return Err(Error::Numerics("non-finite gradient".into()));
        }
        let c = self.config;
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Mismatch(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let decay = if p.rank() >= 2 { c.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv * scale;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gv;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gv * gv;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *pv -= c.lr * (mh / (vh.sqrt() + c.eps) + decay * *pv);
            }
        }
        Ok(norm)
    }

    pub fn write_archive(&self, archive: &mut Archive, names: &[String], prefix: &str) {
        archive.insert(format!("{prefix}step"), Tensor::scalar(self.step as f64));
        for (n, (m, v)) in names.iter().zip(self.m.iter().zip(&self.v)) {
            archive.insert(format!("{prefix}m/{n}"), m.clone());
            archive.insert(format!("{prefix}v/{n}"), v.clone());
        }
    }

    pub fn read_archive(&mut self, archive: &Archive, names: &[String], prefix: &str) -> Result<()> {
        let step = archive.require(&format!("{prefix}step"))?.item();
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::Format(format!("invalid optimizer step {step}")));
        }
        for (i, n) in names.iter().enumerate() {
            for (store, key) in [(&mut self.m, "m"), (&mut self.v, "v")] {
                let t = archive.require(&format!("{prefix}{key}/{n}"))?;
                if t.shape() != store[i].shape() {
                    return Err(Error::Mismatch(format!("optimizer state {key}/{n} has shape {:?}", t.shape())));
                }
                store[i] = t.clone();
            }
        }
        self.step = step as u64;
        Ok(())
    }
}
