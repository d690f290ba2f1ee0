//! Adam with per-group learning rates and global-norm clipping.

use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::{Grads, ParamGroup, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr_nvil: f64,
    pub lr_rest: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm above which gradients are rescaled.
    pub clip: Option<f64>,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Steps skipped because of non-finite gradients.
    pub skipped: u64,
}

/// What an update did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub applied: bool,
    pub grad_norm: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr_nvil: f64, lr_rest: f64) -> Self {
        let zeros: Vec<Vec<T>> = store.entries().iter().map(|e| vec![T::zero(); e.value.len()]).collect();
        Self {
            lr_nvil,
            lr_rest,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
            t: 0,
            m: zeros.clone(),
            v: zeros,
            skipped: 0,
        }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip = Some(clip);
        self
    }

    fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Nvil => self.lr_nvil,
            ParamGroup::Rest => self.lr_rest,
        }
    }

    /// Applies one update. Non-finite gradients leave parameters and state
    /// untouched and bump `skipped`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> StepReport {
        let norm = grads
            .by_param
            .iter()
            .flatten()
            .map(|&v| to_f64(v).powi(2))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            self.skipped += 1;
            let bad = store
                .ids()
                .find(|&id| grads.get(id).iter().any(|v| !v.is_finite()))
                .map_or("?", |id| store.entry(id).name.as_str());
            log::warn!(
                "skipping update with non-finite gradient in {bad} (total skipped: {})",
                self.skipped
            );
            return StepReport {
                applied: false,
                grad_norm: norm,
            };
        }
        let factor = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let lr = self.lr(store.entry(id).group);
            let step = lit::<T>(lr / bc1);
            let (b1t, b2t) = (lit::<T>(b1), lit::<T>(b2));
            let (c1, c2) = (lit::<T>(1.0 - b1), lit::<T>(1.0 - b2));
            let inv_bc2 = lit::<T>(1.0 / bc2);
            let eps = lit::<T>(self.eps);
            let f = lit::<T>(factor);
            let g = grads.get(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = store.value_mut(id);
            for k in 0..p.len() {
                let gk = g[k] * f;
                m[k] = b1t * m[k] + c1 * gk;
                v[k] = b2t * v[k] + c2 * gk * gk;
                p[k] -= step * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
        StepReport {
            applied: true,
            grad_norm: norm,
        }
    }
}
