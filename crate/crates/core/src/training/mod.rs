//! Amortised variational training.

mod adam;
mod objective;

pub use adam::{Adam, StepReport};
pub use objective::{baseline_loss, learning_signals, reinforce_term, LossBreakdown, NvilStats, Objective};

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::DoodModel;
use crate::scalar::{lit, Scalar};
use crate::tensor::{Graph, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite {term}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { term: &'static str, step: Option<usize> },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("image {index} has {got} pixels, model expects {want}")]
    ImageSize { index: usize, got: usize, want: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimisation hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Weight of the presence KL.
    pub beta: f64,
    pub lr_nvil: f64,
    pub lr_rest: f64,
    pub clip_norm: f64,
    pub nvil_decay: f64,
    pub steps: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            beta: 4.0,
            lr_nvil: 1e-3,
            lr_rest: 1e-4,
            clip_norm: 10.0,
            nvil_decay: 0.9,
            steps: 10_000,
            log_every: 10,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("train.batch_size must be positive".into());
        }
        for (name, v) in [("lr_nvil", self.lr_nvil), ("lr_rest", self.lr_rest), ("clip_norm", self.clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("train.{name} must be positive"));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err("train.beta must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.nvil_decay) {
            return Err("train.nvil_decay must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub step: u64,
    pub elbo: f64,
    pub recon: f64,
    pub kl_l: f64,
    pub kl_s: f64,
    pub kl_o: f64,
    #[serde(rename = "L_b")]
    pub l_b: f64,
    pub mean_strokes: f64,
}

impl Metrics {
    fn from_breakdown(step: u64, b: &LossBreakdown) -> Self {
        Self {
            step,
            elbo: b.elbo,
            recon: b.recon,
            kl_l: b.kl_l,
            kl_s: b.kl_s,
            kl_o: b.kl_o,
            l_b: b.baseline_loss,
            mean_strokes: b.mean_strokes,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")
    }

    /// `-(recon - kl_l - kl_s - beta kl_o) + L_b`.
    pub fn total(&self, beta: f64) -> f64 {
        -(self.recon - self.kl_l - self.kl_s - beta * self.kl_o) + self.l_b
    }
}

/// Model plus everything needed to continue optimising it.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub model: DoodModel<T>,
    pub cfg: TrainConfig,
    pub adam: Adam<T>,
    pub nvil: NvilStats,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: DoodModel<T>, cfg: TrainConfig) -> Self {
        let adam = Adam::new(&model.params, cfg.lr_nvil, cfg.lr_rest).with_clip(cfg.clip_norm);
        Self {
            adam,
            nvil: NvilStats::new(cfg.nvil_decay),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            model,
            cfg,
        }
    }

    /// One optimisation step on the given images.
    pub fn train_step(&mut self, batch: &[&[T]]) -> Result<Metrics, TrainError> {
        let hw = self.model.cfg.image_size;
        let area = hw * hw;
        for (i, img) in batch.iter().enumerate() {
            if img.len() != area {
                return Err(TrainError::ImageSize {
                    index: i,
                    got: img.len(),
                    want: area,
                });
            }
        }
        let (grads, breakdown) = {
            let g = Graph::new();
            let ctx = self.model.ctx(&g);
            let x = g.constant(&[batch.len(), hw, hw], batch.concat())?;
            let inf = self.model.infer(&ctx, &x, self.model.cfg.t_max, &mut self.rng)?;
            let obj = self.model.objective(&ctx, &inf, self.cfg.beta, &mut self.nvil)?;
            obj.total()?.backward()?;
            (g.param_grads(&self.model.params), obj.breakdown)
        };
        self.adam.step(&mut self.model.params, &grads);
        let m = Metrics::from_breakdown(self.step, &breakdown);
        self.step += 1;
        Ok(m)
    }

    /// Draws a minibatch of distinct indices.
    pub fn sample_batch(&mut self, len: usize) -> Vec<usize> {
        let k = self.cfg.batch_size.min(len);
        sample(&mut self.rng, len, k).into_vec()
    }

    /// Runs until `self.step` reaches `until`, calling `on_step` after every
    /// update.
    pub fn train<F>(&mut self, data: &[Vec<T>], until: u64, mut on_step: F) -> Result<(), TrainError>
    where
        F: FnMut(&Self, &Metrics) -> Result<(), TrainError>,
    {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        while self.step < until {
            let idx = self.sample_batch(data.len());
            let batch: Vec<&[T]> = idx.iter().map(|&i| data[i].as_slice()).collect();
            let m = self.train_step(&batch)?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}

/// Mean of `total` over a window of metrics.
pub fn mean_total(metrics: &[Metrics], beta: f64) -> f64 {
    metrics.iter().map(|m| m.total(beta)).sum::<f64>() / metrics.len().max(1) as f64
}

/// Pixel data converted to the trainer's scalar type.
pub fn to_scalar_images<T: Scalar>(images: &[Vec<f32>]) -> Vec<Vec<T>> {
    images.iter().map(|im| im.iter().map(|&v| lit(v as f64)).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generative::tests::tiny_config;

    fn images(n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|_| (0..256).map(|_| if rand::Rng::random::<f64>(&mut rng) < 0.1 { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    fn trainer(seed: u64) -> Trainer<f64> {
        let model = DoodModel::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(seed));
        Trainer::new(
            model,
            TrainConfig {
                batch_size: 4,
                seed,
                ..TrainConfig::default()
            },
        )
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut t = trainer(0);
        assert!(matches!(t.train(&[], 1, |_, _| Ok(())), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn wrong_image_size_is_an_error() {
        let mut t = trainer(0);
        assert!(matches!(t.train_step(&[&[0.0; 10]]), Err(TrainError::ImageSize { .. })));
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let data = images(12);
        let mut a = trainer(1);
        let mut log_a = Vec::new();
        a.train(&data, 3, |_, m| {
            log_a.push(m.clone());
            Ok(())
        })
        .unwrap();
        let snapshot = a.clone();
        a.train(&data, 5, |_, m| {
            log_a.push(m.clone());
            Ok(())
        })
        .unwrap();

        let mut b = trainer(1);
        let mut log_b = Vec::new();
        b.train(&data, 5, |_, m| {
            log_b.push(m.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(log_a, log_b);

        let mut c = snapshot;
        let mut log_c = Vec::new();
        c.train(&data, 5, |_, m| {
            log_c.push(m.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(log_c, log_a[3..]);
    }

    #[test]
    fn metrics_serialise_with_the_documented_keys() {
        let m = Metrics {
            step: 3,
            elbo: -1.0,
            recon: -0.5,
            kl_l: 0.1,
            kl_s: 0.2,
            kl_o: 0.2,
            l_b: 4.0,
            mean_strokes: 1.5,
        };
        let mut buf = Vec::new();
        m.write_jsonl(&mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        for k in ["step", "elbo", "recon", "kl_l", "kl_s", "kl_o", "L_b", "mean_strokes"] {
            assert!(keys.contains(&k.to_string()), "{k}");
        }
        assert_eq!(keys.len(), 8);
        assert!(buf.ends_with(b"\n"));
    }
}
