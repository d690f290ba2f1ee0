//! Amortised inference: the recognition networks drive the step engine on
//! target images, recording posterior and prior terms of every step.

use rand::Rng;

use super::generative::log_prior_of;
use super::{DoodModel, LatentSource, RunState, StepOut, Trajectory};
use crate::nn::Ctx;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor};

/// Result of running the recognition model on a batch.
pub struct Inference<'g, T: Scalar> {
    pub steps: Vec<StepOut<'g, T>>,
    pub state: RunState<'g, T>,
    /// Final reconstruction, differentiable through every stroke.
    pub canvas: Tensor<'g, T>,
    /// `log p(x | z)`, `[n]`.
    pub log_lik: Tensor<'g, T>,
    /// Target features shared by the posterior and the baseline.
    pub target_features: Tensor<'g, T>,
}

impl<'g, T: Scalar> Inference<'g, T> {
    pub fn n(&self) -> usize {
        self.state.n
    }

    /// `log p(z)` summed over steps, `[n]`.
    pub fn log_prior(&self) -> Result<Tensor<'g, T>> {
        match log_prior_of(&self.steps)? {
            Some(t) => Ok(t),
            None => Ok(self.log_lik.scale(T::zero())),
        }
    }

    /// `log q(z | x)` summed over steps, `[n]`.
    pub fn log_posterior(&self) -> Result<Tensor<'g, T>> {
        let mut acc = self.log_lik.scale(T::zero());
        for s in &self.steps {
            for term in [&s.log_q_o, &s.log_q_l, &s.log_q_s].into_iter().flatten() {
                acc = acc.add(term)?;
            }
        }
        Ok(acc)
    }

    /// Number of present strokes per image.
    pub fn stroke_counts(&self) -> Vec<usize> {
        (0..self.n())
            .map(|i| self.steps.iter().take_while(|s| s.present[i]).count())
            .collect()
    }
}

impl<T: Scalar> DoodModel<T> {
    /// Infers latents for targets `x: [n, H, W]`, running at most `t_max`
    /// steps (stopping once every run has stopped).
    pub fn infer<'g, R: Rng + ?Sized>(
        &self,
        ctx: &Ctx<'g, T>,
        x: &Tensor<'g, T>,
        t_max: usize,
        rng: &mut R,
    ) -> Result<Inference<'g, T>> {
        let n = x.dim(0);
        let mut state = self.start(ctx, n, Some(*x))?;
        let mut steps = Vec::new();
        while state.t < t_max && state.alive.iter().any(|&a| a) {
            steps.push(self.step(ctx, &mut state, LatentSource::Posterior, rng)?);
        }
        let canvas = self.canvas_of(ctx, &state)?;
        let log_lik = self.image_log_likelihood(ctx, &canvas, x)?;
        let target_features = state.target.as_ref().expect("target set").features;
        Ok(Inference {
            steps,
            state,
            canvas,
            log_lik,
            target_features,
        })
    }

    /// Plain-valued posterior trajectories of an inference.
    pub fn inferred_trajectories(&self, inf: &Inference<'_, T>) -> Vec<Trajectory<T>> {
        self.trajectories(&inf.steps, inf.n())
    }
}
