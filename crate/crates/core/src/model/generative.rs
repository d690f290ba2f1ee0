//! Sampling and scoring under the generative model.

use rand::Rng;

use super::{DoodModel, LatentSource, RunState, StepOut, Trajectory};
use crate::affine::transform_control_points;
use crate::nn::dist::laplace_log_prob;
use crate::nn::Ctx;
use crate::renderer::{normalize_canvas, render_stroke};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Graph, Result, Tensor};

/// Images and latents of an unconditional rollout.
#[derive(Clone, Debug)]
pub struct Rollout<T> {
    pub images: Vec<Vec<T>>,
    pub trajectories: Vec<Trajectory<T>>,
    /// `log p(z)` of each sampled trajectory.
    pub log_prior: Vec<T>,
}

/// Sum of the per-step prior terms, `[n]`.
pub fn log_prior_of<'g, T: Scalar>(steps: &[StepOut<'g, T>]) -> Result<Option<Tensor<'g, T>>> {
    let mut acc: Option<Tensor<'g, T>> = None;
    for s in steps {
        let term = s.log_p_o.add(&s.log_p_l)?.add(&s.log_p_s)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(acc)
}

/// Plain-valued pixel log-likelihood `sum_hw log Laplace(x; canvas, b)`.
pub fn image_likelihood<T: Scalar>(canvas: &[T], x: &[T], scale: T) -> T {
    canvas
        .iter()
        .zip(x)
        .map(|(&c, &v)| crate::nn::dist::laplace_log_prob_value(c, scale, v))
        .sum()
}

impl<T: Scalar> DoodModel<T> {
    /// Pixel log-likelihood of targets `x` under canvases, `[n]`.
    pub fn image_log_likelihood<'g>(
        &self,
        ctx: &Ctx<'g, T>,
        canvas: &Tensor<'g, T>,
        x: &Tensor<'g, T>,
    ) -> Result<Tensor<'g, T>> {
        let n = canvas.dim(0);
        let b = self.likelihood_scale(ctx);
        laplace_log_prob(canvas, &b, x)?
            .reshape(&[n, canvas.numel() / n])?
            .sum_axis(1)
    }

    /// Runs prior steps from `st` until every run has stopped or `t_max`
    /// steps have been taken in total.
    pub fn continue_rollout<'g, R: Rng + ?Sized>(
        &self,
        ctx: &Ctx<'g, T>,
        st: &mut RunState<'g, T>,
        temperature: T,
        rng: &mut R,
    ) -> Result<Vec<StepOut<'g, T>>> {
        let mut steps = Vec::new();
        while st.t < self.cfg.t_max && st.alive.iter().any(|&a| a) {
            steps.push(self.step(ctx, st, LatentSource::Prior { temperature }, rng)?);
        }
        Ok(steps)
    }

    /// Samples `n` images from the prior. `temperature` in `(0, 1]` scales
    /// mixture scales and sharpens mixture weights.
    pub fn gen_rollout<R: Rng + ?Sized>(&self, n: usize, temperature: T, rng: &mut R) -> Result<Rollout<T>> {
        if !(temperature > T::zero() && temperature <= T::one()) {
            return Err(crate::tensor::invalid("gen_rollout", format!("temperature {temperature} outside (0, 1]")));
        }
        let g = Graph::new();
        let ctx = self.ctx(&g);
        let mut st = self.start(&ctx, n, None)?;
        let steps = self.continue_rollout(&ctx, &mut st, temperature, rng)?;
        let canvas = self.canvas_of(&ctx, &st)?.to_vec();
        let area = canvas.len() / n;
        let log_prior = match log_prior_of(&steps)? {
            Some(t) => t.to_vec(),
            None => vec![T::zero(); n],
        };
        Ok(Rollout {
            images: canvas.chunks(area).map(<[T]>::to_vec).collect(),
            trajectories: self.trajectories(&steps, n),
            log_prior,
        })
    }

    /// `log p(z)` of given trajectories under the prior, replaying them
    /// through the generative networks.
    pub fn log_prior(&self, trajs: &[Trajectory<T>]) -> Result<Vec<T>> {
        let n = trajs.len();
        let g = Graph::new();
        let ctx = self.ctx(&g);
        let mut st = self.start(&ctx, n, None)?;
        // replayed latents consume no randomness
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut steps = Vec::new();
        let len = trajs.iter().map(|t| t.steps.len()).max().unwrap_or(0);
        while st.t < len.min(self.cfg.t_max) && st.alive.iter().any(|&a| a) {
            steps.push(self.step(&ctx, &mut st, LatentSource::Fixed(trajs), &mut rng)?);
        }
        Ok(match log_prior_of(&steps)? {
            Some(t) => t.to_vec(),
            None => vec![T::zero(); n],
        })
    }

    /// Differentiable rendering of explicit strokes for one image:
    /// canonical `points: [m, J, 2]` placed by `matrix: [m, 6]`.
    pub fn render_strokes<'g>(
        &self,
        ctx: &Ctx<'g, T>,
        points: &Tensor<'g, T>,
        matrix: &Tensor<'g, T>,
        sigma: &Tensor<'g, T>,
        s_slope: &Tensor<'g, T>,
    ) -> Result<Tensor<'g, T>> {
        let hw = self.cfg.image_size;
        let cp = transform_control_points(points, matrix, hw, hw)?;
        let strokes = render_stroke(&cp, sigma, s_slope, self.cfg.samples, hw, hw, self.cfg.literal_raster)?;
        let sum = strokes.sum_axis(0)?.reshape(&[1, hw, hw])?;
        normalize_canvas(&sum, &self.g_slope(ctx))
    }

    /// Renders the present strokes of each trajectory with their recorded
    /// placement and render parameters.
    pub fn render_trajectories(&self, trajs: &[Trajectory<T>]) -> Result<Vec<Vec<T>>> {
        let c = &self.cfg;
        trajs.iter().map(|tr| tr.render(c.image_size, c.samples, c.literal_raster)).collect()
    }

    /// Per-pixel canvas whose normalised value equals `x` (clamped below 1),
    /// i.e. `g * atanh(x)`. Used to resume drawing on an existing image.
    pub fn canvas_sum_for(&self, x: &[T]) -> Vec<T> {
        let g = self.g_slope_value();
        let top = T::one() - lit(1e-6);
        x.iter().map(|&v| g * v.max(T::zero()).min(top).atanh()).collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{ModelConfig, StrokeStep};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            glimpse: 6,
            t_max: 3,
            points: 4,
            samples: 20,
            mixtures: 3,
            hidden: 8,
            features: 8,
            mlp_hidden: vec![12],
            cnn_channels: vec![2, 3],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn rollout_is_unary_bounded_and_deterministic() {
        let model = DoodModel::<f64>::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(0));
        let a = model.gen_rollout(8, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = model.gen_rollout(8, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.images, b.images);
        for (img, tr) in a.images.iter().zip(&a.trajectories) {
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(tr.is_unary());
            assert!(tr.num_strokes() <= 3);
        }
    }

    #[test]
    fn joint_log_prior_matches_replay() {
        let model = DoodModel::<f64>::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(2));
        let r = model.gen_rollout(6, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let replay = model.log_prior(&r.trajectories).unwrap();
        for (a, b) in r.log_prior.iter().zip(&replay) {
            assert!(a.is_finite() && *a > -1e6);
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn rendering_recorded_trajectories_reproduces_rollout() {
        let model = DoodModel::<f64>::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(4));
        let r = model.gen_rollout(5, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let imgs = model.render_trajectories(&r.trajectories).unwrap();
        for (a, b) in imgs.iter().zip(&r.images) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forced_stop_gives_empty_canvas() {
        let model = DoodModel::<f64>::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(6));
        let stop = Trajectory {
            steps: vec![StrokeStep {
                present: false,
                layout: [0.0, 0.0, 1.0, 0.0],
                points: vec![[0.0; 2]; 4],
                matrix: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                sigma: 1.0,
                s_slope: 1.0,
            }],
            g_slope: model.g_slope_value(),
        };
        let g = Graph::new();
        let ctx = model.ctx(&g);
        let mut st = model.start(&ctx, 1, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model
            .step(&ctx, &mut st, LatentSource::Fixed(std::slice::from_ref(&stop)), &mut rng)
            .unwrap();
        assert!(!out.present[0]);
        assert!(model.canvas_of(&ctx, &st).unwrap().to_vec().iter().all(|&v| v == 0.0));
        assert!(!st.alive[0]);
    }

    #[test]
    fn low_temperature_rollout_is_deterministic() {
        let mut cfg = tiny_config();
        cfg.presence_init_bias = Some(8.0);
        let model = DoodModel::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let a = model.gen_rollout(2, 1e-6, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = model.gen_rollout(2, 1e-6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        // presence draws still differ in principle, but sigmoid(8) makes them
        // all present; layouts and strokes are modal
        for (x, y) in a.images.iter().zip(&b.images) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn presence_prior_gating_and_init() {
        let mut cfg = tiny_config();
        cfg.presence_init_bias = Some(8.0);
        let model = DoodModel::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(10));
        let g = Graph::new();
        let ctx = model.ctx(&g);
        let mut st = model.start(&ctx, 2, None).unwrap();
        st.alive = vec![true, false];
        let out = model
            .step(&ctx, &mut st, LatentSource::Prior { temperature: 1.0 }, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let p = out.p_on.to_vec();
        assert!((p[0] - 1.0 / (1.0 + (-8.0f64).exp())).abs() < 1e-12);
        assert_eq!(p[1], 0.0);
        assert!(!out.present[1]);
    }

    #[test]
    fn likelihood_formula() {
        let x = [0.1, 0.5, 0.9, 0.0];
        let c = [0.1, 0.5, 0.9, 0.0];
        let b = 0.3;
        assert!((image_likelihood(&c, &x, b) - 4.0 * -(2.0 * b as f64).ln()).abs() < 1e-12);
        let far = [0.3, 0.1, 0.5, 0.2];
        let farther: Vec<f64> = x.iter().zip(&far).map(|(a, f)| a + 2.0 * (f - a)).collect();
        let d: f64 = x.iter().zip(&far).map(|(a, f)| (a - f as &f64).abs()).sum();
        let drop = image_likelihood(&far, &x, b) - image_likelihood(&farther, &x, b);
        assert!((drop - d / b).abs() < 1e-12);
    }

    #[test]
    fn tensor_likelihood_matches_formula() {
        let mut cfg = tiny_config();
        cfg.image_size = 2;
        cfg.glimpse = 2;
        let model = DoodModel::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(11));
        let g = Graph::new();
        let ctx = model.ctx(&g);
        let c = vec![0.2, 0.4, 0.6, 0.8];
        let x = vec![0.25, 0.1, 0.7, 1.0];
        let lp = model
            .image_log_likelihood(&ctx, &g.constant(&[1, 2, 2], c.clone()).unwrap(), &g.constant(&[1, 2, 2], x.clone()).unwrap())
            .unwrap()
            .item();
        let b = model.likelihood_scale(&ctx).item();
        assert!((lp - image_likelihood(&c, &x, b)).abs() < 1e-10);
    }
}
