use rand::Rng;

use super::{DoodModel, StrokeStep, Trajectory, SCALE_FLOOR};
use crate::affine::{extract_glimpse, layout_to_matrix, transform_control_points, LAYOUT_DIM};
use crate::nn::dist::{bernoulli_log_prob, gaussian_log_prob, gaussian_rsample, gmm_log_prob, GmmParams};
use crate::nn::Ctx;
use crate::renderer::{normalize_canvas, render_stroke};
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::{Result, Tensor};

/// Stroke control-point means are squashed to `[-STROKE_RANGE, STROKE_RANGE]`,
/// slightly beyond the glimpse frame.
pub const STROKE_RANGE: f64 = 1.2;

/// Where a step takes its latent values from.
#[derive(Clone, Copy)]
pub enum LatentSource<'a, T: Scalar> {
    /// Sample every latent from the prior.
    Prior { temperature: T },
    /// Sample from the recognition model given the run's target images.
    Posterior,
    /// Replay the given trajectories (one per image), scoring them under the
    /// prior.
    Fixed(&'a [Trajectory<T>]),
}

/// Target images and their features for guided recognition.
#[derive(Clone)]
pub struct Target<'g, T: Scalar> {
    pub x: Tensor<'g, T>,
    pub features: Tensor<'g, T>,
    /// Total ink per image.
    pub ink: Vec<T>,
}

/// Recurrent state of a batch of runs.
#[derive(Clone)]
pub struct RunState<'g, T: Scalar> {
    pub t: usize,
    pub n: usize,
    /// Sum of the present stroke images; differentiable.
    pub canvas_sum: Tensor<'g, T>,
    /// Normalised canvas-so-far, detached.
    pub canvas: Tensor<'g, T>,
    pub h_layout: Tensor<'g, T>,
    pub h_stroke: Tensor<'g, T>,
    pub alive: Vec<bool>,
    pub target: Option<Target<'g, T>>,
}

/// Everything one step produced; per-image quantities are `[n]` tensors.
pub struct StepOut<'g, T: Scalar> {
    pub t: usize,
    pub alive_prev: Vec<bool>,
    pub present: Vec<bool>,
    /// `alive_prev` as 0/1 values.
    pub alive_mask: Tensor<'g, T>,
    /// `present` as 0/1 values.
    pub present_mask: Tensor<'g, T>,
    pub layout: Tensor<'g, T>,
    pub points: Tensor<'g, T>,
    pub matrix: Tensor<'g, T>,
    pub sigma: Tensor<'g, T>,
    pub s_slope: Tensor<'g, T>,
    pub stroke: Tensor<'g, T>,
    pub p_on: Tensor<'g, T>,
    pub q_on: Option<Tensor<'g, T>>,
    /// Masked log-probabilities: presence terms count only while alive,
    /// layout and stroke terms only when present.
    pub log_p_o: Tensor<'g, T>,
    pub log_p_l: Tensor<'g, T>,
    pub log_p_s: Tensor<'g, T>,
    pub log_q_o: Option<Tensor<'g, T>>,
    pub log_q_l: Option<Tensor<'g, T>>,
    pub log_q_s: Option<Tensor<'g, T>>,
    pub q_layout: Option<(Tensor<'g, T>, Tensor<'g, T>)>,
    pub q_stroke: Option<(Tensor<'g, T>, Tensor<'g, T>)>,
    /// Hidden states the step was conditioned on.
    pub h_layout: Tensor<'g, T>,
    pub h_stroke: Tensor<'g, T>,
}

impl<'g, T: Scalar> StepOut<'g, T> {
    /// Plain values of this step for image `i`.
    pub fn values(&self, i: usize, points: usize) -> StrokeStep<T> {
        let l = self.layout.value();
        let p = self.points.value();
        let m = self.matrix.value();
        StrokeStep {
            present: self.present[i],
            layout: [l[4 * i], l[4 * i + 1], l[4 * i + 2], l[4 * i + 3]],
            points: (0..points)
                .map(|j| [p[(i * points + j) * 2], p[(i * points + j) * 2 + 1]])
                .collect(),
            matrix: std::array::from_fn(|k| m[6 * i + k]),
            sigma: self.sigma.value()[i],
            s_slope: self.s_slope.value()[i],
        }
    }
}

fn mask<'g, T: Scalar>(graph: &'g crate::tensor::Graph<T>, bits: &[bool]) -> Result<Tensor<'g, T>> {
    graph.constant(
        &[bits.len()],
        bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
    )
}

fn positive<'g, T: Scalar>(raw: &Tensor<'g, T>) -> Tensor<'g, T> {
    raw.softplus().add_scalar(lit(SCALE_FLOOR))
}

fn bounded<'g, T: Scalar>(raw: &Tensor<'g, T>, [lo, hi]: [f64; 2]) -> Tensor<'g, T> {
    raw.sigmoid().scale(lit(hi - lo)).add_scalar(lit(lo))
}

/// Blends `new` into `old` where `keep` is 1: `old + keep * (new - old)`.
fn blend<'g, T: Scalar>(old: &Tensor<'g, T>, new: &Tensor<'g, T>, keep: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    let n = keep.numel();
    old.add(&new.sub(old)?.mul(&keep.reshape(&[n, 1])?)?)
}

/// Layout prior mixture: logits `[n, K]`, means and scales `[n, K, 4]`.
pub(crate) struct LayoutGmm<'g, T: Scalar> {
    pub logits: Tensor<'g, T>,
    pub means: Tensor<'g, T>,
    pub scales: Tensor<'g, T>,
}

/// Stroke prior mixtures, one per control point: logits `[n*J, K]`, means
/// and scales `[n*J, K, 2]`.
pub(crate) struct StrokeGmm<'g, T: Scalar> {
    pub logits: Tensor<'g, T>,
    pub means: Tensor<'g, T>,
    pub scales: Tensor<'g, T>,
}

fn sample_rows<T: Scalar, R: Rng + ?Sized>(
    logits: &[T],
    means: &[T],
    scales: &[T],
    k: usize,
    d: usize,
    temperature: T,
    rng: &mut R,
) -> Vec<T> {
    let rows = logits.len() / k;
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let gmm = GmmParams::from_logits(
            &logits[r * k..(r + 1) * k],
            means[r * k * d..(r + 1) * k * d].to_vec(),
            scales[r * k * d..(r + 1) * k * d].to_vec(),
            d,
        );
        out.extend(gmm.sample(rng, temperature).0);
    }
    out
}

impl<T: Scalar> DoodModel<T> {
    /// Fresh state for `n` runs from a blank canvas and zero hidden states.
    /// With a target, its features are computed once for the recognition
    /// side.
    pub fn start<'g>(&self, ctx: &Ctx<'g, T>, n: usize, target: Option<Tensor<'g, T>>) -> Result<RunState<'g, T>> {
        let g = ctx.graph;
        let hw = self.cfg.image_size;
        let target = match target {
            Some(x) => {
                let v = x.value();
                let area = hw * hw;
                Some(Target {
                    x,
                    features: self.nets.enc_image.forward(ctx, &x)?,
                    ink: (0..n).map(|i| v[i * area..(i + 1) * area].iter().copied().sum()).collect(),
                })
            }
            None => None,
        };
        Ok(RunState {
            t: 0,
            n,
            canvas_sum: g.zeros(&[n, hw, hw]),
            canvas: g.zeros(&[n, hw, hw]),
            h_layout: g.zeros(&[n, self.cfg.hidden]),
            h_stroke: g.zeros(&[n, self.cfg.hidden]),
            alive: vec![true; n],
            target,
        })
    }

    /// Normalised canvas of the state, differentiable through every stroke.
    pub fn canvas_of<'g>(&self, ctx: &Ctx<'g, T>, st: &RunState<'g, T>) -> Result<Tensor<'g, T>> {
        normalize_canvas(&st.canvas_sum, &self.g_slope(ctx))
    }

    pub(crate) fn layout_prior<'g>(&self, ctx: &Ctx<'g, T>, inp: &Tensor<'g, T>) -> Result<LayoutGmm<'g, T>> {
        let n = inp.dim(0);
        let k = self.cfg.mixtures;
        let raw = self.nets.prior_layout.forward(ctx, inp)?;
        let logits = raw.slice(1, 0, k)?;
        let means = self.squash_layout(&raw.slice(1, k, k * LAYOUT_DIM)?.reshape(&[n, k, LAYOUT_DIM])?)?;
        let scales = positive(&raw.slice(1, k + k * LAYOUT_DIM, k * LAYOUT_DIM)?.reshape(&[n, k, LAYOUT_DIM])?);
        Ok(LayoutGmm { logits, means, scales })
    }

    pub(crate) fn stroke_prior<'g>(&self, ctx: &Ctx<'g, T>, inp: &Tensor<'g, T>) -> Result<StrokeGmm<'g, T>> {
        let n = inp.dim(0);
        let (j, k) = (self.cfg.points, self.cfg.mixtures);
        let raw = self.nets.prior_stroke.forward(ctx, inp)?.reshape(&[n * j, 5 * k])?;
        let logits = raw.slice(1, 0, k)?;
        let means = raw
            .slice(1, k, 2 * k)?
            .reshape(&[n * j, k, 2])?
            .tanh()
            .scale(lit(STROKE_RANGE));
        let scales = positive(&raw.slice(1, 3 * k, 2 * k)?.reshape(&[n * j, k, 2])?);
        Ok(StrokeGmm { logits, means, scales })
    }

    fn image_features<'g>(&self, ctx: &Ctx<'g, T>, img: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        if self.cfg.eg_ablation {
            Ok(ctx.graph.zeros(&[img.dim(0), self.cfg.features]))
        } else {
            self.nets.enc_image.forward(ctx, img)
        }
    }

    /// Advances every run by one step.
    pub fn step<'g, R: Rng + ?Sized>(
        &self,
        ctx: &Ctx<'g, T>,
        st: &mut RunState<'g, T>,
        source: LatentSource<'_, T>,
        rng: &mut R,
    ) -> Result<StepOut<'g, T>> {
        let g = ctx.graph;
        let cfg = &self.cfg;
        let (n, j, k) = (st.n, cfg.points, cfg.mixtures);
        let hw = cfg.image_size;
        let t = st.t;
        let alive_prev = st.alive.clone();
        let alive_mask = mask(g, &alive_prev)?;

        let f_canvas = self.image_features(ctx, &st.canvas)?;

        // residual features for the recognition side
        let post = match source {
            LatentSource::Posterior => {
                let tgt = st
                    .target
                    .clone()
                    .ok_or_else(|| crate::tensor::invalid("step", "posterior step without a target"))?;
                let residual = if cfg.eg_ablation {
                    tgt.x
                } else {
                    tgt.x.sub(&st.canvas)?.clamp(T::zero(), T::one()).detach()
                };
                let f_res = self.nets.enc_residual.forward(ctx, &residual)?;
                Some((tgt, residual, f_res))
            }
            _ => None,
        };

        // presence
        let p_on = self
            .nets
            .prior_presence
            .forward(ctx, &f_canvas)?
            .sigmoid()
            .reshape(&[n])?
            .mul(&alive_mask)?;
        let q_on = match &post {
            Some((tgt, residual, f_res)) => {
                let inp = if cfg.rho_rsd {
                    let res = residual.value();
                    let area = hw * hw;
                    let rho: Vec<T> = (0..n)
                        .map(|i| {
                            let ink = tgt.ink[i];
                            if ink > T::zero() {
                                res[i * area..(i + 1) * area].iter().copied().sum::<T>() / ink
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    Tensor::concat(&[*f_res, g.constant(&[n, 1], rho)?], 1)?
                } else {
                    *f_res
                };
                Some(
                    self.nets
                        .post_presence
                        .forward(ctx, &inp)?
                        .sigmoid()
                        .reshape(&[n])?
                        .mul(&alive_mask)?,
                )
            }
            None => None,
        };
        let present: Vec<bool> = match source {
            LatentSource::Prior { .. } => {
                let p = p_on.value();
                (0..n).map(|i| alive_prev[i] && rng.random::<f64>() < to_f64(p[i])).collect()
            }
            LatentSource::Posterior => {
                let q = q_on.as_ref().expect("posterior presence").value();
                (0..n).map(|i| alive_prev[i] && rng.random::<f64>() < to_f64(q[i])).collect()
            }
            LatentSource::Fixed(trajs) => (0..n)
                .map(|i| alive_prev[i] && trajs[i].steps.get(t).is_some_and(|s| s.present))
                .collect(),
        };
        let present_mask = mask(g, &present)?;
        let log_p_o = bernoulli_log_prob(&p_on, &present_mask)?.mul(&alive_mask)?;
        let log_q_o = match &q_on {
            Some(q) => Some(bernoulli_log_prob(q, &present_mask)?.mul(&alive_mask)?),
            None => None,
        };

        // layout and render parameters
        let lay_in = Tensor::concat(&[f_canvas, st.h_layout], 1)?;
        let lprior = self.layout_prior(ctx, &lay_in)?;
        let rp = self.nets.render.forward(ctx, &lay_in)?;
        let sigma = bounded(&rp.slice(1, 0, 1)?.reshape(&[n])?, self.cfg.sigma_range);
        let s_slope = bounded(&rp.slice(1, 1, 1)?.reshape(&[n])?, self.cfg.s_slope_range);
        let mut q_layout = None;
        let layout = match (&source, &post) {
            (LatentSource::Posterior, Some((tgt, _, f_res))) => {
                let inp = Tensor::concat(&[*f_res, tgt.features, st.h_layout], 1)?;
                let raw = self.nets.post_layout.forward(ctx, &inp)?;
                let mean = self.squash_layout(&raw.slice(1, 0, LAYOUT_DIM)?)?;
                let scale = positive(&raw.slice(1, LAYOUT_DIM, LAYOUT_DIM)?);
                let l = gaussian_rsample(&mean, &scale, rng)?;
                q_layout = Some((mean, scale));
                l
            }
            (LatentSource::Prior { temperature }, _) => {
                let v = sample_rows(
                    &lprior.logits.value(),
                    &lprior.means.value(),
                    &lprior.scales.value(),
                    k,
                    LAYOUT_DIM,
                    *temperature,
                    rng,
                );
                g.constant(&[n, LAYOUT_DIM], v)?
            }
            (LatentSource::Fixed(trajs), _) => {
                let v = (0..n)
                    .flat_map(|i| trajs[i].steps.get(t).map_or([T::zero(); 4], |s| s.layout))
                    .collect();
                g.constant(&[n, LAYOUT_DIM], v)?
            }
            _ => unreachable!("posterior source always has residual features"),
        };
        let log_p_l = gmm_log_prob(&lprior.logits, &lprior.means, &lprior.scales, &layout)?.mul(&present_mask)?;
        let log_q_l = match &q_layout {
            Some((m, s)) => Some(gaussian_log_prob(m, s, &layout)?.mul(&present_mask)?),
            None => None,
        };
        let matrix = layout_to_matrix(&self.ranges().clamp(&layout)?)?;

        // stroke
        let f_glimpse = if cfg.eg_ablation {
            g.zeros(&[n, cfg.features])
        } else {
            self.nets
                .enc_image
                .forward(ctx, &extract_glimpse(&st.canvas, &matrix, cfg.glimpse)?)?
        };
        let sprior = self.stroke_prior(ctx, &Tensor::concat(&[st.h_stroke, layout, f_glimpse], 1)?)?;
        let mut q_stroke = None;
        let points = match (&source, &post) {
            (LatentSource::Posterior, Some((tgt, residual, _))) => {
                let f_rg = self
                    .nets
                    .enc_residual
                    .forward(ctx, &extract_glimpse(residual, &matrix, cfg.glimpse)?)?;
                let f_xg = self
                    .nets
                    .enc_image
                    .forward(ctx, &extract_glimpse(&tgt.x, &matrix, cfg.glimpse)?)?;
                let raw = self
                    .nets
                    .post_stroke
                    .forward(ctx, &Tensor::concat(&[f_rg, f_xg, st.h_stroke], 1)?)?;
                let mean = raw.slice(1, 0, 2 * j)?.tanh().scale(lit(STROKE_RANGE));
                let scale = positive(&raw.slice(1, 2 * j, 2 * j)?);
                let s = gaussian_rsample(&mean, &scale, rng)?;
                q_stroke = Some((mean, scale));
                s.reshape(&[n, j, 2])?
            }
            (LatentSource::Prior { temperature }, _) => {
                let v = sample_rows(
                    &sprior.logits.value(),
                    &sprior.means.value(),
                    &sprior.scales.value(),
                    k,
                    2,
                    *temperature,
                    rng,
                );
                g.constant(&[n, j, 2], v)?
            }
            (LatentSource::Fixed(trajs), _) => {
                let v = (0..n)
                    .flat_map(|i| match trajs[i].steps.get(t) {
                        Some(s) => s.points.iter().flat_map(|p| *p).collect::<Vec<T>>(),
                        None => vec![T::zero(); 2 * j],
                    })
                    .collect();
                g.constant(&[n, j, 2], v)?
            }
            _ => unreachable!("posterior source always has residual features"),
        };
        let log_p_s = gmm_log_prob(&sprior.logits, &sprior.means, &sprior.scales, &points.reshape(&[n * j, 2])?)?
            .reshape(&[n, j])?
            .sum_axis(1)?
            .mul(&present_mask)?;
        let log_q_s = match &q_stroke {
            Some((m, s)) => Some(gaussian_log_prob(m, s, &points.reshape(&[n, 2 * j])?)?.mul(&present_mask)?),
            None => None,
        };

        // render and composite
        let cp = transform_control_points(&points, &matrix, hw, hw)?;
        let stroke = render_stroke(&cp, &sigma, &s_slope, cfg.samples, hw, hw, cfg.literal_raster)?;
        st.canvas_sum = st
            .canvas_sum
            .add(&stroke.mul(&present_mask.reshape(&[n, 1, 1])?)?)?;
        st.canvas = self.canvas_of(ctx, st)?.detach();

        let h_layout = st.h_layout;
        let h_stroke = st.h_stroke;
        let new_l = self
            .nets
            .gru_layout
            .forward(ctx, &Tensor::concat(&[layout, f_canvas], 1)?, &st.h_layout)?;
        let new_s = self.nets.gru_stroke.forward(
            ctx,
            &Tensor::concat(&[points.reshape(&[n, 2 * j])?, f_canvas], 1)?,
            &st.h_stroke,
        )?;
        st.h_layout = blend(&st.h_layout, &new_l, &present_mask)?;
        st.h_stroke = blend(&st.h_stroke, &new_s, &present_mask)?;
        st.alive = present.clone();
        st.t += 1;

        Ok(StepOut {
            t,
            alive_prev,
            present,
            alive_mask,
            present_mask,
            layout,
            points,
            matrix,
            sigma,
            s_slope,
            stroke,
            p_on,
            q_on,
            log_p_o,
            log_p_l,
            log_p_s,
            log_q_o,
            log_q_l,
            log_q_s,
            q_layout,
            q_stroke,
            h_layout,
            h_stroke,
        })
    }

    /// Collects per-image trajectories from recorded steps.
    pub fn trajectories(&self, steps: &[StepOut<'_, T>], n: usize) -> Vec<Trajectory<T>> {
        let g_slope = self.g_slope_value();
        (0..n)
            .map(|i| Trajectory {
                steps: steps.iter().map(|s| s.values(i, self.cfg.points)).collect(),
                g_slope,
            })
            .collect()
    }
}
