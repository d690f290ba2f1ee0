//! Variational objective: the single-sample ELBO with a weighted presence
//! KL, the score-function surrogate for the presence posterior and the
//! regression loss of its learned baseline.

use crate::model::recognition::Inference;
use crate::model::DoodModel;
use crate::nn::Ctx;
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::{Graph, Result as TResult, Tensor};

use super::TrainError;

/// Batch-mean values of the loss terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// `E_q[log p(x | z)]`.
    pub recon: f64,
    pub kl_l: f64,
    pub kl_s: f64,
    pub kl_o: f64,
    pub beta: f64,
    pub baseline_loss: f64,
    /// Unweighted ELBO, `recon - kl_l - kl_s - kl_o`.
    pub elbo: f64,
    pub mean_strokes: f64,
}

impl LossBreakdown {
    /// `-(recon - kl_l - kl_s - beta * kl_o) + L_b`.
    pub fn total(&self) -> f64 {
        -(self.recon - self.kl_l - self.kl_s - self.beta * self.kl_o) + self.baseline_loss
    }
}

/// Exponentially smoothed mean and variance of the centred learning signal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NvilStats {
    pub mean: f64,
    pub var: f64,
    pub decay: f64,
}

impl NvilStats {
    pub fn new(decay: f64) -> Self {
        Self { mean: 0.0, var: 0.0, decay }
    }

    pub fn update(&mut self, batch: &[f64]) {
        if batch.is_empty() {
            return;
        }
        let n = batch.len() as f64;
        let m = batch.iter().sum::<f64>() / n;
        let v = batch.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
        self.mean = self.decay * self.mean + (1.0 - self.decay) * m;
        self.var = self.decay * self.var + (1.0 - self.decay) * v;
    }

    /// `(a - mean) / max(1, sqrt(var))`.
    pub fn normalize(&self, a: f64) -> f64 {
        (a - self.mean) / self.var.sqrt().max(1.0)
    }
}

/// Score-function surrogate `sum_i detach(signal_i - baseline_i) * log_q_i`.
/// Its gradient is the REINFORCE estimate; it is zero wherever the signal
/// equals the baseline.
pub fn reinforce_term<'g, T: Scalar>(signal: &[T], baseline: &[T], log_q: &Tensor<'g, T>) -> TResult<Tensor<'g, T>> {
    let adv: Vec<T> = signal.iter().zip(baseline).map(|(&l, &b)| l - b).collect();
    let w = log_q.graph().constant(&log_q.shape(), adv)?;
    Ok(w.mul(log_q)?.sum())
}

/// Mean squared error between detached signals and baseline predictions.
pub fn baseline_loss<'g, T: Scalar>(signal: &[T], baseline: &Tensor<'g, T>) -> TResult<Tensor<'g, T>> {
    let target = baseline.graph().constant(&baseline.shape(), signal.to_vec())?;
    Ok(target.sub(baseline)?.square().mean())
}

/// Differentiable pieces of the training loss.
pub struct Objective<'g, T: Scalar> {
    /// `-mean_i ELBO_beta(x_i)`.
    pub neg_elbo: Tensor<'g, T>,
    /// Presence-posterior surrogate (sign already set for minimisation).
    pub surrogate: Tensor<'g, T>,
    /// Regression of the baseline onto the centred learning signal.
    pub baseline: Tensor<'g, T>,
    pub breakdown: LossBreakdown,
}

impl<'g, T: Scalar> Objective<'g, T> {
    pub fn total(&self) -> TResult<Tensor<'g, T>> {
        self.neg_elbo.add(&self.surrogate)?.add(&self.baseline)
    }
}

fn check(v: f64, term: &'static str, step: Option<usize>) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite { term, step })
    }
}

fn values<T: Scalar>(t: &Tensor<'_, T>) -> Vec<f64> {
    t.value().iter().map(|&v| to_f64(v)).collect()
}

/// Per-step learning signals `l^t = log p(x|z) + sum_{tau >= t} [log p - log q]`
/// with the presence terms weighted by `beta`. Rows are steps, columns
/// images.
pub fn learning_signals<T: Scalar>(inf: &Inference<'_, T>, beta: f64) -> Vec<Vec<f64>> {
    let n = inf.n();
    let recon = values(&inf.log_lik);
    let per_step: Vec<Vec<f64>> = inf
        .steps
        .iter()
        .map(|s| {
            let (pl, ps, po) = (values(&s.log_p_l), values(&s.log_p_s), values(&s.log_p_o));
            let ql = s.log_q_l.as_ref().map(values).unwrap_or_else(|| vec![0.0; n]);
            let qs = s.log_q_s.as_ref().map(values).unwrap_or_else(|| vec![0.0; n]);
            let qo = s.log_q_o.as_ref().map(values).unwrap_or_else(|| vec![0.0; n]);
            (0..n)
                .map(|i| pl[i] + ps[i] - ql[i] - qs[i] + beta * (po[i] - qo[i]))
                .collect()
        })
        .collect();
    let mut out = vec![vec![0.0; n]; per_step.len()];
    let mut acc = recon;
    for t in (0..per_step.len()).rev() {
        for i in 0..n {
            acc[i] += per_step[t][i];
        }
        out[t] = acc.clone();
    }
    out
}

impl<T: Scalar> DoodModel<T> {
    /// Baseline predictions `b(z^{<t}, x)` for every step, `[n]` each, from
    /// detached target features and step-entry hidden states.
    pub fn baselines<'g>(&self, ctx: &Ctx<'g, T>, inf: &Inference<'g, T>) -> TResult<Vec<Tensor<'g, T>>> {
        let f = inf.target_features.detach();
        inf.steps
            .iter()
            .map(|s| {
                let inp = Tensor::concat(&[f, s.h_layout.detach(), s.h_stroke.detach()], 1)?;
                self.nets.baseline.forward(ctx, &inp)?.reshape(&[inf.n()])
            })
            .collect()
    }

    /// Assembles the loss for an inference. Updates the running signal
    /// statistics when `stats` is given.
    pub fn objective<'g>(
        &self,
        ctx: &Ctx<'g, T>,
        inf: &Inference<'g, T>,
        beta: f64,
        stats: &mut NvilStats,
    ) -> Result<Objective<'g, T>, TrainError> {
        let g: &'g Graph<T> = ctx.graph;
        let n = inf.n();
        let inv_n = lit::<T>(1.0 / n as f64);
        let zero = || g.zeros(&[n]);

        let mut kl_l = zero();
        let mut kl_s = zero();
        let mut kl_o = zero();
        for (t, s) in inf.steps.iter().enumerate() {
            let l = s.log_q_l.as_ref().expect("posterior step").sub(&s.log_p_l)?;
            let st = s.log_q_s.as_ref().expect("posterior step").sub(&s.log_p_s)?;
            let o = s.log_q_o.as_ref().expect("posterior step").sub(&s.log_p_o)?;
            check(to_f64(l.sum().item()), "kl_l", Some(t))?;
            check(to_f64(st.sum().item()), "kl_s", Some(t))?;
            check(to_f64(o.sum().item()), "kl_o", Some(t))?;
            kl_l = kl_l.add(&l)?;
            kl_s = kl_s.add(&st)?;
            kl_o = kl_o.add(&o)?;
        }
        let recon = inf.log_lik;
        let recon_mean = check(to_f64(recon.mean().item()), "recon", None)?;
        let elbo_beta = recon.sub(&kl_l)?.sub(&kl_s)?.sub(&kl_o.scale(lit(beta)))?;
        let neg_elbo = elbo_beta.sum().scale(-inv_n);

        let signals = learning_signals(inf, beta);
        let baselines = self.baselines(ctx, inf)?;
        let mut adv_batch = Vec::new();
        for (t, s) in inf.steps.iter().enumerate() {
            let b = values(&baselines[t]);
            for i in 0..n {
                if s.alive_prev[i] {
                    adv_batch.push(check(signals[t][i] - b[i], "learning_signal", Some(t))?);
                }
            }
        }
        stats.update(&adv_batch);

        let mut surrogate = g.scalar(T::zero());
        let mut bl = g.scalar(T::zero());
        let mut bl_value = 0.0;
        for (t, s) in inf.steps.iter().enumerate() {
            let b = values(&baselines[t]);
            let mut adv = vec![T::zero(); n];
            let mut sig = vec![T::zero(); n];
            for i in 0..n {
                if s.alive_prev[i] {
                    adv[i] = lit(stats.normalize(signals[t][i] - b[i]));
                    sig[i] = lit(signals[t][i] - stats.mean);
                }
            }
            let log_q = s.log_q_o.as_ref().expect("posterior step");
            surrogate = surrogate.add(&reinforce_term(&adv, &vec![T::zero(); n], log_q)?)?;
            // dead entries regress onto themselves and contribute nothing
            let pred = baselines[t].mul(&s.alive_mask)?;
            let term = baseline_loss(&sig, &pred)?.scale(lit(n as f64));
            bl_value += to_f64(term.item());
            bl = bl.add(&term)?;
        }
        let surrogate = surrogate.scale(-inv_n);
        let bl = bl.scale(inv_n);

        let mean = |t: &Tensor<'g, T>| -> TResult<f64> { Ok(to_f64(t.mean().item())) };
        let (kl_l_m, kl_s_m, kl_o_m) = (mean(&kl_l)?, mean(&kl_s)?, mean(&kl_o)?);
        let counts = inf.stroke_counts();
        let breakdown = LossBreakdown {
            recon: recon_mean,
            kl_l: kl_l_m,
            kl_s: kl_s_m,
            kl_o: kl_o_m,
            beta,
            baseline_loss: check(bl_value / n as f64, "baseline_loss", None)?,
            elbo: recon_mean - kl_l_m - kl_s_m - kl_o_m,
            mean_strokes: counts.iter().sum::<usize>() as f64 / n as f64,
        };
        Ok(Objective {
            neg_elbo,
            surrogate,
            baseline: bl,
            breakdown,
        })
    }
}
