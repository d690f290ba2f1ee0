//! Log-densities and samplers. Tensor-valued functions take batched
//! parameters and stay differentiable; the `*Params` types hold plain values.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::{Result as TResult, Tensor};

pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid parameters: {0}")]
    Invalid(String),
}

fn half_log_two_pi<T: Scalar>() -> T {
    lit(0.5 * (2.0 * std::f64::consts::PI).ln())
}

fn std_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let z: f64 = StandardNormal.sample(rng);
    lit(z)
}

/// Elementwise `log N(x; mean, scale^2)`, broadcasting.
pub fn normal_log_prob<'g, T: Scalar>(
    mean: &Tensor<'g, T>,
    scale: &Tensor<'g, T>,
    x: &Tensor<'g, T>,
) -> TResult<Tensor<'g, T>> {
    let z = x.sub(mean)?.div(scale)?;
    Ok(z.square().scale(lit(-0.5)).sub(&scale.log())?.add_scalar(-half_log_two_pi::<T>()))
}

/// Diagonal Gaussian log-density summed over the last axis.
pub fn gaussian_log_prob<'g, T: Scalar>(
    mean: &Tensor<'g, T>,
    scale: &Tensor<'g, T>,
    x: &Tensor<'g, T>,
) -> TResult<Tensor<'g, T>> {
    let lp = normal_log_prob(mean, scale, x)?;
    lp.sum_axis(lp.rank() - 1)
}

/// Reparameterised draw `mean + scale * eps`, `eps ~ N(0, I)`.
pub fn gaussian_rsample<'g, T: Scalar, R: Rng + ?Sized>(
    mean: &Tensor<'g, T>,
    scale: &Tensor<'g, T>,
    rng: &mut R,
) -> TResult<Tensor<'g, T>> {
    let shape = mean.shape();
    let eps: Vec<T> = (0..mean.numel()).map(|_| std_normal(rng)).collect();
    let eps = mean.graph().constant(&shape, eps)?;
    mean.add(&scale.mul(&eps)?)
}

/// Mixture log-density. `logits: [n, K]`, `means`/`scales`: `[n, K, D]`,
/// `x: [n, D]`; returns `[n]`.
pub fn gmm_log_prob<'g, T: Scalar>(
    logits: &Tensor<'g, T>,
    means: &Tensor<'g, T>,
    scales: &Tensor<'g, T>,
    x: &Tensor<'g, T>,
) -> TResult<Tensor<'g, T>> {
    let s = x.shape();
    let xk = x.reshape(&[s[0], 1, s[1]])?;
    let comp = gaussian_log_prob(means, scales, &xk)?;
    comp.add(&logits.log_softmax(1)?)?.logsumexp(1)
}

/// `o log p + (1 - o) log(1 - p)` with `p` clamped to `[1e-6, 1 - 1e-6]`.
pub fn bernoulli_log_prob<'g, T: Scalar>(p: &Tensor<'g, T>, o: &Tensor<'g, T>) -> TResult<Tensor<'g, T>> {
    let eps = lit::<T>(PROB_EPS);
    let p = p.clamp(eps, T::one() - eps);
    let on = o.mul(&p.log())?;
    let off = o.affine(-T::one(), T::one()).mul(&p.affine(-T::one(), T::one()).log())?;
    on.add(&off)
}

/// Elementwise `-log(2b) - |x - loc| / b`.
pub fn laplace_log_prob<'g, T: Scalar>(
    loc: &Tensor<'g, T>,
    scale: &Tensor<'g, T>,
    x: &Tensor<'g, T>,
) -> TResult<Tensor<'g, T>> {
    let dev = x.sub(loc)?.abs().div(scale)?;
    dev.neg().sub(&scale.scale(lit(2.0)).log())
}

pub fn bernoulli_log_prob_value<T: Scalar>(p: T, o: bool) -> T {
    let eps = lit::<T>(PROB_EPS);
    let p = p.max(eps).min(T::one() - eps);
    if o {
        p.ln()
    } else {
        (T::one() - p).ln()
    }
}

pub fn laplace_log_prob_value<T: Scalar>(loc: T, scale: T, x: T) -> T {
    -(lit::<T>(2.0) * scale).ln() - (x - loc).abs() / scale
}

/// Diagonal Gaussian with plain-valued parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussianParams<T> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Scalar> DiagGaussianParams<T> {
    pub fn log_prob(&self, x: &[T]) -> Result<T, DistError> {
        check_finite(x, "input")?;
        Ok(self
            .mean
            .iter()
            .zip(&self.scale)
            .zip(x)
            .map(|((&m, &s), &v)| {
                let z = (v - m) / s;
                lit::<T>(-0.5) * z * z - s.ln() - half_log_two_pi::<T>()
            })
            .sum())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        self.mean
            .iter()
            .zip(&self.scale)
            .map(|(&m, &s)| m + s * std_normal::<T, R>(rng))
            .collect()
    }
}

/// Mixture of `K` diagonal Gaussians over `D` dimensions. `means` and
/// `scales` are `K x D` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams<T> {
    pub weights: Vec<T>,
    pub means: Vec<T>,
    pub scales: Vec<T>,
    pub dim: usize,
}

fn check_finite<T: Scalar>(v: &[T], what: &'static str) -> Result<(), DistError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DistError::NonFinite(what))
    }
}

impl<T: Scalar> GmmParams<T> {
    /// Builds parameters from unnormalised logits.
    pub fn from_logits(logits: &[T], means: Vec<T>, scales: Vec<T>, dim: usize) -> Self {
        let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        Self {
            weights: e.into_iter().map(|v| v / z).collect(),
            means,
            scales,
            dim,
        }
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<(), DistError> {
        let k = self.components();
        if k == 0 || self.means.len() != k * self.dim || self.scales.len() != k * self.dim {
            return Err(DistError::Invalid(format!(
                "{k} components of dimension {} with {} means and {} scales",
                self.dim,
                self.means.len(),
                self.scales.len()
            )));
        }
        check_finite(&self.weights, "weights")?;
        check_finite(&self.means, "means")?;
        check_finite(&self.scales, "scales")?;
        let total: T = self.weights.iter().copied().sum();
        if self.weights.iter().any(|&w| w < T::zero()) || (total - T::one()).abs() > lit(1e-6) {
            return Err(DistError::Invalid("weights are not on the simplex".into()));
        }
        if self.scales.iter().any(|&s| s <= T::zero()) {
            return Err(DistError::Invalid("scales must be positive".into()));
        }
        Ok(())
    }

    /// `log sum_k w_k N(x; mu_k, diag sigma_k^2)` via log-sum-exp.
    pub fn log_prob(&self, x: &[T]) -> Result<T, DistError> {
        self.validate()?;
        check_finite(x, "input")?;
        if x.len() != self.dim {
            return Err(DistError::Invalid(format!("input of length {} for dimension {}", x.len(), self.dim)));
        }
        let d = self.dim;
        let terms: Vec<T> = (0..self.components())
            .map(|k| {
                let comp = DiagGaussianParams {
                    mean: self.means[k * d..(k + 1) * d].to_vec(),
                    scale: self.scales[k * d..(k + 1) * d].to_vec(),
                };
                self.weights[k].ln() + comp.log_prob(x).unwrap_or(T::neg_infinity())
            })
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Draws a component from the weights sharpened as `w^(1/temperature)`,
    /// then a point with scales multiplied by `temperature`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, temperature: T) -> (Vec<T>, usize) {
        let k = self.sample_component(rng, temperature);
        let d = self.dim;
        let x = (0..d)
            .map(|i| self.means[k * d + i] + temperature * self.scales[k * d + i] * std_normal::<T, R>(rng))
            .collect();
        (x, k)
    }

    fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R, temperature: T) -> usize {
        let inv_t = T::one() / temperature;
        let logw: Vec<T> = self.weights.iter().map(|&w| w.ln() * inv_t).collect();
        let lse = log_sum_exp(&logw);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, &lw) in logw.iter().enumerate() {
            acc += to_f64((lw - lse).exp());
            if u < acc {
                return k;
            }
        }
        // round-off fallthrough: last component with nonzero weight
        logw.iter().rposition(|w| w.is_finite()).unwrap_or(0)
    }
}

pub fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let m = v.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Graph;

    fn normal_pdf(m: f64, s: f64, x: f64) -> f64 {
        (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn single_component_is_gaussian() {
        let gmm = GmmParams::<f64>::from_logits(&[0.3], vec![0.5, -1.0], vec![0.7, 2.0], 2);
        let gauss = DiagGaussianParams {
            mean: vec![0.5, -1.0],
            scale: vec![0.7, 2.0],
        };
        let x = [0.1, 0.4];
        assert!((gmm.log_prob(&x).unwrap() - gauss.log_prob(&x).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn duplicated_components_collapse() {
        let one = GmmParams::<f64>::from_logits(&[0.0], vec![0.2], vec![0.4], 1);
        let two = GmmParams::<f64>::from_logits(&[0.0, 0.0], vec![0.2, 0.2], vec![0.4, 0.4], 1);
        assert!((one.log_prob(&[0.9]).unwrap() - two.log_prob(&[0.9]).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn gmm_matches_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let means: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scales: Vec<f64> = (0..6).map(|_| rng.random_range(0.2..1.5)).collect();
            let gmm = GmmParams::from_logits(&logits, means.clone(), scales.clone(), 2);
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let direct: f64 = (0..3)
                .map(|k| {
                    gmm.weights[k]
                        * normal_pdf(means[2 * k], scales[2 * k], x[0])
                        * normal_pdf(means[2 * k + 1], scales[2 * k + 1], x[1])
                })
                .sum();
            assert!((gmm.log_prob(&x).unwrap() - direct.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn tensor_gmm_matches_value_gmm() {
        let g = Graph::<f64>::new();
        let logits = [0.5, -0.3, 1.2];
        let means = vec![0.1, 0.2, -0.5, 0.3, 0.9, -0.9];
        let scales = vec![0.4, 0.6, 1.1, 0.3, 0.8, 0.5];
        let x = [0.25, -0.15];
        let lp = gmm_log_prob(
            &g.constant(&[1, 3], logits.to_vec()).unwrap(),
            &g.constant(&[1, 3, 2], means.clone()).unwrap(),
            &g.constant(&[1, 3, 2], scales.clone()).unwrap(),
            &g.constant(&[1, 2], x.to_vec()).unwrap(),
        )
        .unwrap()
        .item();
        let want = GmmParams::from_logits(&logits, means, scales, 2).log_prob(&x).unwrap();
        assert!((lp - want).abs() < 1e-12);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let gmm = GmmParams::from_logits(&[0.0], vec![0.0], vec![1.0], 1);
        assert!(matches!(gmm.log_prob(&[f64::NAN]), Err(DistError::NonFinite(_))));
    }

    #[test]
    fn degenerate_mixture_samples_its_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gmm = GmmParams::<f64> {
            weights: vec![1.0, 0.0],
            means: vec![0.3, -0.4, 5.0, 5.0],
            scales: vec![1e-8; 4],
            dim: 2,
        };
        for _ in 0..100 {
            let (x, k) = gmm.sample(&mut rng, 1.0);
            assert_eq!(k, 0);
            assert!((x[0] - 0.3).abs() < 1e-6 && (x[1] + 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn component_frequencies_match_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = [0.2, 0.5, 0.3];
        let gmm = GmmParams {
            weights: w.to_vec(),
            means: vec![0.0; 3],
            scales: vec![1.0; 3],
            dim: 1,
        };
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[gmm.sample(&mut rng, 1.0).1] += 1;
        }
        for k in 0..3 {
            let sd = (n as f64 * w[k] * (1.0 - w[k])).sqrt();
            assert!((counts[k] as f64 - n as f64 * w[k]).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn single_component_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gmm = GmmParams::from_logits(&[0.0], vec![1.5], vec![0.8], 1);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| gmm.sample(&mut rng, 1.0).0[0]).sum::<f64>() / n as f64;
        assert!((mean - 1.5).abs() < 3.0 * 0.8 / (n as f64).sqrt());
    }

    #[test]
    fn low_temperature_picks_the_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gmm = GmmParams::<f64>::from_logits(&[0.0, 0.4], vec![-1.0, 2.0], vec![0.5, 0.5], 1);
        for _ in 0..100 {
            let (x, k) = gmm.sample(&mut rng, 1e-4);
            assert_eq!(k, 1);
            assert!((x[0] - 2.0).abs() < 1e-3);
        }
    }

    #[test]
    fn rsample_gradients_match_analytic_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mu, sigma) = (0.7, 1.3);
        let n = 100_000;
        let g = Graph::<f64>::new();
        let m = g.variable(&[1], vec![mu]).unwrap();
        let s = g.variable(&[1], vec![sigma]).unwrap();
        let m_n = m.reshape(&[1, 1]).unwrap();
        let s_n = s.reshape(&[1, 1]).unwrap();
        let ones = g.full(&[n, 1], 1.0);
        let z = gaussian_rsample(&ones.mul(&m_n).unwrap(), &ones.mul(&s_n).unwrap(), &mut rng).unwrap();
        z.mean().backward().unwrap();
        assert!((m.grad().unwrap()[0] - 1.0).abs() < 1e-2);
        g.zero_grad();
        z.square().mean().backward().unwrap();
        assert!((m.grad().unwrap()[0] - 2.0 * mu).abs() < 0.02 * 2.0 * mu);
        assert!((s.grad().unwrap()[0] - 2.0 * sigma).abs() < 0.02 * 2.0 * sigma);
    }

    #[test]
    fn zero_scale_rsample_is_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = Graph::<f64>::new();
        let m = g.constant(&[3], vec![0.1, -2.0, 4.0]).unwrap();
        let z = gaussian_rsample(&m, &g.zeros(&[3]), &mut rng).unwrap();
        assert_eq!(z.to_vec(), m.to_vec());
    }

    #[test]
    fn bernoulli_and_laplace_values() {
        assert!((bernoulli_log_prob_value(0.5f64, true) - 0.5f64.ln()).abs() < 1e-15);
        assert!((laplace_log_prob_value(0.3f64, 0.2, 0.3) + (0.4f64).ln()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Graph::<f64>::new();
        for _ in 0..100 {
            let (p, o) = (rng.random_range(0.01..0.99), rng.random_bool(0.5));
            let ov = if o { 1.0 } else { 0.0 };
            let t = bernoulli_log_prob(&g.scalar(p), &g.scalar(ov)).unwrap().item();
            let direct = if o { p.ln() } else { (1.0 - p).ln() };
            assert!((t - direct).abs() < 1e-12);
            let (loc, b, x) = (rng.random_range(-1.0..1.0), rng.random_range(0.1..2.0), rng.random_range(-1.0..1.0));
            let t = laplace_log_prob(&g.scalar(loc), &g.scalar(b), &g.scalar(x)).unwrap().item();
            let direct = (0.5 / b * (-(x - loc as f64).abs() / b).exp()).ln();
            assert!((t - direct).abs() < 1e-12);
        }
    }

    fn quadrature(f: impl Fn(f64) -> f64) -> f64 {
        let (lo, hi, n) = (-30.0, 30.0, 200_000);
        let h = (hi - lo) / n as f64;
        (0..=n).map(|i| lo + i as f64 * h).map(|x| f(x).exp() * h).sum()
    }

    #[test]
    fn densities_integrate_to_one() {
        let gmm = GmmParams::from_logits(&[0.1, -0.7, 0.4], vec![-2.0, 0.5, 3.0], vec![0.5, 1.2, 0.3], 1);
        let mass = quadrature(|x| gmm.log_prob(&[x]).unwrap());
        assert!((0.99..=1.01).contains(&mass), "{mass}");
        let mass = quadrature(|x| laplace_log_prob_value(0.4, 0.9, x));
        assert!((0.99..=1.01).contains(&mass), "{mass}");
        let gauss = DiagGaussianParams {
            mean: vec![1.0],
            scale: vec![2.0],
        };
        let mass = quadrature(|x| gauss.log_prob(&[x]).unwrap());
        assert!((0.99..=1.01).contains(&mass), "{mass}");
    }
}
