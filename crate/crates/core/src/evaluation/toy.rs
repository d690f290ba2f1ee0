//! A two-step Bernoulli latent model small enough to enumerate, used to
//! check Monte-Carlo bound estimators against the exact marginal.

use rand::Rng;

use crate::nn::dist::log_sum_exp;

/// `z1 ~ Bern(p1)`, `z2 | z1 ~ Bern(p2[z1])`, `log p(x | z) = log_lik[z1][z2]`
/// for one fixed observation, with a recognition model of the same form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscreteToy {
    pub p1: f64,
    pub p2: [f64; 2],
    pub q1: f64,
    pub q2: [f64; 2],
    pub log_lik: [[f64; 2]; 2],
}

fn ln_bern(p: f64, z: usize) -> f64 {
    if z == 1 {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

impl DiscreteToy {
    pub fn example() -> Self {
        Self {
            p1: 0.3,
            p2: [0.6, 0.2],
            q1: 0.22,
            q2: [0.82, 0.06],
            log_lik: [[-2.0, -0.5], [-1.2, -3.0]],
        }
    }

    pub fn log_joint(&self, z: [usize; 2]) -> f64 {
        ln_bern(self.p1, z[0]) + ln_bern(self.p2[z[0]], z[1]) + self.log_lik[z[0]][z[1]]
    }

    pub fn log_q(&self, z: [usize; 2]) -> f64 {
        ln_bern(self.q1, z[0]) + ln_bern(self.q2[z[0]], z[1])
    }

    pub fn trajectories() -> [[usize; 2]; 4] {
        [[0, 0], [0, 1], [1, 0], [1, 1]]
    }

    /// Exact `log p(x)`.
    pub fn log_marginal(&self) -> f64 {
        log_sum_exp(&Self::trajectories().map(|z| self.log_joint(z)))
    }

    /// Exact `E_q[log p(x, z) - log q(z)]`.
    pub fn exact_elbo(&self) -> f64 {
        Self::trajectories()
            .iter()
            .map(|&z| self.log_q(z).exp() * (self.log_joint(z) - self.log_q(z)))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [usize; 2] {
        let z1 = usize::from(rng.random::<f64>() < self.q1);
        let z2 = usize::from(rng.random::<f64>() < self.q2[z1]);
        [z1, z2]
    }

    /// `log p(x, z) - log q(z)` for `k` posterior samples.
    pub fn log_weights<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<f64> {
        (0..k)
            .map(|_| {
                let z = self.sample(rng);
                self.log_joint(z) - self.log_q(z)
            })
            .collect()
    }
}
