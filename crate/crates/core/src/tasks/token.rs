//! Token model: motor noise on canonical control points plus one shared
//! affine warp applied in the canvas frame.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::affine::Affine;
use crate::model::Trajectory;
use crate::scalar::{lit, to_f64, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenModel {
    /// Standard deviation of the motor noise.
    pub noise: f64,
    /// Shift is uniform in `[-shift, shift]^2`.
    pub shift: f64,
    /// Per-axis scale is uniform in `[scale_min, scale_max]`.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Rotation and shear angles are uniform in `[-x, x]`.
    pub rotation: f64,
    pub shear: f64,
}

impl Default for TokenModel {
    fn default() -> Self {
        Self {
            noise: 1e-3,
            shift: 0.2,
            scale_min: 0.8,
            scale_max: 1.2,
            rotation: 0.25 * PI,
            shear: 0.25 * PI,
        }
    }
}

impl TokenModel {
    /// All ranges collapsed: perturbation is the identity.
    pub fn identity() -> Self {
        Self {
            noise: 0.0,
            shift: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            rotation: 0.0,
            shear: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = self.noise >= 0.0
            && self.shift >= 0.0
            && 0.0 < self.scale_min
            && self.scale_min <= self.scale_max
            && (0.0..PI / 2.0).contains(&self.shear)
            && self.rotation >= 0.0;
        if ok {
            Ok(())
        } else {
            Err("token model ranges must be non-negative, scales positive and ordered, shear below pi/2".into())
        }
    }

    /// `(low, high)` for `(tx, ty, sx, sy, rotation, shear)`.
    pub fn bounds(&self) -> [(f64, f64); 6] {
        [
            (-self.shift, self.shift),
            (-self.shift, self.shift),
            (self.scale_min, self.scale_max),
            (self.scale_min, self.scale_max),
            (-self.rotation, self.rotation),
            (-self.shear, self.shear),
        ]
    }

    pub fn sample_affine<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenAffine {
        let mut v = [0.0; 6];
        for (x, (lo, hi)) in v.iter_mut().zip(self.bounds()) {
            *x = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        }
        TokenAffine::from_params(v)
    }

    /// Log density of the uniform affine prior; non-degenerate ranges
    /// contribute `-ln(width)`.
    pub fn affine_log_density(&self, a: &TokenAffine) -> f64 {
        let mut lp = 0.0;
        for (x, (lo, hi)) in a.params().iter().zip(self.bounds()) {
            if hi > lo {
                if *x < lo || *x > hi {
                    return f64::NEG_INFINITY;
                }
                lp -= (hi - lo).ln();
            } else if (*x - lo).abs() > 1e-12 {
                return f64::NEG_INFINITY;
            }
        }
        lp
    }

    /// `log p(z | psi)` for a token whose control points are `points` (one
    /// list per drawn stroke of `psi`) and whose warp is `a`.
    pub fn log_density<T: Scalar>(&self, psi: &Trajectory<T>, points: &[Vec<[T; 2]>], a: &TokenAffine) -> f64 {
        let mut lp = self.affine_log_density(a);
        for (s, pts) in psi.strokes().zip(points) {
            for (p, q) in s.points.iter().zip(pts) {
                for d in 0..2 {
                    let diff = to_f64(q[d] - p[d]);
                    if self.noise > 0.0 {
                        let z = diff / self.noise;
                        lp += -0.5 * z * z - self.noise.ln() - 0.5 * (2.0 * PI).ln();
                    } else if diff != 0.0 {
                        return f64::NEG_INFINITY;
                    }
                }
            }
        }
        lp
    }
}

/// Shift, per-axis scale, rotation and shear of a token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenAffine {
    pub shift: [f64; 2],
    pub scale: [f64; 2],
    pub rotation: f64,
    pub shear: f64,
}

impl TokenAffine {
    pub fn identity() -> Self {
        Self::from_params([0.0, 0.0, 1.0, 1.0, 0.0, 0.0])
    }

    pub fn from_params(v: [f64; 6]) -> Self {
        Self {
            shift: [v[0], v[1]],
            scale: [v[2], v[3]],
            rotation: v[4],
            shear: v[5],
        }
    }

    pub fn params(&self) -> [f64; 6] {
        [self.shift[0], self.shift[1], self.scale[0], self.scale[1], self.rotation, self.shear]
    }

    /// `translate . rotate . shear_x . scale` as a canvas-frame map.
    pub fn matrix<T: Scalar>(&self) -> Affine<T> {
        let (c, s, t) = (self.rotation.cos(), self.rotation.sin(), self.shear.tan());
        let [sx, sy] = self.scale;
        Affine([
            lit(c * sx),
            lit((c * t - s) * sy),
            lit(self.shift[0]),
            lit(s * sx),
            lit((s * t + c) * sy),
            lit(self.shift[1]),
        ])
    }
}

/// Token `z` of type `psi`: jittered control points, every stroke placed by
/// `warp . M`.
pub fn apply_token<T: Scalar>(psi: &Trajectory<T>, points: &[Vec<[T; 2]>], warp: &TokenAffine) -> Trajectory<T> {
    let a = warp.matrix::<T>();
    let mut z = psi.clone();
    for (s, pts) in z.steps.iter_mut().take_while(|s| s.present).zip(points) {
        s.points = pts.clone();
        s.matrix = a.compose(&Affine(s.matrix)).0;
    }
    z
}

/// Samples a token of `psi` under the token model.
pub fn token_perturb<T: Scalar, R: Rng + ?Sized>(psi: &Trajectory<T>, tm: &TokenModel, rng: &mut R) -> Trajectory<T> {
    let noise = Normal::new(0.0, tm.noise.max(0.0)).expect("finite noise scale");
    let points: Vec<Vec<[T; 2]>> = psi
        .strokes()
        .map(|s| {
            s.points
                .iter()
                .map(|p| {
                    if tm.noise > 0.0 {
                        [p[0] + lit(noise.sample(rng)), p[1] + lit(noise.sample(rng))]
                    } else {
                        *p
                    }
                })
                .collect()
        })
        .collect();
    let warp = tm.sample_affine(rng);
    apply_token(psi, &points, &warp)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::StrokeStep;

    pub(crate) fn psi() -> Trajectory<f64> {
        let step = |present, dx: f64| StrokeStep {
            present,
            layout: [dx, 0.0, 0.7, 0.1],
            points: vec![[-0.5, 0.1], [0.0, 0.4 + dx], [0.5, -0.2]],
            matrix: crate::affine::LayoutLatent::from_slice(&[dx, 0.0, 0.7, 0.1]).matrix().0,
            sigma: 1.0,
            s_slope: 0.3,
        };
        Trajectory {
            steps: vec![step(true, 0.1), step(true, -0.2), step(false, 0.0)],
            g_slope: 0.5,
        }
    }

    #[test]
    fn collapsed_model_is_the_identity() {
        let p = psi();
        let z = token_perturb(&p, &TokenModel::identity(), &mut ChaCha8Rng::seed_from_u64(0));
        for (a, b) in z.steps.iter().zip(&p.steps) {
            assert_eq!(a.points, b.points);
            for k in 0..6 {
                assert!((a.matrix[k] - b.matrix[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn motor_noise_has_the_configured_scale() {
        let p = psi();
        let tm = TokenModel {
            noise: 1e-3,
            ..TokenModel::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Vec::new();
        for _ in 0..10_000 {
            let z = token_perturb(&p, &tm, &mut rng);
            d.push(z.steps[0].points[1][0] - p.steps[0].points[1][0]);
        }
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((sd / 1e-3 - 1.0).abs() < 0.05, "{sd}");
    }

    #[test]
    fn psi_is_the_mode_of_the_identity_slice() {
        let p = psi();
        let tm = TokenModel::default();
        let pts: Vec<Vec<[f64; 2]>> = p.strokes().map(|s| s.points.clone()).collect();
        let id = TokenAffine::identity();
        let best = tm.log_density(&p, &pts, &id);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let z = token_perturb(&p, &tm, &mut rng);
            let zp: Vec<Vec<[f64; 2]>> = z.strokes().map(|s| s.points.clone()).collect();
            assert!(tm.log_density(&p, &zp, &id) <= best);
        }
    }

    #[test]
    fn sampled_affines_stay_in_range() {
        let tm = TokenModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = tm.sample_affine(&mut rng);
            assert!(tm.affine_log_density(&a).is_finite());
        }
        let out = TokenAffine::from_params([0.5, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(tm.affine_log_density(&out), f64::NEG_INFINITY);
    }

    #[test]
    fn warp_acts_in_the_canvas_frame() {
        let p = psi();
        let warp = TokenAffine::from_params([0.1, -0.1, 1.1, 0.9, 0.3, 0.2]);
        let pts: Vec<Vec<[f64; 2]>> = p.strokes().map(|s| s.points.clone()).collect();
        let z = apply_token(&p, &pts, &warp);
        let a = warp.matrix::<f64>();
        for (s, t) in p.strokes().zip(z.strokes()) {
            for q in &s.points {
                let want = a.apply(Affine(s.matrix).apply(*q));
                let got = Affine(t.matrix).apply(*q);
                assert!((want[0] - got[0]).abs() < 1e-12 && (want[1] - got[1]).abs() < 1e-12);
            }
        }
    }
}
