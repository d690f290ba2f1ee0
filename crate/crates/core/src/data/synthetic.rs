//! Synthetic spline corpus with known latent trajectories, rendered by the
//! same renderer the model uses.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImageDataset, Split};
use crate::affine::LayoutLatent;
use crate::model::{StrokeStep, Trajectory};

/// Shape family strokes are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrokeStyle {
    /// Smooth random walks.
    Random,
    /// Straight segments.
    Straight,
    /// Wide circular arcs.
    Curly,
    /// A fixed set of canonical shapes; the image label is the shape index
    /// of its first stroke.
    Planted,
}

/// Number of canonical shapes available to [`StrokeStyle::Planted`].
pub const PLANTED_SHAPES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub count: usize,
    pub image_size: usize,
    pub strokes_min: usize,
    pub strokes_max: usize,
    pub points: usize,
    pub style: StrokeStyle,
    /// How many of the planted shapes to use.
    pub planted_types: usize,
    pub samples: usize,
    pub sigma: f64,
    pub s_slope: f64,
    pub g_slope: f64,
    /// Layout shift is uniform in `[-shift, shift]^2`.
    pub shift: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Layout rotation is uniform in `[-rotation, rotation]`.
    pub rotation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 1000,
            image_size: 50,
            strokes_min: 1,
            strokes_max: 1,
            points: 5,
            style: StrokeStyle::Random,
            planted_types: PLANTED_SHAPES,
            samples: 100,
            sigma: 1.0,
            s_slope: 0.3,
            g_slope: 0.5,
            shift: 0.3,
            scale_min: 0.5,
            scale_max: 0.8,
            rotation: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.count == 0 {
            return Err("synthetic.count must be positive".into());
        }
        if self.strokes_min == 0 || self.strokes_min > self.strokes_max {
            return Err("synthetic stroke counts must satisfy 1 <= strokes_min <= strokes_max".into());
        }
        if self.points < 2 || self.samples < 2 || self.image_size < 2 {
            return Err("synthetic.points, samples and image_size must be at least 2".into());
        }
        if self.style == StrokeStyle::Planted && !(1..=PLANTED_SHAPES).contains(&self.planted_types) {
            return Err(format!("synthetic.planted_types must lie in 1..={PLANTED_SHAPES}"));
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err("synthetic scales must satisfy 0 < scale_min <= scale_max <= 1".into());
        }
        for (name, v) in [("sigma", self.sigma), ("s_slope", self.s_slope), ("g_slope", self.g_slope)] {
            if !(v > 0.0) {
                return Err(format!("synthetic.{name} must be positive"));
            }
        }
        Ok(())
    }
}

/// Images plus the trajectories that produced them.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: ImageDataset,
    pub trajectories: Vec<Trajectory<f64>>,
}

/// Canonical shape `k` sampled at `j` evenly spaced parameters.
pub fn planted_shape(k: usize, j: usize) -> Vec<[f64; 2]> {
    (0..j)
        .map(|i| {
            let u = i as f64 / (j - 1) as f64;
            match k % PLANTED_SHAPES {
                0 => [-0.8 + 1.6 * u, 0.0],
                1 => {
                    let a = PI / 2.0 + PI * u;
                    [0.7 * a.cos() + 0.2, 0.7 * a.sin()]
                }
                2 => [-0.8 + 1.6 * u, if i % 2 == 0 { 0.5 } else { -0.5 }],
                _ => [0.0, -0.8 + 1.6 * u],
            }
        })
        .collect()
}

fn random_walk(rng: &mut ChaCha8Rng, j: usize) -> Vec<[f64; 2]> {
    let turn = Normal::new(0.0, 0.6).expect("valid normal");
    let mut p = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
    let mut heading = rng.random_range(-PI..PI);
    let mut out = vec![p];
    for _ in 1..j {
        let len = rng.random_range(0.25..0.45);
        heading += turn.sample(rng);
        p = [
            (p[0] + len * heading.cos()).clamp(-0.95, 0.95),
            (p[1] + len * heading.sin()).clamp(-0.95, 0.95),
        ];
        out.push(p);
    }
    out
}

fn straight(rng: &mut ChaCha8Rng, j: usize) -> Vec<[f64; 2]> {
    let c = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
    let a = rng.random_range(0.0..PI);
    let half = rng.random_range(0.5..0.8);
    (0..j)
        .map(|i| {
            let t = -1.0 + 2.0 * i as f64 / (j - 1) as f64;
            [c[0] + t * half * a.cos(), c[1] + t * half * a.sin()]
        })
        .collect()
}

fn curly(rng: &mut ChaCha8Rng, j: usize) -> Vec<[f64; 2]> {
    let c = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
    let r = rng.random_range(0.45..0.7);
    let start = rng.random_range(-PI..PI);
    let sweep = rng.random_range(1.2 * PI..1.6 * PI) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    (0..j)
        .map(|i| {
            let a = start + sweep * i as f64 / (j - 1) as f64;
            [c[0] + r * a.cos(), c[1] + r * a.sin()]
        })
        .collect()
}

/// Samples trajectories and renders them. Identical specs give
/// bit-identical output.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, String> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let planted = spec.style == StrokeStyle::Planted;
    let mut images = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    let mut trajectories = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let n = rng.random_range(spec.strokes_min..=spec.strokes_max);
        let mut steps = Vec::with_capacity(n + 1);
        let mut label = 0u32;
        for s in 0..n {
            let points = match spec.style {
                StrokeStyle::Random => random_walk(&mut rng, spec.points),
                StrokeStyle::Straight => straight(&mut rng, spec.points),
                StrokeStyle::Curly => curly(&mut rng, spec.points),
                StrokeStyle::Planted => {
                    let k = rng.random_range(0..spec.planted_types);
                    if s == 0 {
                        label = k as u32;
                    }
                    planted_shape(k, spec.points)
                }
            };
            let layout = LayoutLatent {
                shift: [
                    rng.random_range(-spec.shift..=spec.shift),
                    rng.random_range(-spec.shift..=spec.shift),
                ],
                scale: rng.random_range(spec.scale_min..=spec.scale_max),
                rotation: rng.random_range(-spec.rotation..=spec.rotation),
            };
            steps.push(StrokeStep {
                present: true,
                layout: layout.to_array(),
                points,
                matrix: layout.matrix().0,
                sigma: spec.sigma,
                s_slope: spec.s_slope,
            });
        }
        let traj = Trajectory {
            steps,
            g_slope: spec.g_slope,
        };
        let img = traj
            .render(spec.image_size, spec.samples, false)
            .map_err(|e| e.to_string())?;
        images.push(img.into_iter().map(|v| v as f32).collect());
        labels.push(label);
        trajectories.push(traj);
    }
    Ok(SyntheticData {
        dataset: ImageDataset {
            name: format!("synthetic-{:?}", spec.style).to_lowercase(),
            split: Split::Train,
            size: spec.image_size,
            images,
            labels: planted.then_some(labels),
        },
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(style: StrokeStyle) -> SyntheticSpec {
        SyntheticSpec {
            count: 12,
            image_size: 24,
            samples: 40,
            strokes_max: 2,
            style,
            seed: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn every_image_has_ink() {
        for style in [StrokeStyle::Random, StrokeStyle::Straight, StrokeStyle::Curly, StrokeStyle::Planted] {
            let d = make_synthetic(&small(style)).unwrap();
            for img in &d.dataset.images {
                assert!(img.iter().sum::<f32>() > 0.0);
                assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = make_synthetic(&small(StrokeStyle::Random)).unwrap();
        let b = make_synthetic(&small(StrokeStyle::Random)).unwrap();
        assert_eq!(a.dataset.images, b.dataset.images);
        assert_eq!(a.trajectories, b.trajectories);
    }

    #[test]
    fn stored_trajectories_reproduce_images() {
        let spec = small(StrokeStyle::Curly);
        let d = make_synthetic(&spec).unwrap();
        for (t, img) in d.trajectories.iter().zip(&d.dataset.images) {
            let again: Vec<f32> = t
                .render(spec.image_size, spec.samples, false)
                .unwrap()
                .into_iter()
                .map(|v| v as f32)
                .collect();
            assert_eq!(&again, img);
        }
    }

    #[test]
    fn planted_labels_follow_first_stroke() {
        let mut spec = small(StrokeStyle::Planted);
        spec.strokes_max = 1;
        let d = make_synthetic(&spec).unwrap();
        let labels = d.dataset.labels.unwrap();
        for (t, &l) in d.trajectories.iter().zip(&labels) {
            assert_eq!(t.steps[0].points, planted_shape(l as usize, spec.points));
        }
    }

    #[test]
    fn stroke_counts_respect_bounds() {
        let mut spec = small(StrokeStyle::Straight);
        spec.strokes_min = 2;
        spec.strokes_max = 3;
        let d = make_synthetic(&spec).unwrap();
        assert!(d.trajectories.iter().all(|t| (2..=3).contains(&t.num_strokes())));
    }
}
