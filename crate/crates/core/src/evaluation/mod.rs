//! Marginal-likelihood estimates, reconstruction and stroke statistics.

mod cluster;
mod toy;

pub use cluster::{kmeans, purity, silhouette, ClusterError, KMeans};
pub use toy::DiscreteToy;

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::model::{DoodModel, Trajectory};
use crate::nn::dist::log_sum_exp;
use crate::scalar::{to_f64, Scalar};
use crate::tensor::{Graph, Result as TResult};

/// Importance samples evaluated per forward pass.
pub const EVAL_BATCH: usize = 32;

/// `log (1/K sum_k exp(w_k))`.
pub fn iwae_from_log_weights(w: &[f64]) -> f64 {
    log_sum_exp(w) - (w.len() as f64).ln()
}

/// Mean and standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// Posterior run on one batch.
pub struct Reconstruction<T> {
    pub canvas: Vec<T>,
    pub trajectory: Trajectory<T>,
    /// `log p(x, z) - log q(z | x)`.
    pub log_weight: f64,
}

impl<T: Scalar> DoodModel<T> {
    /// Runs the recognition model once per image, in chunks of `batch`.
    pub fn reconstruct<R: Rng + ?Sized>(
        &self,
        images: &[&[T]],
        batch: usize,
        rng: &mut R,
    ) -> TResult<Vec<Reconstruction<T>>> {
        let hw = self.cfg.image_size;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let g = Graph::new();
            let ctx = self.ctx(&g);
            let x = g.constant(&[chunk.len(), hw, hw], chunk.concat())?;
            let inf = self.infer(&ctx, &x, self.cfg.t_max, rng)?;
            let lw = inf.log_lik.add(&inf.log_prior()?)?.sub(&inf.log_posterior()?)?.to_vec();
            let canvas = inf.canvas.to_vec();
            let trajs = self.inferred_trajectories(&inf);
            for (i, t) in trajs.into_iter().enumerate() {
                out.push(Reconstruction {
                    canvas: canvas[i * hw * hw..(i + 1) * hw * hw].to_vec(),
                    trajectory: t,
                    log_weight: to_f64(lw[i]),
                });
            }
        }
        Ok(out)
    }

    /// IWAE estimate of `log p(x)` with `k` samples per image.
    pub fn iwae<R: Rng + ?Sized>(&self, images: &[&[T]], k: usize, rng: &mut R) -> TResult<Vec<f64>> {
        assert!(k >= 1, "iwae needs at least one sample");
        let reps: Vec<&[T]> = images.iter().flat_map(|&x| std::iter::repeat_n(x, k)).collect();
        let w: Vec<f64> = self
            .reconstruct(&reps, EVAL_BATCH, rng)?
            .into_iter()
            .map(|r| r.log_weight)
            .collect();
        Ok(w.chunks(k).map(iwae_from_log_weights).collect())
    }

    /// Counts of posterior stroke numbers, indexed `0..=t_max`.
    pub fn stroke_histogram<R: Rng + ?Sized>(&self, images: &[&[T]], rng: &mut R) -> TResult<Vec<usize>> {
        let mut hist = vec![0; self.cfg.t_max + 1];
        for r in self.reconstruct(images, EVAL_BATCH, rng)? {
            hist[r.trajectory.num_strokes()] += 1;
        }
        Ok(hist)
    }

    /// Clusters the flattened control points of every inferred stroke.
    pub fn cluster_strokes<R: Rng + ?Sized>(
        &self,
        images: &[&[T]],
        k: usize,
        seed: u64,
        rng: &mut R,
    ) -> Result<StrokeClusters, EvalError> {
        let mut points = Vec::new();
        let mut image_index = Vec::new();
        for (i, r) in self.reconstruct(images, EVAL_BATCH, rng)?.into_iter().enumerate() {
            for s in r.trajectory.strokes() {
                points.push(s.points.iter().flat_map(|p| [to_f64(p[0]), to_f64(p[1])]).collect());
                image_index.push(i);
            }
        }
        let km = kmeans(&points, k, 50, seed)?;
        let sil = silhouette(&points, &km.assignments)?;
        Ok(StrokeClusters {
            assignments: km.assignments,
            silhouette: sil,
            strokes: points,
            image_index,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct StrokeClusters {
    pub assignments: Vec<usize>,
    pub silhouette: f64,
    /// Flattened canonical control points of each clustered stroke.
    pub strokes: Vec<Vec<f64>>,
    /// Image each stroke came from.
    pub image_index: Vec<usize>,
}

/// Mean per-pixel absolute difference.
pub fn l1<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| to_f64(x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Least-squares affine map sending `from` onto `to`: returns the residual
/// RMSE.
fn affine_fit_rmse(from: &[[f64; 2]], to: &[[f64; 2]]) -> f64 {
    // normal equations of [x y 1] a = target, shared by both outputs
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [[0.0; 2]; 3];
    for (p, q) in from.iter().zip(to) {
        let r = [p[0], p[1], 1.0];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += r[i] * r[j];
            }
            atb[i][0] += r[i] * q[0];
            atb[i][1] += r[i] * q[1];
        }
    }
    for d in 0..3 {
        ata[d][d] += 1e-9;
    }
    let coef = [0, 1].map(|c| solve3(ata, [atb[0][c], atb[1][c], atb[2][c]]));
    let se: f64 = from
        .iter()
        .zip(to)
        .map(|(p, q)| {
            let x = coef[0][0] * p[0] + coef[0][1] * p[1] + coef[0][2];
            let y = coef[1][0] * p[0] + coef[1][1] * p[1] + coef[1][2];
            (x - q[0]).powi(2) + (y - q[1]).powi(2)
        })
        .sum();
    (se / from.len() as f64).sqrt()
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).expect("non-empty");
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..3 {
            let f = a[r][c] / a[c][c];
            for k in c..3 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Control-point RMSE (pixels) after the best affine alignment of
/// `estimate` onto `truth`, minimised over both point orders.
pub fn aligned_rmse(truth: &[[f64; 2]], estimate: &[[f64; 2]]) -> f64 {
    let rev: Vec<[f64; 2]> = estimate.iter().rev().copied().collect();
    affine_fit_rmse(estimate, truth).min(affine_fit_rmse(&rev, truth))
}

/// Mean over true strokes of the best [`aligned_rmse`] against any inferred
/// stroke; infinite when nothing was inferred.
pub fn stroke_recovery_rmse<T: Scalar, U: Scalar>(truth: &Trajectory<U>, inferred: &Trajectory<T>, size: usize) -> f64 {
    let est: Vec<Vec<[f64; 2]>> = inferred
        .pixel_points(size)
        .iter()
        .map(|s| s.iter().map(|p| [to_f64(p[0]), to_f64(p[1])]).collect())
        .collect();
    let true_strokes = truth.pixel_points(size);
    if true_strokes.is_empty() {
        return 0.0;
    }
    let total: f64 = true_strokes
        .iter()
        .map(|t| {
            let t: Vec<[f64; 2]> = t.iter().map(|p| [to_f64(p[0]), to_f64(p[1])]).collect();
            est.iter().map(|e| aligned_rmse(&t, e)).fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / true_strokes.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    match s.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => s[n / 2],
        n => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

/// Mean IWAE of every source model on every target dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossTable {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// `cells[source][target]`: mean and std over evaluation seeds, `None`
    /// when the source model was unavailable.
    pub cells: Vec<Vec<Option<(f64, f64)>>>,
}

/// Fills the table; `models[i] = None` marks a missing checkpoint.
pub fn cross_dataset_table<T: Scalar>(
    models: &[(String, Option<&DoodModel<T>>)],
    datasets: &[(String, Vec<Vec<T>>)],
    k: usize,
    seeds: &[u64],
) -> TResult<CrossTable> {
    let mut cells = Vec::new();
    for (_, m) in models {
        let mut row = Vec::new();
        for (_, data) in datasets {
            row.push(match m {
                None => None,
                Some(model) => {
                    let imgs: Vec<&[T]> = data.iter().map(Vec::as_slice).collect();
                    let per_seed: Vec<f64> = seeds
                        .iter()
                        .map(|&s| {
                            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(s);
                            let v = model.iwae(&imgs, k, &mut rng)?;
                            Ok(v.iter().sum::<f64>() / v.len() as f64)
                        })
                        .collect::<TResult<_>>()?;
                    let n = per_seed.len() as f64;
                    let mean = per_seed.iter().sum::<f64>() / n;
                    let std = (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                    Some((mean, std))
                }
            });
        }
        cells.push(row);
    }
    Ok(CrossTable {
        sources: models.iter().map(|(n, _)| n.clone()).collect(),
        targets: datasets.iter().map(|(n, _)| n.clone()).collect(),
        cells,
    })
}

impl CrossTable {
    /// Rows are sources, columns targets; each cell is `mean±std` or `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("source");
        for t in &self.targets {
            let _ = write!(s, ",{t}");
        }
        s.push('\n');
        for (name, row) in self.sources.iter().zip(&self.cells) {
            s.push_str(name);
            for c in row {
                match c {
                    Some((m, sd)) => {
                        let _ = write!(s, ",{m:.4}±{sd:.4}");
                    }
                    None => s.push_str(",NA"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Heat map with one block per cell, normalised per column; missing
    /// cells are black.
    pub fn save_heatmap(&self, path: &Path, block: usize) -> std::io::Result<()> {
        let (rows, cols) = (self.sources.len(), self.targets.len());
        let mut px = vec![0.0f64; rows * cols * block * block];
        for c in 0..cols {
            let vals: Vec<f64> = (0..rows).filter_map(|r| self.cells[r][c].map(|v| v.0)).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..rows {
                let Some((m, _)) = self.cells[r][c] else { continue };
                let v = if hi > lo { 0.15 + 0.85 * (m - lo) / (hi - lo) } else { 1.0 };
                for y in 0..block {
                    for x in 0..block {
                        px[(r * block + y) * cols * block + c * block + x] = v;
                    }
                }
            }
        }
        crate::renderer::save_png(path, &px, rows * block, cols * block)
    }

    /// Whether the diagonal is the strict maximum of every column.
    pub fn diagonal_dominant(&self) -> bool {
        (0..self.targets.len()).all(|c| {
            let Some((d, _)) = self.cells.get(c).and_then(|r| r[c]) else {
                return false;
            };
            (0..self.sources.len()).all(|r| r == c || self.cells[r][c].is_none_or(|(v, _)| v < d))
        })
    }
}
