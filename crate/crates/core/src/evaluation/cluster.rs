//! k-means with k-means++ seeding, silhouette coefficient and purity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClusterError {
    #[error("need at least {k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("k must be at least 2")]
    BadK,
    #[error("fewer than two non-empty clusters; silhouette undefined")]
    Degenerate,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut c = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &c[0])).collect();
    while c.len() < k {
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &w) in d.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        c.push(points[pick].clone());
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(p, &c[c.len() - 1]));
        }
    }
    c
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeans {
    let dim = points[0].len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..300 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..centroids.len())
                .min_by(|&a, &b| dist2(p, &centroids[a]).total_cmp(&dist2(p, &centroids[b])))
                .expect("k >= 1");
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, (s, &n)) in centroids.iter_mut().zip(sums.iter().zip(&counts)) {
            if n > 0 {
                *c = s.iter().map(|v| v / n as f64).collect();
            }
        }
    }
    let inertia = points.iter().zip(&assign).map(|(p, &a)| dist2(p, &centroids[a])).sum();
    KMeans {
        assignments: assign,
        centroids,
        inertia,
    }
}

/// Best of `restarts` k-means++ initialised Lloyd runs.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<KMeans, ClusterError> {
    if k < 2 {
        return Err(ClusterError::BadK);
    }
    if points.len() < k {
        return Err(ClusterError::TooFewPoints { n: points.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(points, seed_plus_plus(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Mean silhouette coefficient. Points in singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], assign: &[usize]) -> Result<f64, ClusterError> {
    let k = assign.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assign {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(ClusterError::Degenerate);
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; k];
        for (q, &b) in points.iter().zip(assign) {
            sums[b] += dist2(p, q).sqrt();
        }
        let own = assign[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    let s = total / points.len() as f64;
    if s.is_finite() {
        Ok(s)
    } else {
        Err(ClusterError::Degenerate)
    }
}

/// Fraction of points whose label is the majority label of their cluster.
pub fn purity(assign: &[usize], labels: &[u32]) -> f64 {
    use std::collections::HashMap;
    let mut counts: HashMap<usize, HashMap<u32, usize>> = HashMap::new();
    for (&a, &l) in assign.iter().zip(labels) {
        *counts.entry(a).or_default().entry(l).or_default() += 1;
    }
    let hits: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    hits as f64 / assign.len().max(1) as f64
}
