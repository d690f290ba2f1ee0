//! Type-token tasks: exemplar generation, partial completion and one-shot
//! classification.

mod token;

pub use token::{apply_token, token_perturb, TokenAffine, TokenModel};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::generative::image_likelihood;
use crate::model::{DoodModel, Trajectory};
use crate::nn::dist::log_sum_exp;
use crate::renderer::{normalize_canvas, render_stroke};
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::{Graph, ParamGroup, ParamStore, Result, Tensor};
use crate::training::Adam;

impl<T: Scalar> DoodModel<T> {
    /// Posterior trajectories for `k` independent draws on one image.
    pub fn sample_types<R: Rng + ?Sized>(&self, x: &[T], k: usize, rng: &mut R) -> Result<Vec<Trajectory<T>>> {
        let hw = self.cfg.image_size;
        let g = Graph::new();
        let ctx = self.ctx(&g);
        let xs = g.constant(&[k, hw, hw], x.repeat(k))?;
        let inf = self.infer(&ctx, &xs, self.cfg.t_max, rng)?;
        Ok(self.inferred_trajectories(&inf))
    }

    /// `n` new drawings of the character in `x`. With `shared`, one type
    /// sample is reused for every exemplar.
    pub fn exemplars<R: Rng + ?Sized>(
        &self,
        x: &[T],
        n: usize,
        tm: &TokenModel,
        shared: bool,
        rng: &mut R,
    ) -> Result<Vec<Vec<T>>> {
        let types = if shared {
            vec![self.sample_types(x, 1, rng)?.remove(0); n]
        } else {
            self.sample_types(x, n, rng)?
        };
        let c = &self.cfg;
        types
            .iter()
            .map(|psi| token_perturb(psi, tm, rng).render(c.image_size, c.samples, c.literal_raster))
            .collect()
    }

    /// Completes a partial drawing: the recognition model explains the
    /// partial figure to set the recurrent state, then the prior continues
    /// drawing on top of the figure itself.
    pub fn complete<R: Rng + ?Sized>(&self, partial: &[T], rng: &mut R) -> Result<Vec<T>> {
        let hw = self.cfg.image_size;
        let g = Graph::new();
        let ctx = self.ctx(&g);
        let x = g.constant(&[1, hw, hw], partial.to_vec())?;
        let has_ink = partial.iter().any(|&v| v > T::zero());
        let mut st = None;
        if has_ink {
            let inf = self.infer(&ctx, &x, self.cfg.t_max, rng)?;
            let drawn = inf.stroke_counts()[0];
            if drawn > 0 {
                let mut s = inf.state;
                s.t = drawn;
                s.alive = vec![true];
                s.target = None;
                st = Some(s);
            }
        }
        let mut st = match st {
            Some(s) => s,
            None => self.start(&ctx, 1, None)?,
        };
        st.canvas_sum = g.constant(&[1, hw, hw], self.canvas_sum_for(partial))?;
        st.canvas = self.canvas_of(&ctx, &st)?.detach();
        self.continue_rollout(&ctx, &mut st, T::one(), rng)?;
        Ok(self.canvas_of(&ctx, &st)?.to_vec())
    }

    /// Renders a token given as differentiable control points `[m, J, 2]`
    /// and canvas warp parameters `(tx, ty, sx, sy, rotation, shear)`.
    fn render_token<'g>(
        &self,
        g: &'g Graph<T>,
        psi: &Trajectory<T>,
        points: &Tensor<'g, T>,
        warp: &Tensor<'g, T>,
    ) -> Result<Tensor<'g, T>> {
        let hw = self.cfg.image_size;
        let strokes: Vec<_> = psi.strokes().collect();
        let m = strokes.len();
        let p = |i| warp.slice(0, i, 1);
        let (tx, ty, sx, sy, th, sh) = (p(0)?, p(1)?, p(2)?, p(3)?, p(4)?, p(5)?);
        let (c, s) = (th.cos(), th.sin());
        let t = sh.sin().div(&sh.cos())?;
        let a = Tensor::concat(
            &[
                c.mul(&sx)?,
                c.mul(&t)?.sub(&s)?.mul(&sy)?,
                tx,
                s.mul(&sx)?,
                s.mul(&t)?.add(&c)?.mul(&sy)?,
                ty,
            ],
            0,
        )?
        .reshape(&[1, 6])?;
        let a = g.full(&[m, 1], T::one()).mul(&a)?;
        let base = g.constant(&[m, 6], strokes.iter().flat_map(|s| s.matrix).collect())?;
        let mat = crate::affine::compose(&a, &base)?;
        let cp = crate::affine::transform_control_points(points, &mat, hw, hw)?;
        let sig = g.constant(&[m], strokes.iter().map(|s| s.sigma).collect())?;
        let slope = g.constant(&[m], strokes.iter().map(|s| s.s_slope).collect())?;
        let img = render_stroke(&cp, &sig, &slope, self.cfg.samples, hw, hw, self.cfg.literal_raster)?;
        let sum = img.sum_axis(0)?.reshape(&[1, hw, hw])?;
        normalize_canvas(&sum, &g.scalar(psi.g_slope))
    }

    /// Starting warp for the token fit: the best of a grid of rotations and
    /// shears, each shifted so the ink centroids of token and target agree.
    fn initial_warp(&self, psi: &Trajectory<T>, x: &[T], tm: &TokenModel, b: f64) -> Result<[f64; 6]> {
        const ROTATIONS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
        const SHEARS: [f64; 3] = [-0.5, 0.0, 0.5];
        let hw = self.cfg.image_size;
        let bounds = tm.bounds();
        let pts: Vec<T> = psi.strokes().flat_map(|s| s.points.iter().flatten().copied()).collect();
        let m = psi.num_strokes().max(1);
        let shape = [m, pts.len() / (2 * m), 2];
        let target = centroid(x, hw);
        let mut best = (f64::NEG_INFINITY, TokenAffine::identity().params());
        for r in ROTATIONS {
            for sh in SHEARS {
                let mut w = TokenAffine::identity().params();
                w[4] = r * tm.rotation;
                w[5] = sh * tm.shear;
                let score = |w: &[f64; 6]| -> Result<(f64, Vec<T>)> {
                    let g = Graph::new();
                    let points = g.constant(&shape, pts.clone())?;
                    let warp = g.constant(&[6], w.iter().map(|&v| lit(v)).collect())?;
                    let canvas = self.render_token(&g, psi, &points, &warp)?.to_vec();
                    Ok((to_f64(image_likelihood(&canvas, x, lit(b))), canvas))
                };
                let (_, canvas) = score(&w)?;
                if let (Some(t), Some(c)) = (target, centroid(&canvas, hw)) {
                    for d in 0..2 {
                        w[d] = (t[d] - c[d]).clamp(bounds[d].0, bounds[d].1);
                    }
                }
                let (ll, _) = score(&w)?;
                if ll > best.0 {
                    best = (ll, w);
                }
            }
        }
        Ok(best.1)
    }

    /// `max_z log p(x | z) + log p(z | psi)` by gradient ascent on the token's
    /// control points and warp, starting from `z = psi` under the best warp of
    /// a coarse search.
    pub fn fit_token(&self, psi: &Trajectory<T>, x: &[T], cfg: &ClassifyConfig) -> Result<TokenFit> {
        let hw = self.cfg.image_size;
        let tm = &cfg.token;
        let b = to_f64(self.params.value(self.nets.log_scale)[0]).clamp(-7.0, 3.0).exp();
        let strokes: Vec<_> = psi.strokes().collect();
        if strokes.is_empty() {
            let blank = vec![T::zero(); hw * hw];
            let score = to_f64(image_likelihood(&blank, x, lit(b))) + tm.affine_log_density(&TokenAffine::identity());
            return Ok(TokenFit { score, fallback: false });
        }
        let m = strokes.len();
        let j = strokes[0].points.len();
        let psi_pts: Vec<T> = strokes.iter().flat_map(|s| s.points.iter().flatten().copied()).collect();
        let bounds = tm.bounds();
        let mut store = ParamStore::new();
        let pid = store.add("points", &[m, j, 2], psi_pts.clone(), ParamGroup::Rest);
        let warp0 = self.initial_warp(psi, x, tm, b)?;
        let wid = store.add("warp", &[6], warp0.map(lit::<T>).to_vec(), ParamGroup::Rest);
        let mut adam = Adam::new(&store, cfg.lr, cfg.lr);
        let affine_lp = tm.affine_log_density(&TokenAffine::identity());
        let noise_lp = -(tm.noise.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln()) * (m * j * 2) as f64;

        let mut best: Option<f64> = None;
        let mut initial = f64::NAN;
        let mut diverged = false;
        for it in 0..=cfg.steps {
            let g = Graph::new();
            let points = if tm.noise > 0.0 {
                g.param(&store, pid)
            } else {
                g.constant(&[m, j, 2], psi_pts.clone())?
            };
            let raw = g.param(&store, wid);
            let warp = Tensor::concat(
                &(0..6)
                    .map(|i| Ok(raw.slice(0, i, 1)?.clamp(lit(bounds[i].0), lit(bounds[i].1))))
                    .collect::<Result<Vec<_>>>()?,
                0,
            )?;
            let canvas = self.render_token(&g, psi, &points, &warp)?;
            let xt = g.constant(&[1, hw, hw], x.to_vec())?;
            let bt = g.scalar(lit::<T>(b));
            let ll = crate::nn::dist::laplace_log_prob(&canvas, &bt, &xt)?.sum();
            let obj = if tm.noise > 0.0 {
                let d = points.sub(&g.constant(&[m, j, 2], psi_pts.clone())?)?.scale(lit(1.0 / tm.noise));
                ll.sub(&d.square().sum().scale(lit(0.5)))?
            } else {
                ll
            };
            let val = to_f64(obj.item()) + affine_lp + if tm.noise > 0.0 { noise_lp } else { 0.0 };
            if it == 0 {
                initial = val;
            }
            if !val.is_finite() {
                diverged = true;
                break;
            }
            best = Some(best.map_or(val, |bv: f64| bv.max(val)));
            if it == cfg.steps {
                break;
            }
            obj.neg().backward()?;
            let grads = g.param_grads(&store);
            if !grads.all_finite() {
                diverged = true;
                break;
            }
            adam.step(&mut store, &grads);
        }
        Ok(match (diverged, best) {
            (false, Some(s)) => TokenFit { score: s, fallback: false },
            (_, best) => TokenFit {
                score: if initial.is_finite() { initial } else { best.unwrap_or(f64::NEG_INFINITY) },
                fallback: true,
            },
        })
    }

    /// Scores every support class for the query and predicts the best one.
    /// Each class draws its type samples from an rng seeded by `seed` and the
    /// support's pixels, so the result does not depend on support order.
    pub fn classify_episode(&self, supports: &[&[T]], query: &[T], cfg: &ClassifyConfig, seed: u64) -> Result<EpisodeResult> {
        assert!(supports.len() >= 2, "an episode needs at least two classes");
        assert!(cfg.k >= 1, "need at least one type sample");
        let mut scores = Vec::with_capacity(supports.len());
        let mut fallbacks = 0;
        let b = lit::<T>(to_f64(self.params.value(self.nets.log_scale)[0]).clamp(-7.0, 3.0).exp());
        for x in supports {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ pixel_hash(x));
            let types = self.sample_types(x, cfg.k, &mut rng)?;
            let prior = self.log_prior(&types)?;
            let c = &self.cfg;
            let mut log_w = Vec::with_capacity(cfg.k);
            let mut fits = Vec::with_capacity(cfg.k);
            for (psi, lp) in types.iter().zip(prior) {
                let img = psi.render(c.image_size, c.samples, c.literal_raster)?;
                log_w.push(to_f64(image_likelihood(&img, x, b)) + to_f64(lp));
                let fit = self.fit_token(psi, query, cfg)?;
                fallbacks += usize::from(fit.fallback);
                fits.push(fit.score);
            }
            let z = log_sum_exp(&log_w);
            let terms: Vec<f64> = log_w.iter().zip(&fits).map(|(w, f)| w - z + f).collect();
            scores.push(log_sum_exp(&terms));
        }
        let predicted = (0..scores.len())
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
            .expect("non-empty");
        Ok(EpisodeResult {
            predicted,
            scores,
            fallbacks,
        })
    }

    /// Episodes whose queries are tokens of type samples inferred from one of
    /// the supports.
    pub fn self_consistency_episodes(
        &self,
        pool: &[Vec<T>],
        ways: usize,
        count: usize,
        tm: &TokenModel,
        seed: u64,
    ) -> Result<Vec<Episode<T>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.cfg;
        (0..count)
            .map(|_| {
                let idx = sample(&mut rng, pool.len(), ways).into_vec();
                let label = rng.random_range(0..ways);
                let psi = self.sample_types(&pool[idx[label]], 1, &mut rng)?.remove(0);
                let query = token_perturb(&psi, tm, &mut rng).render(c.image_size, c.samples, c.literal_raster)?;
                Ok(Episode {
                    supports: idx.iter().map(|&i| pool[i].clone()).collect(),
                    query,
                    label,
                })
            })
            .collect()
    }
}

/// Intensity-weighted mean position in canvas coordinates `[-1, 1]`, or
/// `None` for a blank image.
fn centroid<T: Scalar>(img: &[T], hw: usize) -> Option<[f64; 2]> {
    let (mut m, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for (i, &v) in img.iter().enumerate() {
        let v = to_f64(v).max(0.0);
        m += v;
        cx += v * (i % hw) as f64;
        cy += v * (i / hw) as f64;
    }
    let half = (hw - 1) as f64 / 2.0;
    (m > 1e-9).then(|| [cx / m / half - 1.0, cy / m / half - 1.0])
}

fn pixel_hash<T: Scalar>(x: &[T]) -> u64 {
    let mut h = DefaultHasher::new();
    for &v in x {
        to_f64(v).to_bits().hash(&mut h);
    }
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifyConfig {
    /// Type samples per support.
    pub k: usize,
    /// Gradient-ascent steps of the token fit.
    pub steps: usize,
    pub lr: f64,
    pub token: TokenModel,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            k: 5,
            steps: 50,
            lr: 0.01,
            token: TokenModel::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenFit {
    pub score: f64,
    /// The optimisation diverged and the score is that of `z = psi`.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub predicted: usize,
    pub scores: Vec<f64>,
    /// Token fits that fell back to the unoptimised type.
    pub fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode<T> {
    pub supports: Vec<Vec<T>>,
    pub query: Vec<T>,
    /// Index of the query's class among the supports.
    pub label: usize,
}

/// One episode of an episode manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeFiles {
    pub supports: Vec<(PathBuf, u32)>,
    pub query: (PathBuf, u32),
}

impl EpisodeFiles {
    /// Position of the support sharing the query's label.
    pub fn target(&self) -> Option<usize> {
        self.supports.iter().position(|(_, l)| *l == self.query.1)
    }
}

/// Parses `episode<TAB>support|query<TAB>path<TAB>label` lines, in episode
/// order of first appearance. Relative paths resolve against the manifest's
/// directory.
pub fn read_episodes(path: &Path) -> std::result::Result<Vec<EpisodeFiles>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut order: Vec<String> = Vec::new();
    let mut sup: Vec<Vec<(PathBuf, u32)>> = Vec::new();
    let mut qry: Vec<Option<(PathBuf, u32)>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| format!("{}:{}: {m}", path.display(), i + 1);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad("expected episode<TAB>role<TAB>path<TAB>label"));
        }
        let label: u32 = f[3].trim().parse().map_err(|_| bad("bad label"))?;
        let e = match order.iter().position(|o| o == f[0]) {
            Some(e) => e,
            None => {
                order.push(f[0].to_string());
                sup.push(Vec::new());
                qry.push(None);
                order.len() - 1
            }
        };
        let entry = (base.join(f[2]), label);
        match f[1] {
            "support" => sup[e].push(entry),
            "query" if qry[e].is_none() => qry[e] = Some(entry),
            "query" => return Err(bad("episode has more than one query")),
            _ => return Err(bad("role must be support or query")),
        }
    }
    order
        .iter()
        .zip(sup.into_iter().zip(qry))
        .map(|(name, (s, q))| {
            let q = q.ok_or_else(|| format!("episode {name} has no query"))?;
            if s.len() < 2 {
                return Err(format!("episode {name} needs at least two supports"));
            }
            Ok(EpisodeFiles { supports: s, query: q })
        })
        .collect()
}
