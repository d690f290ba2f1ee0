//! The stroke model: networks shared by the generative and recognition
//! sides, and the step engine both of them drive.

pub mod generative;
pub mod recognition;
mod step;

pub use step::{LatentSource, RunState, StepOut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affine::{LayoutRanges, LAYOUT_DIM};
use crate::nn::{CnnEncoder, Ctx, GruCell, Mlp};
use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Result, Tensor};

/// Architecture and structural switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub glimpse: usize,
    pub t_max: usize,
    pub points: usize,
    pub samples: usize,
    pub mixtures: usize,
    pub hidden: usize,
    pub features: usize,
    pub mlp_hidden: Vec<usize>,
    pub cnn_channels: Vec<usize>,
    pub scale_min: f64,
    pub rotation_max: f64,
    /// Turns off guided execution: no network reads the canvas or residual.
    pub eg_ablation: bool,
    /// Feeds the residual ink ratio to the presence posterior.
    pub rho_rsd: bool,
    pub literal_raster: bool,
    /// Presence heads start with zero weights and this bias when set.
    pub presence_init_bias: Option<f64>,
    /// Initial Laplace scale of the pixel likelihood.
    pub likelihood_scale: f64,
    /// Initial per-stroke blur (pixels), stroke slope and canvas slope.
    pub init_sigma: f64,
    pub init_s_slope: f64,
    pub init_g_slope: f64,
    /// Bounds of the per-stroke blur and stroke slope predicted per step.
    pub sigma_range: [f64; 2],
    pub s_slope_range: [f64; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 50,
            glimpse: 20,
            t_max: 6,
            points: 5,
            samples: 100,
            mixtures: 10,
            hidden: 256,
            features: 256,
            mlp_hidden: vec![256, 256],
            cnn_channels: vec![8, 16],
            scale_min: 0.2,
            rotation_max: std::f64::consts::FRAC_PI_4,
            eg_ablation: false,
            rho_rsd: false,
            literal_raster: false,
            presence_init_bias: None,
            likelihood_scale: 0.2,
            init_sigma: 1.0,
            init_s_slope: 0.3,
            init_g_slope: 0.5,
            sigma_range: [0.8, 1.5],
            s_slope_range: [0.15, 0.6],
        }
    }
}

impl ModelConfig {
    pub fn ranges(&self) -> LayoutRanges {
        LayoutRanges {
            scale_min: self.scale_min,
            rotation_max: self.rotation_max,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let pos = [
            ("image_size", self.image_size),
            ("t_max", self.t_max),
            ("mixtures", self.mixtures),
            ("hidden", self.hidden),
            ("features", self.features),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(format!("model.{name} must be positive"));
            }
        }
        if self.glimpse < 2 {
            return Err("model.glimpse must be at least 2".into());
        }
        if self.points < 2 {
            return Err("model.points must be at least 2".into());
        }
        if self.samples < 2 {
            return Err("model.samples must be at least 2".into());
        }
        if self.cnn_channels.is_empty() || self.cnn_channels.contains(&0) {
            return Err("model.cnn_channels must be non-empty and positive".into());
        }
        if self.mlp_hidden.contains(&0) {
            return Err("model.mlp_hidden widths must be positive".into());
        }
        if !(self.scale_min > 0.0 && self.scale_min < 1.0) {
            return Err("model.scale_min must lie in (0, 1)".into());
        }
        if !(self.rotation_max > 0.0 && self.rotation_max < std::f64::consts::FRAC_PI_2) {
            return Err("model.rotation_max must lie in (0, pi/2)".into());
        }
        for (name, v) in [
            ("likelihood_scale", self.likelihood_scale),
            ("init_sigma", self.init_sigma),
            ("init_s_slope", self.init_s_slope),
            ("init_g_slope", self.init_g_slope),
        ] {
            if !(v.is_finite() && v > 1e-3) {
                return Err(format!("model.{name} must be finite and above 1e-3"));
            }
        }
        for (name, [lo, hi], init) in [
            ("sigma_range", self.sigma_range, self.init_sigma),
            ("s_slope_range", self.s_slope_range, self.init_s_slope),
        ] {
            if !(lo > 0.0 && lo < init && init < hi && hi.is_finite()) {
                return Err(format!("model.{name} must satisfy 0 < lo < initial value < hi"));
            }
        }
        if let Some(b) = self.presence_init_bias {
            if !b.is_finite() {
                return Err("model.presence_init_bias must be finite".into());
            }
        }
        Ok(())
    }

    fn layout_prior_width(&self) -> usize {
        self.mixtures * (1 + 2 * LAYOUT_DIM)
    }

    fn stroke_prior_width(&self) -> usize {
        self.points * self.mixtures * 5
    }
}

/// Sub-networks of the model.
#[derive(Clone, Debug)]
pub struct Nets {
    /// Canvas, target and their glimpses.
    pub enc_image: CnnEncoder,
    /// Residual and residual glimpses.
    pub enc_residual: CnnEncoder,
    pub prior_presence: Mlp,
    pub prior_layout: Mlp,
    pub prior_stroke: Mlp,
    pub render: Mlp,
    pub post_presence: Mlp,
    pub post_layout: Mlp,
    pub post_stroke: Mlp,
    pub gru_layout: GruCell,
    pub gru_stroke: GruCell,
    pub baseline: Mlp,
    pub g_slope: ParamId,
    pub log_scale: ParamId,
}

/// Parameters and structure of one model instance.
#[derive(Clone, Debug)]
pub struct DoodModel<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub nets: Nets,
}

pub(crate) fn softplus_f64(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softplus_inv(y: f64) -> f64 {
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Inverse of `lo + (hi - lo) * sigmoid(x)`.
pub(crate) fn bounded_inv(y: f64, [lo, hi]: [f64; 2]) -> f64 {
    let u = (y - lo) / (hi - lo);
    (u / (1.0 - u)).ln()
}

/// Floor added to every softplus-produced scale.
pub const SCALE_FLOOR: f64 = 1e-3;

impl<T: Scalar> DoodModel<T> {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Self {
        let mut p = ParamStore::new();
        let s = &mut p;
        let (f, h, j) = (cfg.features, cfg.hidden, cfg.points);
        let hid = &cfg.mlp_hidden;
        let (full, gl) = (cfg.image_size, cfg.glimpse);
        let sizes = [(full, full), (gl, gl)];
        let rest = ParamGroup::Rest;
        let nvil = ParamGroup::Nvil;
        let enc_image = CnnEncoder::new(s, rng, "enc_image", &cfg.cnn_channels, &sizes, f, rest);
        let enc_residual = CnnEncoder::new(s, rng, "enc_residual", &cfg.cnn_channels, &sizes, f, rest);
        let prior_presence = Mlp::new(s, rng, "prior_presence", f, hid, 1, rest);
        let prior_layout = Mlp::new(s, rng, "prior_layout", f + h, hid, cfg.layout_prior_width(), rest);
        let prior_stroke = Mlp::new(s, rng, "prior_stroke", h + LAYOUT_DIM + f, hid, cfg.stroke_prior_width(), rest);
        let render = Mlp::new(s, rng, "render", f + h, hid, 2, rest);
        let pres_in = f + usize::from(cfg.rho_rsd);
        let post_presence = Mlp::new(s, rng, "post_presence", pres_in, hid, 1, nvil);
        let post_layout = Mlp::new(s, rng, "post_layout", 2 * f + h, hid, 2 * LAYOUT_DIM, rest);
        let post_stroke = Mlp::new(s, rng, "post_stroke", 2 * f + h, hid, 4 * j, rest);
        let gru_layout = GruCell::new(s, rng, "gru_layout", LAYOUT_DIM + f, h, rest);
        let gru_stroke = GruCell::new(s, rng, "gru_stroke", 2 * j + f, h, rest);
        let baseline = Mlp::new(s, rng, "baseline", f + 2 * h, hid, 1, nvil);
        let g_slope = s.add("g_slope", &[1], vec![lit(softplus_inv(cfg.init_g_slope - SCALE_FLOOR))], rest);
        let log_scale = s.add("log_scale", &[1], vec![lit(cfg.likelihood_scale.ln())], rest);
        let nets = Nets {
            enc_image,
            enc_residual,
            prior_presence,
            prior_layout,
            prior_stroke,
            render,
            post_presence,
            post_layout,
            post_stroke,
            gru_layout,
            gru_stroke,
            baseline,
            g_slope,
            log_scale,
        };
        let mut model = Self { cfg, params: p, nets };
        model.init_heads(rng);
        model
    }

    /// Output-layer initialisation: posterior layouts start at the identity
    /// transform, prior layouts near it, scales start small, and render
    /// parameters start at their configured values.
    fn init_heads<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let cfg = self.cfg.clone();
        let (j, k) = (cfg.points, cfg.mixtures);
        let ident = self.layout_identity_raw();
        let small = lit::<T>(0.01);

        let mut bias = ident.to_vec();
        bias.extend([softplus_inv(0.05 - SCALE_FLOOR); LAYOUT_DIM]);
        self.nets.post_layout.output().set_constant_output(&mut self.params, &to_t(&bias));

        let mut bias = vec![0.0; k];
        for _ in 0..k {
            bias.extend(ident);
        }
        bias.extend(vec![softplus_inv(0.5); k * LAYOUT_DIM]);
        self.nets.prior_layout.output().shrink_with_bias(&mut self.params, small, &to_t(&bias));

        let mut bias: Vec<f64> = (0..2 * j).map(|_| rng.random_range(-0.3..0.3)).collect();
        bias.extend(vec![softplus_inv(0.1 - SCALE_FLOOR); 2 * j]);
        self.nets.post_stroke.output().shrink_with_bias(&mut self.params, lit(0.1), &to_t(&bias));

        // per control point: K logits, K x 2 means, K x 2 scales
        let mut bias = Vec::with_capacity(cfg.stroke_prior_width());
        for _ in 0..j {
            bias.extend(vec![0.0; k]);
            bias.extend((0..2 * k).map(|_| rng.random_range(-0.8..0.8)));
            bias.extend(vec![softplus_inv(0.4); 2 * k]);
        }
        self.nets.prior_stroke.output().shrink_with_bias(&mut self.params, small, &to_t(&bias));

        let bias = [
            bounded_inv(cfg.init_sigma, cfg.sigma_range),
            bounded_inv(cfg.init_s_slope, cfg.s_slope_range),
        ];
        self.nets.render.output().shrink_with_bias(&mut self.params, small, &to_t(&bias));

        if let Some(b) = cfg.presence_init_bias {
            self.nets.prior_presence.output().set_constant_output(&mut self.params, &[lit(b)]);
            self.nets.post_presence.output().set_constant_output(&mut self.params, &[lit(b)]);
        }
    }

    /// Pre-squash layout values that decode to `(0, 0, ~1, 0)`.
    fn layout_identity_raw(&self) -> [f64; 4] {
        [0.0, 0.0, 4.0, 0.0]
    }

    pub fn ranges(&self) -> LayoutRanges {
        self.cfg.ranges()
    }

    pub fn ctx<'g>(&'g self, graph: &'g crate::tensor::Graph<T>) -> Ctx<'g, T> {
        Ctx::new(graph, &self.params)
    }

    pub fn g_slope<'g>(&self, ctx: &Ctx<'g, T>) -> Tensor<'g, T> {
        ctx.param(self.nets.g_slope).softplus().add_scalar(lit(SCALE_FLOOR))
    }

    pub fn likelihood_scale<'g>(&self, ctx: &Ctx<'g, T>) -> Tensor<'g, T> {
        ctx.param(self.nets.log_scale).clamp(lit(-7.0), lit(3.0)).exp()
    }

    pub fn g_slope_value(&self) -> T {
        let raw = to_f64(self.params.value(self.nets.g_slope)[0]);
        lit(softplus_f64(raw) + SCALE_FLOOR)
    }

    /// Squashes raw layout values on the last axis: shift via tanh, scale
    /// into `[scale_min, 1]` via sigmoid, rotation via tanh.
    pub(crate) fn squash_layout<'g>(&self, raw: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        let ax = raw.rank() - 1;
        let r = self.ranges();
        let shift = raw.slice(ax, 0, 2)?.tanh();
        let scale = raw
            .slice(ax, 2, 1)?
            .sigmoid()
            .affine(lit(1.0 - r.scale_min), lit(r.scale_min));
        let rot = raw.slice(ax, 3, 1)?.tanh().scale(lit(r.rotation_max));
        Tensor::concat(&[shift, scale, rot], ax)
    }
}

fn to_t<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| lit(x)).collect()
}

/// Plain values of one step of a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrokeStep<T> {
    pub present: bool,
    /// `(shift_x, shift_y, scale, rotation)`.
    pub layout: [T; 4],
    /// Canonical control points.
    pub points: Vec<[T; 2]>,
    /// Glimpse-to-canvas map used to place the stroke.
    pub matrix: [T; 6],
    pub sigma: T,
    pub s_slope: T,
}

/// Latent trajectory of one image. Steps after the first absent one are
/// kept for bookkeeping but never drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    pub steps: Vec<StrokeStep<T>>,
    pub g_slope: T,
}

impl<T: Scalar> Trajectory<T> {
    pub fn num_strokes(&self) -> usize {
        self.steps.iter().take_while(|s| s.present).count()
    }

    pub fn strokes(&self) -> impl Iterator<Item = &StrokeStep<T>> {
        self.steps.iter().take_while(|s| s.present)
    }

    /// Ones followed by zeros.
    pub fn is_unary(&self) -> bool {
        let n = self.num_strokes();
        self.steps[n..].iter().all(|s| !s.present)
    }

    /// Pixel-frame control points of each drawn stroke.
    pub fn pixel_points(&self, size: usize) -> Vec<Vec<[T; 2]>> {
        let half = lit::<T>((size - 1) as f64 / 2.0);
        self.strokes()
            .map(|s| {
                let m = crate::affine::Affine(s.matrix);
                s.points
                    .iter()
                    .map(|&p| {
                        let q = m.apply(p);
                        [(q[0] + T::one()) * half, (q[1] + T::one()) * half]
                    })
                    .collect()
            })
            .collect()
    }

    /// Renders the drawn strokes with their recorded placement and render
    /// parameters into a `size x size` canvas.
    pub fn render(&self, size: usize, samples: usize, literal: bool) -> Result<Vec<T>> {
        let strokes: Vec<_> = self.strokes().collect();
        if strokes.is_empty() {
            return Ok(vec![T::zero(); size * size]);
        }
        let g = crate::tensor::Graph::new();
        let m = strokes.len();
        let j = strokes[0].points.len();
        let pts = g.constant(&[m, j, 2], strokes.iter().flat_map(|s| s.points.iter().flatten().copied()).collect())?;
        let mat = g.constant(&[m, 6], strokes.iter().flat_map(|s| s.matrix).collect())?;
        let sig = g.constant(&[m], strokes.iter().map(|s| s.sigma).collect())?;
        let slope = g.constant(&[m], strokes.iter().map(|s| s.s_slope).collect())?;
        let cp = crate::affine::transform_control_points(&pts, &mat, size, size)?;
        let img = crate::renderer::render_stroke(&cp, &sig, &slope, samples, size, size, literal)?;
        let gs = self.g_slope;
        Ok(img.sum_axis(0)?.to_vec().into_iter().map(|v| (v / gs).tanh()).collect())
    }
}
