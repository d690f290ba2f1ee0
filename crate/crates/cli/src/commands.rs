use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use dood::checkpoint::{Checkpoint, CheckpointError};
use dood::config::{ConfigError, RunConfig};
use dood::data::{load_dataset, load_png_gray, make_synthetic, preprocess, DataError, ImageDataset, Split, SyntheticData};
use dood::evaluation::{l1, mean_se, median, purity, stroke_recovery_rmse, EvalError, EVAL_BATCH};
use dood::renderer::{save_png, tile};
use dood::tasks::{read_episodes, Episode};
use dood::training::TrainError;
use dood::{Model32, TensorError, Trainer32};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Cli, CliError, Command, Common};

const CHECKPOINT: &str = "model.ckpt";
const DATA_DIR_VAR: &str = "DOOD_DATA_DIR";

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Config(_) | CheckpointError::Mismatch(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::EmptyDataset | TrainError::ImageSize { .. } => CliError::Data(e.to_string()),
            _ => CliError::Run(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let c = &cli.common;
    fs::create_dir_all(&c.out).map_err(|e| CliError::Run(format!("{}: {e}", c.out.display())))?;
    match &cli.cmd {
        Command::Train { steps } => train(c, *steps),
        Command::MakeSynthetic => make_synthetic_cmd(c),
        cmd => {
            let (cfg, model) = load_model(c)?;
            match cmd {
                Command::EvalMll { k } => eval_mll(c, &cfg, &model, k.unwrap_or(cfg.eval.iwae_k)),
                Command::Reconstruct => reconstruct(c, &cfg, &model),
                Command::Sample { count, temperature } => sample(c, &cfg, &model, *count, *temperature),
                Command::Complete { keep } => complete(c, &cfg, &model, *keep),
                Command::Exemplars { per_image, shared } => exemplars(c, &cfg, &model, *per_image, *shared),
                Command::Classify {
                    episodes,
                    k,
                    invert,
                    ways,
                    count,
                } => {
                    let mut cfg = cfg;
                    if let Some(k) = k {
                        cfg.classify.k = *k;
                        cfg.validate()?;
                    }
                    match episodes {
                        Some(p) => classify_manifest(c, &cfg, &model, p, *invert),
                        None => classify_generated(c, &cfg, &model, *ways, *count),
                    }
                }
                Command::Cluster { k } => cluster(c, &cfg, &model, k.unwrap_or(cfg.eval.cluster_k)),
                Command::Train { .. } | Command::MakeSynthetic => unreachable!(),
            }
        }
    }
}

/// Configuration from `--config` (or `base` when absent), `--set`,
/// `--dataset` and `--workers`.
fn resolve_config(c: &Common, base: Option<&str>) -> Result<RunConfig, CliError> {
    let text = match (&c.config, base) {
        (Some(p), _) => fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        (None, Some(b)) => b.to_string(),
        (None, None) => String::new(),
    };
    let mut sets = c.set.clone();
    if let Some(d) = &c.dataset {
        let quoted = serde_json::to_string(d).map_err(|e| CliError::Config(e.to_string()))?;
        sets.push(format!("data.name={quoted}"));
    }
    if let Some(w) = c.workers {
        sets.push(format!("data.workers={w}"));
    }
    Ok(RunConfig::from_toml(&text, &sets)?)
}

fn load_model(c: &Common) -> Result<(RunConfig, Model32), CliError> {
    let path = c
        .ckpt
        .as_ref()
        .ok_or_else(|| CliError::Config("--ckpt is required for this command".into()))?;
    let ck = Checkpoint::load(path).map_err(|e| CliError::from(e).with_context(path))?;
    let saved = ck.run_config()?;
    let mut cfg = resolve_config(c, Some(&ck.config))?;
    if cfg.model != saved.model {
        log::warn!("model section of the configuration ignored in favour of the checkpoint's");
        cfg.model = saved.model;
        cfg.validate()?;
    }
    let (_, tr) = ck.restore::<f32>()?;
    Ok((cfg, tr.model))
}

impl CliError {
    fn with_context(self, p: &Path) -> Self {
        match self {
            CliError::Data(m) => CliError::Data(format!("{}: {m}", p.display())),
            e => e,
        }
    }
}

fn synthetic_split(cfg: &RunConfig, split: Split) -> Result<SyntheticData, CliError> {
    let mut spec = cfg.synthetic.clone();
    if split == Split::Test {
        spec.seed = spec.seed.wrapping_add(1 << 32);
    }
    make_synthetic(&spec).map_err(CliError::Config)
}

fn load_images(cfg: &RunConfig) -> Result<ImageDataset, CliError> {
    let split = cfg.data.split()?;
    let mut ds = if cfg.data.name == "synthetic" {
        let mut ds = synthetic_split(cfg, split)?.dataset;
        ds.split = split;
        ds
    } else {
        let env = std::env::var_os(DATA_DIR_VAR).map(std::path::PathBuf::from);
        let root = cfg.data.root.clone().or(env);
        load_dataset(&cfg.data.name, root.as_deref(), split, cfg.data.workers)?
    };
    if ds.size != cfg.model.image_size {
        return Err(CliError::Data(format!(
            "dataset images are {0}x{0}, the model expects {1}x{1}",
            ds.size, cfg.model.image_size
        )));
    }
    if let Some(n) = cfg.data.limit {
        ds.images.truncate(n);
        if let Some(l) = ds.labels.as_mut() {
            l.truncate(n);
        }
    }
    if ds.is_empty() {
        return Err(CliError::Data(format!("dataset {} is empty", cfg.data.name)));
    }
    log::info!("loaded {} images from {}", ds.len(), cfg.data.name);
    Ok(ds)
}

/// The first `eval.images` images.
fn eval_images(cfg: &RunConfig) -> Result<ImageDataset, CliError> {
    let ds = load_images(cfg)?;
    let n = ds.len().min(cfg.eval.images);
    Ok(ds.subset(&(0..n).collect::<Vec<_>>()))
}

fn refs(images: &[Vec<f32>]) -> Vec<&[f32]> {
    images.iter().map(Vec::as_slice).collect()
}

fn write_grid(path: &Path, images: &[Vec<f32>], size: usize, cols: usize) -> Result<(), CliError> {
    let (px, h, w) = tile(images, size, size, cols);
    save_png(path, &px, h, w)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn train(c: &Common, steps: Option<u64>) -> Result<(), CliError> {
    let resumed = match &c.ckpt {
        Some(p) => Some(Checkpoint::load(p).map_err(|e| CliError::from(e).with_context(p))?),
        None => None,
    };
    let mut cfg = resolve_config(c, resumed.as_ref().map(|k| k.config.as_str()))?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let mut tr: Trainer32 = match &resumed {
        Some(ck) => {
            let (saved, mut tr) = ck.restore::<f32>()?;
            if saved.model != cfg.model {
                return Err(CliError::Config("model section differs from the checkpoint being resumed".into()));
            }
            tr.adam.lr_nvil = cfg.train.lr_nvil;
            tr.adam.lr_rest = cfg.train.lr_rest;
            tr.adam.clip = Some(cfg.train.clip_norm);
            tr.cfg = cfg.train.clone();
            tr
        }
        None => cfg.trainer(),
    };
    write_text(&c.out.join("config.toml"), &cfg.to_toml())?;
    let data = load_images(&cfg)?.images;

    let metrics_path = c.out.join("metrics.jsonl");
    let file = if resumed.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    };
    let mut metrics = BufWriter::new(file);
    let ckpt_path = c.out.join(CHECKPOINT);
    let (log_every, ckpt_every, total) = (cfg.train.log_every.max(1), cfg.train.checkpoint_every.max(1), cfg.train.steps);
    let beta = cfg.train.beta;
    log::info!("training from step {} to {total}", tr.step);
    tr.train(&data, total, |t, m| {
        let done = m.step + 1;
        if done % log_every == 0 || done == total {
            m.write_jsonl(&mut metrics)?;
            println!(
                "step={done} loss={:.4} elbo={:.4} strokes={:.2}",
                m.total(beta),
                m.elbo,
                m.mean_strokes
            );
        }
        if done % ckpt_every == 0 && done != total {
            metrics.flush()?;
            Checkpoint::from_trainer(&cfg, t).save(&ckpt_path).map_err(|e| std::io::Error::other(e.to_string()))?;
        }
        Ok(())
    })?;
    metrics.flush()?;
    Checkpoint::from_trainer(&cfg, &tr).save(&ckpt_path)?;
    if tr.adam.skipped > 0 {
        log::warn!("{} updates skipped for non-finite gradients", tr.adam.skipped);
    }
    log::info!("wrote {}", ckpt_path.display());
    Ok(())
}

fn eval_mll(c: &Common, cfg: &RunConfig, model: &Model32, k: usize) -> Result<(), CliError> {
    if k == 0 {
        return Err(CliError::Config("--k must be positive".into()));
    }
    let ds = eval_images(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let ll = model.iwae(&refs(&ds.images), k, &mut rng)?;
    let (mean, se) = mean_se(&ll);
    let std = se * (ll.len() as f64).sqrt();
    let row = format!("{},{},{},{mean:.6},{std:.6},{se:.6}", cfg.data.name, k, ll.len());
    println!("{row}");
    write_text(&c.out.join("mll.csv"), &format!("dataset,k,images,mean,std,se\n{row}\n"))
}

fn reconstruct(c: &Common, cfg: &RunConfig, model: &Model32) -> Result<(), CliError> {
    let ds = eval_images(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let recs = model.reconstruct(&refs(&ds.images), EVAL_BATCH, &mut rng)?;
    let mut csv = String::from("image,strokes,l1,log_weight\n");
    let mut grid = Vec::new();
    for (i, (x, r)) in ds.images.iter().zip(&recs).enumerate() {
        let e = l1(x, &r.canvas);
        csv.push_str(&format!("{i},{},{e:.6},{:.4}\n", r.trajectory.num_strokes(), r.log_weight));
        grid.push(x.clone());
        grid.push(r.canvas.clone());
    }
    let errs: Vec<f64> = ds.images.iter().zip(&recs).map(|(x, r)| l1(x, &r.canvas)).collect();
    println!("mean_l1={:.6} median_l1={:.6}", mean_se(&errs).0, median(&errs));
    if cfg.data.name == "synthetic" {
        let truth = synthetic_split(cfg, cfg.data.split()?)?.trajectories;
        let rmse: Vec<f64> = truth
            .iter()
            .zip(&recs)
            .map(|(t, r)| stroke_recovery_rmse(t, &r.trajectory, cfg.model.image_size))
            .collect();
        println!("median_rmse={:.4}", median(&rmse));
    }
    fs::write(
        c.out.join("trajectories.json"),
        serde_json::to_string(&recs.iter().map(|r| &r.trajectory).collect::<Vec<_>>()).map_err(|e| CliError::Run(e.to_string()))?,
    )?;
    write_text(&c.out.join("reconstructions.csv"), &csv)?;
    write_grid(&c.out.join("reconstructions.png"), &grid, cfg.model.image_size, 10)
}

fn sample(c: &Common, cfg: &RunConfig, model: &Model32, count: usize, temperature: f32) -> Result<(), CliError> {
    if count == 0 || !(temperature > 0.0 && temperature <= 1.0) {
        return Err(CliError::Config("--count must be positive and --temperature in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let r = model.gen_rollout(count, temperature, &mut rng)?;
    let hist = r.trajectories.iter().fold(vec![0usize; cfg.model.t_max + 1], |mut h, t| {
        h[t.num_strokes()] += 1;
        h
    });
    println!("stroke_histogram={hist:?}");
    let cols = (count as f64).sqrt().ceil() as usize;
    write_grid(&c.out.join("samples.png"), &r.images, cfg.model.image_size, cols)
}

fn complete(c: &Common, cfg: &RunConfig, model: &Model32, keep: f64) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&keep) {
        return Err(CliError::Config("--keep must lie in [0, 1]".into()));
    }
    let ds = eval_images(cfg)?;
    let hw = cfg.model.image_size;
    let rows = (keep * hw as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let mut grid = Vec::new();
    for x in &ds.images {
        let mut partial = x.clone();
        partial[rows * hw..].iter_mut().for_each(|v| *v = 0.0);
        let done = model.complete(&partial, &mut rng)?;
        grid.extend([x.clone(), partial, done]);
    }
    write_grid(&c.out.join("completions.png"), &grid, hw, 9)
}

fn exemplars(c: &Common, cfg: &RunConfig, model: &Model32, per_image: usize, shared: bool) -> Result<(), CliError> {
    let ds = eval_images(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let mut grid = Vec::new();
    for x in &ds.images {
        grid.push(x.clone());
        grid.extend(model.exemplars(x, per_image, &cfg.classify.token, shared, &mut rng)?);
    }
    write_grid(&c.out.join("exemplars.png"), &grid, cfg.model.image_size, per_image + 1)
}

fn report_accuracy(c: &Common, rows: &[(usize, usize, usize)]) -> Result<(), CliError> {
    let mut csv = String::from("episode,label,predicted,fallbacks\n");
    let mut correct = 0;
    for (i, &(label, pred, fb)) in rows.iter().enumerate() {
        correct += usize::from(label == pred);
        csv.push_str(&format!("{i},{label},{pred},{fb}\n"));
    }
    write_text(&c.out.join("classification.csv"), &csv)?;
    println!("accuracy={}", correct as f64 / rows.len().max(1) as f64);
    Ok(())
}

fn classify_manifest(c: &Common, cfg: &RunConfig, model: &Model32, path: &Path, invert: bool) -> Result<(), CliError> {
    let eps = read_episodes(path).map_err(CliError::Data)?;
    let size = cfg.model.image_size;
    let load = |p: &Path| -> Result<Vec<f32>, CliError> {
        let (raw, h, w) = load_png_gray(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        Ok(preprocess(&raw, h, w, size, invert))
    };
    let mut rows = Vec::with_capacity(eps.len());
    for (i, e) in eps.iter().enumerate() {
        let label = e
            .target()
            .ok_or_else(|| CliError::Data(format!("episode {i}: no support shares the query's label")))?;
        let sup = e.supports.iter().map(|(p, _)| load(p)).collect::<Result<Vec<_>, _>>()?;
        let q = load(&e.query.0)?;
        let r = model.classify_episode(&refs(&sup), &q, &cfg.classify, cfg.eval.seed.wrapping_add(i as u64))?;
        rows.push((label, r.predicted, r.fallbacks));
    }
    report_accuracy(c, &rows)
}

fn classify_generated(c: &Common, cfg: &RunConfig, model: &Model32, ways: usize, count: usize) -> Result<(), CliError> {
    let pool = load_images(cfg)?.images;
    if ways < 2 || ways > pool.len() || count == 0 {
        return Err(CliError::Config(format!("need 2 <= --ways <= {} and --count > 0", pool.len())));
    }
    let eps: Vec<Episode<f32>> =
        model.self_consistency_episodes(&pool, ways, count, &cfg.classify.token, cfg.eval.seed)?;
    let mut rows = Vec::with_capacity(eps.len());
    for (i, e) in eps.iter().enumerate() {
        let r = model.classify_episode(&refs(&e.supports), &e.query, &cfg.classify, cfg.eval.seed.wrapping_add(i as u64))?;
        rows.push((e.label, r.predicted, r.fallbacks));
    }
    report_accuracy(c, &rows)
}

fn cluster(c: &Common, cfg: &RunConfig, model: &Model32, k: usize) -> Result<(), CliError> {
    let ds = eval_images(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let cl = model.cluster_strokes(&refs(&ds.images), k, cfg.eval.seed, &mut rng)?;
    let mut csv = String::from("image,cluster\n");
    for (i, a) in cl.image_index.iter().zip(&cl.assignments) {
        csv.push_str(&format!("{i},{a}\n"));
    }
    println!("silhouette={:.6}", cl.silhouette);
    if let Some(labels) = &ds.labels {
        let per_stroke: Vec<u32> = cl.image_index.iter().map(|&i| labels[i]).collect();
        println!("purity={:.6}", purity(&cl.assignments, &per_stroke));
    }
    write_text(&c.out.join("clusters.csv"), &csv)
}

fn make_synthetic_cmd(c: &Common) -> Result<(), CliError> {
    let cfg = resolve_config(c, None)?;
    let data = make_synthetic(&cfg.synthetic).map_err(CliError::Config)?;
    data.dataset.save_png_folder(&c.out)?;
    let mut w = BufWriter::new(File::create(c.out.join("trajectories.jsonl"))?);
    for t in &data.trajectories {
        serde_json::to_writer(&mut w, t).map_err(|e| CliError::Run(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!("wrote {} images to {}", data.dataset.len(), c.out.display());
    Ok(())
}
