//! Run configuration: one TOML document with a table per component, plus
//! `key=value` overrides addressed by dotted paths.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Split, SyntheticSpec};
use crate::model::{DoodModel, ModelConfig};
use crate::scalar::Scalar;
use crate::tasks::ClassifyConfig;
use crate::training::{TrainConfig, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Which images to use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `synthetic`, a known dataset name, or a path.
    pub name: String,
    /// Dataset root; falls back to `DOOD_DATA_DIR`.
    pub root: Option<PathBuf>,
    pub split: String,
    /// Threads used for loading and decoding.
    pub workers: usize,
    /// Use at most this many images.
    pub limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            root: None,
            split: "train".into(),
            workers: 1,
            limit: None,
        }
    }
}

impl DataConfig {
    pub fn split(&self) -> Result<Split, ConfigError> {
        self.split.parse().map_err(ConfigError::Invalid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Importance samples per image for the marginal likelihood.
    pub iwae_k: usize,
    pub cluster_k: usize,
    /// Images used by evaluation commands.
    pub images: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iwae_k: 200,
            cluster_k: 4,
            images: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub eval: EvalConfig,
    pub classify: ClassifyConfig,
}

impl RunConfig {
    /// Parses and validates a TOML document after applying `overrides`.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = ConfigError::Invalid;
        self.model.validate().map_err(inv)?;
        self.train.validate().map_err(inv)?;
        self.synthetic.validate().map_err(inv)?;
        self.classify.token.validate().map_err(inv)?;
        self.data.split()?;
        if self.data.workers == 0 {
            return Err(inv("data.workers must be positive".into()));
        }
        if self.eval.iwae_k == 0 || self.eval.cluster_k == 0 || self.eval.images == 0 {
            return Err(inv("eval.iwae_k, cluster_k and images must be positive".into()));
        }
        if self.classify.k == 0 || !(self.classify.lr > 0.0) {
            return Err(inv("classify.k and classify.lr must be positive".into()));
        }
        if self.data.name == "synthetic" && self.synthetic.image_size != self.model.image_size {
            return Err(inv(format!(
                "synthetic.image_size ({}) must equal model.image_size ({})",
                self.synthetic.image_size, self.model.image_size
            )));
        }
        Ok(())
    }

    /// Freshly initialised model and trainer. Weights come from `train.seed`
    /// and the training stream from a separate derived seed.
    pub fn trainer<T: Scalar>(&self) -> Trainer<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        let model = DoodModel::new(self.model.clone(), &mut rng);
        let mut cfg = self.train.clone();
        cfg.seed = self.train.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut t = Trainer::new(model, cfg);
        t.cfg.seed = self.train.seed;
        t
    }
}

/// Sets `a.b.c=value` in `table`. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.into()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(spec.into()));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(ConfigError::Override(spec.into())),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.t_max, 6);
        assert_eq!(c.train.beta, 4.0);
    }

    #[test]
    fn round_trips_through_text() {
        let mut c = RunConfig::default();
        c.model.presence_init_bias = Some(-1.5);
        c.data.limit = Some(10);
        assert_eq!(RunConfig::from_toml(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[model]\ntmax = 3\n", &[]), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_toml("[nope]\n", &[]), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn overrides_apply_with_types() {
        let c = RunConfig::from_toml(
            "[train]\nsteps = 5\n",
            &[
                "train.steps=200".into(),
                "model.eg_ablation=true".into(),
                "data.name=mnist".into(),
                "model.mlp_hidden=[4, 4]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.steps, 200);
        assert!(c.model.eg_ablation);
        assert_eq!(c.data.name, "mnist");
        assert_eq!(c.model.mlp_hidden, vec![4, 4]);
        assert!(matches!(RunConfig::from_toml("", &["train.steps".into()]), Err(ConfigError::Override(_))));
        assert!(RunConfig::from_toml("", &["train.steps=many".into()]).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        assert!(matches!(RunConfig::from_toml("", &["model.t_max=0".into()]), Err(ConfigError::Invalid(_))));
        assert!(RunConfig::from_toml("", &["synthetic.image_size=28".into()]).is_err());
        assert!(RunConfig::from_toml("", &["data.split=val".into()]).is_err());
        assert!(RunConfig::from_toml("", &["train.lr_rest=-1".into()]).is_err());
    }

    #[test]
    fn trainer_is_reproducible() {
        let mut c = RunConfig::default();
        c.model = crate::model::generative::tests::tiny_config();
        let a = c.trainer::<f64>();
        let b = c.trainer::<f64>();
        assert_eq!(a.model.params.entries()[3].value, b.model.params.entries()[3].value);
        assert_eq!(a.rng, b.rng);
        assert_eq!(a.cfg.seed, c.train.seed);
    }
}
