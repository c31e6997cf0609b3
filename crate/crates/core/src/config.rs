//! Flat `key = value` run configuration with namespaced keys. One file drives
//! the whole pipeline; every random stream derives from `seed`.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::corpus::SyntheticSpec;
use crate::exec::Exec;
use crate::gradcheck::GradcheckConfig;
use crate::model::ModelConfig;
use crate::objectives::EdgeScope;
use crate::taxonomy::RepairPolicy;
use crate::trainer::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("cannot read config: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    /// `vocab_size` is filled in from the vocabulary at run time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub split: [f64; 3],
    pub min_count: usize,
    pub ablation_seeds: usize,
    pub grid_lambda1: Vec<f64>,
    pub grid_lambda2: Vec<f64>,
    pub efficiency_proportions: Vec<f64>,
    pub efficiency_seeds: usize,
    pub gradcheck: GradcheckConfig,
    pub data_dir: Option<PathBuf>,
    /// Checkpoint that fine-tuning, grids and efficiency runs start from.
    pub init: Option<PathBuf>,
    /// Checkpoint scored by `eval`.
    pub model_path: Option<PathBuf>,
    pub overlap_a: Option<PathBuf>,
    pub overlap_b: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 7,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: SyntheticSpec::default(),
            split: [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
            min_count: 1,
            ablation_seeds: 1,
            grid_lambda1: vec![1e-2, 1e-3, 1e-4, 1e-5],
            grid_lambda2: vec![1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
            efficiency_proportions: vec![0.1, 0.3, 0.5, 0.7],
            efficiency_seeds: 1,
            gradcheck: GradcheckConfig::default(),
            data_dir: None,
            init: None,
            model_path: None,
            overlap_a: None,
            overlap_b: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue { key: key.into(), value: value.into(), reason: e.to_string() })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue { key: key.into(), value: value.into(), reason: "expected true or false".into() }),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn set_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "model.d_model" => m.d_model = parse(key, v)?,
            "model.encoder_layers" => m.encoder_layers = parse(key, v)?,
            "model.decoder_layers" => m.decoder_layers = parse(key, v)?,
            "model.n_heads" => m.n_heads = parse(key, v)?,
            "model.ffn_dim" => m.ffn_dim = parse(key, v)?,
            "model.max_len" => m.max_len = parse(key, v)?,
            "model.dropout" => m.dropout = parse(key, v)?,
            "model.proj_dim" => m.proj_dim = parse(key, v)?,
            "model.proj_hidden" => m.proj_hidden = parse(key, v)?,
            "model.pre_norm" => m.pre_norm = parse_bool(key, v)?,
            "model.tie_embeddings" => m.tie_embeddings = parse_bool(key, v)?,
            "model.learned_positions" => m.learned_positions = parse_bool(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.warmup_frac" => t.warmup_frac = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.pretrain_epochs" => t.pretrain_epochs = parse(key, v)?,
            "train.pretrain_lr" => t.pretrain_lr = parse(key, v)?,
            "train.pretrain_val_frac" => t.pretrain_val_frac = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam_eps = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.parallel" => t.exec = if parse_bool(key, v)? { Exec::Parallel } else { Exec::Sequential },
            "train.edge_scope" => {
                t.edge_scope = match v {
                    "all" => EdgeScope::AllEdges,
                    "gold-path" => EdgeScope::GoldPath,
                    _ => {
                        return Err(ConfigError::BadValue { key: key.into(), value: v.into(), reason: "expected all or gold-path".into() })
                    }
                }
            }
            "loss.lambda1" => t.weights.lambda1 = parse(key, v)?,
            "loss.lambda2" => t.weights.lambda2 = parse(key, v)?,
            "loss.lambda3" => t.weights.lambda3 = parse(key, v)?,
            "loss.alphas" => t.weights.alphas = parse_list(key, v)?,
            "mask.p_level" => t.mask.p_level = parse(key, v)?,
            "mask.p_span" => t.mask.p_span = parse(key, v)?,
            "mask.span_mean" => t.mask.span_mean = parse(key, v)?,
            "ablation.no_pretrain" => t.ablation.no_pretrain = parse_bool(key, v)?,
            "ablation.no_lo" => t.ablation.no_lo = parse_bool(key, v)?,
            "ablation.no_lt" => t.ablation.no_lt = parse_bool(key, v)?,
            "ablation.no_ls" => t.ablation.no_ls = parse_bool(key, v)?,
            "ablation.seeds" => self.ablation_seeds = parse(key, v)?,
            "eval.max_steps" => t.decode.max_steps = parse(key, v)?,
            "eval.constrained" => t.decode.constrained = parse_bool(key, v)?,
            "eval.repair" => {
                t.decode.repair = v.parse::<RepairPolicy>().map_err(|reason| ConfigError::BadValue { key: key.into(), value: v.into(), reason })?
            }
            "data.branching" => d.branching = parse_list(key, v)?,
            "data.docs_per_leaf" => d.docs_per_leaf = parse(key, v)?,
            "data.zipf_s" => d.zipf_s = parse(key, v)?,
            "data.words_per_topic" => d.words_per_topic = parse(key, v)?,
            "data.doc_len_min" => d.doc_len_min = parse(key, v)?,
            "data.doc_len_max" => d.doc_len_max = parse(key, v)?,
            "data.noise_rate" => d.noise_rate = parse(key, v)?,
            "data.ancestor_rate" => d.ancestor_rate = parse(key, v)?,
            "data.noise_words" => d.noise_words = parse(key, v)?,
            "data.pretrain_per_leaf" => d.pretrain_per_leaf = parse(key, v)?,
            "data.pool_perturb" => d.pool_perturb = parse(key, v)?,
            "data.split" => {
                let parts: Vec<f64> = parse_list(key, v)?;
                self.split = parts.try_into().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                    reason: "expected three fractions".into(),
                })?;
            }
            "data.min_count" => self.min_count = parse(key, v)?,
            "grid.lambda1" => self.grid_lambda1 = parse_list(key, v)?,
            "grid.lambda2" => self.grid_lambda2 = parse_list(key, v)?,
            "efficiency.proportions" => self.efficiency_proportions = parse_list(key, v)?,
            "efficiency.seeds" => self.efficiency_seeds = parse(key, v)?,
            "gradcheck.points" => self.gradcheck.points = parse(key, v)?,
            "gradcheck.eps" => self.gradcheck.eps = parse(key, v)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = parse(key, v)?,
            "paths.data" => self.data_dir = set_path(v),
            "paths.init" => self.init = set_path(v),
            "paths.model" => self.model_path = set_path(v),
            "overlap.a" => self.overlap_a = set_path(v),
            "overlap.b" => self.overlap_b = set_path(v),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        vec![
            ("seed", self.seed.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.encoder_layers", m.encoder_layers.to_string()),
            ("model.decoder_layers", m.decoder_layers.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.ffn_dim", m.ffn_dim.to_string()),
            ("model.max_len", m.max_len.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.proj_dim", m.proj_dim.to_string()),
            ("model.proj_hidden", m.proj_hidden.to_string()),
            ("model.pre_norm", m.pre_norm.to_string()),
            ("model.tie_embeddings", m.tie_embeddings.to_string()),
            ("model.learned_positions", m.learned_positions.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.warmup_frac", t.warmup_frac.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.pretrain_epochs", t.pretrain_epochs.to_string()),
            ("train.pretrain_lr", t.pretrain_lr.to_string()),
            ("train.pretrain_val_frac", t.pretrain_val_frac.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.parallel", (t.exec == Exec::Parallel).to_string()),
            ("train.edge_scope", if t.edge_scope == EdgeScope::GoldPath { "gold-path" } else { "all" }.to_string()),
            ("loss.lambda1", t.weights.lambda1.to_string()),
            ("loss.lambda2", t.weights.lambda2.to_string()),
            ("loss.lambda3", t.weights.lambda3.to_string()),
            ("loss.alphas", join(&t.weights.alphas)),
            ("mask.p_level", t.mask.p_level.to_string()),
            ("mask.p_span", t.mask.p_span.to_string()),
            ("mask.span_mean", t.mask.span_mean.to_string()),
            ("ablation.no_pretrain", t.ablation.no_pretrain.to_string()),
            ("ablation.no_lo", t.ablation.no_lo.to_string()),
            ("ablation.no_lt", t.ablation.no_lt.to_string()),
            ("ablation.no_ls", t.ablation.no_ls.to_string()),
            ("ablation.seeds", self.ablation_seeds.to_string()),
            ("eval.max_steps", t.decode.max_steps.to_string()),
            ("eval.constrained", t.decode.constrained.to_string()),
            ("eval.repair", t.decode.repair.to_string()),
            ("data.branching", join(&d.branching)),
            ("data.docs_per_leaf", d.docs_per_leaf.to_string()),
            ("data.zipf_s", d.zipf_s.to_string()),
            ("data.words_per_topic", d.words_per_topic.to_string()),
            ("data.doc_len_min", d.doc_len_min.to_string()),
            ("data.doc_len_max", d.doc_len_max.to_string()),
            ("data.noise_rate", d.noise_rate.to_string()),
            ("data.ancestor_rate", d.ancestor_rate.to_string()),
            ("data.noise_words", d.noise_words.to_string()),
            ("data.pretrain_per_leaf", d.pretrain_per_leaf.to_string()),
            ("data.pool_perturb", d.pool_perturb.to_string()),
            ("data.split", join(&self.split)),
            ("data.min_count", self.min_count.to_string()),
            ("grid.lambda1", join(&self.grid_lambda1)),
            ("grid.lambda2", join(&self.grid_lambda2)),
            ("efficiency.proportions", join(&self.efficiency_proportions)),
            ("efficiency.seeds", self.efficiency_seeds.to_string()),
            ("gradcheck.points", self.gradcheck.points.to_string()),
            ("gradcheck.eps", self.gradcheck.eps.to_string()),
            ("gradcheck.tolerance", self.gradcheck.tolerance.to_string()),
            ("paths.data", opt_path(&self.data_dir)),
            ("paths.init", opt_path(&self.init)),
            ("paths.model", opt_path(&self.model_path)),
            ("overlap.a", opt_path(&self.overlap_a)),
            ("overlap.b", opt_path(&self.overlap_b)),
        ]
    }

    /// Applies `key = value` lines; `#` starts a comment line.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let mut c = Self::default();
        c.apply_str(&text)?;
        Ok(c)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
        self.set(k.trim(), v.trim())
    }

    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Training configuration with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// Generator spec with the run seed applied.
    pub fn data_spec(&self) -> SyntheticSpec {
        SyntheticSpec { seed: self.seed, ..self.data.clone() }
    }

    pub fn seeds(&self, count: usize) -> Vec<u64> {
        (0..count as u64).map(|i| self.seed + i).collect()
    }
}
