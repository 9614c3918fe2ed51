//! Optional TOML config file and seed resolution.
//!
//! ```toml
//! seed = 7
//!
//! [train]
//! epochs = 6
//! lr = 1e-3
//!
//! [gat]
//! d_head = 64
//!
//! [synth]
//! num_essays = 64
//! ```
//!
//! Values from flags win over the file, the file wins over `TRANSGAT_SEED`,
//! and that wins over built-in defaults.

use std::path::Path;

use serde::Deserialize;
use transgat_core::synth::SynthConfig;
use transgat_core::{GatConfig, TrainConfig};

use crate::CliError;

pub const SEED_ENV: &str = "TRANSGAT_SEED";

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub train: TrainSection,
    pub gat: GatSection,
    pub synth: SynthSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub freeze_essay_head: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatSection {
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub d_head: Option<usize>,
    pub attention_slope: Option<f64>,
    pub activation_slope: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub seed: Option<u64>,
    pub num_essays: Option<usize>,
    pub dim: Option<usize>,
    pub min_tokens: Option<usize>,
    pub max_tokens: Option<usize>,
    pub token_noise: Option<f64>,
    pub essay_noise: Option<f64>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::BadInput(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::BadInput(format!("{}: {e}", p.display())))?;
                FileConfig::parse(&text).map_err(|e| CliError::BadInput(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Training defaults overlaid with the `[train]` section.
    pub fn train(&self) -> TrainConfig {
        let t = &self.train;
        let mut c = TrainConfig::default();
        set(&mut c.batch_size, t.batch_size);
        set(&mut c.epochs, t.epochs);
        set(&mut c.lr, t.lr);
        set(&mut c.adamw.weight_decay, t.weight_decay);
        set(&mut c.adamw.beta1, t.beta1);
        set(&mut c.adamw.beta2, t.beta2);
        set(&mut c.adamw.eps, t.eps);
        set(&mut c.freeze_essay_head, t.freeze_essay_head);
        c
    }

    pub fn gat(&self) -> GatConfig {
        let g = &self.gat;
        let mut c = GatConfig::default();
        set(&mut c.num_layers, g.num_layers);
        set(&mut c.num_heads, g.num_heads);
        set(&mut c.d_head, g.d_head);
        set(&mut c.attention_slope, g.attention_slope);
        set(&mut c.activation_slope, g.activation_slope);
        c
    }

    pub fn synth(&self) -> SynthConfig {
        let s = &self.synth;
        let mut c = SynthConfig::default();
        set(&mut c.num_essays, s.num_essays);
        set(&mut c.dim, s.dim);
        set(&mut c.min_tokens, s.min_tokens);
        set(&mut c.max_tokens, s.max_tokens);
        set(&mut c.token_noise, s.token_noise);
        set(&mut c.essay_noise, s.essay_noise);
        c
    }
}

pub(crate) fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Picks the seed: flag, then the config file (section before top level),
/// then the environment, then 0.
pub fn resolve_seed(
    flag: Option<u64>,
    section: Option<u64>,
    file: &FileConfig,
    env: Option<&str>,
) -> Result<u64, CliError> {
    if let Some(s) = flag.or(section).or(file.seed) {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::BadInput(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        None => Ok(0),
    }
}

pub fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}
