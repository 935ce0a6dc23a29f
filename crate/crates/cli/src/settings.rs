//! Flag/config-file merging. Every option has a `key=value` spelling; a
//! config file supplies defaults and explicit flags override it.

use std::fmt::Display;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use imgmix::io::KvConfig;

pub fn put<T: Display>(kv: &mut KvConfig, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        kv.set(key, v);
    }
}

/// Reads `config` (if any), rejects keys outside `allowed`, then applies `flags`.
pub fn merge(config: Option<&Path>, flags: &KvConfig, allowed: &[&str]) -> Result<KvConfig> {
    let mut kv = match config {
        Some(p) => KvConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => KvConfig::new(),
    };
    for key in kv.keys() {
        if key != "command" && !allowed.contains(&key) {
            bail!(UsageError(format!("unknown config key `{key}`")));
        }
    }
    kv.merge(flags);
    Ok(kv)
}

/// Invalid invocation (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const MODEL_KEYS: &[&str] = &[
    "family", "height", "width", "channels", "patch", "depth", "embed", "factor", "heads", "levels",
];
pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch",
    "lr",
    "optimizer",
    "precision",
    "eval_interval",
    "decay_fraction",
    "decay_factor",
    // Fixed by the subcommand; accepted so a run.meta replays unchanged.
    "loss",
];
pub const DATA_KEYS: &[&str] = &["data_dir", "synthetic", "size", "tile", "holdout", "sigma"];

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Architecture: img2img, original, linear, multires, vit (comma list where several are accepted)
    #[arg(long = "arch")]
    pub family: Option<String>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Patch size P
    #[arg(long)]
    pub patch: Option<usize>,
    /// Number of blocks N
    #[arg(long)]
    pub depth: Option<usize>,
    /// Embedding dimension C
    #[arg(long)]
    pub embed: Option<usize>,
    /// MLP expansion factor f
    #[arg(long)]
    pub factor: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
}

impl ModelArgs {
    pub fn put(&self, kv: &mut KvConfig) {
        put(kv, "family", &self.family);
        put(kv, "height", &self.height);
        put(kv, "width", &self.width);
        put(kv, "channels", &self.channels);
        put(kv, "patch", &self.patch);
        put(kv, "depth", &self.depth);
        put(kv, "embed", &self.embed);
        put(kv, "factor", &self.factor);
        put(kv, "heads", &self.heads);
        put(kv, "levels", &self.levels);
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// sgd or adam
    #[arg(long)]
    pub optimizer: Option<String>,
    /// f32 or f64
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub decay_fraction: Option<f64>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
}

impl TrainArgs {
    pub fn put(&self, kv: &mut KvConfig) {
        put(kv, "epochs", &self.epochs);
        put(kv, "batch", &self.batch);
        put(kv, "lr", &self.lr);
        put(kv, "optimizer", &self.optimizer);
        put(kv, "precision", &self.precision);
        put(kv, "eval_interval", &self.eval_interval);
        put(kv, "decay_fraction", &self.decay_fraction);
        put(kv, "decay_factor", &self.decay_factor);
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Directory of PNG/PGM images; without it procedural scenes are used
    #[arg(long)]
    pub data_dir: Option<String>,
    /// Number of procedural scenes when no data directory is given
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Side length of procedural scenes
    #[arg(long)]
    pub size: Option<usize>,
    /// Cut directory images into tiles of this size
    #[arg(long)]
    pub tile: Option<usize>,
    /// Images held out for evaluation
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Noise standard deviation on the 8-bit scale
    #[arg(long)]
    pub sigma: Option<f64>,
}

impl DataArgs {
    pub fn put(&self, kv: &mut KvConfig) {
        put(kv, "data_dir", &self.data_dir);
        put(kv, "synthetic", &self.synthetic);
        put(kv, "size", &self.size);
        put(kv, "tile", &self.tile);
        put(kv, "holdout", &self.holdout);
        put(kv, "sigma", &self.sigma);
    }
}

pub fn keys(groups: &[&[&'static str]], extra: &[&'static str]) -> Vec<&'static str> {
    groups.iter().flat_map(|g| g.iter().copied()).chain(extra.iter().copied()).collect()
}
