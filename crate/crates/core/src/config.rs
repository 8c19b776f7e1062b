//! Run configuration. JSON on disk so the full hyperparameter surface is
//! versionable; CLI flags override individual fields.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const IMG_CHANNELS: usize = 2;
pub const IMG_SIZE: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub train_count: usize,
    pub eval_count: usize,
    pub train_base_seed: u64,
    pub eval_base_seed: u64,
    pub class_count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_count: 4096,
            eval_count: 256,
            train_base_seed: 10_000,
            eval_base_seed: 20_000_000,
            class_count: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfigFile {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for BackboneConfigFile {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 128,
            depth: 4,
            heads: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdapterConfig {
    pub rank: usize,
    /// LoRA scale is `alpha / rank`; alpha defaults to rank, giving scale 1.
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 4.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HyperConfig {
    pub cond_dim: usize,
    pub hidden: usize,
    pub res_blocks: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            cond_dim: 256,
            hidden: 512,
            res_blocks: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_interval: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            steps: 50_000,
            batch_size: 64,
            checkpoint_interval: 5_000,
            pretrain_steps: 30_000,
            pretrain_lr: 3e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    TAndY,
    TOnly,
    YOnly,
}

impl Ablation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::TAndY => "t_and_y",
            Ablation::TOnly => "t_only",
            Ablation::YOnly => "y_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "t_and_y" => Ok(Ablation::TAndY),
            "t_only" => Ok(Ablation::TOnly),
            "y_only" => Ok(Ablation::YOnly),
            other => Err(Error::Config(format!("unknown ablation mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    pub backbone: BackboneConfigFile,
    pub adapter: AdapterConfig,
    pub hyper: HyperConfig,
    pub optim: OptimConfig,
    pub ablation: Ablation,
    /// Master seed; per-stage seeds derive from it.
    pub seed: u64,
    /// Seeds for the multi-seed experiment matrix.
    pub seeds: Vec<u64>,
    /// How many eval-split samples each evaluation uses.
    pub eval_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            schedule: ScheduleConfig::default(),
            backbone: BackboneConfigFile::default(),
            adapter: AdapterConfig::default(),
            hyper: HyperConfig::default(),
            optim: OptimConfig::default(),
            ablation: Ablation::TAndY,
            seed: 42,
            seeds: vec![1, 2, 3],
            eval_samples: 64,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dataset.train_count", self.dataset.train_count),
            ("dataset.eval_count", self.dataset.eval_count),
            ("dataset.class_count", self.dataset.class_count),
            ("schedule.timesteps", self.schedule.timesteps),
            ("backbone.patch_size", self.backbone.patch_size),
            ("backbone.embed_dim", self.backbone.embed_dim),
            ("backbone.depth", self.backbone.depth),
            ("backbone.heads", self.backbone.heads),
            ("adapter.rank", self.adapter.rank),
            ("hyper.cond_dim", self.hyper.cond_dim),
            ("hyper.hidden", self.hyper.hidden),
            ("hyper.res_blocks", self.hyper.res_blocks),
            ("optim.batch_size", self.optim.batch_size),
            ("optim.checkpoint_interval", self.optim.checkpoint_interval),
            ("eval_samples", self.eval_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.dataset.class_count < 2 {
            return Err(Error::Config("dataset.class_count must be >= 2".into()));
        }
        if self.schedule.timesteps < 2 {
            return Err(Error::Config("schedule.timesteps must be >= 2".into()));
        }
        if !(self.schedule.beta_start.is_finite() && self.schedule.beta_end.is_finite()) {
            return Err(Error::Config("schedule betas must be finite".into()));
        }
        if !(0.0 < self.schedule.beta_start
            && self.schedule.beta_start <= self.schedule.beta_end
            && self.schedule.beta_end < 1.0)
        {
            return Err(Error::Config(
                "require 0 < beta_start <= beta_end < 1".into(),
            ));
        }
        if self.backbone.embed_dim % self.backbone.heads != 0 {
            return Err(Error::Config("embed_dim must be divisible by heads".into()));
        }
        if IMG_SIZE % self.backbone.patch_size != 0 {
            return Err(Error::Config("image size must be divisible by patch_size".into()));
        }
        let d = self.backbone.embed_dim;
        if self.adapter.rank > d / 2 {
            return Err(Error::Config(format!(
                "adapter.rank {} exceeds embed_dim/2 = {}",
                self.adapter.rank,
                d / 2
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list must not be empty".into()));
        }
        if !self.optim.lr.is_finite() || self.optim.lr <= 0.0 {
            return Err(Error::Config("optim.lr must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Stable hash of the fully-resolved configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex_string(&digest)
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_lossless() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.schedule.beta_start = 0.5;
        cfg.schedule.beta_end = 0.4;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.backbone.embed_dim = 130;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.adapter.rank = 128;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.dataset.class_count = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_changes_with_config() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 43;
        assert_ne!(a.hash(), b.hash());
    }
}
