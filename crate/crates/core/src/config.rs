//! Training configuration: flat key=value files, presets, and the config
//! hash recorded in metric reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::fields::UdfTrainConfig;
use crate::losses::LossWeights;
use crate::render::SampleConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub rays_per_batch: usize,
    pub weights: LossWeights,
    pub lr: f64,
    pub warmup: u64,
    pub seed: u64,
    pub sample: SampleConfig,
    /// Eikonal sample count per iteration.
    pub eikonal_points: usize,
    /// Pool points fed to the local loss per iteration.
    pub local_pool_batch: usize,
    /// Render a novel pose every this many iterations (0 disables).
    pub novel_every: u64,
    pub novel_stride: usize,
    pub enable_global: bool,
    pub enable_local: bool,
    pub enable_novel_views: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub s_init: f64,
    pub udf: UdfTrainConfig,
    /// Marching-cubes grid resolution for extraction.
    pub resolution: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale defaults: small batches and iteration counts that train on
    /// a CPU in tens of minutes.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: 20_000,
            rays_per_batch: 128,
            weights: LossWeights::default(),
            lr: 5e-4,
            warmup: 500,
            seed: 7,
            sample: SampleConfig::default(),
            eikonal_points: 512,
            local_pool_batch: 128,
            novel_every: 500,
            novel_stride: 4,
            enable_global: true,
            enable_local: true,
            enable_novel_views: true,
            checkpoint_every: 5000,
            log_every: 100,
            s_init: 20.0,
            udf: UdfTrainConfig::default(),
            resolution: 128,
        }
    }

    /// The published full-scale schedule. Kept as a preset for reference;
    /// not intended to run on a desk CPU.
    pub fn paper_scale() -> Self {
        TrainConfig {
            iterations: 300_000,
            rays_per_batch: 512,
            resolution: 512,
            ..Self::desk()
        }
    }

    pub fn parse_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::desk();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Apply key=value lines on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                path: origin.to_string(),
                line: i + 1,
                detail: "expected key = value".into(),
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|detail| ConfigError::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    detail,
                })?;
        }
        Ok(())
    }

    /// Set one key. Key names match the CLI flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(value: &str, key: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| format!("bad value '{value}' for {key}: {e}"))
        }
        match key {
            "preset" => match value {
                "desk" => *self = Self::desk(),
                "paper-scale" => *self = Self::paper_scale(),
                other => return Err(format!("unknown preset '{other}'")),
            },
            "iterations" => self.iterations = num(value, key)?,
            "rays_per_batch" => self.rays_per_batch = num(value, key)?,
            "lambda1" => self.weights.global = num(value, key)?,
            "lambda2" => self.weights.local = num(value, key)?,
            "lambda3" => self.weights.eikonal = num(value, key)?,
            "lambda4" => self.weights.reg = num(value, key)?,
            "epsilon" => self.weights.epsilon = num(value, key)?,
            "lr" => self.lr = num(value, key)?,
            "warmup" => self.warmup = num(value, key)?,
            "seed" => self.seed = num(value, key)?,
            "n_coarse" => self.sample.n_coarse = num(value, key)?,
            "n_importance" => self.sample.n_importance = num(value, key)?,
            "eikonal_points" => self.eikonal_points = num(value, key)?,
            "local_pool_batch" => self.local_pool_batch = num(value, key)?,
            "novel_every" => self.novel_every = num(value, key)?,
            "novel_stride" => self.novel_stride = num(value, key)?,
            "enable_global" => self.enable_global = num(value, key)?,
            "enable_local" => self.enable_local = num(value, key)?,
            "enable_novel_views" => self.enable_novel_views = num(value, key)?,
            "checkpoint_every" => self.checkpoint_every = num(value, key)?,
            "log_every" => self.log_every = num(value, key)?,
            "s_init" => self.s_init = num(value, key)?,
            "resolution" => self.resolution = num(value, key)?,
            "udf_steps" => self.udf.steps = num(value, key)?,
            "udf_pool_size" => self.udf.pool_size = num(value, key)?,
            "udf_pool_refresh" => self.udf.pool_refresh = num(value, key)?,
            "udf_batch" => self.udf.batch = num(value, key)?,
            "udf_lr" => self.udf.lr = num(value, key)?,
            other => return Err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }

    /// Canonical key=value serialization (documented keys, fixed order).
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "rays_per_batch = {}", self.rays_per_batch);
        let _ = writeln!(s, "lambda1 = {}", self.weights.global);
        let _ = writeln!(s, "lambda2 = {}", self.weights.local);
        let _ = writeln!(s, "lambda3 = {}", self.weights.eikonal);
        let _ = writeln!(s, "lambda4 = {}", self.weights.reg);
        let _ = writeln!(s, "epsilon = {}", self.weights.epsilon);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "warmup = {}", self.warmup);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "n_coarse = {}", self.sample.n_coarse);
        let _ = writeln!(s, "n_importance = {}", self.sample.n_importance);
        let _ = writeln!(s, "eikonal_points = {}", self.eikonal_points);
        let _ = writeln!(s, "local_pool_batch = {}", self.local_pool_batch);
        let _ = writeln!(s, "novel_every = {}", self.novel_every);
        let _ = writeln!(s, "novel_stride = {}", self.novel_stride);
        let _ = writeln!(s, "enable_global = {}", self.enable_global);
        let _ = writeln!(s, "enable_local = {}", self.enable_local);
        let _ = writeln!(s, "enable_novel_views = {}", self.enable_novel_views);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "log_every = {}", self.log_every);
        let _ = writeln!(s, "s_init = {}", self.s_init);
        let _ = writeln!(s, "resolution = {}", self.resolution);
        let _ = writeln!(s, "udf_steps = {}", self.udf.steps);
        let _ = writeln!(s, "udf_pool_size = {}", self.udf.pool_size);
        let _ = writeln!(s, "udf_pool_refresh = {}", self.udf.pool_refresh);
        let _ = writeln!(s, "udf_batch = {}", self.udf.batch);
        let _ = writeln!(s, "udf_lr = {}", self.udf.lr);
        s
    }

    /// FNV-1a hash of the canonical serialization.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.serialize().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let mut cfg = TrainConfig::desk();
        cfg.iterations = 1234;
        cfg.weights.local = 0.75;
        cfg.sample.n_coarse = 48;
        let text = cfg.serialize();
        let mut back = TrainConfig::desk();
        back.apply_text(&text, "inline").unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn paper_scale_preset() {
        let cfg = TrainConfig::paper_scale();
        assert_eq!(cfg.iterations, 300_000);
        assert_eq!(cfg.rays_per_batch, 512);
        assert_eq!(cfg.resolution, 512);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let mut cfg = TrainConfig::desk();
        let err = cfg.apply_text("iterations = 5\nbogus_key = 1\n", "test.conf");
        let msg = err.unwrap_err().to_string();
        assert!(msg.contains(":2:") && msg.contains("bogus_key"), "{msg}");
    }

    #[test]
    fn hash_changes_with_values() {
        let a = TrainConfig::desk();
        let mut b = TrainConfig::desk();
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
    }
}
