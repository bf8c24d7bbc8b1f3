//! Run configuration: a plain-text `key=value` file with CLI overrides.

use crate::acd::{AcdConfig, AttnNorm, Interactions};
use crate::ccd::{CcdConfig, RefineRule};
use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Environment variable naming the root under which relative output
/// directories are placed.
pub const OUT_ROOT_ENV: &str = "ACTDET_OUT_ROOT";

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Detector confidence filter applied at inference.
    pub anchor_threshold: f64,
    pub roi_grid: usize,
    pub embed_dim: usize,
    pub memory_len: usize,
    pub acd_lr: f64,
    pub acd_epochs: usize,
    pub interactions: Interactions,
    pub attn_norm: AttnNorm,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub n_samples: usize,
    pub denoiser_width: usize,
    pub ccd_lr: f64,
    pub ccd_epochs: usize,
    pub refine_rule: RefineRule,
}

impl Default for RunConfig {
    fn default() -> Self {
        let acd = AcdConfig::default();
        let ccd = CcdConfig::default();
        RunConfig {
            dataset: PathBuf::from("dataset"),
            out_dir: PathBuf::from("out"),
            seed: 0,
            anchor_threshold: 0.8,
            roi_grid: acd.roi_grid,
            embed_dim: acd.embed_dim,
            memory_len: acd.memory_len,
            acd_lr: acd.learning_rate,
            acd_epochs: acd.epochs,
            interactions: acd.interactions,
            attn_norm: acd.attn_norm,
            t_steps: ccd.t_steps,
            beta_start: ccd.beta_start,
            beta_end: ccd.beta_end,
            n_samples: ccd.n_samples,
            denoiser_width: ccd.denoiser_width,
            ccd_lr: ccd.learning_rate,
            ccd_epochs: ccd.epochs,
            refine_rule: ccd.refine_rule,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value '{value}' for key '{key}'")))
}

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = parse_num(key, value)?,
            "anchor_threshold" => self.anchor_threshold = parse_num(key, value)?,
            "p" => self.roi_grid = parse_num(key, value)?,
            "d" => self.embed_dim = parse_num(key, value)?,
            "l" => self.memory_len = parse_num(key, value)?,
            "acd_lr" => self.acd_lr = parse_num(key, value)?,
            "acd_epochs" => self.acd_epochs = parse_num(key, value)?,
            "interactions" => self.interactions = Interactions::parse(value)?,
            "attn_norm" => self.attn_norm = AttnNorm::parse(value)?,
            "t_steps" => self.t_steps = parse_num(key, value)?,
            "beta_start" => self.beta_start = parse_num(key, value)?,
            "beta_end" => self.beta_end = parse_num(key, value)?,
            "n_samples" => self.n_samples = parse_num(key, value)?,
            "denoiser_width" => self.denoiser_width = parse_num(key, value)?,
            "ccd_lr" => self.ccd_lr = parse_num(key, value)?,
            "ccd_epochs" => self.ccd_epochs = parse_num(key, value)?,
            "refine_rule" => self.refine_rule = RefineRule::parse(value)?,
            other => {
                return Err(Error::config(format!("unknown configuration key '{other}'")));
            }
        }
        Ok(())
    }

    /// Parses a config file: one `key=value` per line, `#` comments.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("expected key=value, got '{line}'"),
            })?;
            config.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<()> {
        for (key, value) in overrides {
            self.set(key, value)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.anchor_threshold) {
            return Err(Error::config("anchor_threshold must lie in [0, 1]"));
        }
        if self.roi_grid == 0 || self.embed_dim == 0 || self.memory_len == 0 {
            return Err(Error::config("p, d and l must all be positive"));
        }
        if self.n_samples < 2 {
            return Err(Error::config("n_samples must be at least 2"));
        }
        Ok(())
    }

    /// The output directory, honoring the output-root environment variable
    /// for relative paths.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var(OUT_ROOT_ENV) {
            Ok(root) if self.out_dir.is_relative() && !root.is_empty() => {
                PathBuf::from(root).join(&self.out_dir)
            }
            _ => self.out_dir.clone(),
        }
    }

    pub fn acd_config(&self) -> AcdConfig {
        AcdConfig {
            roi_grid: self.roi_grid,
            embed_dim: self.embed_dim,
            memory_len: self.memory_len,
            interactions: self.interactions,
            attn_norm: self.attn_norm,
            learning_rate: self.acd_lr,
            epochs: self.acd_epochs,
        }
    }

    pub fn ccd_config(&self) -> CcdConfig {
        CcdConfig {
            t_steps: self.t_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            n_samples: self.n_samples,
            denoiser_width: self.denoiser_width,
            learning_rate: self.ccd_lr,
            epochs: self.ccd_epochs,
            refine_rule: self.refine_rule,
        }
    }

    /// Canonical `key=value` rendering, used for the run-metadata hash.
    pub fn canonical_string(&self) -> String {
        let attn = match self.attn_norm {
            AttnNorm::Softmax => "softmax",
            AttnNorm::Count => "count",
        };
        let refine = match self.refine_rule {
            RefineRule::MeanArgmax => "mean_argmax",
            RefineRule::Vote => "vote",
        };
        format!(
            "acd_epochs={}\nacd_lr={}\nanchor_threshold={}\nattn_norm={attn}\nbeta_end={}\n\
             beta_start={}\nccd_epochs={}\nccd_lr={}\nd={}\ndataset={}\ndenoiser_width={}\n\
             interactions={}\nl={}\nn_samples={}\nout_dir={}\np={}\nrefine_rule={refine}\n\
             seed={}\nt_steps={}\n",
            self.acd_epochs,
            self.acd_lr,
            self.anchor_threshold,
            self.beta_end,
            self.beta_start,
            self.ccd_epochs,
            self.ccd_lr,
            self.embed_dim,
            self.dataset.display(),
            self.denoiser_width,
            self.interactions.as_str(),
            self.memory_len,
            self.n_samples,
            self.out_dir.display(),
            self.roi_grid,
            self.seed,
            self.t_steps,
        )
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_string().as_bytes());
        format!("{:x}", hasher.finalize())
    }
}
