//! Flat `key = value` configuration covering every training and model field.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are
//! rejected. Later assignments override earlier ones, which is how command
//! line flags are layered over a file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::heatmap::{Augmentation, DEFAULT_SIGMA};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::config(format!("precision must be f32 or f64, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_epochs: usize,
    /// When set, the run length in optimizer steps instead of epochs.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub seed: u64,
    /// Masked heatmap modeling and heatmap augmentation.
    pub mhm: bool,
    pub augmentation: Augmentation,
    /// Masked vertex modeling during training (ratio lives in the model config).
    pub mvm: bool,
    pub sigma: f64,
    pub views: usize,
    pub data_fraction: f64,
    pub precision: Precision,
    pub loss_weights: LossWeights,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Meshes generated for synthetic training and held-out evaluation in
    /// ablation runs.
    pub train_meshes: usize,
    pub eval_meshes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-4,
            warmup_fraction: 0.1,
            total_epochs: 10,
            max_steps: None,
            batch_size: 32,
            seed: 0,
            mhm: true,
            augmentation: Augmentation::default(),
            mvm: true,
            sigma: DEFAULT_SIGMA,
            views: 4,
            data_fraction: 1.0,
            precision: Precision::F32,
            loss_weights: LossWeights::default(),
            checkpoint_every: 0,
            log_every: 1,
            train_meshes: 50_000,
            eval_meshes: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::config(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction)));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::config(format!("data_fraction {} outside (0, 1]", self.data_fraction)));
        }
        if ![1, 2, 4, 8].contains(&self.views) {
            return Err(Error::config(format!("views must be 1, 2, 4 or 8, got {}", self.views)));
        }
        let a = &self.augmentation;
        if !(0.0..=1.0).contains(&a.mask_ratio) || a.jitter_std < 0.0 || a.noise_std < 0.0 {
            return Err(Error::config("augmentation ratios and deviations must be nonnegative, mask_ratio at most 1"));
        }
        if self.sigma <= 0.0 {
            return Err(Error::config("sigma must be positive"));
        }
        if self.precision != Precision::F32 {
            return Err(Error::config("training runs in f32; f64 is used by the gradient checks"));
        }
        Ok(())
    }

    /// Augmentation actually applied: none when MHM is off.
    pub fn effective_augmentation(&self) -> Augmentation {
        if self.mhm {
            self.augmentation
        } else {
            Augmentation::NONE
        }
    }
}

/// Training plus model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelConfig::desk(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("cannot parse {key} = {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key} expects on/off, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// `key = value` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!("line {}: expected key = value, got {line:?}", n + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "peak_lr" => t.peak_lr = parse(key, value)?,
            "warmup_fraction" => t.warmup_fraction = parse(key, value)?,
            "total_epochs" => t.total_epochs = parse(key, value)?,
            "max_steps" => {
                t.max_steps = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "batch_size" => t.batch_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "mhm" => t.mhm = parse_bool(key, value)?,
            "mask_ratio" => t.augmentation.mask_ratio = parse(key, value)?,
            "jitter_std" => t.augmentation.jitter_std = parse(key, value)?,
            "noise_std" => t.augmentation.noise_std = parse(key, value)?,
            "mvm" => t.mvm = parse_bool(key, value)?,
            "sigma" => t.sigma = parse(key, value)?,
            "views" => t.views = parse(key, value)?,
            "data_fraction" => t.data_fraction = parse(key, value)?,
            "precision" => t.precision = value.parse()?,
            "weight_vertex" => t.loss_weights.vertex = parse(key, value)?,
            "weight_joint" => t.loss_weights.joint = parse(key, value)?,
            "weight_regressed_joint" => t.loss_weights.regressed_joint = parse(key, value)?,
            "weight_projection" => t.loss_weights.projection = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "log_every" => t.log_every = parse(key, value)?,
            "train_meshes" => t.train_meshes = parse(key, value)?,
            "eval_meshes" => t.eval_meshes = parse(key, value)?,
            "block_hidden_sizes" => m.block_hidden_sizes = parse_list(key, value)?,
            "layers_per_block" => m.layers_per_block = parse(key, value)?,
            "heads_per_block" => m.heads_per_block = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "joint_query_count" => m.joint_query_count = parse(key, value)?,
            "coarse_vertex_count" => m.coarse_vertex_count = parse(key, value)?,
            "full_vertex_count" => m.full_vertex_count = parse(key, value)?,
            "image_size" => m.image_size = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "mvm_ratio" => m.mvm_ratio = parse(key, value)?,
            "upsampler_hidden" => m.upsampler_hidden = parse(key, value)?,
            "layer_norm_eps" => m.layer_norm_eps = parse(key, value)?,
            "camera_prior_scale" => m.camera_prior_scale = parse(key, value)?,
            "camera_prior_center" => {
                let v: Vec<f64> = parse_list(key, value)?;
                if v.len() != 2 {
                    return Err(Error::config("camera_prior_center expects two values"));
                }
                m.camera_prior_center = [v[0], v[1]];
            }
            "desk_scale" => m.desk_scale = parse_bool(key, value)?,
            _ => return Err(Error::config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()
    }

    /// Every field as `key = value`; [`from_text`](Self::from_text) inverts it.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("peak_lr", format!("{:?}", t.peak_lr));
        kv("warmup_fraction", format!("{:?}", t.warmup_fraction));
        kv("total_epochs", t.total_epochs.to_string());
        kv("max_steps", t.max_steps.map_or("none".into(), |v| v.to_string()));
        kv("batch_size", t.batch_size.to_string());
        kv("seed", t.seed.to_string());
        kv("mhm", if t.mhm { "on" } else { "off" }.into());
        kv("mask_ratio", format!("{:?}", t.augmentation.mask_ratio));
        kv("jitter_std", format!("{:?}", t.augmentation.jitter_std));
        kv("noise_std", format!("{:?}", t.augmentation.noise_std));
        kv("mvm", if t.mvm { "on" } else { "off" }.into());
        kv("sigma", format!("{:?}", t.sigma));
        kv("views", t.views.to_string());
        kv("data_fraction", format!("{:?}", t.data_fraction));
        kv("precision", t.precision.to_string());
        kv("weight_vertex", format!("{:?}", t.loss_weights.vertex));
        kv("weight_joint", format!("{:?}", t.loss_weights.joint));
        kv("weight_regressed_joint", format!("{:?}", t.loss_weights.regressed_joint));
        kv("weight_projection", format!("{:?}", t.loss_weights.projection));
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("log_every", t.log_every.to_string());
        kv("train_meshes", t.train_meshes.to_string());
        kv("eval_meshes", t.eval_meshes.to_string());
        kv("block_hidden_sizes", list(&m.block_hidden_sizes));
        kv("layers_per_block", m.layers_per_block.to_string());
        kv("heads_per_block", m.heads_per_block.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("joint_query_count", m.joint_query_count.to_string());
        kv("coarse_vertex_count", m.coarse_vertex_count.to_string());
        kv("full_vertex_count", m.full_vertex_count.to_string());
        kv("image_size", m.image_size.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("mvm_ratio", format!("{:?}", m.mvm_ratio));
        kv("upsampler_hidden", m.upsampler_hidden.to_string());
        kv("layer_norm_eps", format!("{:?}", m.layer_norm_eps));
        kv("camera_prior_scale", format!("{:?}", m.camera_prior_scale));
        kv(
            "camera_prior_center",
            format!("{:?},{:?}", m.camera_prior_center[0], m.camera_prior_center[1]),
        );
        kv("desk_scale", if m.desk_scale { "on" } else { "off" }.into());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.train.peak_lr = 1.234e-3;
        c.train.max_steps = Some(77);
        c.train.mhm = false;
        c.model.block_hidden_sizes = vec![8, 4];
        c.model.camera_prior_center = [1.5, 2.25];
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn later_values_override() {
        let mut c = RunConfig::from_text("# comment\nbatch_size = 4\n\nseed=9\n").unwrap();
        assert_eq!((c.train.batch_size, c.train.seed), (4, 9));
        c.set("batch_size", "2").unwrap();
        assert_eq!(c.train.batch_size, 2);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::from_text("nonsense").is_err());
        assert!(RunConfig::from_text("no_such_key = 1").is_err());
        assert!(RunConfig::from_text("mhm = maybe").is_err());
        assert!(RunConfig::from_text("batch_size = -3").is_err());
        let mut c = RunConfig::default();
        c.train.warmup_fraction = 1.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.train.views = 3;
        assert!(c.validate().is_err());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn mhm_off_disables_augmentation() {
        let mut t = TrainConfig::default();
        assert_eq!(t.effective_augmentation(), Augmentation::default());
        t.mhm = false;
        assert_eq!(t.effective_augmentation(), Augmentation::NONE);
    }
}
