//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys and unparsable values are errors. Command-line `--set`
//! overrides are applied with [`TrainConfig::set`] after the file.
//!
//! Full-scale training uses SGD (batch 32, lr 1e-3, 48k iterations) for
//! stage one and Adam (batch 16, lr 1e-4, 230k iterations) for stage two;
//! the defaults below keep the optimiser kinds and learning rates but
//! shrink batch, iterations and canvas to desk scale.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{RatioBin, RatioDistribution, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::AdversarialMode;
use crate::maskcomp::{Stage1Config, Stage1Weights};
use crate::recovery::{Assembly, RecoveryConfig, Stage2Weights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Mask,
    Recover,
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mask" => Ok(Self::Mask),
            "recover" => Ok(Self::Recover),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

/// Where stage two takes its parsing guides from while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsingSource {
    GroundTruth,
    Predicted,
}

impl FromStr for ParsingSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ground_truth" => Ok(Self::GroundTruth),
            "predicted" => Ok(Self::Predicted),
            other => Err(format!("unknown parsing source `{other}`")),
        }
    }
}

/// Optimiser settings for one stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// Every knob of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub seed: u64,
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub part_count: usize,

    pub train_humans: usize,
    pub val_humans: usize,
    pub val_occluders_per_human: usize,
    pub corruption: f64,
    pub occluder_scale: f64,
    pub train_bins: RatioDistribution,
    pub val_bins: RatioDistribution,

    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub adversarial: AdversarialMode,
    pub background_weight: f64,

    pub mask_optimizer: OptimizerConfig,
    pub recover_optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub log_every: usize,
    /// Multiply every learning rate by `lr_gamma` each `lr_step`
    /// iterations; 0 keeps it constant.
    pub lr_step: usize,
    pub lr_gamma: f64,

    pub templates: usize,
    pub template_size: usize,
    pub hg_depth: usize,
    pub hg_channels: usize,
    pub disc_channels: usize,
    pub rec_channels: usize,
    pub rec_levels: usize,
    pub pga_scales: usize,
    pub pga_max_pixels: usize,
    pub pga_assembly: Assembly,
    pub pga_body: bool,
    pub pga_relation: bool,
    pub recover_parsing: ParsingSource,

    pub composite: bool,
    pub grids: usize,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Mask,
            seed: 0,
            canvas_height: 64,
            canvas_width: 64,
            part_count: 7,
            train_humans: 512,
            val_humans: 297,
            val_occluders_per_human: 3,
            corruption: 0.3,
            occluder_scale: 0.6,
            train_bins: RatioDistribution::train_default(),
            val_bins: RatioDistribution::val_default(),
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.1,
            beta1: 0.1,
            beta2: 1.0,
            beta3: 1.0,
            beta4: 40.0,
            adversarial: AdversarialMode::NonSaturating,
            background_weight: 0.3,
            mask_optimizer: OptimizerConfig {
                kind: OptimizerKind::Sgd,
                lr: 1e-3,
                momentum: 0.9,
                beta1: 0.9,
                beta2: 0.999,
            },
            recover_optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 1e-4,
                momentum: 0.9,
                beta1: 0.9,
                beta2: 0.999,
            },
            batch_size: 8,
            iterations: 2000,
            log_every: 50,
            lr_step: 0,
            lr_gamma: 0.5,
            templates: 16,
            template_size: 64,
            hg_depth: 3,
            hg_channels: 32,
            disc_channels: 16,
            rec_channels: 16,
            rec_levels: 4,
            pga_scales: 3,
            pga_max_pixels: 4096,
            pga_assembly: Assembly::Fusion,
            pga_body: true,
            pga_relation: true,
            recover_parsing: ParsingSource::GroundTruth,
            composite: false,
            grids: 8,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

/// Bins written as `low:high:probability` separated by commas.
fn parse_bins(key: &str, value: &str) -> Result<RatioDistribution> {
    let bins = value
        .split(',')
        .map(|b| {
            let f: Vec<&str> = b.trim().split(':').collect();
            if f.len() != 3 {
                return Err(Error::Config(format!("`{key}`: bin `{b}` is not low:high:probability")));
            }
            Ok(RatioBin {
                low: parse(key, f[0])?,
                high: parse(key, f[1])?,
                probability: parse(key, f[2])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RatioDistribution::new(bins).map_err(|e| Error::Config(format!("`{key}`: {e}")))
}

fn format_bins(d: &RatioDistribution) -> String {
    d.bins()
        .iter()
        .map(|b| format!("{}:{}:{}", b.low, b.high, b.probability))
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "stage" => self.stage = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "canvas_height" => self.canvas_height = parse(key, v)?,
            "canvas_width" => self.canvas_width = parse(key, v)?,
            "part_count" => self.part_count = parse(key, v)?,
            "train_humans" => self.train_humans = parse(key, v)?,
            "val_humans" => self.val_humans = parse(key, v)?,
            "val_occluders_per_human" => self.val_occluders_per_human = parse(key, v)?,
            "corruption" => self.corruption = parse(key, v)?,
            "occluder_scale" => self.occluder_scale = parse(key, v)?,
            "train_bins" => self.train_bins = parse_bins(key, v)?,
            "val_bins" => self.val_bins = parse_bins(key, v)?,
            "lambda1" => self.lambda1 = parse(key, v)?,
            "lambda2" => self.lambda2 = parse(key, v)?,
            "lambda3" => self.lambda3 = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "beta3" => self.beta3 = parse(key, v)?,
            "beta4" => self.beta4 = parse(key, v)?,
            "adversarial" => self.adversarial = parse(key, v)?,
            "background_weight" => self.background_weight = parse(key, v)?,
            "mask_optimizer" => self.mask_optimizer.kind = parse(key, v)?,
            "mask_lr" => self.mask_optimizer.lr = parse(key, v)?,
            "mask_momentum" => self.mask_optimizer.momentum = parse(key, v)?,
            "mask_adam_beta1" => self.mask_optimizer.beta1 = parse(key, v)?,
            "mask_adam_beta2" => self.mask_optimizer.beta2 = parse(key, v)?,
            "recover_optimizer" => self.recover_optimizer.kind = parse(key, v)?,
            "recover_lr" => self.recover_optimizer.lr = parse(key, v)?,
            "recover_momentum" => self.recover_optimizer.momentum = parse(key, v)?,
            "recover_adam_beta1" => self.recover_optimizer.beta1 = parse(key, v)?,
            "recover_adam_beta2" => self.recover_optimizer.beta2 = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "lr_step" => self.lr_step = parse(key, v)?,
            "lr_gamma" => self.lr_gamma = parse(key, v)?,
            "templates" => self.templates = parse(key, v)?,
            "template_size" => self.template_size = parse(key, v)?,
            "hg_depth" => self.hg_depth = parse(key, v)?,
            "hg_channels" => self.hg_channels = parse(key, v)?,
            "disc_channels" => self.disc_channels = parse(key, v)?,
            "rec_channels" => self.rec_channels = parse(key, v)?,
            "rec_levels" => self.rec_levels = parse(key, v)?,
            "pga_scales" => self.pga_scales = parse(key, v)?,
            "pga_max_pixels" => self.pga_max_pixels = parse(key, v)?,
            "pga_assembly" => self.pga_assembly = parse(key, v)?,
            "pga_body" => self.pga_body = parse(key, v)?,
            "pga_relation" => self.pga_relation = parse(key, v)?,
            "recover_parsing" => self.recover_parsing = parse(key, v)?,
            "composite" => self.composite = parse(key, v)?,
            "grids" => self.grids = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "run_dir" => self.run_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k, v)
    }

    /// Parses configuration text on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        self.stage1_weights()?;
        self.stage2_weights()?;
        let err = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.background_weight) {
            return err(format!("background_weight {} outside [0,1]", self.background_weight));
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            return err(format!("corruption {} outside [0,1]", self.corruption));
        }
        if !(0.0..=1.0).contains(&self.occluder_scale) || self.occluder_scale == 0.0 {
            return err(format!("occluder_scale {} outside (0,1]", self.occluder_scale));
        }
        if self.canvas_height < 32 || self.canvas_width < 32 {
            return err("canvas sides must be at least 32".into());
        }
        if !(2..=256).contains(&self.part_count) {
            return err(format!("part_count {} outside 2..=256", self.part_count));
        }
        if self.templates == 0 || self.template_size == 0 {
            return err("templates and template_size must be positive".into());
        }
        if self.hg_channels == 0 || self.rec_channels == 0 || self.disc_channels == 0 || self.rec_levels == 0 {
            return err("channel counts and rec_levels must be positive".into());
        }
        for (name, o) in [("mask", &self.mask_optimizer), ("recover", &self.recover_optimizer)] {
            if !(o.lr.is_finite() && o.lr > 0.0) {
                return err(format!("{name}_lr must be positive"));
            }
            if !(0.0..1.0).contains(&o.momentum) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
                return err(format!("{name} momentum/betas must lie in [0,1)"));
            }
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return err(format!("lr_gamma {} outside (0,1]", self.lr_gamma));
        }
        Ok(())
    }

    /// Serialises back to the flat text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let o1 = &self.mask_optimizer;
        let o2 = &self.recover_optimizer;
        let kind = |k: OptimizerKind| if k == OptimizerKind::Sgd { "sgd" } else { "adam" };
        let stage = if self.stage == Stage::Mask { "mask" } else { "recover" };
        let source = if self.recover_parsing == ParsingSource::GroundTruth {
            "ground_truth"
        } else {
            "predicted"
        };
        let lines: Vec<(&str, String)> = vec![
            ("stage", stage.into()),
            ("seed", self.seed.to_string()),
            ("canvas_height", self.canvas_height.to_string()),
            ("canvas_width", self.canvas_width.to_string()),
            ("part_count", self.part_count.to_string()),
            ("train_humans", self.train_humans.to_string()),
            ("val_humans", self.val_humans.to_string()),
            ("val_occluders_per_human", self.val_occluders_per_human.to_string()),
            ("corruption", self.corruption.to_string()),
            ("occluder_scale", self.occluder_scale.to_string()),
            ("train_bins", format_bins(&self.train_bins)),
            ("val_bins", format_bins(&self.val_bins)),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("lambda3", self.lambda3.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("beta3", self.beta3.to_string()),
            ("beta4", self.beta4.to_string()),
            ("adversarial", self.adversarial.as_str().into()),
            ("background_weight", self.background_weight.to_string()),
            ("mask_optimizer", kind(o1.kind).into()),
            ("mask_lr", o1.lr.to_string()),
            ("mask_momentum", o1.momentum.to_string()),
            ("mask_adam_beta1", o1.beta1.to_string()),
            ("mask_adam_beta2", o1.beta2.to_string()),
            ("recover_optimizer", kind(o2.kind).into()),
            ("recover_lr", o2.lr.to_string()),
            ("recover_momentum", o2.momentum.to_string()),
            ("recover_adam_beta1", o2.beta1.to_string()),
            ("recover_adam_beta2", o2.beta2.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("iterations", self.iterations.to_string()),
            ("log_every", self.log_every.to_string()),
            ("lr_step", self.lr_step.to_string()),
            ("lr_gamma", self.lr_gamma.to_string()),
            ("templates", self.templates.to_string()),
            ("template_size", self.template_size.to_string()),
            ("hg_depth", self.hg_depth.to_string()),
            ("hg_channels", self.hg_channels.to_string()),
            ("disc_channels", self.disc_channels.to_string()),
            ("rec_channels", self.rec_channels.to_string()),
            ("rec_levels", self.rec_levels.to_string()),
            ("pga_scales", self.pga_scales.to_string()),
            ("pga_max_pixels", self.pga_max_pixels.to_string()),
            ("pga_assembly", self.pga_assembly.as_str().into()),
            ("pga_body", self.pga_body.to_string()),
            ("pga_relation", self.pga_relation.to_string()),
            ("recover_parsing", source.into()),
            ("composite", self.composite.to_string()),
            ("grids", self.grids.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("run_dir", self.run_dir.display().to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// FNV-1a hash of [`to_text`](Self::to_text), as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// Step-decayed learning rate at `iteration`.
    pub fn lr_at(&self, base: f64, iteration: usize) -> f64 {
        match self.lr_step {
            0 => base,
            step => base * self.lr_gamma.powi((iteration / step) as i32),
        }
    }

    pub fn canvas(&self) -> (usize, usize) {
        (self.canvas_height, self.canvas_width)
    }

    pub fn stage1_weights(&self) -> Result<Stage1Weights> {
        Stage1Weights::new(self.lambda1, self.lambda2, self.lambda3)
    }

    pub fn stage2_weights(&self) -> Result<Stage2Weights> {
        Stage2Weights::new(self.beta1, self.beta2, self.beta3, self.beta4)
    }

    pub fn stage1_config(&self) -> Stage1Config {
        Stage1Config {
            part_count: self.part_count,
            depth: self.hg_depth,
            base_channels: self.hg_channels,
            disc_channels: self.disc_channels,
        }
    }

    pub fn recovery_config(&self) -> RecoveryConfig {
        RecoveryConfig {
            part_count: self.part_count,
            base_channels: self.rec_channels,
            levels: self.rec_levels,
            disc_channels: self.disc_channels,
            pga_scales: self.pga_scales,
            pga_max_pixels: self.pga_max_pixels,
            body_stream: self.pga_body,
            relation_stream: self.pga_relation,
            assembly: self.pga_assembly,
            background_weight: self.background_weight,
        }
    }

    pub fn synth_spec(&self, split: Split) -> SynthSpec {
        let (humans, per_human, distribution) = match split {
            Split::Train => (self.train_humans, 1, self.train_bins.clone()),
            Split::Val | Split::Test => (self.val_humans, self.val_occluders_per_human, self.val_bins.clone()),
        };
        SynthSpec {
            split,
            canvas: self.canvas(),
            part_count: self.part_count,
            humans,
            occluders_per_human: per_human,
            distribution,
            corruption: self.corruption,
            occluder_scale: self.occluder_scale,
            master_seed: self.seed,
        }
    }
}
