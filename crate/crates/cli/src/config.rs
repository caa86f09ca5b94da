//! Run configuration: a flat `key = value` text file with typo-safe
//! parsing, CLI overrides, and full-resolution persistence so any run can
//! be reproduced from the file it wrote.

use anyhow::{anyhow, bail, Context, Result};
use bpn_core::cascade::{CascadeConfig, DEFAULT_THRESHOLDS};
use bpn_core::network::{BackboneSpec, NetConfig};
use bpn_core::train::TrainSettings;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Square input edge; must be a multiple of 64.
    pub input_size: usize,
    /// Foreground class count (2..=8).
    pub num_classes: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub total_iterations: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Cascade stage count (1..=3); `iou_thresholds` must match.
    pub stages: usize,
    pub iou_thresholds: Vec<f64>,
    pub pyramid_channels: usize,
    /// Backbone stage widths (5 values).
    pub backbone_channels: Vec<usize>,
    pub augment: bool,
    /// Periodic checkpoint interval in iterations (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input_size: 128,
            num_classes: 4,
            batch_size: 8,
            base_lr: 1e-3,
            total_iterations: 2000,
            momentum: 0.9,
            weight_decay: 0.005,
            seed: 0,
            stages: 3,
            iou_thresholds: DEFAULT_THRESHOLDS.to_vec(),
            pyramid_channels: 64,
            backbone_channels: vec![32, 64, 128, 128, 128],
            augment: false,
            checkpoint_every: 0,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| anyhow!("{key}: expected integer, got {v:?}"))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| anyhow!("{key}: expected number, got {v:?}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("{key}: expected true or false, got {v:?}"),
    }
}

fn parse_list_f64(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| parse_f64(key, s.trim()))
        .collect()
}

fn parse_list_usize(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_usize(key, s.trim()))
        .collect()
}

impl RunConfig {
    /// Applies one `key = value` assignment. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "input_size" => self.input_size = parse_usize(key, value)?,
            "num_classes" => self.num_classes = parse_usize(key, value)?,
            "batch_size" => self.batch_size = parse_usize(key, value)?,
            "base_lr" => self.base_lr = parse_f64(key, value)?,
            "total_iterations" => self.total_iterations = parse_usize(key, value)?,
            "momentum" => self.momentum = parse_f64(key, value)?,
            "weight_decay" => self.weight_decay = parse_f64(key, value)?,
            "seed" => self.seed = value.parse().map_err(|_| anyhow!("seed: bad integer {value:?}"))?,
            "stages" => self.stages = parse_usize(key, value)?,
            "iou_thresholds" => self.iou_thresholds = parse_list_f64(key, value)?,
            "pyramid_channels" => self.pyramid_channels = parse_usize(key, value)?,
            "backbone_channels" => self.backbone_channels = parse_list_usize(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_usize(key, value)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 64 != 0 {
            bail!("input_size {} must be a positive multiple of 64", self.input_size);
        }
        if !(2..=8).contains(&self.num_classes) {
            bail!("num_classes {} outside 2..=8", self.num_classes);
        }
        if self.batch_size == 0 {
            bail!("batch_size must be >= 1");
        }
        if self.base_lr <= 0.0 {
            bail!("base_lr must be positive");
        }
        if self.total_iterations == 0 {
            bail!("total_iterations must be >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!("momentum {} outside [0, 1)", self.momentum);
        }
        if self.weight_decay < 0.0 {
            bail!("weight_decay must be >= 0");
        }
        if !(1..=3).contains(&self.stages) {
            bail!("stages {} outside 1..=3", self.stages);
        }
        if self.iou_thresholds.len() != self.stages {
            bail!(
                "iou_thresholds has {} entries for {} stages",
                self.iou_thresholds.len(),
                self.stages
            );
        }
        self.cascade().validate().map_err(|e| anyhow!("{e}"))?;
        if self.pyramid_channels == 0 {
            bail!("pyramid_channels must be >= 1");
        }
        if self.backbone_channels.len() != 5 {
            bail!("backbone_channels needs exactly 5 values");
        }
        Ok(())
    }

    /// Parses a config file (`key = value` lines, `#` comments).
    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), i + 1))?;
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(cfg)
    }

    /// Serializes every field, suitable for exact reproduction.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "base_lr = {}", self.base_lr);
        let _ = writeln!(s, "total_iterations = {}", self.total_iterations);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "stages = {}", self.stages);
        let _ = writeln!(
            s,
            "iou_thresholds = {}",
            self.iou_thresholds
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(s, "pyramid_channels = {}", self.pyramid_channels);
        let _ = writeln!(
            s,
            "backbone_channels = {}",
            self.backbone_channels
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        s
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            input_size: self.input_size,
            num_classes: self.num_classes,
            pyramid_channels: self.pyramid_channels,
            stages: self.stages,
            backbone: BackboneSpec {
                input_channels: 3,
                stage_channels: self.backbone_channels.clone(),
                convs_per_stage: 2,
            },
        }
    }

    pub fn cascade(&self) -> CascadeConfig {
        CascadeConfig::with_thresholds(&self.iou_thresholds)
    }

    pub fn train_settings(&self, start_iteration: usize) -> TrainSettings {
        let mut t = TrainSettings::new(self.total_iterations, self.seed, self.cascade());
        t.batch_size = self.batch_size;
        t.base_lr = self.base_lr;
        t.momentum = self.momentum;
        t.weight_decay = self.weight_decay;
        t.augment = self.augment;
        t.start_iteration = start_iteration;
        t
    }
}
