//! Flat `key = value` run configuration. Every key has a default, unknown
//! keys are rejected, and [`RunConfig::to_text`] echoes the effective values
//! in a fixed order.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hrpe::HrpeConfig;
use crate::infer::InferConfig;
use crate::prps::{PrpsConfig, SupervisionMode};
use crate::scene::SceneKnobs;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    pub knobs: SceneKnobs,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            train_count: 200,
            test_count: 50,
            seed: 1,
            knobs: SceneKnobs::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
    /// Tail fraction of the training split held out for validation.
    pub val_fraction: f64,
    /// Random horizontal flips of training batches.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 10,
            lr: 0.01,
            plateau_factor: 0.01,
            plateau_patience: 3,
            seed: 1,
            val_fraction: 0.1,
            hflip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("train.epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("train.lr must be > 0");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("train.plateau_factor must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("train.val_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            height: 640,
            width: 640,
            repeats: 3,
        }
    }
}

/// Grid for the ablation command; each list is comma-separated in text form.
#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub modes: Vec<SupervisionMode>,
    pub sigmas: Vec<f64>,
    pub strides: Vec<usize>,
    /// `full`, `no_reorg`, `no_reweight`.
    pub variants: Vec<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            modes: SupervisionMode::ALL.to_vec(),
            sigmas: vec![2.0],
            strides: vec![4],
            variants: vec!["full".into()],
        }
    }
}

pub const ABLATE_VARIANTS: [&str; 3] = ["full", "no_reorg", "no_reweight"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    /// `stride` here always mirrors `model.stride`.
    pub prps: PrpsConfig,
    pub model: HrpeConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval_delta: f64,
    pub bench: BenchConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = HrpeConfig::default();
        Self {
            prps: PrpsConfig {
                stride: model.stride,
                ..PrpsConfig::default()
            },
            model,
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            eval_delta: 5.0,
            bench: BenchConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    let items: Vec<T> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: list must not be empty")));
    }
    Ok(items)
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Effective values in canonical key order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (g, k, p, m, t) = (&self.gen, &self.gen.knobs, &self.prps, &self.model, &self.train);
        vec![
            ("gen.train_count", g.train_count.to_string()),
            ("gen.test_count", g.test_count.to_string()),
            ("gen.seed", g.seed.to_string()),
            ("gen.width", k.width.to_string()),
            ("gen.height", k.height.to_string()),
            ("gen.min_targets", k.min_targets.to_string()),
            ("gen.max_targets", k.max_targets.to_string()),
            ("gen.empty_fraction", k.empty_fraction.to_string()),
            ("gen.snr_min", k.snr_min.to_string()),
            ("gen.snr_max", k.snr_max.to_string()),
            ("gen.noise_min", k.noise_min.to_string()),
            ("gen.noise_max", k.noise_max.to_string()),
            ("gen.psf_min", k.psf_min.to_string()),
            ("gen.psf_max", k.psf_max.to_string()),
            ("gen.clutter_scale", k.clutter_scale.to_string()),
            ("gen.clutter_contrast", k.clutter_contrast.to_string()),
            ("gen.background_lo", k.background_lo.to_string()),
            ("gen.background_hi", k.background_hi.to_string()),
            ("gen.min_separation", k.min_separation.to_string()),
            ("gen.margin", k.margin.to_string()),
            ("prps.sigma", p.sigma.to_string()),
            ("prps.radius", p.radius.to_string()),
            ("prps.mode", p.mode.to_string()),
            ("prps.refine_radius", p.refine_radius.to_string()),
            ("prps.allow_radius_override", p.allow_radius_override.to_string()),
            ("model.stride", m.stride.to_string()),
            ("model.stem_channels", m.stem_channels.to_string()),
            ("model.trunk_channels", m.trunk_channels.to_string()),
            ("model.num_reorg_units", m.num_reorg_units.to_string()),
            ("model.extra_dw_every", m.extra_dw_every.to_string()),
            ("model.enable_channel_reorg", m.enable_channel_reorg.to_string()),
            ("model.enable_reweighting", m.enable_reweighting.to_string()),
            ("model.se_reduction", m.se_reduction.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.plateau_factor", t.plateau_factor.to_string()),
            ("train.plateau_patience", t.plateau_patience.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.val_fraction", t.val_fraction.to_string()),
            ("train.hflip", t.hflip.to_string()),
            ("infer.tau", self.infer.tau.to_string()),
            ("infer.max_detections", self.infer.max_detections.to_string()),
            ("eval.delta", self.eval_delta.to_string()),
            ("bench.height", self.bench.height.to_string()),
            ("bench.width", self.bench.width.to_string()),
            ("bench.repeats", self.bench.repeats.to_string()),
            ("ablate.modes", join(&self.ablate.modes)),
            ("ablate.sigmas", join(&self.ablate.sigmas)),
            ("ablate.strides", join(&self.ablate.strides)),
            ("ablate.variants", self.ablate.variants.join(",")),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let k = &mut self.gen.knobs;
        match key {
            "gen.train_count" => self.gen.train_count = parse(key, v)?,
            "gen.test_count" => self.gen.test_count = parse(key, v)?,
            "gen.seed" => self.gen.seed = parse(key, v)?,
            "gen.width" => k.width = parse(key, v)?,
            "gen.height" => k.height = parse(key, v)?,
            "gen.min_targets" => k.min_targets = parse(key, v)?,
            "gen.max_targets" => k.max_targets = parse(key, v)?,
            "gen.empty_fraction" => k.empty_fraction = parse(key, v)?,
            "gen.snr_min" => k.snr_min = parse(key, v)?,
            "gen.snr_max" => k.snr_max = parse(key, v)?,
            "gen.noise_min" => k.noise_min = parse(key, v)?,
            "gen.noise_max" => k.noise_max = parse(key, v)?,
            "gen.psf_min" => k.psf_min = parse(key, v)?,
            "gen.psf_max" => k.psf_max = parse(key, v)?,
            "gen.clutter_scale" => k.clutter_scale = parse(key, v)?,
            "gen.clutter_contrast" => k.clutter_contrast = parse(key, v)?,
            "gen.background_lo" => k.background_lo = parse(key, v)?,
            "gen.background_hi" => k.background_hi = parse(key, v)?,
            "gen.min_separation" => k.min_separation = parse(key, v)?,
            "gen.margin" => k.margin = parse(key, v)?,
            "prps.sigma" => self.prps.sigma = parse(key, v)?,
            "prps.radius" => self.prps.radius = parse(key, v)?,
            "prps.mode" => self.prps.mode = v.parse()?,
            "prps.refine_radius" => self.prps.refine_radius = parse(key, v)?,
            "prps.allow_radius_override" => self.prps.allow_radius_override = parse_bool(key, v)?,
            "model.stride" => self.model.stride = parse(key, v)?,
            "model.stem_channels" => self.model.stem_channels = parse(key, v)?,
            "model.trunk_channels" => self.model.trunk_channels = parse(key, v)?,
            "model.num_reorg_units" => self.model.num_reorg_units = parse(key, v)?,
            "model.extra_dw_every" => self.model.extra_dw_every = parse(key, v)?,
            "model.enable_channel_reorg" => self.model.enable_channel_reorg = parse_bool(key, v)?,
            "model.enable_reweighting" => self.model.enable_reweighting = parse_bool(key, v)?,
            "model.se_reduction" => self.model.se_reduction = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.plateau_factor" => self.train.plateau_factor = parse(key, v)?,
            "train.plateau_patience" => self.train.plateau_patience = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.val_fraction" => self.train.val_fraction = parse(key, v)?,
            "train.hflip" => self.train.hflip = parse_bool(key, v)?,
            "infer.tau" => self.infer.tau = parse(key, v)?,
            "infer.max_detections" => self.infer.max_detections = parse(key, v)?,
            "eval.delta" => self.eval_delta = parse(key, v)?,
            "bench.height" => self.bench.height = parse(key, v)?,
            "bench.width" => self.bench.width = parse(key, v)?,
            "bench.repeats" => self.bench.repeats = parse(key, v)?,
            "ablate.modes" => self.ablate.modes = parse_list(key, v)?,
            "ablate.sigmas" => self.ablate.sigmas = parse_list(key, v)?,
            "ablate.strides" => self.ablate.strides = parse_list(key, v)?,
            "ablate.variants" => self.ablate.variants = parse_list(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        self.prps.stride = self.model.stride;
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)));
            };
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&fs::read_to_string(path)?)
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.gen.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.gen.train_count == 0 && self.gen.test_count == 0 {
            return Err(Error::Config("gen.train_count and gen.test_count are both 0".into()));
        }
        self.gen.knobs.validate()?;
        self.model.validate()?;
        self.prps.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        if !(self.eval_delta > 0.0) {
            return Err(Error::Config("eval.delta must be > 0".into()));
        }
        let k = &self.gen.knobs;
        if k.width % self.model.stride != 0 || k.height % self.model.stride != 0 {
            return Err(Error::Config(format!(
                "gen.width/gen.height ({}x{}) must be multiples of model.stride {}",
                k.width, k.height, self.model.stride
            )));
        }
        if self.bench.height == 0 || self.bench.width == 0 || self.bench.repeats == 0 {
            return Err(Error::Config("bench sizes and repeats must be >= 1".into()));
        }
        if let Some(v) = self.ablate.variants.iter().find(|v| !ABLATE_VARIANTS.contains(&v.as_str())) {
            return Err(Error::Config(format!("ablate.variants: unknown variant {v:?}")));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}
