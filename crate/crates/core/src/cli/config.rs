//! `[section]` / `key = value` experiment files.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::nets::NetConfig;
use crate::synthdata::{PoolMode, ShapeSpec, StructuringElement, Topology};
use crate::trainer::{Seeds, TrainConfig, Variant};

#[derive(Debug, Error, PartialEq)]
#[error("{file}:{line}: {key}: {message}")]
pub struct ConfigError {
    pub file: String,
    pub line: usize,
    pub key: String,
    pub message: String,
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub shape: ShapeSpec,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    pub annotation_ratio: f64,
    pub element: StructuringElement,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            shape: ShapeSpec::default(),
            train_count: 48,
            test_count: 16,
            seed: 0,
            annotation_ratio: 0.015,
            element: StructuringElement::default(),
        }
    }
}

/// Training settings; `None` fields fall back to per-variant defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub variant: Option<Variant>,
    pub pool_mode: Option<PoolMode>,
    pub epochs: usize,
    pub lr0: f64,
    pub lambda_s: f64,
    pub lambda_a: Option<f64>,
    /// Per-variant λ_a, taking precedence over `lambda_a`.
    pub lambda_a_partial: Option<f64>,
    pub lambda_a_unpaired: Option<f64>,
    pub lambda_a_paired: Option<f64>,
    pub augment: Option<bool>,
    pub eval_every: usize,
    pub disc_steps: usize,
    pub wall_clock: bool,
    pub seeds: Seeds,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::new(Variant::PartialCe, NetConfig::default());
        Self {
            variant: None,
            pool_mode: None,
            epochs: base.epochs,
            lr0: base.lr0,
            lambda_s: base.lambda_s,
            lambda_a: None,
            lambda_a_partial: None,
            lambda_a_unpaired: None,
            lambda_a_paired: None,
            augment: None,
            eval_every: base.eval_every,
            disc_steps: base.disc_steps,
            wall_clock: base.wall_clock,
            seeds: base.seeds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub net: NetConfig,
    pub train: TrainSection,
    pub output: Option<PathBuf>,
}

struct Ctx<'a> {
    file: &'a str,
    line: usize,
    key: String,
}

impl Ctx<'_> {
    fn err(&self, message: impl Into<String>) -> ConfigError {
        ConfigError {
            file: self.file.to_string(),
            line: self.line,
            key: self.key.clone(),
            message: message.into(),
        }
    }

    fn parse<T: FromStr>(&self, raw: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        raw.parse::<T>()
            .map_err(|e| self.err(format!("cannot parse `{raw}`: {e}")))
    }

    fn real(&self, raw: &str) -> Result<f64, ConfigError> {
        let v: f64 = self.parse(raw)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(format!("`{raw}` is not a finite number")))
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            file: path.display().to_string(),
            line: 0,
            key: "-".into(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses `text`; `file` only labels error messages.
    pub fn parse(text: &str, file: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut section: Option<String> = None;
        let mut seen: Vec<(String, String)> = Vec::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            let mut ctx = Ctx {
                file,
                line: i + 1,
                key: "-".into(),
            };
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                ctx.key = format!("[{name}]");
                if !["data", "net", "train", "output"].contains(&name) {
                    return Err(ctx.err("unknown section"));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ctx.err(format!("expected `key = value`, found `{line}`")));
            };
            let (key, value) = (key.trim(), value.trim());
            ctx.key = key.to_string();
            let Some(sec) = section.as_deref() else {
                return Err(ctx.err("key outside of any section"));
            };
            ctx.key = format!("{sec}.{key}");
            if seen.iter().any(|(s, k)| s == sec && k == key) {
                return Err(ctx.err("duplicate key"));
            }
            seen.push((sec.to_string(), key.to_string()));
            cfg.set(sec, key, value, &ctx)?;
        }
        cfg.validate(file)?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str, ctx: &Ctx) -> Result<(), ConfigError> {
        let d = &mut self.data;
        let s = &mut d.shape;
        let n = &mut self.net;
        let t = &mut self.train;
        match (section, key) {
            ("data", "topology") => s.topology = ctx.parse::<Topology>(v)?,
            ("data", "radius_min") => s.radius.0 = ctx.real(v)?,
            ("data", "radius_max") => s.radius.1 = ctx.real(v)?,
            ("data", "ring_thickness_min") => s.ring_thickness.0 = ctx.real(v)?,
            ("data", "ring_thickness_max") => s.ring_thickness.1 = ctx.real(v)?,
            ("data", "fg_intensity") => s.fg_intensity = ctx.real(v)?,
            ("data", "bg_intensity") => s.bg_intensity = ctx.real(v)?,
            ("data", "noise_std") => s.noise_std = ctx.real(v)?,
            ("data", "illumination") => s.illumination = ctx.real(v)?,
            ("data", "halo_width") => s.halo_width = ctx.real(v)?,
            ("data", "halo_intensity") => s.halo_intensity = ctx.real(v)?,
            ("data", "side") => s.side = ctx.parse(v)?,
            ("data", "train_count") => d.train_count = ctx.parse(v)?,
            ("data", "test_count") => d.test_count = ctx.parse(v)?,
            ("data", "seed") => d.seed = ctx.parse(v)?,
            ("data", "annotation_ratio") => d.annotation_ratio = ctx.real(v)?,
            ("data", "element") => d.element = ctx.parse(v)?,
            ("net", "unet_depth") => n.unet_depth = ctx.parse(v)?,
            ("net", "base_channels") => n.base_channels = ctx.parse(v)?,
            ("net", "disc_layers") => n.disc_layers = ctx.parse(v)?,
            ("train", "variant") => t.variant = Some(ctx.parse(v)?),
            ("train", "pool_mode") => t.pool_mode = Some(ctx.parse(v)?),
            ("train", "epochs") => t.epochs = ctx.parse(v)?,
            ("train", "lr0") => t.lr0 = ctx.real(v)?,
            ("train", "lambda_s") => t.lambda_s = ctx.real(v)?,
            ("train", "lambda_a") => t.lambda_a = Some(ctx.real(v)?),
            ("train", "lambda_a_partial") => t.lambda_a_partial = Some(ctx.real(v)?),
            ("train", "lambda_a_unpaired") => t.lambda_a_unpaired = Some(ctx.real(v)?),
            ("train", "lambda_a_paired") => t.lambda_a_paired = Some(ctx.real(v)?),
            ("train", "augment") => t.augment = Some(ctx.parse(v)?),
            ("train", "eval_every") => t.eval_every = ctx.parse(v)?,
            ("train", "disc_steps") => t.disc_steps = ctx.parse(v)?,
            ("train", "wall_clock") => t.wall_clock = ctx.parse(v)?,
            ("train", "seed_init") => t.seeds.init = ctx.parse(v)?,
            ("train", "seed_data_order") => t.seeds.data_order = ctx.parse(v)?,
            ("train", "seed_pool_shuffle") => t.seeds.pool_shuffle = ctx.parse(v)?,
            ("train", "seed_augmentation") => t.seeds.augmentation = ctx.parse(v)?,
            ("output", "dir") => {
                if v.is_empty() {
                    return Err(ctx.err("empty path"));
                }
                self.output = Some(PathBuf::from(v))
            }
            _ => return Err(ctx.err("unknown key")),
        }
        Ok(())
    }

    /// Cross-field checks, reported against the offending key.
    fn validate(&self, file: &str) -> Result<(), ConfigError> {
        let err = |key: &str, message: String| ConfigError {
            file: file.to_string(),
            line: 0,
            key: key.to_string(),
            message,
        };
        self.data
            .shape
            .validate()
            .map_err(|e| err("data", e.to_string()))?;
        if self.data.train_count == 0 {
            return Err(err("data.train_count", "must be at least 1".into()));
        }
        let r = self.data.annotation_ratio;
        if !(r > 0.0 && r < 1.0) {
            return Err(err("data.annotation_ratio", format!("{r} must lie in (0, 1)")));
        }
        let net = NetConfig {
            image_side: self.data.shape.side,
            ..self.net
        };
        net.validate().map_err(|e| err("net", e.to_string()))?;
        if let (Some(v), Some(mode)) = (self.train.variant, self.train.pool_mode) {
            if v.pool_mode() != Some(mode) {
                return Err(err(
                    "train.pool_mode",
                    format!("{mode} does not match variant {v}"),
                ));
            }
        }
        let probe = self.train_config(self.train.variant.unwrap_or(Variant::PartialCe), None);
        probe
            .validate(None)
            .or_else(|e| match e {
                // Pool and bounds are supplied at run time.
                crate::trainer::TrainError::Config(m)
                    if m.contains("pool") || m.contains("bounds") =>
                {
                    Ok(())
                }
                other => Err(other),
            })
            .map_err(|e| err("train", e.to_string()))?;
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            image_side: self.data.shape.side,
            init_seed: self.train.seeds.init,
            ..self.net
        }
    }

    /// Training config for `variant`, with `seeds` overriding the file's seeds.
    pub fn train_config(&self, variant: Variant, seeds: Option<Seeds>) -> TrainConfig {
        let t = &self.train;
        let mut cfg = TrainConfig::new(variant, self.net_config());
        cfg.epochs = t.epochs;
        cfg.lr0 = t.lr0;
        cfg.lambda_s = t.lambda_s;
        let specific = match variant {
            Variant::AcclPartial => t.lambda_a_partial,
            Variant::AcclUnpaired => t.lambda_a_unpaired,
            Variant::AcclPaired => t.lambda_a_paired,
            _ => None,
        };
        if let Some(la) = specific.or(t.lambda_a) {
            if variant.is_adversarial() {
                cfg.lambda_a = la;
            }
        }
        if let Some(aug) = t.augment {
            cfg.augment = aug && variant.is_adversarial();
        }
        cfg.eval_every = t.eval_every;
        cfg.disc_steps = t.disc_steps;
        cfg.wall_clock = t.wall_clock;
        cfg.seeds = seeds.unwrap_or(t.seeds);
        cfg.net.init_seed = cfg.seeds.init;
        cfg
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_canonical(&self) -> String {
        let d = &self.data;
        let s = &d.shape;
        let n = &self.net;
        let t = &self.train;
        let mut lines: Vec<(&str, String)> = vec![
            ("[data]", String::new()),
            ("topology", s.topology.to_string()),
            ("radius_min", s.radius.0.to_string()),
            ("radius_max", s.radius.1.to_string()),
            ("ring_thickness_min", s.ring_thickness.0.to_string()),
            ("ring_thickness_max", s.ring_thickness.1.to_string()),
            ("fg_intensity", s.fg_intensity.to_string()),
            ("bg_intensity", s.bg_intensity.to_string()),
            ("noise_std", s.noise_std.to_string()),
            ("illumination", s.illumination.to_string()),
            ("halo_width", s.halo_width.to_string()),
            ("halo_intensity", s.halo_intensity.to_string()),
            ("side", s.side.to_string()),
            ("train_count", d.train_count.to_string()),
            ("test_count", d.test_count.to_string()),
            ("seed", d.seed.to_string()),
            ("annotation_ratio", d.annotation_ratio.to_string()),
            ("element", d.element.to_string()),
            ("[net]", String::new()),
            ("unet_depth", n.unet_depth.to_string()),
            ("base_channels", n.base_channels.to_string()),
            ("disc_layers", n.disc_layers.to_string()),
            ("[train]", String::new()),
        ];
        if let Some(v) = t.variant {
            lines.push(("variant", v.to_string()));
        }
        if let Some(m) = t.pool_mode {
            lines.push(("pool_mode", m.to_string()));
        }
        lines.extend([
            ("epochs", t.epochs.to_string()),
            ("lr0", t.lr0.to_string()),
            ("lambda_s", t.lambda_s.to_string()),
        ]);
        for (key, la) in [
            ("lambda_a", t.lambda_a),
            ("lambda_a_partial", t.lambda_a_partial),
            ("lambda_a_unpaired", t.lambda_a_unpaired),
            ("lambda_a_paired", t.lambda_a_paired),
        ] {
            if let Some(la) = la {
                lines.push((key, la.to_string()));
            }
        }
        if let Some(a) = t.augment {
            lines.push(("augment", a.to_string()));
        }
        lines.extend([
            ("eval_every", t.eval_every.to_string()),
            ("disc_steps", t.disc_steps.to_string()),
            ("wall_clock", t.wall_clock.to_string()),
            ("seed_init", t.seeds.init.to_string()),
            ("seed_data_order", t.seeds.data_order.to_string()),
            ("seed_pool_shuffle", t.seeds.pool_shuffle.to_string()),
            ("seed_augmentation", t.seeds.augmentation.to_string()),
        ]);
        if let Some(dir) = &self.output {
            lines.push(("[output]", String::new()));
            lines.push(("dir", dir.display().to_string()));
        }
        let mut out = String::new();
        for (k, v) in lines {
            if k.starts_with('[') {
                if !out.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "{k}");
            } else {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}
