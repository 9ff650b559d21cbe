//! Run configuration: a TOML file of dotted `key = value` entries, layered as
//! preset defaults → file → `--set` overrides → `BITDIFF_SEED`.

use std::path::PathBuf;

use bitdiff_core::binarize::ActMode;
use bitdiff_core::diffusion::{QuantMode, ScheduleKind, UNetSpec};
use serde::Serialize;
use toml::Value;

use crate::data::Dataset;
use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "BITDIFF_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperCifar,
    PaperLsun,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Self::Desk),
            "paper-cifar" => Some(Self::PaperCifar),
            "paper-lsun" => Some(Self::PaperLsun),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    pub temb_dim: usize,
    pub quant: QuantMode,
    pub act_mode: ActMode,
    pub shortcut: bool,
    pub max_groups: usize,
    /// FP checkpoint whose matching tensors initialize the model.
    pub init: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TbsConfig {
    /// Number of connected up-path blocks, counted from the output end.
    pub connections: usize,
    pub alpha_init: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpdConfig {
    pub lambda: f64,
    pub p: usize,
    pub teacher: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub iters: usize,
    pub log_every: usize,
    pub ckpt_every: usize,
    pub val_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleConfig {
    pub n: usize,
    pub steps: usize,
    pub eta: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub dataset: Dataset,
    pub model: ModelConfig,
    pub tbs: TbsConfig,
    pub spd: SpdConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub out_dir: PathBuf,
    /// Include `wall_s` in metrics records.
    pub wall_clock: bool,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = Self {
            preset,
            seed: 0,
            dataset: Dataset::Sprites16,
            model: ModelConfig {
                channels: vec![8, 16],
                temb_dim: 32,
                quant: QuantMode::Binary,
                act_mode: ActMode::LearnableK,
                shortcut: true,
                max_groups: 8,
                init: None,
            },
            tbs: TbsConfig { connections: 2, alpha_init: 0.3 },
            spd: SpdConfig { lambda: 3e-2, p: 4, teacher: None },
            schedule: ScheduleConfig {
                timesteps: 1000,
                kind: ScheduleKind::Linear,
                beta_start: 1e-4,
                beta_end: 0.02,
            },
            train: TrainConfig { lr: 1e-4, batch: 32, iters: 5000, log_every: 50, ckpt_every: 1000, val_size: 512 },
            sample: SampleConfig { n: 64, steps: 50, eta: 0.0, batch: 64 },
            out_dir: PathBuf::from("runs/desk"),
            wall_clock: true,
        };
        match preset {
            Preset::Desk => {}
            Preset::PaperCifar => {
                c.tbs.connections = 2;
                c.spd.lambda = 3e-2;
                c.train.lr = 6e-5;
                c.train.batch = 64;
                c.train.iters = 100_000;
                c.sample.steps = 100;
                c.out_dir = PathBuf::from("runs/paper-cifar");
            }
            Preset::PaperLsun => {
                c.tbs.connections = 8;
                c.spd.lambda = 1e-2;
                c.train.lr = 2e-5;
                c.train.batch = 4;
                c.train.iters = 200_000;
                c.sample.steps = 200;
                c.out_dir = PathBuf::from("runs/paper-lsun");
            }
        }
        c
    }

    /// Build from optional file text, `key=value` overrides, and the environment seed.
    pub fn load(file: Option<&str>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut entries: Vec<(String, Value)> = Vec::new();
        if let Some(text) = file {
            let table: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| CliError::config("<file>", e.message().to_string()))?;
            flatten("", &Value::Table(table), &mut entries);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::config(o, "override must be key=value"))?;
            entries.push((k.trim().to_string(), parse_value(v.trim())));
        }
        let preset = match entries.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => {
                let s = v.as_str().ok_or_else(|| CliError::config("preset", "expected a string"))?;
                Preset::parse(s).ok_or_else(|| CliError::config("preset", format!("unknown preset {s:?}")))?
            }
            None => Preset::Desk,
        };
        let mut cfg = Self::preset(preset);
        for (k, v) in &entries {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::config(SEED_ENV, format!("not an unsigned integer: {s:?}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "seed" => self.seed = get_u64(key, v)?,
            "data.dataset" => {
                let s = get_str(key, v)?;
                self.dataset = Dataset::parse(s).ok_or_else(|| CliError::config(key, format!("unknown dataset {s:?}")))?;
            }
            "model.channels" => self.model.channels = get_usize_list(key, v)?,
            "model.temb_dim" => self.model.temb_dim = get_usize(key, v)?,
            "model.quant" => {
                self.model.quant = match get_str(key, v)? {
                    "fp" => QuantMode::Fp,
                    "binary" => QuantMode::Binary,
                    s => return Err(CliError::config(key, format!("expected fp or binary, got {s:?}"))),
                }
            }
            "model.act_mode" => {
                let s = get_str(key, v)?;
                self.model.act_mode = serde_json::from_value(serde_json::Value::String(s.to_string()))
                    .map_err(|_| CliError::config(key, format!("unknown mode {s:?}")))?;
            }
            "model.shortcut" => self.model.shortcut = get_bool(key, v)?,
            "model.max_groups" => self.model.max_groups = get_usize(key, v)?,
            "model.init" => self.model.init = get_path(key, v)?,
            "tbs.connections" => self.tbs.connections = get_usize(key, v)?,
            "tbs.alpha_init" => self.tbs.alpha_init = get_f64(key, v)?,
            "spd.lambda" => self.spd.lambda = get_f64(key, v)?,
            "spd.p" => self.spd.p = get_usize(key, v)?,
            "spd.teacher" => self.spd.teacher = get_path(key, v)?,
            "schedule.timesteps" => self.schedule.timesteps = get_usize(key, v)?,
            "schedule.kind" => {
                let s = get_str(key, v)?;
                self.schedule.kind = s.parse().map_err(|_| CliError::config(key, format!("unknown schedule {s:?}")))?;
            }
            "schedule.beta_start" => self.schedule.beta_start = get_f64(key, v)?,
            "schedule.beta_end" => self.schedule.beta_end = get_f64(key, v)?,
            "train.lr" => self.train.lr = get_f64(key, v)?,
            "train.batch" => self.train.batch = get_usize(key, v)?,
            "train.iters" => self.train.iters = get_usize(key, v)?,
            "train.log_every" => self.train.log_every = get_usize(key, v)?,
            "train.ckpt_every" => self.train.ckpt_every = get_usize(key, v)?,
            "train.val_size" => self.train.val_size = get_usize(key, v)?,
            "sample.n" => self.sample.n = get_usize(key, v)?,
            "sample.steps" => self.sample.steps = get_usize(key, v)?,
            "sample.eta" => self.sample.eta = get_f64(key, v)?,
            "sample.batch" => self.sample.batch = get_usize(key, v)?,
            "out.dir" => self.out_dir = get_path(key, v)?.ok_or_else(|| CliError::config(key, "must not be empty"))?,
            "log.wall_clock" => self.wall_clock = get_bool(key, v)?,
            _ => return Err(CliError::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.temb_dim", self.model.temb_dim),
            ("model.max_groups", self.model.max_groups),
            ("spd.p", self.spd.p),
            ("train.batch", self.train.batch),
            ("train.log_every", self.train.log_every),
            ("train.ckpt_every", self.train.ckpt_every),
            ("train.val_size", self.train.val_size),
            ("sample.steps", self.sample.steps),
            ("sample.batch", self.sample.batch),
            ("schedule.timesteps", self.schedule.timesteps),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(CliError::config(k, "must be positive"));
            }
        }
        if self.model.temb_dim % 2 != 0 {
            return Err(CliError::config("model.temb_dim", "must be even"));
        }
        if !(self.train.lr > 0.0) {
            return Err(CliError::config("train.lr", "must be positive"));
        }
        if !(self.spd.lambda >= 0.0) {
            return Err(CliError::config("spd.lambda", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.tbs.alpha_init) {
            return Err(CliError::config("tbs.alpha_init", "must lie in [0, 1]"));
        }
        if !(self.sample.eta >= 0.0) {
            return Err(CliError::config("sample.eta", "must be >= 0"));
        }
        if self.sample.steps > self.schedule.timesteps {
            return Err(CliError::config("sample.steps", "exceeds schedule.timesteps"));
        }
        let d = self.model.channels.len();
        if self.model.quant == QuantMode::Binary && self.tbs.connections > d {
            return Err(CliError::config(
                "tbs.connections",
                format!("{} connections but only {d} connectable up-path blocks", self.tbs.connections),
            ));
        }
        self.unet_spec().validate().map_err(|e| CliError::config("model", e.to_string()))?;
        let coarsest = self.dataset.sample_dims().1 >> d;
        if self.model.quant == QuantMode::Binary && self.spd.lambda > 0.0 && coarsest % self.spd.p != 0 {
            return Err(CliError::config("spd.p", format!("does not tile the {coarsest}x{coarsest} middle feature")));
        }
        Ok(())
    }

    /// Architecture implied by the config. TBS connections only apply to binary models.
    pub fn unet_spec(&self) -> UNetSpec {
        let (in_channels, image_size) = self.dataset.sample_dims();
        let mut spec = UNetSpec::small(in_channels, image_size);
        spec.channels = self.model.channels.clone();
        spec.temb_dim = self.model.temb_dim;
        spec.quant = self.model.quant;
        spec.act_mode = self.model.act_mode;
        spec.shortcut = self.model.shortcut;
        spec.max_groups = self.model.max_groups;
        spec.tbs_alpha_init = self.tbs.alpha_init;
        if self.model.quant == QuantMode::Binary {
            spec.tbs_blocks = spec.last_up_blocks(self.tbs.connections.min(spec.depth()));
        }
        spec
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

/// Override values are TOML literals; anything that does not parse is a bare string.
fn parse_value(s: &str) -> Value {
    format!("v = {s}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(s.to_string()))
}

fn type_err(key: &str, want: &str, v: &Value) -> CliError {
    CliError::config(key, format!("expected {want}, got {}", v.type_str()))
}

fn get_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| type_err(key, "a string", v))
}

fn get_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| type_err(key, "a boolean", v))
}

fn get_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_integer()
        .and_then(|i| u64::try_from(i).ok())
        .ok_or_else(|| type_err(key, "a non-negative integer", v))
}

fn get_usize(key: &str, v: &Value) -> Result<usize> {
    get_u64(key, v).map(|x| x as usize)
}

fn get_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) if f.is_finite() => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_err(key, "a finite number", v)),
    }
}

fn get_usize_list(key: &str, v: &Value) -> Result<Vec<usize>> {
    let arr = v.as_array().ok_or_else(|| type_err(key, "an array of integers", v))?;
    if arr.is_empty() {
        return Err(CliError::config(key, "must not be empty"));
    }
    arr.iter().map(|x| get_usize(key, x)).collect()
}

fn get_path(key: &str, v: &Value) -> Result<Option<PathBuf>> {
    let s = get_str(key, v)?;
    Ok((!s.is_empty()).then(|| PathBuf::from(s)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk() {
        let c = RunConfig::load(None, &[], None).unwrap();
        assert_eq!(c, RunConfig::preset(Preset::Desk));
        assert_eq!((c.train.iters, c.train.batch, c.train.lr), (5000, 32, 1e-4));
        assert_eq!((c.schedule.timesteps, c.sample.steps), (1000, 50));
        assert_eq!(c.unet_spec().tbs_blocks, vec![2, 3]);
    }

    #[test]
    fn file_then_overrides_then_env() {
        let file = "seed = 3\n[train]\nlr = 0.01\niters = 7\n[spd]\nlambda = 0\n";
        let c = RunConfig::load(Some(file), &["train.iters=9".into()], None).unwrap();
        assert_eq!((c.seed, c.train.lr, c.train.iters, c.spd.lambda), (3, 0.01, 9, 0.0));
        let c = RunConfig::load(Some(file), &[], Some("42")).unwrap();
        assert_eq!(c.seed, 42);
        let c = RunConfig::load(None, &["data.dataset=points2d".into(), "spd.p=1".into(), "out.dir=/tmp/x".into()], None).unwrap();
        assert_eq!(c.dataset, Dataset::Points2d);
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::load(Some("[train]\nlrr = 1.0\n"), &[], None).unwrap_err();
        assert!(e.to_string().contains("train.lrr"), "{e}");
        let e = RunConfig::load(None, &["train.batch=\"big\"".into()], None).unwrap_err();
        assert!(e.to_string().contains("train.batch"), "{e}");
        let e = RunConfig::load(None, &["model.act_mode=fancy".into()], None).unwrap_err();
        assert!(e.to_string().contains("model.act_mode"), "{e}");
        let e = RunConfig::load(None, &["tbs.connections=5".into()], None).unwrap_err();
        assert!(e.to_string().contains("tbs.connections"), "{e}");
        let e = RunConfig::load(None, &[], Some("x")).unwrap_err();
        assert!(e.to_string().contains(SEED_ENV), "{e}");
        assert!(RunConfig::load(Some("[train\n"), &[], None).is_err());
    }

    #[test]
    fn paper_presets_carry_appendix_values() {
        let c = RunConfig::preset(Preset::PaperCifar);
        assert_eq!((c.train.lr, c.train.batch, c.train.iters, c.spd.lambda), (6e-5, 64, 100_000, 3e-2));
        assert_eq!((c.tbs.connections, c.tbs.alpha_init, c.sample.steps), (2, 0.3, 100));
        let c = RunConfig::preset(Preset::PaperLsun);
        assert_eq!((c.train.lr, c.train.batch, c.train.iters, c.spd.lambda), (2e-5, 4, 200_000, 1e-2));
        assert_eq!((c.tbs.connections, c.sample.steps), (8, 200));
        let e = RunConfig::load(Some("preset = \"paper-lsun\""), &[], None).unwrap_err();
        assert!(e.to_string().contains("tbs.connections"));
    }

    #[test]
    fn fp_models_have_no_connections() {
        let c = RunConfig::load(None, &["model.quant=fp".into()], None).unwrap();
        assert!(c.unet_spec().tbs_blocks.is_empty());
    }
}
