//! `key=value` training configuration and run manifests.
//!
//! A manifest carries its metadata as `#` comment lines followed by the full
//! resolved configuration, so it parses back as a configuration file.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const KEYS: [&str; 16] = [
    "ablation",
    "delta",
    "alpha",
    "max_iters",
    "batch",
    "lr",
    "momentum",
    "seed",
    "hidden",
    "classes",
    "gamma",
    "patch_radius",
    "light_sample_count",
    "night_luminance_threshold",
    "t_floor",
    "norm_epsilon",
];

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config { key: key.into(), reason: format!("cannot parse `{raw}`") })
}

fn set(cfg: &mut TrainConfig, key: &str, raw: &str) -> Result<()> {
    match key {
        "ablation" => cfg.ablation = raw.parse()?,
        "delta" => cfg.delta = parse_value(key, raw)?,
        "alpha" => cfg.alpha = parse_value(key, raw)?,
        "max_iters" => cfg.max_iters = parse_value(key, raw)?,
        "batch" => cfg.batch = parse_value(key, raw)?,
        "lr" => cfg.lr = parse_value(key, raw)?,
        "momentum" => cfg.momentum = parse_value(key, raw)?,
        "seed" => cfg.seed = parse_value(key, raw)?,
        "hidden" => cfg.hidden = parse_value(key, raw)?,
        "classes" => cfg.classes = parse_value(key, raw)?,
        "gamma" => cfg.vbm.gamma = parse_value(key, raw)?,
        "patch_radius" => cfg.vbm.patch_radius = parse_value(key, raw)?,
        "light_sample_count" => cfg.vbm.light_sample_count = parse_value(key, raw)?,
        "night_luminance_threshold" => cfg.vbm.night_luminance_threshold = parse_value(key, raw)?,
        "t_floor" => cfg.vbm.t_floor = parse_value(key, raw)?,
        "norm_epsilon" => cfg.loss.norm_epsilon = parse_value(key, raw)?,
        _ => return Err(Error::Config { key: key.into(), reason: "unknown key".into() }),
    }
    Ok(())
}

/// Parses configuration text on top of the defaults, then validates it.
pub fn parse_config_str(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        let key = key.trim();
        if seen.contains(&key) {
            return Err(Error::Config { key: key.into(), reason: format!("repeated on line {}", n + 1) });
        }
        seen.push(key);
        set(&mut cfg, key, value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| e.in_file(path))
}

/// Every key with its resolved value, in [`KEYS`] order.
pub fn config_entries(cfg: &TrainConfig) -> Vec<(String, String)> {
    let values = [
        cfg.ablation.name().to_string(),
        cfg.delta.to_string(),
        cfg.alpha.to_string(),
        cfg.max_iters.to_string(),
        cfg.batch.to_string(),
        cfg.lr.to_string(),
        cfg.momentum.to_string(),
        cfg.seed.to_string(),
        cfg.hidden.to_string(),
        cfg.classes.to_string(),
        cfg.vbm.gamma.to_string(),
        cfg.vbm.patch_radius.to_string(),
        cfg.vbm.light_sample_count.to_string(),
        cfg.vbm.night_luminance_threshold.to_string(),
        cfg.vbm.t_floor.to_string(),
        cfg.loss.norm_epsilon.to_string(),
    ];
    KEYS.iter().map(|k| k.to_string()).zip(values).collect()
}

pub fn serialize_config(cfg: &TrainConfig) -> String {
    config_entries(cfg).into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    /// Resolved settings, defaults included.
    pub settings: Vec<(String, String)>,
    pub seed: u64,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub started: u64,
}

impl RunManifest {
    pub fn new(command: &str, settings: Vec<(String, String)>, seed: u64) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        RunManifest {
            command: command.into(),
            settings,
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started,
        }
    }

    pub fn for_train(cfg: &TrainConfig) -> Self {
        RunManifest::new("train", config_entries(cfg), cfg.seed)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "# command={}\n# version={}\n# started={}\n# seed={}\n",
            self.command, self.version, self.started, self.seed
        );
        for (k, v) in &self.settings {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}
