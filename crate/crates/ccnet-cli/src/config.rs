//! Plain-text `key = value` configuration overlay for training runs.
//!
//! Precedence: command-line flags beat file values, which beat built-in
//! defaults. The `--seed` flag seeds both training and (unless the file says
//! otherwise via `model.seed`) parameter initialization.

use std::path::Path;

use ccnet_core::error::{Error, Result};
use ccnet_core::network::ModelConfig;
use ccnet_core::objectives::DifNormalization;
use ccnet_core::training::TrainConfig;

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("key '{key}': expected {want}, got '{value}'"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| bad(key, v, "a number"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

/// Applies one `key = value` assignment to the pair of configs.
/// Unknown keys are rejected by name.
fn apply_pair(model: &mut ModelConfig, train: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "model.bands" => model.bands = parse_usize(key, value)?,
        "model.in_channels" => model.in_channels = parse_usize(key, value)?,
        "model.c_in" => model.c_in = parse_usize(key, value)?,
        "model.m" => model.m = parse_usize(key, value)?,
        "model.k" => model.k = parse_usize(key, value)?,
        "model.s" => model.s = parse_usize(key, value)?,
        "model.r0" => model.r0 = parse_usize(key, value)?,
        "model.depth" => model.depth = parse_usize(key, value)?,
        "model.blocks_per_level" => model.blocks_per_level = parse_usize(key, value)?,
        "model.cmu_shared" => model.cmu_shared = parse_bool(key, value)?,
        "model.seed" => model.seed = parse_u64(key, value)?,
        "train.lr0" => train.lr0 = parse_f64(key, value)?,
        "train.lr_min" => train.lr_min = parse_f64(key, value)?,
        "train.total_steps" => train.total_steps = parse_u64(key, value)?,
        "train.batch_size" => train.batch_size = parse_usize(key, value)?,
        "train.seed" => train.seed = parse_u64(key, value)?,
        "train.gamma" => train.gamma = parse_f64(key, value)?,
        "train.checkpoint_interval" => train.checkpoint_interval = parse_u64(key, value)?,
        "train.clip_norm" => {
            train.clip_norm = if value == "none" {
                None
            } else {
                Some(parse_f64(key, value)?)
            }
        }
        "train.dif_normalization" => {
            train.dif_normalization = match value {
                "pixel_mean" => DifNormalization::PixelMean,
                "pixel_sum" => DifNormalization::PixelSum,
                _ => return Err(bad(key, value, "pixel_mean or pixel_sum")),
            }
        }
        "train.augment" => train.augment = parse_bool(key, value)?,
        _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
    }
    Ok(())
}

/// Reads a config file and applies every assignment. Lines are
/// `key = value`; blank lines and `#` comments are ignored.
pub fn apply_file(model: &mut ModelConfig, train: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected 'key = value', got '{line}'",
                path.display(),
                lineno + 1
            ))
        })?;
        apply_pair(model, train, key.trim(), value.trim())?;
    }
    Ok(())
}
