//! Flat `key = value` training configuration files.
//!
//! `#` starts a comment. Unknown keys are rejected so that typos cannot
//! silently fall back to defaults. Lists are comma separated.

use std::path::Path;
use std::str::FromStr;

use crate::align::samples::YearRange;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("config key `{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Usage(format!("config key `{key}`: expected a boolean, got `{value}`"))),
    }
}

/// Applies one setting to `cfg`.
pub fn set(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let v = value.trim();
    match key.trim() {
        "learning_rate" | "lr" => cfg.learning_rate = parse(key, v)?,
        "batch_size" => cfg.batch_size = parse(key, v)?,
        "max_epochs" => cfg.max_epochs = parse(key, v)?,
        "patience" => cfg.patience = parse(key, v)?,
        "lead_time_pool" => {
            cfg.lead_time_pool = v
                .split(',')
                .map(|s| parse(key, s.trim()))
                .collect::<Result<_>>()?
        }
        "beta" => cfg.beta = parse(key, v)?,
        "seed" => cfg.seed = parse(key, v)?,
        "loss" => cfg.loss = v.parse()?,
        "normalization" => cfg.normalization = v.parse()?,
        "weight_decay" => cfg.optimizer.weight_decay = parse(key, v)?,
        "adam_beta1" => cfg.optimizer.beta1 = parse(key, v)?,
        "adam_beta2" => cfg.optimizer.beta2 = parse(key, v)?,
        "adam_eps" => cfg.optimizer.eps = parse(key, v)?,
        "cosine_decay" => cfg.cosine_decay = parse_bool(key, v)?,
        "val_lead_hours" => cfg.val_lead_hours = parse(key, v)?,
        "randomize_val_lead" => cfg.randomize_val_lead = parse_bool(key, v)?,
        "aq_transform" => cfg.aq_transform = v.parse()?,
        "train_years" => cfg.splits.train = YearRange::parse(v)?,
        "val_years" => cfg.splits.val = YearRange::parse(v)?,
        "test_years" => cfg.splits.test = YearRange::parse(v)?,
        "anchor_stride_hours" => cfg.anchor_stride_hours = parse(key, v)?,
        "max_steps_per_epoch" => {
            cfg.max_steps_per_epoch = match v {
                "" | "none" => None,
                _ => Some(parse(key, v)?),
            }
        }
        "record_wall_time" => cfg.record_wall_time = parse_bool(key, v)?,
        "patch_size" => cfg.model.patch_size = parse(key, v)?,
        "embed_dim" => cfg.model.embed_dim = parse(key, v)?,
        "depth" => cfg.model.depth = parse(key, v)?,
        "num_heads" => cfg.model.num_heads = parse(key, v)?,
        "mlp_ratio" => cfg.model.mlp_ratio = parse(key, v)?,
        "lead_embed_dim" => cfg.model.lead_embed_dim = parse(key, v)?,
        other => return Err(Error::Usage(format!("unknown config key `{other}`"))),
    }
    Ok(())
}

/// Parses a config text on top of the defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
        set(&mut cfg, k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossMode;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_config("# nothing\n\n").unwrap(), TrainConfig::default());
    }

    #[test]
    fn keys_override_defaults() {
        let c = parse_config(
            "lr = 1e-3  # faster\nlead_time_pool = 24\nloss = mae\ntrain_years = 2003-2014\nembed_dim = 64\ncosine_decay = yes\nmax_steps_per_epoch = 7\n",
        )
        .unwrap();
        assert_eq!(c.learning_rate, 1e-3);
        assert_eq!(c.lead_time_pool, vec![24]);
        assert_eq!(c.loss, LossMode::Mae);
        assert_eq!(c.splits.train, YearRange::new(2003, 2014));
        assert_eq!(c.model.embed_dim, 64);
        assert!(c.cosine_decay);
        assert_eq!(c.max_steps_per_epoch, Some(7));
        assert_eq!(c.batch_size, 32);
    }

    #[test]
    fn bad_input_is_a_usage_error() {
        for text in ["learning_rat = 1", "lr 1", "batch_size = many", "patience = 0", "cosine_decay = maybe"] {
            assert!(matches!(parse_config(text), Err(Error::Usage(_))), "{text}");
        }
    }
}
