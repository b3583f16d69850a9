//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Keys absent from the file keep their defaults. Unknown or repeated keys
//! are rejected.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::blocks::ModelConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

impl RunConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "n" => m.n = parse_value(key, value)?,
            "g" => m.g = parse_value(key, value)?,
            "k" => m.k = parse_value(key, value)?,
            "stages" => m.stages = parse_value(key, value)?,
            "blocks_per_stage" => m.blocks_per_stage = parse_value(key, value)?,
            "classes" => m.class_count = parse_value(key, value)?,
            "input_channels" => m.input_channels = parse_value(key, value)?,
            "input_size" => m.input_size = parse_value(key, value)?,
            "master_seed" => m.master_seed = parse_value(key, value)?,
            "ca_rule" => m.ca_rule = parse_value(key, value)?,
            "epochs_pretrain" => t.epochs_pretrain = parse_value(key, value)?,
            "epochs_stage1" => t.epochs_stage1 = parse_value(key, value)?,
            "epochs_stage2" => t.epochs_stage2 = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "lr" => t.lr = parse_value(key, value)?,
            "lr_decay_rate" => t.lr_decay_rate = parse_value(key, value)?,
            "decay_start_pretrain" => t.decay_start_pretrain = parse_value(key, value)?,
            "decay_start_stage1" => t.decay_start_stage1 = parse_value(key, value)?,
            "decay_start_stage2" => t.decay_start_stage2 = parse_value(key, value)?,
            "beta1" => t.beta1 = parse_value(key, value)?,
            "beta2" => t.beta2 = parse_value(key, value)?,
            "adam_epsilon" => t.adam_epsilon = parse_value(key, value)?,
            "clip_proxies" => t.clip_proxies = parse_value(key, value)?,
            "rng_seed" => t.rng_seed = parse_value(key, value)?,
            "augment_pad_crop" => t.augment.pad_crop = parse_value(key, value)?,
            "augment_flip" => t.augment.flip = parse_value(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses and validates a configuration file body.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(
                    &format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                ));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, format!("repeated on line {}", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its resolved value, in a stable order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut out = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("n", &m.n);
        put("g", &m.g);
        put("k", &m.k);
        put("stages", &m.stages);
        put("blocks_per_stage", &m.blocks_per_stage);
        put("classes", &m.class_count);
        put("input_channels", &m.input_channels);
        put("input_size", &m.input_size);
        put("master_seed", &m.master_seed);
        put("ca_rule", &m.ca_rule);
        put("epochs_pretrain", &t.epochs_pretrain);
        put("epochs_stage1", &t.epochs_stage1);
        put("epochs_stage2", &t.epochs_stage2);
        put("batch_size", &t.batch_size);
        put("lr", &t.lr);
        put("lr_decay_rate", &t.lr_decay_rate);
        put("decay_start_pretrain", &t.decay_start_pretrain);
        put("decay_start_stage1", &t.decay_start_stage1);
        put("decay_start_stage2", &t.decay_start_stage2);
        put("beta1", &t.beta1);
        put("beta2", &t.beta2);
        put("adam_epsilon", &t.adam_epsilon);
        put("clip_proxies", &t.clip_proxies);
        put("rng_seed", &t.rng_seed);
        put("augment_pad_crop", &t.augment.pad_crop);
        put("augment_flip", &t.augment.flip);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse("# tiny\nn = 16\n  g=2 # groups\n\nlr = 2.5e-4\naugment_flip = false\n").unwrap();
        assert_eq!(cfg.model.n, 16);
        assert_eq!(cfg.model.g, 2);
        assert_eq!(cfg.train.lr, 2.5e-4);
        assert!(!cfg.train.augment.flip);
        assert!(cfg.train.augment.pad_crop);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    fn field_of(text: &str) -> String {
        match RunConfig::parse(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of("k = 0"), "k");
        assert_eq!(field_of("k = three"), "k");
        assert_eq!(field_of("batch_size = 0"), "batch_size");
        assert_eq!(field_of("width = 4"), "width");
        assert_eq!(field_of("n = 16\nn = 32"), "n");
        assert_eq!(field_of("n 16"), "line 1");
        assert_eq!(field_of("clip_proxies = maybe"), "clip_proxies");
    }
}
