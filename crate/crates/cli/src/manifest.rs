use std::fmt::Write as _;
use std::path::PathBuf;

use mognet::data::{load_cifar_test, load_cifar_train, synthetic};
use mognet::{Dataset, Error, ModelConfig, Result, RunConfig, SyntheticSpec};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic { count: usize, seed: u64 },
    /// Directory of CIFAR binary batches.
    Cifar(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl DataSource {
    pub fn from_arg(arg: &str, count: usize, seed: u64) -> Self {
        if arg == "synth" {
            DataSource::Synthetic { count, seed }
        } else {
            DataSource::Cifar(PathBuf::from(arg))
        }
    }

    pub fn load(&self, model: &ModelConfig, split: Split, limit: Option<usize>) -> Result<Dataset> {
        let data = match self {
            DataSource::Synthetic { count, seed } => synthetic(&SyntheticSpec {
                count: *count,
                classes: model.class_count,
                channels: model.input_channels,
                side: model.input_size,
                // the held-out split draws from a different noise stream
                seed: match split {
                    Split::Train => *seed,
                    Split::Test => seed.wrapping_add(1),
                },
            })?,
            DataSource::Cifar(dir) => match split {
                Split::Train => load_cifar_train(dir)?,
                Split::Test => load_cifar_test(dir)?,
            },
        };
        let data = match limit {
            Some(l) => data.truncate(l),
            None => data,
        };
        if data.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        Ok(data)
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub data: DataSource,
    pub limit: Option<usize>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "toolkit_version = {}", self.toolkit_version);
        match &self.data {
            DataSource::Synthetic { count, seed } => {
                let _ = writeln!(s, "data = synth");
                let _ = writeln!(s, "synth_count = {count}");
                let _ = writeln!(s, "synth_seed = {seed}");
            }
            DataSource::Cifar(dir) => {
                let _ = writeln!(s, "data = {}", dir.display());
            }
        }
        if let Some(l) = self.limit {
            let _ = writeln!(s, "limit = {l}");
        }
        s.push_str(&self.config.to_text());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut data = None;
        let mut count = None;
        let mut seed = None;
        let mut limit = None;
        let mut rest = String::new();
        for line in text.lines() {
            let body = line.split('#').next().unwrap_or("");
            let Some((k, v)) = body.split_once('=') else {
                rest.push_str(line);
                rest.push('\n');
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<u64> {
                v.parse().map_err(|_| Error::Config {
                    field: k.to_string(),
                    reason: format!("cannot parse `{v}`"),
                })
            };
            match k {
                "toolkit_version" => version = Some(v.to_string()),
                "data" => data = Some(v.to_string()),
                "synth_count" => count = Some(num(v)? as usize),
                "synth_seed" => seed = Some(num(v)?),
                "limit" => limit = Some(num(v)? as usize),
                _ => {
                    rest.push_str(line);
                    rest.push('\n');
                }
            }
        }
        let missing = |field: &str| Error::Config {
            field: field.into(),
            reason: "missing from manifest".into(),
        };
        let data = data.ok_or_else(|| missing("data"))?;
        let data = if data == "synth" {
            DataSource::Synthetic {
                count: count.ok_or_else(|| missing("synth_count"))?,
                seed: seed.ok_or_else(|| missing("synth_seed"))?,
            }
        } else {
            DataSource::Cifar(PathBuf::from(data))
        };
        Ok(RunManifest {
            toolkit_version: version.ok_or_else(|| missing("toolkit_version"))?,
            data,
            limit,
            config: RunConfig::parse(&rest)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        for data in [
            DataSource::Synthetic { count: 40, seed: 3 },
            DataSource::Cifar(PathBuf::from("/data/cifar-10-batches-bin")),
        ] {
            let m = RunManifest {
                toolkit_version: TOOLKIT_VERSION.into(),
                data,
                limit: Some(7),
                config: RunConfig::default(),
            };
            assert_eq!(RunManifest::parse(&m.to_text()).unwrap(), m);
        }
    }

    #[test]
    fn missing_data_is_reported() {
        let text = format!("toolkit_version = 0.1.0\n{}", RunConfig::default().to_text());
        assert!(matches!(RunManifest::parse(&text), Err(Error::Config { field, .. }) if field == "data"));
    }
}
