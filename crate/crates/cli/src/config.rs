//! Run configuration file and dataset selection.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lightnl::data::{gen_longrange, load_mnist_split, mnist_dir, Dataset};
use lightnl::supernet::NetworkSpec;
use lightnl::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// JSON config file. Training and search hyperparameters sit at the top
/// level (see `TrainConfig`); every field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Backbone preset (`toy`, `mnist`, `longrange`); defaults to the task's.
    pub network: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// MNIST directory used when `--data mnist` is given.
    pub mnist_dir: Option<PathBuf>,
    pub longrange_train: usize,
    pub longrange_test: usize,
    pub longrange_size: usize,
    /// Evaluate on the first `test_limit` test examples only.
    pub test_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            mnist_dir: None,
            longrange_train: 4000,
            longrange_test: 2000,
            longrange_size: 32,
            test_limit: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

const TEST_SEED_SALT: u64 = 0x7e57_5eed;

/// Training task named by `--data`.
#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    Mnist(PathBuf),
    LongRange,
}

impl Task {
    /// `longrange`, `mnist` (configured or default directory) or an MNIST directory.
    pub fn parse(arg: &str, cfg: &DataConfig) -> Task {
        match arg {
            "longrange" => Task::LongRange,
            "mnist" => Task::Mnist(
                cfg.mnist_dir
                    .clone()
                    .unwrap_or_else(|| mnist_dir(Path::new("."))),
            ),
            dir => Task::Mnist(PathBuf::from(dir)),
        }
    }

    pub fn network(&self, preset: Option<&str>) -> Result<NetworkSpec> {
        let name = preset.unwrap_or(match self {
            Task::Mnist(_) => "mnist",
            Task::LongRange => "longrange",
        });
        match NetworkSpec::preset(name) {
            Some(spec) => Ok(spec),
            None => bail!("unknown network preset {name:?}"),
        }
    }

    /// Train and test splits. The synthetic task draws both from `seed`.
    pub fn load(&self, cfg: &DataConfig, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self {
            Task::Mnist(dir) => (
                load_mnist_split(dir, "train")?,
                load_mnist_split(dir, "test")?,
            ),
            Task::LongRange => (
                gen_longrange(seed, cfg.longrange_train, cfg.longrange_size)?,
                gen_longrange(
                    seed ^ TEST_SEED_SALT,
                    cfg.longrange_test,
                    cfg.longrange_size,
                )?,
            ),
        };
        let test = match cfg.test_limit {
            Some(n) => test.take(n),
            None => test,
        };
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"epochs": 1, "search": {"lambda": 0.5}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 1);
        assert_eq!(cfg.train.search.lambda, 0.5);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.data, DataConfig::default());
    }

    #[test]
    fn task_names() {
        let d = DataConfig::default();
        assert_eq!(Task::parse("longrange", &d), Task::LongRange);
        assert_eq!(
            Task::parse("/tmp/m", &d),
            Task::Mnist(PathBuf::from("/tmp/m"))
        );
        assert_eq!(Task::LongRange.network(None).unwrap().classes, 2);
        assert!(Task::LongRange.network(Some("nope")).is_err());
    }
}
