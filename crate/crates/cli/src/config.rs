//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use senticomp::composition::Composer;
use senticomp::encoder::EncoderConfig;
use senticomp::objective::{ModelConfig, TrainConfig};
use senticomp::treebank::Granularity;
use toml::{Table, Value};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
}

/// Encoder shape; the vocabulary size comes from the vocabulary itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ffn_dim: 256,
            max_len: 128,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Number of sentiment classes: 5, 3 or 2.
    pub granularity: u8,
    pub composer: Composer,
    /// Words seen fewer times than this are spelled with character pieces.
    pub min_count: usize,
    pub paths: Paths,
    pub encoder: EncoderSection,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            granularity: 5,
            composer: Composer::Attention,
            min_count: 1,
            paths: Paths {
                checkpoint_dir: PathBuf::from("checkpoint"),
                ..Paths::default()
            },
            encoder: EncoderSection::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Values given on the command line; `None` leaves the file or default value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub label_fraction: Option<f64>,
    pub granularity: Option<u8>,
    pub token_node_objective: bool,
    pub out_dir: Option<PathBuf>,
}

const PATH_KEYS: [&str; 6] = ["train", "dev", "test", "vocab", "lexicon", "checkpoint_dir"];

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set(table: &mut Table, section: Option<&str>, key: &str, value: Value) {
    let target = match section {
        Some(s) => table
            .entry(s)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("config sections are tables"),
        None => table,
    };
    target.insert(key.to_string(), value);
}

/// Read a config file, making its relative paths relative to the file.
fn read_file(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("--config {}: {e}", path.display())))?;
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::config(format!("{}: {}", path.display(), e.message())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    if let Some(Value::Table(paths)) = table.get_mut("paths") {
        for key in PATH_KEYS {
            if let Some(Value::String(p)) = paths.get_mut(key) {
                let joined = base.join(&*p);
                *p = joined.to_string_lossy().into_owned();
            }
        }
    }
    Ok(table)
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<RunConfig> {
        let mut table = Table::try_from(RunConfig::default()).expect("defaults serialize");
        if let Some(path) = file {
            merge(&mut table, read_file(path)?);
        }
        if let Some(s) = flags.seed {
            let s = i64::try_from(s).map_err(|_| CliError::config(format!("--seed {s} exceeds the TOML integer range")))?;
            set(&mut table, None, "seed", Value::Integer(s));
        }
        if let Some(e) = flags.epochs {
            set(&mut table, Some("train"), "epochs", Value::Integer(e as i64));
        }
        if let Some(f) = flags.label_fraction {
            set(&mut table, Some("train"), "label_fraction", Value::Float(f));
        }
        if let Some(g) = flags.granularity {
            set(&mut table, None, "granularity", Value::Integer(g as i64));
        }
        if flags.token_node_objective {
            set(&mut table, Some("train"), "token_node_objective", Value::Boolean(true));
        }
        if let Some(d) = &flags.out_dir {
            set(&mut table, Some("paths"), "checkpoint_dir", Value::String(d.to_string_lossy().into_owned()));
        }
        let mut cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("config: {}", e.message())))?;
        if let Some(s) = cfg.seed {
            cfg.train.seed = s;
        }
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        self.granularity()?;
        let p = &self.paths;
        let named = [
            ("paths.train", &p.train),
            ("paths.dev", &p.dev),
            ("paths.test", &p.test),
            ("paths.vocab", &p.vocab),
            ("paths.lexicon", &p.lexicon),
        ];
        for (field, path) in named {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(CliError::config(format!("{field}: {} does not exist", path.display())));
                }
            }
        }
        self.train.validate().map_err(|e| CliError::config(format!("train: {e}")))?;
        Ok(())
    }

    /// A configuration saved next to a checkpoint, taken as written.
    pub fn read_saved(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| CliError::checkpoint(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::checkpoint(format!("{}: {}", path.display(), e.message())))
    }

    /// Extra checks for commands that train.
    pub fn require_training(&self) -> Result<&Path> {
        if self.seed.is_none() {
            return Err(CliError::config("seed: required for training; set `seed` or pass --seed"));
        }
        self.paths
            .train
            .as_deref()
            .ok_or_else(|| CliError::config("paths.train: required for training"))
    }

    pub fn granularity(&self) -> Result<Granularity> {
        Granularity::from_classes(self.granularity as usize)
            .ok_or_else(|| CliError::config(format!("granularity: expected 5, 3 or 2, got {}", self.granularity)))
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let e = &self.encoder;
        let encoder = EncoderConfig {
            layers: e.layers,
            heads: e.heads,
            model_dim: e.model_dim,
            ffn_dim: e.ffn_dim,
            max_len: e.max_len,
            vocab_size,
            dropout: e.dropout,
        };
        encoder.validate().map_err(|err| CliError::config(format!("encoder: {err}")))?;
        Ok(ModelConfig {
            encoder,
            granularity: self.granularity()?,
            composer: self.composer,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
