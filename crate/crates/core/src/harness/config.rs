use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::models::{Architecture, ModelSpec, TaskSelection};
use crate::objectives::Task2Loss;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Learning rate, epochs and batch size of the original fine-tuning
    /// setup, meant for a pre-trained encoder.
    Paper,
    /// Settings under which the randomly initialized toy encoder learns.
    Toy,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paper" => Ok(Profile::Paper),
            "toy" => Ok(Profile::Toy),
            _ => Err(Error::Config(format!("unknown profile {s:?}, expected paper or toy"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Toy => "toy",
        })
    }
}

/// Encoder shape; the vocabulary size comes from the data and the seed from
/// the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSettings {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        let c = EncoderConfig::toy(1, 0);
        Self {
            num_layers: c.num_layers,
            model_dim: c.model_dim,
            num_heads: c.num_heads,
            ffn_dim: c.ffn_dim,
            max_len: c.max_len,
        }
    }
}

impl EncoderSettings {
    pub fn with_vocab(&self, vocab_size: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            vocab_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    /// When absent the dev set is split off the training file.
    pub dev: Option<PathBuf>,
    /// Labeled file scored once after training.
    pub test: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub architecture: Architecture,
    /// Which task an ST architecture trains; MT architectures always use both.
    pub tasks: TaskSelection,
    pub task2_loss: Task2Loss,
    pub gamma: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub split_fraction: f64,
    pub min_count: usize,
    pub strip_diacritics: bool,
    pub vertical_per_task: bool,
    /// Stop when dev macro-F1 has not improved for this many epochs.
    pub early_stopping_patience: Option<usize>,
    pub encoder: EncoderSettings,
    pub paths: Paths,
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let base = Self {
            architecture: Architecture::MtAtt,
            tasks: TaskSelection::Both,
            task2_loss: Task2Loss::Fl,
            gamma: 2.0,
            lambda2: 1.0,
            learning_rate: 1e-5,
            epochs: 5,
            batch_size: 16,
            seed: 0,
            split_fraction: 0.9,
            min_count: 1,
            strip_diacritics: false,
            vertical_per_task: false,
            early_stopping_patience: None,
            encoder: EncoderSettings::default(),
            paths: Paths::default(),
        };
        match profile {
            Profile::Paper => base,
            Profile::Toy => Self {
                learning_rate: 1e-3,
                epochs: 30,
                ..base
            },
        }
    }

    /// Reads a TOML file whose keys override `profile`'s defaults. A
    /// `profile = "toy"` key in the file selects the base profile when
    /// `profile` is `None`.
    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, profile).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str, profile: Option<Profile>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let file_profile = match table.remove("profile") {
            Some(toml::Value::String(s)) => Some(s.parse::<Profile>()?),
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
            None => None,
        };
        let base = Self::profile(profile.or(file_profile).unwrap_or(Profile::Toy));
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, table);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::Config(format!("lambda2 must be >= 0, got {}", self.lambda2)));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction <= 1.0) {
            return Err(Error::Config(format!("split_fraction must be in (0, 1], got {}", self.split_fraction)));
        }
        if self.min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        self.model_spec(1).validate()
    }

    /// Task selection implied by the architecture.
    pub fn effective_tasks(&self) -> TaskSelection {
        if self.architecture.is_multi_task() {
            TaskSelection::Both
        } else if self.tasks == TaskSelection::Both {
            TaskSelection::Task1
        } else {
            self.tasks
        }
    }

    pub fn model_spec(&self, vocab_size: usize) -> ModelSpec {
        ModelSpec {
            architecture: self.architecture,
            tasks: self.effective_tasks(),
            encoder: self.encoder.with_vocab(vocab_size, self.seed),
            vertical_per_task: self.vertical_per_task,
        }
    }

    /// SHA-256 of the configuration without its file paths.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
