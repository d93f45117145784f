use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::labels::Task;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// Number of intermediate layers the vertical attention reads.
pub const VERTICAL_LAYERS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "ST_CLS")]
    StCls,
    #[serde(rename = "ST_ATT")]
    StAtt,
    #[serde(rename = "ST_VHATT")]
    StVhatt,
    #[serde(rename = "MT_CLS")]
    MtCls,
    #[serde(rename = "MT_ATT")]
    MtAtt,
    #[serde(rename = "MT_VHATT")]
    MtVhatt,
}

/// Feature extractor on top of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Cls,
    Att,
    Vhatt,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::StCls,
        Architecture::StAtt,
        Architecture::StVhatt,
        Architecture::MtCls,
        Architecture::MtAtt,
        Architecture::MtVhatt,
    ];

    pub fn is_multi_task(self) -> bool {
        matches!(self, Architecture::MtCls | Architecture::MtAtt | Architecture::MtVhatt)
    }

    pub fn head(self) -> HeadKind {
        match self {
            Architecture::StCls | Architecture::MtCls => HeadKind::Cls,
            Architecture::StAtt | Architecture::MtAtt => HeadKind::Att,
            Architecture::StVhatt | Architecture::MtVhatt => HeadKind::Vhatt,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::StCls => "ST_CLS",
            Architecture::StAtt => "ST_ATT",
            Architecture::StVhatt => "ST_VHATT",
            Architecture::MtCls => "MT_CLS",
            Architecture::MtAtt => "MT_ATT",
            Architecture::MtVhatt => "MT_VHATT",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let want = s.trim().to_ascii_uppercase().replace('-', "_");
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == want)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown architecture {s:?}, expected one of ST_CLS, ST_ATT, ST_VHATT, MT_CLS, MT_ATT, MT_VHATT"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSelection {
    Task1,
    Task2,
    Both,
}

impl TaskSelection {
    pub fn tasks(self) -> Vec<Task> {
        match self {
            TaskSelection::Task1 => vec![Task::Identification],
            TaskSelection::Task2 => vec![Task::Categorization],
            TaskSelection::Both => vec![Task::Identification, Task::Categorization],
        }
    }

    pub fn covers(self, task: Task) -> bool {
        self.tasks().contains(&task)
    }
}

impl FromStr for TaskSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "task1" | "1" => Ok(TaskSelection::Task1),
            "task2" | "2" => Ok(TaskSelection::Task2),
            "both" => Ok(TaskSelection::Both),
            _ => Err(Error::Config(format!("unknown task selection {s:?}, expected task1, task2 or both"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub tasks: TaskSelection,
    pub encoder: EncoderConfig,
    /// MT_VHATT only: one vertical stage per task instead of a shared one.
    #[serde(default)]
    pub vertical_per_task: bool,
}

impl ModelSpec {
    /// Spec with the task selection implied by `architecture`: both tasks for
    /// MT variants, `single` for ST variants.
    pub fn new(architecture: Architecture, single: Task, encoder: EncoderConfig) -> Self {
        let tasks = if architecture.is_multi_task() {
            TaskSelection::Both
        } else {
            match single {
                Task::Identification => TaskSelection::Task1,
                Task::Categorization => TaskSelection::Task2,
            }
        };
        Self {
            architecture,
            tasks,
            encoder,
            vertical_per_task: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        match (self.architecture.is_multi_task(), self.tasks) {
            (true, TaskSelection::Both) | (false, TaskSelection::Task1 | TaskSelection::Task2) => {}
            (true, t) => {
                return Err(Error::Config(format!(
                    "{} trains both tasks, got task selection {t:?}",
                    self.architecture
                )))
            }
            (false, _) => {
                return Err(Error::Config(format!(
                    "{} trains a single task, got both",
                    self.architecture
                )))
            }
        }
        if self.architecture.head() == HeadKind::Vhatt && self.encoder.num_layers < VERTICAL_LAYERS + 1 {
            return Err(Error::Config(format!(
                "{} needs num_layers >= {} (six intermediate layers below the excluded top layer), got {}",
                self.architecture,
                VERTICAL_LAYERS + 1,
                self.encoder.num_layers
            )));
        }
        if self.vertical_per_task && self.architecture != Architecture::MtVhatt {
            return Err(Error::Config(format!(
                "vertical_per_task applies to MT_VHATT only, not {}",
                self.architecture
            )));
        }
        Ok(())
    }

    /// Width of each task's classification layer input.
    pub fn classifier_input_width(&self) -> usize {
        let d = self.encoder.model_dim;
        match self.architecture.head() {
            HeadKind::Cls => d,
            HeadKind::Att => 2 * d,
            HeadKind::Vhatt => 3 * d,
        }
    }

    /// Indices into `hidden_states` read by the vertical pools: the six layers
    /// directly below the top one.
    pub fn vertical_layer_indices(&self) -> std::ops::Range<usize> {
        let l = self.encoder.num_layers;
        l.saturating_sub(VERTICAL_LAYERS)..l
    }
}
