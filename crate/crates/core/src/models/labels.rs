use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Misogynistic behaviour categories, in report order. Index 0 is the
/// non-misogynistic class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    None,
    Damning,
    Derailing,
    Discredit,
    Dominance,
    SexualHarassment,
    StereotypingObjectification,
    ThreatOfViolence,
}

pub const NUM_CATEGORIES: usize = 8;

impl Category {
    pub const ALL: [Category; NUM_CATEGORIES] = [
        Category::None,
        Category::Damning,
        Category::Derailing,
        Category::Discredit,
        Category::Dominance,
        Category::SexualHarassment,
        Category::StereotypingObjectification,
        Category::ThreatOfViolence,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::None => "None",
            Category::Damning => "Damning",
            Category::Derailing => "Derailing",
            Category::Discredit => "Discredit",
            Category::Dominance => "Dominance",
            Category::SexualHarassment => "Sexual harassment",
            Category::StereotypingObjectification => "Stereotyping & objectification",
            Category::ThreatOfViolence => "Threat of violence",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    /// Accepts the canonical names, case-insensitively, with `_` standing in
    /// for spaces (the shared-task release spells them `sexual_harassment`).
    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.trim().replace('_', " ").to_lowercase();
        Category::ALL
            .into_iter()
            .find(|c| c.name().to_lowercase() == wanted)
            .ok_or_else(|| Error::Data(format!("unknown category {s:?}")))
    }
}

/// Binary identification label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Misogyny {
    None,
    Misogyny,
}

impl Misogyny {
    pub fn from_flag(flag: bool) -> Self {
        if flag {
            Misogyny::Misogyny
        } else {
            Misogyny::None
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Misogyny::None => "none",
            Misogyny::Misogyny => "misogyny",
        }
    }
}

impl FromStr for Misogyny {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "none" => Ok(Misogyny::None),
            "misogyny" => Ok(Misogyny::Misogyny),
            _ => Err(Error::Data(format!("unknown misogyny label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Identification,
    Categorization,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Identification => 2,
            Task::Categorization => NUM_CATEGORIES,
        }
    }

    pub fn class_names(self) -> Vec<&'static str> {
        match self {
            Task::Identification => vec![Misogyny::None.name(), Misogyny::Misogyny.name()],
            Task::Categorization => Category::ALL.iter().map(|c| c.name()).collect(),
        }
    }
}

/// The fixed pair of label spaces, serialized into checkpoints so a model
/// cannot be evaluated against a different category inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub task1: Vec<String>,
    pub task2: Vec<String>,
}

impl Default for LabelSpace {
    fn default() -> Self {
        Self {
            task1: Task::Identification.class_names().iter().map(|s| s.to_string()).collect(),
            task2: Task::Categorization.class_names().iter().map(|s| s.to_string()).collect(),
        }
    }
}
