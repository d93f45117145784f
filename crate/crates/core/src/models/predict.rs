use serde::{Deserialize, Serialize};

use super::labels::{Category, Misogyny, NUM_CATEGORIES};
use super::model::HeadTrace;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tape};

/// Per-example logits for the tasks a model covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLogits {
    pub task1: Option<Vec<f64>>,
    pub task2: Option<Vec<Vec<f64>>>,
}

impl TaskLogits {
    pub(crate) fn from_trace(tape: &Tape, heads: &HeadTrace) -> Self {
        Self {
            task1: heads.task1.map(|v| tape.value(v).data().to_vec()),
            task2: heads.task2.map(|v| {
                tape.value(v)
                    .data()
                    .chunks(NUM_CATEGORIES)
                    .map(<[f64]>::to_vec)
                    .collect()
            }),
        }
    }

    /// Number of examples; errors if the two tasks disagree, no task is
    /// present, a category row has the wrong width or a value is not finite.
    pub fn validate(&self) -> Result<usize> {
        let n = match (&self.task1, &self.task2) {
            (None, None) => return Err(Error::InvalidArgument("logits cover no task".into())),
            (Some(a), Some(b)) if a.len() != b.len() => {
                return Err(Error::InvalidArgument(format!(
                    "task1 has {} examples but task2 has {}",
                    a.len(),
                    b.len()
                )))
            }
            (Some(a), _) => a.len(),
            (None, Some(b)) => b.len(),
        };
        if let Some(rows) = &self.task2 {
            if let Some(r) = rows.iter().find(|r| r.len() != NUM_CATEGORIES) {
                return Err(Error::InvalidArgument(format!(
                    "category logits need {NUM_CATEGORIES} values, got {}",
                    r.len()
                )));
            }
        }
        let finite = self.task1.iter().flatten().all(|v| v.is_finite())
            && self.task2.iter().flatten().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite { op: "logits".into() });
        }
        Ok(n)
    }

    pub fn len(&self) -> usize {
        self.task1
            .as_ref()
            .map(Vec::len)
            .or_else(|| self.task2.as_ref().map(Vec::len))
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends another batch's logits covering the same tasks.
    pub fn extend(&mut self, other: TaskLogits) -> Result<()> {
        if self.task1.is_some() != other.task1.is_some() || self.task2.is_some() != other.task2.is_some() {
            return Err(Error::InvalidArgument("cannot concatenate logits for different tasks".into()));
        }
        if let (Some(a), Some(b)) = (&mut self.task1, other.task1) {
            a.extend(b);
        }
        if let (Some(a), Some(b)) = (&mut self.task2, other.task2) {
            a.extend(b);
        }
        Ok(())
    }
}

/// Predicted labels for the tasks a model covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predictions {
    pub task1: Option<Vec<Misogyny>>,
    pub task2: Option<Vec<Category>>,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Task 1 is misogynistic iff `sigmoid(logit) >= threshold`; task 2 is the
/// argmax category.
pub fn predict(logits: &TaskLogits, threshold: f64) -> Result<Predictions> {
    logits.validate()?;
    Ok(Predictions {
        task1: logits
            .task1
            .as_ref()
            .map(|z| z.iter().map(|&z| Misogyny::from_flag(sigmoid(z) >= threshold)).collect()),
        task2: logits.task2.as_ref().map(|rows| {
            rows.iter()
                .map(|r| Category::from_index(argmax(r)).expect("row width checked"))
                .collect()
        }),
    })
}
