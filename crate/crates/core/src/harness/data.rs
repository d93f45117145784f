use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::models::{predict, Model, Task, TaskLogits, TaskSelection};
use crate::objectives::Targets;
use crate::text::{encode_batch, Preprocessor, RawExample, TokenBatch, Vocabulary};

/// Rows evaluated per forward pass outside training.
pub const EVAL_CHUNK: usize = 64;

/// Examples tokenized into one batch padded to `max_len`, with labels.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub ids: Vec<String>,
    pub batch: TokenBatch,
    pub targets: Targets,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rows `rows`, re-padded to their longest member.
    pub fn subset(&self, rows: &[usize]) -> (TokenBatch, Targets) {
        let pick = |v: &Option<Vec<usize>>| v.as_ref().map(|v| rows.iter().map(|&r| v[r]).collect());
        (
            self.batch.select_rows(rows),
            Targets {
                task1: pick(&self.targets.task1),
                task2: pick(&self.targets.task2),
            },
        )
    }
}

pub fn render_all(examples: &[RawExample], pre: &Preprocessor) -> Vec<String> {
    examples.iter().map(|e| pre.process(&e.text).rendered).collect()
}

/// Tokenizes `examples`. With `labels`, every example must carry the labels
/// of the tasks in `tasks`.
pub fn prepare(
    examples: &[RawExample],
    vocab: &Vocabulary,
    pre: &Preprocessor,
    max_len: usize,
    labels: Option<TaskSelection>,
) -> Result<Prepared> {
    let rendered = render_all(examples, pre);
    let batch = encode_batch(&rendered, vocab, max_len)?;
    let mut targets = Targets::default();
    if let Some(tasks) = labels {
        let unlabeled = |e: &RawExample| Error::Data(format!("example {:?} has no gold labels", e.id));
        if tasks.covers(Task::Identification) {
            targets.task1 = Some(
                examples
                    .iter()
                    .map(|e| e.task1_label.map(|m| m.index()).ok_or_else(|| unlabeled(e)))
                    .collect::<Result<_>>()?,
            );
        }
        if tasks.covers(Task::Categorization) {
            targets.task2 = Some(
                examples
                    .iter()
                    .map(|e| e.task2_label.map(|c| c.index()).ok_or_else(|| unlabeled(e)))
                    .collect::<Result<_>>()?,
            );
        }
    }
    Ok(Prepared {
        ids: examples.iter().map(|e| e.id.clone()).collect(),
        batch,
        targets,
    })
}

/// Logits for every row of `data`, computed in chunks.
pub fn batched_logits(model: &Model, data: &Prepared) -> Result<TaskLogits> {
    if data.is_empty() {
        return Err(Error::Data("no examples to run".into()));
    }
    let mut out: Option<TaskLogits> = None;
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let logits = model.predict_logits(&data.batch.select_rows(chunk))?;
        match &mut out {
            None => out = Some(logits),
            Some(acc) => acc.extend(logits)?,
        }
    }
    Ok(out.expect("at least one chunk"))
}

/// Metrics for each task the logits cover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task1: Option<MetricsReport>,
    pub task2: Option<MetricsReport>,
}

impl TaskMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("invalid metrics: {e}")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(r) = &self.task1 {
            out.push_str("Task 1: misogyny identification\n");
            out.push_str(&r.to_text());
        }
        if let Some(r) = &self.task2 {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str("Task 2: misogyny categorization\n");
            out.push_str(&r.to_text());
        }
        out
    }

    /// Mean macro-F1 over the covered tasks.
    pub fn mean_macro_f1(&self) -> f64 {
        let f: Vec<f64> = self.task1.iter().chain(&self.task2).map(|r| r.macro_f1).collect();
        f.iter().sum::<f64>() / f.len().max(1) as f64
    }
}

pub fn score(logits: &TaskLogits, targets: &Targets) -> Result<TaskMetrics> {
    let p = predict(logits, 0.5)?;
    let names = |t: Task| t.class_names().iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let task1 = match (&p.task1, &targets.task1) {
        (Some(p), Some(g)) => Some(evaluate(
            &p.iter().map(|m| m.index()).collect::<Vec<_>>(),
            g,
            &names(Task::Identification),
        )?),
        _ => None,
    };
    let task2 = match (&p.task2, &targets.task2) {
        (Some(p), Some(g)) => Some(evaluate(
            &p.iter().map(|c| c.index()).collect::<Vec<_>>(),
            g,
            &names(Task::Categorization),
        )?),
        _ => None,
    };
    Ok(TaskMetrics { task1, task2 })
}
