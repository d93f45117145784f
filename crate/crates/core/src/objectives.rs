//! Task losses: binary cross-entropy for identification, cross-entropy or
//! focal loss for categorization, and their multi-task sum.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::HeadTrace;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task2Loss {
    Ce,
    Fl,
}

impl fmt::Display for Task2Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task2Loss::Ce => "ce",
            Task2Loss::Fl => "fl",
        })
    }
}

impl FromStr for Task2Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ce" | "cross-entropy" => Ok(Task2Loss::Ce),
            "fl" | "focal" => Ok(Task2Loss::Fl),
            _ => Err(Error::Config(format!("unknown task2 loss {s:?}, expected ce or fl"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: Vec<f64>,
}

impl FocalParams {
    pub fn new(gamma: f64, alpha: Vec<f64>) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("focal gamma must be a finite value >= 0, got {gamma}")));
        }
        if alpha.is_empty() || alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::Config(format!("focal alpha weights must be positive, got {alpha:?}")));
        }
        Ok(Self { gamma, alpha })
    }

    /// γ with every α equal to one.
    pub fn unweighted(gamma: f64, k: usize) -> Result<Self> {
        Self::new(gamma, vec![1.0; k])
    }
}

/// Per-label instance counts, in label-space order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub counts: Vec<usize>,
}

impl ClassCounts {
    pub fn from_labels(labels: impl IntoIterator<Item = usize>, k: usize) -> Result<Self> {
        let mut counts = vec![0; k];
        for y in labels {
            *counts.get_mut(y).ok_or_else(|| {
                Error::InvalidArgument(format!("label {y} out of range for {k} classes"))
            })? += 1;
        }
        Ok(Self { counts })
    }
}

/// `α_y = max_count / count_y`, so the dominant label gets exactly 1.
pub fn compute_alpha(counts: &ClassCounts, names: &[String]) -> Result<Vec<f64>> {
    let max = counts.counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::Data("class counts are all zero".into()));
    }
    if let Some(y) = counts.counts.iter().position(|&c| c == 0) {
        let name = names.get(y).map_or_else(|| format!("label {y}"), |n| format!("{n:?}"));
        return Err(Error::Data(format!(
            "{name} has no training examples, so its focal-loss weight is undefined; \
             use a stratified split or a fixture that covers every category"
        )));
    }
    Ok(counts.counts.iter().map(|&c| max as f64 / c as f64).collect())
}

fn check_targets(tape: &Tape, logits: Var, y: &[usize]) -> Result<usize> {
    match tape.shape(logits) {
        [n, k] if *n == y.len() => {
            if let Some(&bad) = y.iter().find(|&&v| v >= *k) {
                return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
            }
            Ok(*k)
        }
        s => Err(Error::shape("classification loss", s, &[y.len()])),
    }
}

/// Mean binary cross-entropy of `[n]` logits against 0/1 targets.
pub fn bce_mean(tape: &mut Tape, logits: Var, y: &[usize]) -> Result<Var> {
    if let Some(&bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::InvalidArgument(format!("binary label must be 0 or 1, got {bad}")));
    }
    let targets: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let per = tape.bce_with_logits(logits, &targets)?;
    tape.mean(per)
}

/// Mean `−log softmax(z)[y]` over `[n, k]` logits.
pub fn ce_mean(tape: &mut Tape, logits: Var, y: &[usize]) -> Result<Var> {
    check_targets(tape, logits, y)?;
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick(lp, y)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -1.0)
}

/// Mean `−α_y (1 − p_y)^γ log p_y` over `[n, k]` logits.
pub fn focal_mean(tape: &mut Tape, logits: Var, y: &[usize], params: &FocalParams) -> Result<Var> {
    let k = check_targets(tape, logits, y)?;
    if params.alpha.len() != k {
        return Err(Error::shape("focal alpha", &[params.alpha.len()], &[k]));
    }
    let lp = tape.log_softmax(logits)?;
    let log_p = tape.pick(lp, y)?;
    let p = tape.exp(log_p)?;
    let q = tape.affine(p, -1.0, 1.0)?;
    let modulating = tape.powf(q, params.gamma)?;
    let alpha = tape.constant(Tensor::new(vec![y.len()], y.iter().map(|&c| params.alpha[c]).collect())?)?;
    let w = tape.mul(alpha, modulating)?;
    let per = tape.mul(w, log_p)?;
    let mean = tape.mean(per)?;
    tape.scale(mean, -1.0)
}

fn scalar_loss(f: impl FnOnce(&mut Tape, Var) -> Result<Var>, logits: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::new(vec![1, logits.len()], logits.to_vec())?)?;
    let out = f(&mut tape, z)?;
    tape.value(out).item()
}

/// Binary cross-entropy of one logit, in the stable log-sum-exp form.
pub fn bce_loss(z: f64, y: usize) -> Result<f64> {
    scalar_loss(
        |t, z| {
            let z = t.reshape(z, &[1])?;
            bce_mean(t, z, &[y])
        },
        &[z],
    )
}

pub fn ce_loss(logits: &[f64], y: usize) -> Result<f64> {
    scalar_loss(|t, z| ce_mean(t, z, &[y]), logits)
}

/// Focal loss of one example with weight `alpha_y` for its label.
pub fn focal_loss(logits: &[f64], y: usize, gamma: f64, alpha_y: f64) -> Result<f64> {
    let mut alpha = vec![1.0; logits.len()];
    if let Some(a) = alpha.get_mut(y) {
        *a = alpha_y;
    }
    let params = FocalParams::new(gamma, alpha)?;
    scalar_loss(|t, z| focal_mean(t, z, &[y], &params), logits)
}

/// `task1 + λ₂ · task2` of two batch-mean losses.
pub fn mtl_loss(tape: &mut Tape, task1: Var, task2: Var, lambda2: f64) -> Result<Var> {
    check_lambda(lambda2)?;
    let weighted = tape.scale(task2, lambda2)?;
    tape.add(task1, weighted)
}

pub fn mtl_loss_value(task1: f64, task2: f64, lambda2: f64) -> Result<f64> {
    check_lambda(lambda2)?;
    Ok(task1 + lambda2 * task2)
}

fn check_lambda(lambda2: f64) -> Result<()> {
    if !(lambda2 >= 0.0 && lambda2.is_finite()) {
        return Err(Error::Config(format!("task2 loss weight must be >= 0, got {lambda2}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub task2: Task2Loss,
    /// Required when `task2` is [`Task2Loss::Fl`].
    pub focal: Option<FocalParams>,
    pub lambda2: f64,
}

impl LossConfig {
    pub fn cross_entropy() -> Self {
        Self {
            task2: Task2Loss::Ce,
            focal: None,
            lambda2: 1.0,
        }
    }
}

/// Gold labels of a batch: 0/1 for task 1, category indices for task 2.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Targets {
    pub task1: Option<Vec<usize>>,
    pub task2: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTrace {
    pub total: Var,
    pub task1: Option<Var>,
    pub task2: Option<Var>,
}

/// Loss of every task the heads produced, combined with [`mtl_loss`] when
/// both are present.
pub fn model_loss(tape: &mut Tape, heads: &HeadTrace, targets: &Targets, cfg: &LossConfig) -> Result<LossTrace> {
    let missing = |task: &str| Error::Data(format!("batch has no {task} labels for a model that predicts it"));
    let task1 = match heads.task1 {
        Some(z) => Some(bce_mean(tape, z, targets.task1.as_deref().ok_or_else(|| missing("task1"))?)?),
        None => None,
    };
    let task2 = match heads.task2 {
        Some(z) => {
            let y = targets.task2.as_deref().ok_or_else(|| missing("task2"))?;
            Some(match cfg.task2 {
                Task2Loss::Ce => ce_mean(tape, z, y)?,
                Task2Loss::Fl => {
                    let params = cfg
                        .focal
                        .as_ref()
                        .ok_or_else(|| Error::Config("focal loss selected without focal parameters".into()))?;
                    focal_mean(tape, z, y, params)?
                }
            })
        }
        None => None,
    };
    let total = match (task1, task2) {
        (Some(a), Some(b)) => mtl_loss(tape, a, b, cfg.lambda2)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return Err(Error::InvalidArgument("model produced no logits".into())),
    };
    Ok(LossTrace { total, task1, task2 })
}
