use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainingMetadata};
use super::config::TrainConfig;
use super::data::{batched_logits, prepare, render_all, score, Prepared, TaskMetrics};
use crate::error::{Error, Result};
use crate::models::{Architecture, Model, Task, NUM_CATEGORIES};
use crate::objectives::{compute_alpha, model_loss, ClassCounts, FocalParams, LossConfig, Task2Loss};
use crate::tensor::{AdamConfig, AdamState, SeededRng, Tape, Tensor};
use crate::text::{load_tsv, split_train_dev, Preprocessor, RawExample, Vocabulary};

/// Stream id of the per-epoch shuffling generator.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Example-weighted mean of the batch losses.
    pub loss: f64,
    pub task1_loss: Option<f64>,
    pub task2_loss: Option<f64>,
    pub dev: Option<TaskMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub architecture: Architecture,
    pub config_hash: String,
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub vocab_size: usize,
    pub alpha: Option<Vec<f64>>,
    pub epochs: Vec<EpochRecord>,
    /// Final model on the training split.
    pub train: TaskMetrics,
    /// Final model on a separate labeled test file.
    pub test: Option<TaskMetrics>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("invalid run report: {e}")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} seed {} (train {}, dev {}, vocabulary {})",
            self.architecture, self.seed, self.train_size, self.dev_size, self.vocab_size
        );
        let _ = writeln!(out, "config {}\n", self.config_hash);
        let _ = writeln!(out, "{:>5}  {:>10}  {:>10}  {:>10}  {:>10}", "epoch", "loss", "task1", "task2", "dev F1");
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{:>5}  {:>10.4}  {:>10}  {:>10}  {:>10}",
                e.epoch,
                e.loss,
                opt(e.task1_loss),
                opt(e.task2_loss),
                opt(e.dev.as_ref().map(TaskMetrics::mean_macro_f1))
            );
        }
        let _ = write!(out, "\nTraining split\n{}", self.train.to_text());
        if let Some(dev) = self.epochs.last().and_then(|e| e.dev.as_ref()) {
            let _ = write!(out, "\nDev split\n{}", dev.to_text());
        }
        if let Some(test) = &self.test {
            let _ = write!(out, "\nTest file\n{}", test.to_text());
        }
        out
    }
}

/// Labeled examples for one run.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<RawExample>,
    /// Used as-is when present; otherwise split off `train`.
    pub dev: Option<Vec<RawExample>>,
    pub test: Option<Vec<RawExample>>,
}

impl TrainData {
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let train = config
            .paths
            .train
            .as_deref()
            .ok_or_else(|| Error::Config("no training file given (paths.train)".into()))?;
        Ok(Self {
            train: load_tsv(train)?,
            dev: config.paths.dev.as_deref().map(load_tsv).transpose()?,
            test: config.paths.test.as_deref().map(load_tsv).transpose()?,
        })
    }
}

fn nonfinite_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{op} (epoch {epoch}, batch {batch})"),
        },
        other => other,
    }
}

/// Trains one model and returns its final-epoch checkpoint with the run
/// report.
pub fn train(config: &TrainConfig, data: &TrainData) -> Result<(Checkpoint, RunReport)> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("training file has no examples".into()));
    }
    let tasks = config.effective_tasks();
    let (train_rows, dev_rows) = match &data.dev {
        Some(dev) => (data.train.clone(), dev.clone()),
        None => split_train_dev(&data.train, config.split_fraction, config.seed)?,
    };

    let pre = Preprocessor {
        strip_diacritics: config.strip_diacritics,
    };
    let vocab = Vocabulary::build(&render_all(&train_rows, &pre), config.min_count)?;
    let max_len = config.encoder.max_len;
    let train_set = prepare(&train_rows, &vocab, &pre, max_len, Some(tasks))?;
    let dev_set = if dev_rows.is_empty() {
        None
    } else {
        Some(prepare(&dev_rows, &vocab, &pre, max_len, Some(tasks))?)
    };

    let alpha = match (config.task2_loss, &train_set.targets.task2) {
        (Task2Loss::Fl, Some(y)) => {
            let names: Vec<String> = Task::Categorization.class_names().iter().map(|s| s.to_string()).collect();
            Some(compute_alpha(&ClassCounts::from_labels(y.iter().copied(), NUM_CATEGORIES)?, &names)?)
        }
        _ => None,
    };
    let loss_cfg = LossConfig {
        task2: config.task2_loss,
        focal: alpha.clone().map(|a| FocalParams::new(config.gamma, a)).transpose()?,
        lambda2: config.lambda2,
    };

    let mut model = Model::new(config.model_spec(vocab.len()))?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.learning_rate), model.params().values());
    let mut shuffler = SeededRng::new(config.seed).fork(SHUFFLE_STREAM);

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best_dev = f64::NEG_INFINITY;
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        let order = shuffler.permutation(train_set.len());
        let (mut total, mut t1, mut t2) = (0.0, 0.0, 0.0);
        for (bi, rows) in order.chunks(config.batch_size).enumerate() {
            let losses = train_step(&mut model, &mut adam, &train_set, rows, &loss_cfg)
                .map_err(|e| nonfinite_context(e, epoch, bi + 1))?;
            let w = rows.len() as f64 / train_set.len() as f64;
            total += w * losses.0;
            t1 += w * losses.1.unwrap_or(0.0);
            t2 += w * losses.2.unwrap_or(0.0);
        }
        let dev = dev_set
            .as_ref()
            .map(|d| score(&batched_logits(&model, d)?, &d.targets))
            .transpose()?;
        log::info!("epoch {epoch}: loss {total:.4}");
        let dev_f1 = dev.as_ref().map(TaskMetrics::mean_macro_f1);
        epochs.push(EpochRecord {
            epoch,
            loss: total,
            task1_loss: train_set.targets.task1.as_ref().map(|_| t1),
            task2_loss: train_set.targets.task2.as_ref().map(|_| t2),
            dev,
        });
        if let (Some(patience), Some(f1)) = (config.early_stopping_patience, dev_f1) {
            if f1 > best_dev {
                best_dev = f1;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    log::info!("dev macro-F1 flat for {patience} epochs, stopping after epoch {epoch}");
                    break;
                }
            }
        }
    }

    let metadata = TrainingMetadata {
        seed: config.seed,
        epoch: epochs.len(),
        config_hash: config.hash(),
    };
    let ckpt = Checkpoint::new(model, vocab, pre, metadata)?;
    // Reports describe the stored (f32-rounded) model.
    let train_metrics = score(&batched_logits(&ckpt.model, &train_set)?, &train_set.targets)?;
    if let (Some(last), Some(d)) = (epochs.last_mut(), &dev_set) {
        last.dev = Some(score(&batched_logits(&ckpt.model, d)?, &d.targets)?);
    }
    let test = match &data.test {
        Some(rows) => Some(evaluate_examples(&ckpt, rows)?),
        None => None,
    };
    let report = RunReport {
        architecture: config.architecture,
        config_hash: config.hash(),
        seed: config.seed,
        train_size: train_set.len(),
        dev_size: dev_set.as_ref().map_or(0, Prepared::len),
        vocab_size: ckpt.vocabulary.len(),
        alpha,
        epochs,
        train: train_metrics,
        test,
    };
    Ok((ckpt, report))
}

/// One Adam step on `rows`; returns (total, task1, task2) batch losses.
fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    data: &Prepared,
    rows: &[usize],
    loss_cfg: &LossConfig,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    let (batch, targets) = data.subset(rows);
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true)?;
    let trace = model.forward(&mut tape, &bound, &batch)?;
    let loss = model_loss(&mut tape, &trace.heads, &targets, loss_cfg)?;
    let grads = tape.backward(loss.total)?;
    let grads: Vec<Tensor> = bound.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            op: format!("gradient of {}", model.params().names()[i]),
        });
    }
    adam.step(model.params_mut().values_mut(), &grads)?;
    let value = |v: Option<crate::tensor::Var>| -> Result<Option<f64>> { v.map(|v| tape.value(v).item()).transpose() };
    Ok((tape.value(loss.total).item()?, value(loss.task1)?, value(loss.task2)?))
}

/// Scores a checkpoint on labeled examples.
pub fn evaluate_examples(ckpt: &Checkpoint, examples: &[RawExample]) -> Result<TaskMetrics> {
    if examples.is_empty() {
        return Err(Error::Data("evaluation file has no examples".into()));
    }
    let data = prepare(
        examples,
        &ckpt.vocabulary,
        &ckpt.preprocessor,
        ckpt.model.spec().encoder.max_len,
        Some(ckpt.model.spec().tasks),
    )?;
    score(&batched_logits(&ckpt.model, &data)?, &data.targets)
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<TaskMetrics> {
    let rows = load_tsv(path)?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no examples to evaluate", path.display())));
    }
    evaluate_examples(ckpt, &rows)
}

/// File names written into a run's output directory.
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_JSON: &str = "run_report.json";
pub const REPORT_TEXT: &str = "run_report.txt";

/// Writes the checkpoint and both report renderings into `dir`.
pub fn write_run(dir: &Path, ckpt: &Checkpoint, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ckpt.save(&dir.join(CHECKPOINT_FILE))?;
    let json = dir.join(REPORT_JSON);
    fs::write(&json, report.to_json()).map_err(|e| Error::io(&json, e))?;
    let text = dir.join(REPORT_TEXT);
    fs::write(&text, report.to_text()).map_err(|e| Error::io(&text, e))
}
