//! Whole-model gradient check at a tiny configuration.

use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::models::{Architecture, HeadKind, Model, ModelSpec, Task, VERTICAL_LAYERS};
use crate::objectives::{model_loss, FocalParams, LossConfig, Targets, Task2Loss};
use crate::params::Bound;
use crate::tensor::{gradient_check, GradCheckReport, SeededRng, Tensor};
use crate::text::{encode_batch, Vocabulary};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Spread added to the initial parameters so that gradients are not all
/// near zero, as they are at initialization.
const PERTURBATION: f64 = 0.2;

/// Encoder used by [`check_architecture`]: two layers (seven for VHATT),
/// width 8, two heads.
pub fn tiny_encoder(architecture: Architecture, vocab_size: usize, seed: u64) -> EncoderConfig {
    EncoderConfig {
        num_layers: if architecture.head() == HeadKind::Vhatt { VERTICAL_LAYERS + 1 } else { 2 },
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        max_len: 6,
        vocab_size,
        seed,
    }
}

/// Compares the gradient of the full training loss (BCE plus focal loss
/// with non-uniform α) for every parameter of `architecture` on a two-example
/// batch of length 6 with padding. ST variants train the categorization task.
pub fn check_architecture(architecture: Architecture, seed: u64) -> Result<GradCheckReport> {
    let vocab = Vocabulary::build(&["[CLS] a b c d [SEP] x y [SEP]"], 1)?;
    let batch = encode_batch(&["[CLS] a b c [SEP] x [SEP]", "[CLS] d [SEP] [SEP]"], &vocab, 6)?;
    let spec = ModelSpec::new(architecture, Task::Categorization, tiny_encoder(architecture, vocab.len(), seed));
    let model = Model::new(spec)?;

    let mut rng = SeededRng::new(seed).fork(1);
    let params: Vec<Tensor> = model
        .params()
        .values()
        .iter()
        .map(|t| {
            let data = t.data().iter().map(|v| v + PERTURBATION * rng.normal()).collect();
            Tensor::new(t.shape().to_vec(), data)
        })
        .collect::<Result<_>>()?;
    let targets = Targets {
        task1: spec.tasks.covers(Task::Identification).then(|| vec![1, 0]),
        task2: spec.tasks.covers(Task::Categorization).then(|| vec![3, 0]),
    };
    let loss = LossConfig {
        task2: Task2Loss::Fl,
        focal: Some(FocalParams::new(2.0, vec![1.0, 4.5, 27.8, 1.1, 13.9, 51.0, 4.7, 13.3])?),
        lambda2: 1.0,
    };
    gradient_check(
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let trace = model.forward(tape, &bound, &batch)?;
            Ok(model_loss(tape, &trace.heads, &targets, &loss)?.total)
        },
        &params,
        GRADCHECK_STEP,
        GRADCHECK_TOLERANCE,
    )
}
