use super::labels::{Task, NUM_CATEGORIES};
use super::pool::AttentionPool;
use super::predict::TaskLogits;
use super::spec::{HeadKind, ModelSpec, VERTICAL_LAYERS};
use crate::encoder::{Encoder, EncoderOutput, EncoderTrace};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{SeededRng, Tape, Var};
use crate::text::TokenBatch;

/// Stream id separating head initialization from the encoder's draws.
const HEAD_STREAM: u64 = 0x4845_4144;

#[derive(Debug, Clone)]
struct VerticalStage {
    pools: Vec<AttentionPool>,
    aggregator: AttentionPool,
}

#[derive(Debug, Clone)]
struct TaskHead {
    task: Task,
    pool: Option<AttentionPool>,
    vertical: Option<usize>,
    classifier: (ParamId, ParamId),
}

/// Encoder plus the task-specific layers of one architecture.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    encoder: Encoder,
    params: ParamStore,
    vertical: Vec<VerticalStage>,
    heads: Vec<TaskHead>,
}

/// Head outputs recorded on a tape.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    /// `[batch]` binary logits.
    pub task1: Option<Var>,
    /// `[batch, 8]` category logits.
    pub task2: Option<Var>,
    /// `hidden_states` indices read by vertical pools, in read order.
    pub vertical_layers: Vec<usize>,
    /// Horizontal pooling weights `[batch, len]` per task.
    pub pool_weights: Vec<(Task, Var)>,
}

#[derive(Debug, Clone)]
pub struct ModelTrace {
    pub encoder: EncoderTrace,
    pub heads: HeadTrace,
}

fn task_tag(task: Task) -> &'static str {
    match task {
        Task::Identification => "task1",
        Task::Categorization => "task2",
    }
}

fn output_width(task: Task) -> usize {
    match task {
        Task::Identification => 1,
        Task::Categorization => NUM_CATEGORIES,
    }
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let encoder = Encoder::init_params(spec.encoder, &mut params)?;
        let d = spec.encoder.model_dim;
        let mut rng = SeededRng::new(spec.encoder.seed).fork(HEAD_STREAM);
        let kind = spec.architecture.head();
        let tasks = spec.tasks.tasks();

        let mut vertical = Vec::new();
        if kind == HeadKind::Vhatt {
            let prefixes: Vec<String> = if spec.vertical_per_task {
                tasks.iter().map(|t| format!("vertical.{}", task_tag(*t))).collect()
            } else {
                vec!["vertical".to_string()]
            };
            for prefix in prefixes {
                let pools = (0..VERTICAL_LAYERS)
                    .map(|j| AttentionPool::init(&mut params, &mut rng, &format!("{prefix}.pool.{j}"), d))
                    .collect();
                let aggregator = AttentionPool::init(&mut params, &mut rng, &format!("{prefix}.aggregator"), d);
                vertical.push(VerticalStage { pools, aggregator });
            }
        }

        let width = spec.classifier_input_width();
        let heads = tasks
            .iter()
            .enumerate()
            .map(|(i, &task)| {
                let name = format!("heads.{}", task_tag(task));
                let pool = (kind != HeadKind::Cls)
                    .then(|| AttentionPool::init(&mut params, &mut rng, &format!("{name}.attention"), d));
                let classifier = (
                    params.normal(format!("{name}.classifier.weight"), &[width, output_width(task)], &mut rng),
                    params.zeros(format!("{name}.classifier.bias"), &[output_width(task)]),
                );
                TaskHead {
                    task,
                    pool,
                    vertical: (kind == HeadKind::Vhatt).then_some(if spec.vertical_per_task { i } else { 0 }),
                    classifier,
                }
            })
            .collect();

        Ok(Self {
            spec,
            encoder,
            params,
            vertical,
            heads,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameters owned by one task's head (pooling and classifier), not
    /// including shared layers.
    pub fn head_params(&self, task: Task) -> Vec<ParamId> {
        self.heads
            .iter()
            .filter(|h| h.task == task)
            .flat_map(|h| {
                let mut ids = vec![h.classifier.0, h.classifier.1];
                if let Some(p) = h.pool {
                    ids.extend([p.weight, p.bias, p.context]);
                }
                ids
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &TokenBatch) -> Result<ModelTrace> {
        let encoder = self.encoder.forward(tape, p, batch)?;
        let heads = self.forward_heads(tape, p, &encoder, batch)?;
        Ok(ModelTrace { encoder, heads })
    }

    fn forward_heads(&self, tape: &mut Tape, p: &Bound, enc: &EncoderTrace, batch: &TokenBatch) -> Result<HeadTrace> {
        match self.spec.architecture.head() {
            HeadKind::Cls => self.forward_cls(tape, p, enc),
            HeadKind::Att => self.forward_att(tape, p, enc, batch),
            HeadKind::Vhatt => self.forward_vhatt(tape, p, enc, batch),
        }
    }

    fn require(&self, kind: HeadKind, op: &str) -> Result<()> {
        if self.spec.architecture.head() != kind {
            return Err(Error::Config(format!("{op} called on a {} model", self.spec.architecture)));
        }
        Ok(())
    }

    fn classify(&self, tape: &mut Tape, p: &Bound, head: &TaskHead, features: Var, out: &mut HeadTrace) -> Result<()> {
        let z = tape.linear(features, p.var(head.classifier.0), p.var(head.classifier.1))?;
        match head.task {
            Task::Identification => {
                let b = tape.shape(z)[0];
                out.task1 = Some(tape.reshape(z, &[b])?);
            }
            Task::Categorization => out.task2 = Some(z),
        }
        Ok(())
    }

    fn empty_trace() -> HeadTrace {
        HeadTrace {
            task1: None,
            task2: None,
            vertical_layers: Vec::new(),
            pool_weights: Vec::new(),
        }
    }

    /// Linear classifiers on the final [CLS] embedding.
    pub fn forward_cls(&self, tape: &mut Tape, p: &Bound, enc: &EncoderTrace) -> Result<HeadTrace> {
        self.require(HeadKind::Cls, "forward_cls")?;
        let mut out = Self::empty_trace();
        for head in &self.heads {
            self.classify(tape, p, head, enc.cls_final, &mut out)?;
        }
        Ok(out)
    }

    /// Per-task attention pooling over the final layer, concatenated with
    /// the [CLS] embedding.
    pub fn forward_att(&self, tape: &mut Tape, p: &Bound, enc: &EncoderTrace, batch: &TokenBatch) -> Result<HeadTrace> {
        self.require(HeadKind::Att, "forward_att")?;
        let keep = batch.keep_mask();
        let last = *enc.hidden_states.last().expect("encoder has layers");
        let mut out = Self::empty_trace();
        for head in &self.heads {
            let pool = head.pool.expect("ATT heads own a pool");
            let (ctx, w) = pool.forward(tape, p, last, &keep)?;
            out.pool_weights.push((head.task, w));
            let features = tape.concat(&[ctx, enc.cls_final])?;
            self.classify(tape, p, head, features, &mut out)?;
        }
        Ok(out)
    }

    /// Horizontal pooling as in [`Model::forward_att`] plus a vertical stage:
    /// one pool per layer over the six layers under the top one, then an
    /// aggregating pool over the six pooled vectors.
    pub fn forward_vhatt(&self, tape: &mut Tape, p: &Bound, enc: &EncoderTrace, batch: &TokenBatch) -> Result<HeadTrace> {
        self.require(HeadKind::Vhatt, "forward_vhatt")?;
        let layers = self.spec.vertical_layer_indices();
        if enc.hidden_states.len() != self.spec.encoder.num_layers + 1 || layers.len() != VERTICAL_LAYERS {
            return Err(Error::Config(format!(
                "vertical attention needs {} hidden states, got {}",
                self.spec.encoder.num_layers + 1,
                enc.hidden_states.len()
            )));
        }
        let keep = batch.keep_mask();
        let mut out = Self::empty_trace();

        let mut aggregates = Vec::with_capacity(self.vertical.len());
        for stage in &self.vertical {
            let mut pooled = Vec::with_capacity(VERTICAL_LAYERS);
            for (pool, j) in stage.pools.iter().zip(layers.clone()) {
                out.vertical_layers.push(j);
                let (ctx, _) = pool.forward(tape, p, enc.hidden_states[j], &keep)?;
                pooled.push(ctx);
            }
            let seq = tape.stack(&pooled)?;
            let all = vec![true; batch.batch_size * VERTICAL_LAYERS];
            let (agg, _) = stage.aggregator.forward(tape, p, seq, &all)?;
            aggregates.push(agg);
        }

        let last = *enc.hidden_states.last().expect("encoder has layers");
        for head in &self.heads {
            let pool = head.pool.expect("VHATT heads own a pool");
            let (ctx, w) = pool.forward(tape, p, last, &keep)?;
            out.pool_weights.push((head.task, w));
            let agg = aggregates[head.vertical.expect("VHATT heads use a vertical stage")];
            let features = tape.concat(&[enc.cls_final, ctx, agg])?;
            self.classify(tape, p, head, features, &mut out)?;
        }
        Ok(out)
    }

    /// Head logits for a precomputed encoder output.
    pub fn head_logits(&self, enc: &EncoderOutput, batch: &TokenBatch) -> Result<TaskLogits> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let trace = EncoderTrace {
            hidden_states: enc
                .hidden_states
                .iter()
                .map(|h| tape.constant(h.clone()))
                .collect::<Result<_>>()?,
            cls_final: tape.constant(enc.cls_final.clone())?,
            attention: Vec::new(),
        };
        let heads = self.forward_heads(&mut tape, &p, &trace, batch)?;
        Ok(TaskLogits::from_trace(&tape, &heads))
    }

    /// Forward pass without gradient bookkeeping.
    pub fn predict_logits(&self, batch: &TokenBatch) -> Result<TaskLogits> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let trace = self.forward(&mut tape, &p, batch)?;
        Ok(TaskLogits::from_trace(&tape, &trace.heads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::models::pool::attention_pool;
    use crate::models::spec::Architecture;
    use crate::tensor::Tensor;
    use crate::text::{encode_batch, Vocabulary};

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["[CLS] a b c d e f [SEP] x y [SEP]"], 1).unwrap()
    }

    fn enc_config(layers: usize, d: usize, v: &Vocabulary) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            model_dim: d,
            num_heads: 2,
            ffn_dim: 2 * d,
            max_len: 16,
            vocab_size: v.len(),
            seed: 3,
        }
    }

    fn batch(v: &Vocabulary) -> TokenBatch {
        encode_batch(&["[CLS] a b c [SEP] x [SEP]", "[CLS] e [SEP] [SEP]"], v, 6).unwrap()
    }

    fn model(a: Architecture, layers: usize) -> Model {
        let v = vocab();
        Model::new(ModelSpec::new(a, Task::Categorization, enc_config(layers, 8, &v))).unwrap()
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let mut m = model(Architecture::MtCls, 2);
        for task in [Task::Identification, Task::Categorization] {
            for id in m.head_params(task) {
                let shape = m.params().get(id).shape().to_vec();
                *m.params_mut().get_mut(id) = Tensor::zeros(&shape);
            }
        }
        let logits = m.predict_logits(&batch(&vocab())).unwrap();
        assert!(logits.task1.unwrap().iter().all(|&z| z == 0.0));
        let t2 = logits.task2.unwrap();
        assert_eq!(t2.len(), 2);
        assert!(t2.iter().all(|r| r.len() == 8 && r.iter().all(|&z| z == 0.0)));
    }

    #[test]
    fn cls_logits_are_linear_in_the_embedding() {
        let m = model(Architecture::MtCls, 2);
        let b = batch(&vocab());
        let mut out = m.encoder().encode(m.params(), &b).unwrap();
        let base = m.head_logits(&out, &b).unwrap();
        out.cls_final = out.cls_final.map(|v| 2.0 * v);
        let doubled = m.head_logits(&out, &b).unwrap();
        for (a, b) in base.task1.unwrap().iter().zip(doubled.task1.unwrap()) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn att_forward_matches_composed_oracle() {
        let m = model(Architecture::MtAtt, 2);
        let b = batch(&vocab());
        let enc = m.encoder().encode(m.params(), &b).unwrap();
        let logits = m.predict_logits(&b).unwrap();
        let head = &m.heads[1];
        let (ctx, _) = attention_pool(&head.pool.unwrap(), m.params(), enc.hidden_states.last().unwrap(), &b.padding_mask).unwrap();
        let w = m.params().get(head.classifier.0);
        let bias = m.params().get(head.classifier.1);
        let d = 8;
        for i in 0..2 {
            let mut features = ctx.data()[i * d..(i + 1) * d].to_vec();
            features.extend_from_slice(&enc.cls_final.data()[i * d..(i + 1) * d]);
            for k in 0..8 {
                let z: f64 = bias.data()[k] + (0..2 * d).map(|j| features[j] * w.data()[j * 8 + k]).sum::<f64>();
                assert!((logits.task2.as_ref().unwrap()[i][k] - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn task_pools_are_disjoint() {
        let mut m = model(Architecture::MtAtt, 2);
        let b = batch(&vocab());
        let before = m.predict_logits(&b).unwrap();
        let pool = m.heads[0].pool.unwrap();
        for id in [pool.weight, pool.context] {
            for x in m.params_mut().get_mut(id).data_mut() {
                *x += 0.3;
            }
        }
        let after = m.predict_logits(&b).unwrap();
        assert_eq!(before.task2, after.task2);
        assert_ne!(before.task1, after.task1);
    }

    #[test]
    fn vhatt_reads_the_six_layers_below_the_top() {
        let m = model(Architecture::MtVhatt, 8);
        let b = batch(&vocab());
        let mut tape = Tape::new();
        let p = m.params().bind(&mut tape, false).unwrap();
        let trace = m.forward(&mut tape, &p, &b).unwrap();
        assert_eq!(trace.heads.vertical_layers, vec![2, 3, 4, 5, 6, 7]);
        assert!(!trace.heads.vertical_layers.contains(&8));
    }

    #[test]
    fn aggregator_fixed_point() {
        let m = model(Architecture::MtVhatt, 7);
        let stage = &m.vertical[0];
        let v = [0.3, -1.0, 2.0, 0.5, 0.0, 1.5, -0.2, 0.9];
        let seq = Tensor::new(vec![1, 6, 8], v.iter().copied().cycle().take(48).collect()).unwrap();
        let (ctx, _) = attention_pool(&stage.aggregator, m.params(), &seq, &[1; 6]).unwrap();
        for (a, b) in ctx.data().iter().zip(v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_forward_is_rejected() {
        let m = model(Architecture::StCls, 2);
        let b = batch(&vocab());
        let mut tape = Tape::new();
        let p = m.params().bind(&mut tape, false).unwrap();
        let enc = m.encoder().forward(&mut tape, &p, &b).unwrap();
        assert!(m.forward_att(&mut tape, &p, &enc, &b).is_err());
        assert!(m.forward_vhatt(&mut tape, &p, &enc, &b).is_err());
        assert!(m.forward_cls(&mut tape, &p, &enc).is_ok());
    }

    #[test]
    fn single_task_inventory_has_no_other_head() {
        let v = vocab();
        let m = Model::new(ModelSpec::new(Architecture::StAtt, Task::Identification, enc_config(2, 8, &v))).unwrap();
        assert!(m.head_params(Task::Categorization).is_empty());
        assert!(m.params().names().iter().all(|n| !n.contains("task2")));
        let logits = m.predict_logits(&batch(&v)).unwrap();
        assert!(logits.task2.is_none());
    }

    #[test]
    fn per_task_vertical_stages() {
        let v = vocab();
        let mut spec = ModelSpec::new(Architecture::MtVhatt, Task::Identification, enc_config(7, 8, &v));
        spec.vertical_per_task = true;
        let m = Model::new(spec).unwrap();
        assert_eq!(m.vertical.len(), 2);
        assert!(m.params().find("vertical.task2.aggregator.context").is_some());
        let shared = model(Architecture::MtVhatt, 7);
        assert!(shared.params().find("vertical.aggregator.context").is_some());
    }
}
