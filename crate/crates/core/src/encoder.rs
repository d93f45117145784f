//! Small BERT-style encoder: token, position and segment embeddings followed
//! by post-layer-norm transformer blocks. Every layer's output is retained.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{SeededRng, Tape, Tensor, Var};
use crate::text::TokenBatch;

/// Number of segment types: text span and emoji span.
pub const NUM_SEGMENTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Eight layers of width 64; the smallest default that leaves six
    /// intermediate layers under the top one.
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        Self {
            num_layers: 8,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            max_len: 64,
            vocab_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config("encoder max_len must be at least 3".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Debug, Clone)]
struct Block {
    query: (ParamId, ParamId),
    key: (ParamId, ParamId),
    value: (ParamId, ParamId),
    output: (ParamId, ParamId),
    attn_norm: (ParamId, ParamId),
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
    ffn_norm: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    token_embedding: ParamId,
    position_embedding: ParamId,
    segment_embedding: ParamId,
    embedding_norm: (ParamId, ParamId),
    blocks: Vec<Block>,
}

/// Per-layer outputs recorded on a tape.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// `num_layers + 1` tensors of shape `[batch, len, d]`; index 0 is the
    /// embedding output.
    pub hidden_states: Vec<Var>,
    /// `[batch, len, d]` slice of the last layer at position 0 → `[batch, d]`.
    pub cls_final: Var,
    /// Attention probabilities per layer, `[batch·heads, len, len]`.
    pub attention: Vec<Var>,
}

/// Plain-value copy of an [`EncoderTrace`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden_states: Vec<Tensor>,
    pub cls_final: Tensor,
}

fn linear_params(store: &mut ParamStore, rng: &mut SeededRng, name: &str, d_in: usize, d_out: usize) -> (ParamId, ParamId) {
    (
        store.normal(format!("{name}.weight"), &[d_in, d_out], rng),
        store.zeros(format!("{name}.bias"), &[d_out]),
    )
}

fn norm_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.ones(format!("{name}.gain"), &[d]),
        store.zeros(format!("{name}.bias"), &[d]),
    )
}

impl Encoder {
    /// Registers freshly initialized encoder parameters in `store`: weights
    /// from N(0, 0.02²) seeded by `config.seed`, biases zero, norm gains one.
    pub fn init_params(config: EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let d = config.model_dim;
        let token_embedding = store.normal("encoder.embeddings.token", &[config.vocab_size, d], &mut rng);
        let position_embedding = store.normal("encoder.embeddings.position", &[config.max_len, d], &mut rng);
        let segment_embedding = store.normal("encoder.embeddings.segment", &[NUM_SEGMENTS, d], &mut rng);
        let embedding_norm = norm_params(store, "encoder.embeddings.norm", d);
        let blocks = (0..config.num_layers)
            .map(|i| {
                let p = format!("encoder.layer.{i}");
                Block {
                    query: linear_params(store, &mut rng, &format!("{p}.attention.query"), d, d),
                    key: linear_params(store, &mut rng, &format!("{p}.attention.key"), d, d),
                    value: linear_params(store, &mut rng, &format!("{p}.attention.value"), d, d),
                    output: linear_params(store, &mut rng, &format!("{p}.attention.output"), d, d),
                    attn_norm: norm_params(store, &format!("{p}.attention.norm"), d),
                    ffn_in: linear_params(store, &mut rng, &format!("{p}.ffn.in"), d, config.ffn_dim),
                    ffn_out: linear_params(store, &mut rng, &format!("{p}.ffn.out"), config.ffn_dim, d),
                    ffn_norm: norm_params(store, &format!("{p}.ffn.norm"), d),
                }
            })
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            segment_embedding,
            embedding_norm,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq_len > self.config.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds encoder max_len {}",
                batch.seq_len, self.config.max_len
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if batch.batch_size == 0 || batch.seq_len == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if batch.lengths.contains(&0) {
            return Err(Error::InvalidArgument("batch row without tokens".into()));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &TokenBatch) -> Result<EncoderTrace> {
        self.check_batch(batch)?;
        let (b, t, d) = (batch.batch_size, batch.seq_len, self.config.model_dim);
        let h = self.config.num_heads;
        let dh = self.config.head_dim();

        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let segments: Vec<usize> = batch.segment_ids.iter().map(|&s| s as usize).collect();
        let tok = tape.gather(p.var(self.token_embedding), &batch.ids)?;
        let pos = tape.gather(p.var(self.position_embedding), &positions)?;
        let seg = tape.gather(p.var(self.segment_embedding), &segments)?;
        let x = tape.add(tok, pos)?;
        let x = tape.add(x, seg)?;
        let mut x = tape.layer_norm(x, p.var(self.embedding_norm.0), p.var(self.embedding_norm.1))?;

        // Key mask shared by every head and query row.
        let mut keep = Vec::with_capacity(b * h * t * t);
        for bi in 0..b {
            let row = &batch.padding_mask[bi * t..(bi + 1) * t];
            for _ in 0..h * t {
                keep.extend(row.iter().map(|&m| m == 1));
            }
        }

        let mut hidden_states = vec![tape.reshape(x, &[b, t, d])?];
        let mut attention = Vec::with_capacity(self.blocks.len());
        let scale = 1.0 / (dh as f64).sqrt();
        for block in &self.blocks {
            let split = |tape: &mut Tape, v: Var, perm: &[usize], shape: &[usize]| -> Result<Var> {
                let v = tape.reshape(v, &[b, t, h, dh])?;
                let v = tape.permute(v, perm)?;
                tape.reshape(v, shape)
            };
            let q = tape.linear(x, p.var(block.query.0), p.var(block.query.1))?;
            let k = tape.linear(x, p.var(block.key.0), p.var(block.key.1))?;
            let v = tape.linear(x, p.var(block.value.0), p.var(block.value.1))?;
            let q = split(tape, q, &[0, 2, 1, 3], &[b * h, t, dh])?;
            let k_t = split(tape, k, &[0, 2, 3, 1], &[b * h, dh, t])?;
            let v = split(tape, v, &[0, 2, 1, 3], &[b * h, t, dh])?;

            let scores = tape.bmm(q, k_t)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.masked_softmax(scores, &keep)?;
            attention.push(probs);
            let ctx = tape.bmm(probs, v)?;
            let ctx = tape.reshape(ctx, &[b, h, t, dh])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[b * t, d])?;
            let attn_out = tape.linear(ctx, p.var(block.output.0), p.var(block.output.1))?;
            let res = tape.add(x, attn_out)?;
            x = tape.layer_norm(res, p.var(block.attn_norm.0), p.var(block.attn_norm.1))?;

            let f = tape.linear(x, p.var(block.ffn_in.0), p.var(block.ffn_in.1))?;
            let f = tape.gelu(f)?;
            let f = tape.linear(f, p.var(block.ffn_out.0), p.var(block.ffn_out.1))?;
            let res = tape.add(x, f)?;
            x = tape.layer_norm(res, p.var(block.ffn_norm.0), p.var(block.ffn_norm.1))?;
            hidden_states.push(tape.reshape(x, &[b, t, d])?);
        }
        let cls_final = tape.select(*hidden_states.last().unwrap(), 0)?;
        Ok(EncoderTrace {
            hidden_states,
            cls_final,
            attention,
        })
    }

    /// Forward pass without gradient bookkeeping.
    pub fn encode(&self, store: &ParamStore, batch: &TokenBatch) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false)?;
        let trace = self.forward(&mut tape, &p, batch)?;
        Ok(EncoderOutput {
            hidden_states: trace.hidden_states.iter().map(|&v| tape.value(v).clone()).collect(),
            cls_final: tape.value(trace.cls_final).clone(),
        })
    }
}
