use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

/// Additive attention pooling: `score_t = uᵀ tanh(W h_t + b)`, weights are
/// the masked softmax of the scores and the context is `Σ_t w_t h_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionPool {
    pub weight: ParamId,
    pub bias: ParamId,
    pub context: ParamId,
}

impl AttentionPool {
    pub fn init(store: &mut ParamStore, rng: &mut SeededRng, name: &str, d: usize) -> Self {
        Self {
            weight: store.normal(format!("{name}.weight"), &[d, d], rng),
            bias: store.zeros(format!("{name}.bias"), &[d]),
            context: store.normal(format!("{name}.context"), &[d, 1], rng),
        }
    }

    /// Pools `tokens` of shape `[b, t, d]`. `keep` has `b·t` entries.
    /// Returns `(context [b, d], weights [b, t])`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, tokens: Var, keep: &[bool]) -> Result<(Var, Var)> {
        let (b, t, d) = match tape.shape(tokens) {
            [b, t, d] => (*b, *t, *d),
            s => return Err(Error::shape("attention_pool", s, &[0, 0, 0])),
        };
        if keep.len() != b * t {
            return Err(Error::shape("attention_pool mask", &[b, t], &[keep.len()]));
        }
        let flat = tape.reshape(tokens, &[b * t, d])?;
        let proj = tape.linear(flat, p.var(self.weight), p.var(self.bias))?;
        let proj = tape.tanh(proj)?;
        let scores = tape.matmul(proj, p.var(self.context))?;
        let scores = tape.reshape(scores, &[b, t])?;
        let weights = tape.masked_softmax(scores, keep)?;
        let w = tape.reshape(weights, &[b, 1, t])?;
        let ctx = tape.bmm(w, tokens)?;
        let ctx = tape.reshape(ctx, &[b, d])?;
        Ok((ctx, weights))
    }
}

/// Value-level [`AttentionPool::forward`] with the pool's parameters read
/// from `store`.
pub fn attention_pool(
    pool: &AttentionPool,
    store: &ParamStore,
    tokens: &Tensor,
    padding_mask: &[u8],
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false)?;
    let x = tape.constant(tokens.clone())?;
    let keep: Vec<bool> = padding_mask.iter().map(|&m| m == 1).collect();
    let (ctx, w) = pool.forward(&mut tape, &p, x, &keep)?;
    Ok((tape.value(ctx).clone(), tape.value(w).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn setup(d: usize, seed: u64) -> (ParamStore, AttentionPool) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let pool = AttentionPool::init(&mut store, &mut rng, "pool", d);
        // Larger values than the initializer so the scores are far from uniform.
        for v in store.values_mut() {
            for x in v.data_mut() {
                *x = 0.5 * rng.normal();
            }
        }
        (store, pool)
    }

    fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn single_token_returns_it_exactly() {
        let (store, pool) = setup(4, 1);
        let h = random(&[1, 3, 4], &mut SeededRng::new(2));
        let (ctx, w) = attention_pool(&pool, &store, &h, &[1, 0, 0]).unwrap();
        assert_eq!(w.data(), &[1.0, 0.0, 0.0]);
        assert_eq!(ctx.data(), &h.data()[..4]);
    }

    #[test]
    fn zero_context_vector_averages() {
        let (mut store, pool) = setup(4, 1);
        *store.get_mut(pool.context) = Tensor::zeros(&[4, 1]);
        let h = random(&[1, 3, 4], &mut SeededRng::new(3));
        let (ctx, w) = attention_pool(&pool, &store, &h, &[1, 1, 0]).unwrap();
        assert_eq!(w.data(), &[0.5, 0.5, 0.0]);
        for i in 0..4 {
            let mean = (h.data()[i] + h.data()[4 + i]) / 2.0;
            assert!((ctx.data()[i] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let d = 4;
        let (store, pool) = setup(d, 11);
        let h = random(&[1, 3, d], &mut SeededRng::new(12));
        let (ctx, w) = attention_pool(&pool, &store, &h, &[1, 1, 1]).unwrap();

        let (wm, bv, uv) = (store.get(pool.weight), store.get(pool.bias), store.get(pool.context));
        let mut scores = [0.0; 3];
        for (t, s) in scores.iter_mut().enumerate() {
            for a in 0..d {
                let mut z = bv.data()[a];
                for k in 0..d {
                    z += h.data()[t * d + k] * wm.data()[k * d + a];
                }
                *s += uv.data()[a] * z.tanh();
            }
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = e.iter().sum();
        for (t, et) in e.iter().enumerate() {
            assert!((w.data()[t] - et / total).abs() < 1e-12);
        }
        for k in 0..d {
            let want: f64 = (0..3).map(|t| e[t] / total * h.data()[t * d + k]).sum();
            assert!((ctx.data()[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let (store, pool) = setup(2, 1);
        let h = Tensor::zeros(&[1, 2, 2]);
        assert!(attention_pool(&pool, &store, &h, &[0, 0]).is_err());
    }

    proptest! {
        #[test]
        fn context_stays_in_the_coordinate_hull(
            seed in 0u64..500,
            len in 1usize..6,
            pad in 0usize..3,
        ) {
            let d = 3;
            let (store, pool) = setup(d, seed);
            let t = len + pad;
            let h = random(&[1, t, d], &mut SeededRng::new(seed + 1000));
            let mask: Vec<u8> = (0..t).map(|i| u8::from(i < len)).collect();
            let (ctx, w) = attention_pool(&pool, &store, &h, &mask).unwrap();
            let total: f64 = w.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for i in len..t {
                prop_assert_eq!(w.data()[i], 0.0);
            }
            for k in 0..d {
                let col: Vec<f64> = (0..len).map(|i| h.data()[i * d + k]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(ctx.data()[k] >= lo - 1e-12 && ctx.data()[k] <= hi + 1e-12);
            }
        }
    }
}
