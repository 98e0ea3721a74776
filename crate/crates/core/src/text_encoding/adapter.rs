//! Trainable text adapter: projection to the model width, a learned null
//! embedding, and a stack of pre-norm transformer encoder blocks.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TokenEmbeddings;
use crate::graph::{AttnPlan, Graph, Segment, Var};
use crate::nn::{normal_init, LayerNorm, Linear, ParamId, ParamStore, TransformerBlock};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Number of transformer blocks; 0 leaves a pure projection.
    pub depth: usize,
    pub heads: usize,
    /// Token positions kept per prompt; longer prompts are truncated.
    pub max_tokens: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { depth: 6, heads: 4, max_tokens: 128 }
    }
}

/// Adapted tokens of a batch of prompts, packed along rows.
#[derive(Clone, Debug)]
pub struct TextBatch {
    pub w: Var,
    pub segments: Vec<Segment>,
}

/// Adapted tokens of one prompt padded to `max_tokens` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TextConditioning<T> {
    pub w: Matrix<T>,
    /// `true` for real token positions.
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct TextAdapter {
    pub config: AdapterConfig,
    pub input: usize,
    pub width: usize,
    proj: Linear,
    null: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: Option<LayerNorm>,
}

impl TextAdapter {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        config: AdapterConfig,
        input: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let proj = Linear::new(store, &format!("{name}.proj"), input, width, true, rng);
        let null = store.add(format!("{name}.null"), normal_init(1, width, 0.02, rng));
        let blocks = (0..config.depth)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), width, config.heads, None, rng))
            .collect();
        let norm = (config.depth > 0).then(|| LayerNorm::new(store, &format!("{name}.norm"), width));
        Self { config, input, width, proj, null, blocks, norm }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prompts: &[TokenEmbeddings<T>],
    ) -> TextBatch {
        let keep: Vec<usize> = prompts.iter().map(|p| p.len().min(self.config.max_tokens).max(1)).collect();
        let segments = Segment::pack(keep.iter().copied());
        let rows = Segment::total(&segments);
        let mut data = Vec::with_capacity(rows * self.input);
        for (p, &k) in prompts.iter().zip(&keep) {
            assert_eq!(p.width(), self.input, "token width");
            data.extend_from_slice(&p.tokens.data()[..k * self.input]);
        }
        let x = g.constant(Matrix::from_vec(rows, self.input, data).expect("packed tokens"));
        let mut h = self.proj.forward(g, store, x);
        if prompts.iter().any(|p| p.null) {
            let mut keep_mask = Matrix::filled(rows, self.width, T::one());
            let mut indicator = Matrix::zeros(rows, 1);
            for (p, seg) in prompts.iter().zip(&segments) {
                if p.null {
                    for r in seg.range() {
                        keep_mask.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
                        indicator.set(r, 0, T::one());
                    }
                }
            }
            let keep_mask = g.constant(keep_mask);
            let indicator = g.constant(indicator);
            let null = g.param(store, self.null);
            let kept = g.mul(h, keep_mask);
            let nulls = g.matmul(indicator, null);
            h = g.add(kept, nulls);
        }
        if !self.blocks.is_empty() {
            let plan = Rc::new(AttnPlan::self_attention(&segments, self.config.heads));
            for b in &self.blocks {
                h = b.forward(g, store, h, plan.clone(), None);
            }
        }
        if let Some(n) = &self.norm {
            h = n.forward(g, store, h);
        }
        TextBatch { w: h, segments }
    }

    /// Adapted tokens of one prompt, zero-padded to `max_tokens` rows with a validity mask.
    pub fn adapt<T: Scalar>(&self, store: &ParamStore<T>, tokens: &TokenEmbeddings<T>) -> TextConditioning<T> {
        let mut g = Graph::new();
        let batch = self.forward(&mut g, store, std::slice::from_ref(tokens));
        let k = batch.segments[0].len;
        let adapted = g.take_value(batch.w);
        let mut w = Matrix::zeros(self.config.max_tokens, self.width);
        for r in 0..k {
            w.row_mut(r).copy_from_slice(adapted.row(r));
        }
        let mask = (0..self.config.max_tokens).map(|r| r < k).collect();
        TextConditioning { w, mask }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::text_encoding::ToyTextEncoder;

    fn build(depth: usize) -> (ParamStore<f64>, TextAdapter) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let config = AdapterConfig { depth, heads: 2, max_tokens: 6 };
        let a = TextAdapter::new(&mut store, "adapter", config, 64, 16, &mut rng);
        (store, a)
    }

    #[test]
    fn depth_zero_is_a_projection_plus_padding() {
        let (store, a) = build(0);
        let enc = ToyTextEncoder::default();
        let t = enc.encode::<f64>("someone jumps");
        let c = a.adapt(&store, &t);
        assert_eq!(c.mask, vec![true, true, false, false, false, false]);
        let expected = t.tokens.matmul(store.value(store.id("adapter.proj.weight").unwrap()));
        for r in 0..2 {
            for k in 0..16 {
                let b = store.value(store.id("adapter.proj.bias").unwrap()).get(0, k);
                assert!((c.w.get(r, k) - expected.get(r, k) - b).abs() < 1e-12);
            }
        }
        assert!(c.w.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prompts_in_a_batch_do_not_interact() {
        let (store, a) = build(2);
        let enc = ToyTextEncoder::default();
        let p = enc.encode::<f64>("a person waves with the left hand");
        let q = enc.encode::<f64>("someone squats");
        let alone = a.adapt(&store, &p);
        let mut g = Graph::new();
        let batch = a.forward(&mut g, &store, &[q, p]);
        let seg = batch.segments[1];
        let packed = g.value(batch.w).slice_rows(seg.start, seg.len);
        assert!(packed.max_abs_diff(&alone.w.slice_rows(0, seg.len)) < 1e-12);
        assert_eq!(seg.len, 6, "truncated to max_tokens");
    }

    #[test]
    fn null_prompt_uses_the_learned_embedding() {
        let (mut store, a) = build(0);
        let enc = ToyTextEncoder::default();
        let null = enc.encode::<f64>("");
        let before = a.adapt(&store, &null);
        let id = store.id("adapter.null").unwrap();
        store.value_mut(id).data_mut()[0] += 1.0;
        let after = a.adapt(&store, &null);
        assert!((after.w.get(0, 0) - before.w.get(0, 0) - 1.0).abs() < 1e-12);
        assert_eq!(after.mask.iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let (store, a) = build(1);
        let enc = ToyTextEncoder::default();
        let prompts = vec![enc.encode::<f64>("someone walks"), enc.encode::<f64>("")];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let report = crate::gradcheck::check_params(
            &store,
            |g, s| {
                let b = a.forward(g, s, &prompts);
                let sq = g.mul(b.w, b.w);
                g.mean(sq)
            },
            6,
            1e-5,
            &mut rng,
        );
        assert!(report.passes(1e-5), "{report:?}");
    }
}
