//! Masked auto-regressive transformer over motion latents with a
//! rectified-flow head per position.
//!
//! A training step masks a random subset of a latent sequence, runs the
//! transformer over the partially masked sequence with the prompt's adapted
//! tokens as cross-attention context, and regresses the flow velocity of the
//! clean latents at the masked positions.

mod flow;
mod train;

#[cfg(test)]
mod tests;

pub use flow::{flow_interpolate, flow_loss, flow_target, time_features, FlowHead, TIME_FEATURES};
pub use train::{corpus_latents, flow_rows, lr_at, train_generator, GenStepLog, GenTrainConfig, GenTrainOutcome};

use std::rc::Rc;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{AttnPlan, AttnSegment, GatherPlan, Graph, Segment, Var};
use crate::nn::{normal_init, LayerNorm, Linear, ParamId, ParamStore, TransformerBlock};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::text_encoding::{AdapterConfig, TextAdapter, TokenEmbeddings};

const CHECKPOINT_KIND: &str = "generator";

/// How the prompt reaches the transformer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Latents attend to every adapted text token.
    #[default]
    CrossAttention,
    /// The mean adapted token scales and shifts the stream before each block.
    Pooled,
}

impl FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_attention" | "cross" => Ok(Self::CrossAttention),
            "pooled" | "adaln" => Ok(Self::Pooled),
            _ => Err(Error::Config(format!("unknown conditioning {s:?} (expected cross_attention or pooled)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub layers: usize,
    pub heads: usize,
    /// Transformer width.
    pub width: usize,
    pub head_blocks: usize,
    pub head_width: usize,
    pub mask_ratio_min: f64,
    pub mask_ratio_max: f64,
    /// Probability of replacing a training prompt with the null prompt.
    pub cfg_dropout: f64,
    pub ema_decay: f64,
    /// Longest latent sequence the positional table covers.
    pub max_latents: usize,
    pub conditioning: Conditioning,
    pub adapter: AdapterConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            width: 128,
            head_blocks: 3,
            head_width: 256,
            mask_ratio_min: 0.7,
            mask_ratio_max: 1.0,
            cfg_dropout: 0.1,
            ema_decay: 0.9999,
            max_latents: 64,
            conditioning: Conditioning::CrossAttention,
            adapter: AdapterConfig { depth: 2, heads: 4, max_tokens: 128 },
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.adapter.depth > 0 && (self.adapter.heads == 0 || !self.width.is_multiple_of(self.adapter.heads)) {
            return bad(format!("width {} must be divisible by adapter heads {}", self.width, self.adapter.heads));
        }
        if self.adapter.max_tokens == 0 {
            return bad("adapter max_tokens must be positive".into());
        }
        if self.layers == 0 || self.head_width == 0 || self.max_latents == 0 {
            return bad("layers, head_width and max_latents must be positive".into());
        }
        if !(0.0..1.0).contains(&self.cfg_dropout) {
            return bad(format!("cfg_dropout must lie in [0, 1), got {}", self.cfg_dropout));
        }
        if !(self.mask_ratio_min > 0.0 && self.mask_ratio_min <= self.mask_ratio_max && self.mask_ratio_max <= 1.0) {
            return bad(format!(
                "mask ratio range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.mask_ratio_min, self.mask_ratio_max
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        Ok(())
    }
}

/// `ceil(ratio * l)`, at least one and at most `l`.
pub fn mask_count(ratio: f64, l: usize) -> usize {
    ((ratio * l as f64).ceil() as usize).clamp(1, l)
}

/// A latent sequence with some positions replaced by the mask latent.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLatents<T> {
    pub latents: Matrix<T>,
    /// Masked positions in increasing order.
    pub masked: Vec<usize>,
}

impl<T: Scalar> MaskedLatents<T> {
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.latents.rows()];
        for &i in &self.masked {
            f[i] = true;
        }
        f
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: GeneratorConfig,
    latent_dim: usize,
    downsample: usize,
    text_width: usize,
    #[serde(default)]
    latent_norm: Option<LatentNorm>,
}

/// Per-channel standardization of autoencoder latents; the generator models
/// `(z - shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LatentNorm {
    pub fn identity(dim: usize) -> Self {
        Self { shift: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Mean and standard deviation of every channel over all rows; degenerate channels keep scale 1.
    pub fn fit<T: Scalar>(latents: &[Matrix<T>]) -> Result<Self> {
        let dim = latents.first().map(Matrix::cols).ok_or_else(|| Error::Invalid("no latents to fit".into()))?;
        let (mut sum, mut sq, mut n) = (vec![0.0; dim], vec![0.0; dim], 0usize);
        for m in latents {
            if m.cols() != dim {
                return Err(Error::Shape(format!("latent widths {dim} and {}", m.cols())));
            }
            for r in 0..m.rows() {
                for (c, v) in m.row(r).iter().enumerate() {
                    let v = v.as_f64();
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += m.rows();
        }
        if n == 0 {
            return Err(Error::Invalid("no latents to fit".into()));
        }
        let shift: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let scale = sq
            .iter()
            .zip(&shift)
            .map(|(q, m)| {
                let sd = (q / n as f64 - m * m).max(0.0).sqrt();
                if sd.is_finite() && sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { shift, scale })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.shift.len() != dim || self.scale.len() != dim {
            return Err(Error::Shape(format!("latent normalization covers {} channels, expected {dim}", self.shift.len())));
        }
        if self.shift.iter().any(|v| !v.is_finite()) || self.scale.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Format("latent normalization must be finite with positive scales".into()));
        }
        Ok(())
    }

    pub fn normalize<T: Scalar>(&self, z: &Matrix<T>) -> Matrix<T> {
        Matrix::from_fn(z.rows(), z.cols(), |r, c| T::lit((z.get(r, c).as_f64() - self.shift[c]) / self.scale[c]))
    }

    pub fn denormalize<T: Scalar>(&self, z: &Matrix<T>) -> Matrix<T> {
        Matrix::from_fn(z.rows(), z.cols(), |r, c| T::lit(z.get(r, c).as_f64() * self.scale[c] + self.shift[c]))
    }
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub latent_dim: usize,
    /// Frames per latent of the autoencoder this generator was trained against.
    pub downsample: usize,
    pub text_width: usize,
    pub latent_norm: LatentNorm,
    pub store: ParamStore<T>,
    /// Moving average of `store`, used for sampling by default.
    pub ema: ParamStore<T>,
    embed: Linear,
    positions: ParamId,
    mask: ParamId,
    adapter: TextAdapter,
    blocks: Vec<TransformerBlock>,
    film: Vec<Linear>,
    norm: LayerNorm,
    pub head: FlowHead,
}

impl<T: Scalar> Generator<T> {
    pub fn new(
        config: GeneratorConfig,
        latent_dim: usize,
        downsample: usize,
        text_width: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if latent_dim == 0 || downsample == 0 || text_width == 0 {
            return Err(Error::Config("latent_dim, downsample and text_width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.width;
        let embed = Linear::new(&mut store, "embed", latent_dim, w, true, &mut rng);
        let positions = store.add("positions", normal_init(config.max_latents, w, 0.02, &mut rng));
        let mask = store.add("mask", normal_init(1, latent_dim, 0.02, &mut rng));
        let adapter = TextAdapter::new(&mut store, "adapter", config.adapter.clone(), text_width, w, &mut rng);
        let cross = config.conditioning == Conditioning::CrossAttention;
        let blocks = (0..config.layers)
            .map(|i| TransformerBlock::new(&mut store, &format!("block{i}"), w, config.heads, cross.then_some(w), &mut rng))
            .collect();
        let film = if cross {
            Vec::new()
        } else {
            (0..config.layers).map(|i| Linear::zeros(&mut store, &format!("film{i}"), w, 2 * w)).collect()
        };
        let norm = LayerNorm::new(&mut store, "norm", w);
        let head = FlowHead::new(&mut store, "head", latent_dim, w, config.head_width, config.head_blocks, &mut rng);
        let ema = store.clone();
        Ok(Self {
            config,
            latent_dim,
            downsample,
            text_width,
            latent_norm: LatentNorm::identity(latent_dim),
            store,
            ema,
            embed,
            positions,
            mask,
            adapter,
            blocks,
            film,
            norm,
            head,
        })
    }

    /// Parameters used for sampling.
    pub fn weights(&self, use_ema: bool) -> &ParamStore<T> {
        if use_ema {
            &self.ema
        } else {
            &self.store
        }
    }

    pub fn mask_latent<'a>(&self, store: &'a ParamStore<T>) -> &'a [T] {
        store.value(self.mask).data()
    }

    /// Draw a masking ratio and replace `ceil(r l)` uniformly chosen positions by the mask latent.
    pub fn mask_latents(&self, m: &Matrix<T>, rng: &mut impl Rng) -> MaskedLatents<T> {
        let ratio = if self.config.mask_ratio_max > self.config.mask_ratio_min {
            rng.random_range(self.config.mask_ratio_min..=self.config.mask_ratio_max)
        } else {
            self.config.mask_ratio_min
        };
        self.mask_with_ratio(m, ratio, rng)
    }

    pub fn mask_with_ratio(&self, m: &Matrix<T>, ratio: f64, rng: &mut impl Rng) -> MaskedLatents<T> {
        let l = m.rows();
        assert!(l >= 1, "cannot mask an empty sequence");
        let mut masked = sample(rng, l, mask_count(ratio, l)).into_vec();
        masked.sort_unstable();
        let mut latents = m.clone();
        let token = self.mask_latent(&self.store).to_vec();
        for &i in &masked {
            latents.row_mut(i).copy_from_slice(&token);
        }
        MaskedLatents { latents, masked }
    }

    fn check_lengths(&self, segments: &[Segment]) -> Result<()> {
        match segments.iter().find(|s| s.len > self.config.max_latents || s.len == 0) {
            Some(s) => Err(Error::Shape(format!(
                "{} latents do not fit the generator's 1..={} positions",
                s.len, self.config.max_latents
            ))),
            None => Ok(()),
        }
    }

    /// Transformer outputs `z` (rows x width) for packed latents, where rows
    /// flagged in `masked` are replaced by the mask latent. One prompt per segment.
    pub fn condition_graph(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        latents: &Matrix<T>,
        masked: &[bool],
        segments: &[Segment],
        prompts: &[TokenEmbeddings<T>],
    ) -> Result<Var> {
        self.check_lengths(segments)?;
        let rows = Segment::total(segments);
        if latents.shape() != (rows, self.latent_dim) || masked.len() != rows || prompts.len() != segments.len() {
            return Err(Error::Shape(format!(
                "latents {:?} with {} flags and {} prompts for {} rows in {} sequences of width {}",
                latents.shape(),
                masked.len(),
                prompts.len(),
                rows,
                segments.len(),
                self.latent_dim
            )));
        }
        for p in prompts {
            if p.width() != self.text_width {
                return Err(Error::Incompatible(format!(
                    "prompt embeddings are {} wide, generator expects {}",
                    p.width(),
                    self.text_width
                )));
            }
        }
        let mut x = latents.clone();
        let mut indicator = Matrix::zeros(rows, 1);
        for (r, &m) in masked.iter().enumerate() {
            if m {
                x.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
                indicator.set(r, 0, T::one());
            }
        }
        let x = g.constant(x);
        let x = if masked.iter().any(|&m| m) {
            let ind = g.constant(indicator);
            let token = g.param(store, self.mask);
            let tokens = g.matmul(ind, token);
            g.add(x, tokens)
        } else {
            x
        };
        let mut h = self.embed.forward(g, store, x);
        let pos_rows: Vec<usize> = segments.iter().flat_map(|s| 0..s.len).collect();
        let table = g.param(store, self.positions);
        let pos = g.gather(table, Rc::new(GatherPlan::rows(self.config.max_latents, &pos_rows)));
        h = g.add(h, pos);

        let text = self.adapter.forward(g, store, prompts);
        let self_plan = Rc::new(AttnPlan::self_attention(segments, self.config.heads));
        match self.config.conditioning {
            Conditioning::CrossAttention => {
                let cross = Rc::new(AttnPlan {
                    heads: self.config.heads,
                    segments: segments
                        .iter()
                        .zip(&text.segments)
                        .map(|(s, t)| AttnSegment { queries: s.range(), keys: t.range(), key_mask: None })
                        .collect(),
                });
                for b in &self.blocks {
                    h = b.forward(g, store, h, self_plan.clone(), Some((text.w, cross.clone())));
                }
            }
            Conditioning::Pooled => {
                let pooled = g.segment_mean(text.w, Rc::new(text.segments.clone()));
                let owner: Vec<usize> = segments.iter().enumerate().flat_map(|(i, s)| std::iter::repeat_n(i, s.len)).collect();
                let spread = Rc::new(GatherPlan::rows(segments.len(), &owner));
                let w = self.config.width;
                for (b, film) in self.blocks.iter().zip(&self.film) {
                    let m = film.forward(g, store, pooled);
                    let m = g.gather(m, spread.clone());
                    let scale = g.slice_cols(m, 0, w);
                    let shift = g.slice_cols(m, w, w);
                    let hs = g.mul(h, scale);
                    h = g.add(h, hs);
                    h = g.add(h, shift);
                    h = b.forward(g, store, h, self_plan.clone(), None);
                }
            }
        }
        Ok(self.norm.forward(g, store, h))
    }

    /// [`Self::condition_graph`] evaluated without keeping the tape.
    pub fn condition(
        &self,
        store: &ParamStore<T>,
        latents: &Matrix<T>,
        masked: &[bool],
        segments: &[Segment],
        prompts: &[TokenEmbeddings<T>],
    ) -> Result<Matrix<T>> {
        let mut g = Graph::new();
        let z = self.condition_graph(&mut g, store, latents, masked, segments, prompts)?;
        Ok(g.take_value(z))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            latent_dim: self.latent_dim,
            downsample: self.downsample,
            text_width: self.text_width,
            latent_norm: Some(self.latent_norm.clone()),
        };
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, &meta)?;
        ck.add_store("raw.", &self.store);
        ck.add_store("ema.", &self.ema);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = ck.metadata_as()?;
        let mut model = Self::new(meta.config, meta.latent_dim, meta.downsample, meta.text_width, 0)?;
        ck.load_store("raw.", &mut model.store)?;
        ck.load_store("ema.", &mut model.ema)?;
        if let Some(norm) = meta.latent_norm {
            norm.validate(model.latent_dim)?;
            model.latent_norm = norm;
        }
        Ok(model)
    }
}
