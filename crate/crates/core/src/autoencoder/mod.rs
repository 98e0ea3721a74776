//! Causal temporal-convolution motion autoencoder with AE, VAE and SAE variants.
//!
//! Encoder: replicate-padded causal conv, SiLU, then one stage per factor of
//! two of downsampling (stride-2 causal conv plus a residual stack with
//! dilations 9, 3, 1), a closing causal conv and a linear head to the latent
//! width (twice that for mean and log-variance). The decoder mirrors it with
//! nearest-neighbour upsampling. Latent `i` only sees frames `<= h * i + h - 1`.

mod losses;
mod train;

pub use losses::{
    class_tokens, filter_repetitive, kl_loss, label_window, label_windows, recon_loss, recon_terms, semantic_loss, ReconLoss,
    ReconTerms, SemanticLoss, COSINE_EPS,
};
pub use train::{train_autoencoder, AeStepLog, AeTrainConfig, AeTrainOutcome};

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{GatherPlan, Graph, Padding, Segment, Var};
use crate::motion_data::{pad_to_multiple, MotionSequence, NormalizationStats, RepresentationSpec};
use crate::nn::{CausalConv, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CHECKPOINT_KIND: &str = "autoencoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ae,
    Vae,
    Sae,
}

impl Variant {
    pub fn is_variational(self) -> bool {
        !matches!(self, Variant::Ae)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Ok(Variant::Ae),
            "vae" => Ok(Variant::Vae),
            "sae" => Ok(Variant::Sae),
            other => Err(Error::Config(format!("unknown autoencoder variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub variant: Variant,
    pub hidden: usize,
    pub latent_dim: usize,
    /// Temporal downsampling factor, a power of two.
    pub downsample: usize,
    /// Dilations of the residual stack in every stage.
    pub dilations: Vec<usize>,
    pub lambda_joint: f64,
    pub lambda_vel: f64,
    pub lambda_kl: f64,
    pub lambda_sem: f64,
    /// Consecutive class tokens with cosine above this are treated as repetitive.
    pub tau: f64,
    /// Width of the frozen text embeddings used for class tokens.
    pub text_width: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ae,
            hidden: 128,
            latent_dim: 16,
            downsample: 4,
            dilations: vec![9, 3, 1],
            lambda_joint: 1.0,
            lambda_vel: 10.0,
            lambda_kl: 1e-5,
            lambda_sem: 0.001,
            tau: 0.995,
            text_width: crate::text_encoding::TOY_WIDTH,
        }
    }
}

impl AutoencoderConfig {
    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(Error::Config(format!("downsample must be a power of two >= 2, got {}", self.downsample)));
        }
        if self.hidden == 0 || self.latent_dim == 0 || self.text_width == 0 {
            return Err(Error::Config("hidden, latent_dim and text_width must be positive".into()));
        }
        if self.dilations.contains(&0) {
            return Err(Error::Config("dilations must be positive".into()));
        }
        let weights = [self.lambda_joint, self.lambda_vel, self.lambda_kl, self.lambda_sem];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !self.tau.is_finite() {
            return Err(Error::Config("tau must be finite".into()));
        }
        Ok(())
    }
}

/// Encoder output for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence<T> {
    /// Latents used downstream: the mean, or a reparameterized sample.
    pub latents: Matrix<T>,
    pub mean: Matrix<T>,
    pub log_var: Option<Matrix<T>>,
    pub downsample: usize,
    /// Frame count before padding.
    pub frames: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    conv: CausalConv,
    mix: CausalConv,
}

impl ResBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, dilation: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: CausalConv::same(store, &format!("{name}.conv"), width, width, 3, dilation, rng),
            mix: CausalConv::same(store, &format!("{name}.mix"), width, width, 1, 1, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, segs: &[Segment]) -> Var {
        let h = g.silu(x);
        let (h, _) = self.conv.forward(g, store, h, segs);
        let h = g.silu(h);
        let (h, _) = self.mix.forward(g, store, h, segs);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    down: CausalConv,
    res: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    res: Vec<ResBlock>,
    conv: CausalConv,
}

/// Model weights, normalization statistics and layer plan.
#[derive(Clone, Debug)]
pub struct Autoencoder<T> {
    pub config: AutoencoderConfig,
    pub spec: RepresentationSpec,
    pub stats: NormalizationStats<T>,
    pub store: ParamStore<T>,
    enc_in: CausalConv,
    enc_stages: Vec<EncoderStage>,
    enc_out: CausalConv,
    enc_head: Linear,
    dec_in: CausalConv,
    dec_stages: Vec<DecoderStage>,
    dec_mid: CausalConv,
    dec_out: CausalConv,
    /// Label-embedding projection to the latent width (SAE only).
    pub projector: Option<Linear>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: AutoencoderConfig,
    spec: RepresentationSpec,
    stats: NormalizationStats<f64>,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn new(
        config: AutoencoderConfig,
        spec: RepresentationSpec,
        stats: NormalizationStats<T>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        if stats.dim() != spec.dim() {
            return Err(Error::Shape(format!(
                "normalization stats have {} dims, representation has {}",
                stats.dim(),
                spec.dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (d_in, w, d) = (spec.dim(), config.hidden, config.latent_dim);
        let enc_in = CausalConv::new(&mut s, "enc.in", d_in, w, 3, 1, 1, 2, Padding::Replicate, true, &mut rng);
        let enc_stages = (0..config.stages())
            .map(|i| EncoderStage {
                down: CausalConv::new(&mut s, &format!("enc.stage{i}.down"), w, w, 4, 2, 1, 2, Padding::Zero, true, &mut rng),
                res: config
                    .dilations
                    .iter()
                    .enumerate()
                    .map(|(j, &dil)| ResBlock::new(&mut s, &format!("enc.stage{i}.res{j}"), w, dil, &mut rng))
                    .collect(),
            })
            .collect();
        let enc_out = CausalConv::same(&mut s, "enc.out", w, w, 3, 1, &mut rng);
        let head_width = if config.variant.is_variational() { 2 * d } else { d };
        let enc_head = Linear::new(&mut s, "enc.head", w, head_width, true, &mut rng);
        let dec_in = CausalConv::same(&mut s, "dec.in", d, w, 3, 1, &mut rng);
        let dec_stages = (0..config.stages())
            .map(|i| DecoderStage {
                res: config
                    .dilations
                    .iter()
                    .enumerate()
                    .map(|(j, &dil)| ResBlock::new(&mut s, &format!("dec.stage{i}.res{j}"), w, dil, &mut rng))
                    .collect(),
                conv: CausalConv::same(&mut s, &format!("dec.stage{i}.conv"), w, w, 3, 1, &mut rng),
            })
            .collect();
        let dec_mid = CausalConv::same(&mut s, "dec.mid", w, w, 3, 1, &mut rng);
        let dec_out = CausalConv::same(&mut s, "dec.out", w, d_in, 3, 1, &mut rng);
        let projector = matches!(config.variant, Variant::Sae)
            .then(|| Linear::new(&mut s, "projector", config.text_width, d, true, &mut rng));
        Ok(Self {
            config,
            spec,
            stats,
            store: s,
            enc_in,
            enc_stages,
            enc_out,
            enc_head,
            dec_in,
            dec_stages,
            dec_mid,
            dec_out,
            projector,
        })
    }

    /// The first encoder convolution (replicate-padded).
    pub fn input_conv(&self) -> &CausalConv {
        &self.enc_in
    }

    pub fn downsample(&self) -> usize {
        self.config.downsample
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Encoder on packed, already padded, normalized frames.
    /// Returns the latent means, the log-variances (variational variants) and the latent segments.
    pub fn encode_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        segments: &[Segment],
    ) -> (Var, Option<Var>, Vec<Segment>) {
        let st = &self.store;
        let (mut h, mut segs) = self.enc_in.forward(g, st, x, segments);
        h = g.silu(h);
        for stage in &self.enc_stages {
            (h, segs) = stage.down.forward(g, st, h, &segs);
            for r in &stage.res {
                h = r.forward(g, st, h, &segs);
            }
        }
        (h, _) = self.enc_out.forward(g, st, h, &segs);
        let out = self.enc_head.forward(g, st, h);
        let d = self.config.latent_dim;
        if self.config.variant.is_variational() {
            let mean = g.slice_cols(out, 0, d);
            let log_var = g.slice_cols(out, d, d);
            (mean, Some(log_var), segs)
        } else {
            (out, None, segs)
        }
    }

    /// Decoder on packed latents; output has `downsample` rows per latent.
    pub fn decode_graph(&self, g: &mut Graph<T>, z: Var, segments: &[Segment]) -> (Var, Vec<Segment>) {
        let st = &self.store;
        let (mut h, mut segs) = self.dec_in.forward(g, st, z, segments);
        h = g.silu(h);
        for stage in &self.dec_stages {
            for r in &stage.res {
                h = r.forward(g, st, h, &segs);
            }
            let (plan, up) = GatherPlan::upsample(&segs, 2);
            h = g.gather(h, Rc::new(plan));
            segs = up;
            (h, _) = stage.conv.forward(g, st, h, &segs);
        }
        (h, _) = self.dec_mid.forward(g, st, h, &segs);
        h = g.silu(h);
        let (out, _) = self.dec_out.forward(g, st, h, &segs);
        (out, segs)
    }

    fn check_frames(&self, frames: &Matrix<T>) -> Result<()> {
        if frames.cols() != self.spec.dim() {
            return Err(Error::Shape(format!(
                "frames are {} wide, autoencoder expects {}",
                frames.cols(),
                self.spec.dim()
            )));
        }
        if frames.rows() == 0 {
            return Err(Error::Invalid("cannot encode an empty sequence".into()));
        }
        if let Some(frame) = frames.first_non_finite_row() {
            return Err(Error::NonFiniteFrame { frame });
        }
        Ok(())
    }

    /// Encode several normalized sequences in one pass; latents are the means.
    pub fn encode_batch(&self, sequences: &[&Matrix<T>]) -> Result<Vec<LatentSequence<T>>> {
        if sequences.is_empty() {
            return Ok(Vec::new());
        }
        for s in sequences {
            self.check_frames(s)?;
        }
        let h = self.downsample();
        let padded: Vec<Matrix<T>> = sequences.iter().map(|s| pad_to_multiple(s, h)).collect();
        let segments = Segment::pack(padded.iter().map(Matrix::rows));
        let packed = Matrix::vstack(&padded.iter().collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let x = g.constant(packed);
        let (mean, log_var, segs) = self.encode_graph(&mut g, x, &segments);
        let mean = g.value(mean).clone();
        let log_var = log_var.map(|v| g.value(v).clone());
        Ok(segs
            .iter()
            .zip(sequences)
            .map(|(seg, s)| {
                let m = mean.slice_rows(seg.start, seg.len);
                LatentSequence {
                    latents: m.clone(),
                    mean: m,
                    log_var: log_var.as_ref().map(|v| v.slice_rows(seg.start, seg.len)),
                    downsample: h,
                    frames: s.rows(),
                }
            })
            .collect())
    }

    /// Deterministic encoding of normalized frames (latents are the means).
    pub fn encode(&self, frames: &Matrix<T>) -> Result<LatentSequence<T>> {
        Ok(self.encode_batch(&[frames])?.remove(0))
    }

    /// Encoding with a seeded reparameterized sample for the variational variants.
    pub fn encode_sampled(&self, frames: &Matrix<T>, seed: u64) -> Result<LatentSequence<T>> {
        let mut out = self.encode(frames)?;
        if let Some(lv) = &out.log_var {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            out.latents = reparameterize(&out.mean, lv, &mut rng);
        }
        Ok(out)
    }

    fn check_latents(&self, z: &Matrix<T>) -> Result<()> {
        if z.cols() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "latents are {} wide, autoencoder expects {}",
                z.cols(),
                self.latent_dim()
            )));
        }
        if !z.is_finite() {
            return Err(Error::Numerical("non-finite latent".into()));
        }
        Ok(())
    }

    /// Decode several latent sequences, truncating each to its frame count.
    pub fn decode_batch(&self, latents: &[(&Matrix<T>, usize)]) -> Result<Vec<Matrix<T>>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        let h = self.downsample();
        for (z, frames) in latents {
            self.check_latents(z)?;
            if *frames > z.rows() * h {
                return Err(Error::Shape(format!(
                    "{} latents decode to {} frames, {frames} requested",
                    z.rows(),
                    z.rows() * h
                )));
            }
        }
        let segments = Segment::pack(latents.iter().map(|(z, _)| z.rows()));
        let packed = Matrix::vstack(&latents.iter().map(|(z, _)| *z).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let z = g.constant(packed);
        let (out, segs) = self.decode_graph(&mut g, z, &segments);
        let out = g.value(out);
        Ok(segs
            .iter()
            .zip(latents)
            .map(|(seg, (_, frames))| out.slice_rows(seg.start, *frames))
            .collect())
    }

    /// Normalized frames from latents, truncated to `frames` rows.
    pub fn decode(&self, latents: &Matrix<T>, frames: usize) -> Result<Matrix<T>> {
        Ok(self.decode_batch(&[(latents, frames)])?.remove(0))
    }

    /// Raw-unit reconstructions of raw-unit motions through the latent means.
    pub fn reconstruct_batch(&self, motions: &[&MotionSequence<T>]) -> Result<Vec<MotionSequence<T>>> {
        let normalized: Vec<Matrix<T>> =
            motions.iter().map(|m| self.stats.normalize(&m.frames)).collect::<Result<_>>()?;
        let enc = self.encode_batch(&normalized.iter().collect::<Vec<_>>())?;
        let dec = self.decode_batch(&enc.iter().map(|e| (&e.latents, e.frames)).collect::<Vec<_>>())?;
        dec.iter()
            .zip(motions)
            .map(|(f, m)| Ok(m.with_frames(self.stats.denormalize(f)?)))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta { config: self.config.clone(), spec: self.spec, stats: self.stats.cast() };
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, &meta)?;
        ck.add_store("", &self.store);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = ck.metadata_as()?;
        let mut model = Self::new(meta.config, meta.spec, meta.stats.cast(), 0)?;
        ck.load_store("", &mut model.store)?;
        Ok(model)
    }

    /// Check that latents from this model fit a consumer expecting `latent_dim` and `downsample`.
    pub fn check_compatible(&self, latent_dim: usize, downsample: usize) -> Result<()> {
        if latent_dim != self.latent_dim() || downsample != self.downsample() {
            return Err(Error::Incompatible(format!(
                "autoencoder has d={}, h={}; expected d={latent_dim}, h={downsample}",
                self.latent_dim(),
                self.downsample()
            )));
        }
        Ok(())
    }
}

/// `mean + exp(log_var / 2) * eps` with standard normal `eps`.
pub fn reparameterize<T: Scalar>(mean: &Matrix<T>, log_var: &Matrix<T>, rng: &mut impl Rng) -> Matrix<T> {
    mean.zip_map(log_var, |m, lv| {
        let eps: f64 = StandardNormal.sample(rng);
        m + (lv * T::lit(0.5)).exp() * T::lit(eps)
    })
}
