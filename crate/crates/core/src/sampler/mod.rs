//! Iterative masked sampling: cosine unmasking schedule, guided reverse-flow
//! integration per scheduled position, and decoding to motion.

#[cfg(test)]
mod tests;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::generator::{FlowHead, Generator};
use crate::graph::Segment;
use crate::motion_data::MotionSequence;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::text_encoding::TextSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub inference_steps: usize,
    pub denoise_steps: usize,
    pub cfg_scale: f64,
    /// Share of the step size re-noised after each Euler step; 0 gives the plain ODE path.
    pub churn: f64,
    /// Sample with the moving-average weights.
    pub use_ema: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { inference_steps: 16, denoise_steps: 32, cfg_scale: 6.0, churn: 0.1, use_ema: true }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inference_steps == 0 || self.denoise_steps == 0 {
            return Err(Error::Config("inference_steps and denoise_steps must be at least 1".into()));
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 0.0) {
            return Err(Error::Config(format!("cfg_scale must be non-negative, got {}", self.cfg_scale)));
        }
        if !(0.0..1.0).contains(&self.churn) {
            return Err(Error::Config(format!("churn must lie in [0, 1), got {}", self.churn)));
        }
        Ok(())
    }
}

/// Positions unmasked at each inference step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnmaskSchedule {
    pub steps: Vec<Vec<usize>>,
}

impl UnmaskSchedule {
    /// Number of clean positions after each step.
    pub fn cumulative(&self) -> Vec<usize> {
        self.steps
            .iter()
            .scan(0, |acc, s| {
                *acc += s.len();
                Some(*acc)
            })
            .collect()
    }
}

/// Clean-position counts after steps `1..=steps`: `ceil(l (1 - cos(pi s / S)) / 2)`.
pub fn schedule_counts(l: usize, steps: usize) -> Vec<usize> {
    let mut prev = 0;
    (1..=steps)
        .map(|s| {
            let frac = (1.0 - (std::f64::consts::PI * s as f64 / steps as f64).cos()) / 2.0;
            // Guard against round-off pushing an exact integer over the next ceiling.
            let c = if s == steps { l } else { ((l as f64 * frac - 1e-9).ceil().max(0.0) as usize).min(l) };
            prev = c.max(prev);
            prev
        })
        .collect()
}

/// Cosine count schedule with positions drawn uniformly from those still masked.
pub fn build_schedule(l: usize, steps: usize, rng: &mut impl Rng) -> UnmaskSchedule {
    assert!(l >= 1 && steps >= 1, "schedule needs at least one position and one step");
    let mut remaining: Vec<usize> = (0..l).collect();
    let mut done = 0;
    let steps = schedule_counts(l, steps)
        .into_iter()
        .map(|c| {
            let take = c - done;
            done = c;
            let mut picked: Vec<usize> = sample(rng, remaining.len(), take).into_iter().collect();
            picked.sort_unstable_by(|a, b| b.cmp(a));
            let mut chosen: Vec<usize> = picked.into_iter().map(|i| remaining.remove(i)).collect();
            chosen.sort_unstable();
            chosen
        })
        .collect();
    UnmaskSchedule { steps }
}

/// `v_null + s (v_cond - v_null)`.
pub fn cfg_velocity<T: Scalar>(v_cond: &Matrix<T>, v_null: &Matrix<T>, scale: f64) -> Matrix<T> {
    if scale == 1.0 {
        return v_cond.clone();
    }
    let s = T::lit(scale);
    v_cond.zip_map(v_null, |c, n| n + s * (c - n))
}

/// A velocity model over rows of noisy latents sharing one time.
pub trait VelocityField<T: Scalar> {
    fn velocity(&self, x: &Matrix<T>, t: T, z: &Matrix<T>) -> Matrix<T>;
}

/// The generator's flow head under one weight set.
pub struct HeadField<'a, T> {
    pub head: &'a FlowHead,
    pub store: &'a ParamStore<T>,
}

impl<T: Scalar> VelocityField<T> for HeadField<'_, T> {
    fn velocity(&self, x: &Matrix<T>, t: T, z: &Matrix<T>) -> Matrix<T> {
        self.head.velocity(self.store, x, &vec![t; x.rows()], z)
    }
}

fn standard_normal_rows<T: Scalar>(out: &mut Matrix<T>, owners: &[usize], rngs: &mut [ChaCha8Rng]) {
    for (r, &o) in owners.iter().enumerate() {
        for v in out.row_mut(r) {
            *v = T::lit(StandardNormal.sample(&mut rngs[o]));
        }
    }
}

/// Integrate rows from pure noise at `t = 1` to clean latents at `t = 0`.
/// Row `r` draws its noise from `rngs[owners[r]]`.
pub fn denoise_rows<T: Scalar>(
    field: &impl VelocityField<T>,
    z_cond: &Matrix<T>,
    z_null: &Matrix<T>,
    latent_dim: usize,
    config: &SampleConfig,
    owners: &[usize],
    rngs: &mut [ChaCha8Rng],
) -> Result<Matrix<T>> {
    let n = z_cond.rows();
    assert_eq!(owners.len(), n, "one owner per row");
    let mut m = Matrix::zeros(n, latent_dim);
    standard_normal_rows(&mut m, owners, rngs);
    let k = config.denoise_steps;
    let guided = config.cfg_scale != 1.0;
    let mut t = 1.0f64;
    for step in 0..k {
        let v_cond = field.velocity(&m, T::lit(t), z_cond);
        let v = if guided {
            let v_null = field.velocity(&m, T::lit(t), z_null);
            cfg_velocity(&v_cond, &v_null, config.cfg_scale)
        } else {
            v_cond
        };
        let t_next = 1.0 - (step + 1) as f64 / k as f64;
        let dt = T::lit(t_next - t);
        m = m.zip_map(&v, |x, v| x + dt * v);
        if step + 1 < k && config.churn > 0.0 {
            // Re-noise the clean estimate to a slightly higher time.
            let tn = T::lit(t_next);
            let clean = m.zip_map(&v, |x, v| x - tn * v);
            let t_up = t_next + config.churn * (t - t_next);
            let mut eps = Matrix::zeros(n, latent_dim);
            standard_normal_rows(&mut eps, owners, rngs);
            let (a, s) = (T::lit(1.0 - t_up), T::lit(t_up));
            m = clean.zip_map(&eps, |c, e| a * c + s * e);
            t = t_up;
        } else {
            t = t_next;
        }
        if let Some(r) = m.first_non_finite_row() {
            return Err(Error::Numerical(format!(
                "non-finite latent in row {r} at denoising step {step} (t = {t:.4})"
            )));
        }
    }
    Ok(m)
}

/// Denoise one batch of positions with a single noise stream.
pub fn denoise_positions<T: Scalar>(
    field: &impl VelocityField<T>,
    z_cond: &Matrix<T>,
    z_null: &Matrix<T>,
    latent_dim: usize,
    config: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Matrix<T>> {
    let owners = vec![0; z_cond.rows()];
    denoise_rows(field, z_cond, z_null, latent_dim, config, &owners, std::slice::from_mut(rng))
}

/// One sample to draw.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub frames: usize,
    pub seed: u64,
}

/// Latent sequences produced by the sampler, in autoencoder units, before decoding.
pub fn sample_latents<T: Scalar>(
    generator: &Generator<T>,
    text: &TextSource,
    requests: &[GenerationRequest],
    config: &SampleConfig,
) -> Result<Vec<Matrix<T>>> {
    config.validate()?;
    text.check_width(generator.text_width)?;
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let h = generator.downsample;
    let lengths: Vec<usize> = requests
        .iter()
        .map(|r| {
            if r.frames == 0 {
                return Err(Error::Invalid("requested motion length must be at least one frame".into()));
            }
            let l = r.frames.div_ceil(h);
            if l > generator.config.max_latents {
                return Err(Error::Invalid(format!(
                    "{} frames need {l} latents; the generator supports at most {} ({} frames)",
                    r.frames,
                    generator.config.max_latents,
                    generator.config.max_latents * h
                )));
            }
            Ok(l)
        })
        .collect::<Result<_>>()?;
    let store = generator.weights(config.use_ema);
    let field = HeadField { head: &generator.head, store };
    let d = generator.latent_dim;
    let segments = Segment::pack(lengths.iter().copied());
    let rows = Segment::total(&segments);
    let mut rngs: Vec<ChaCha8Rng> = requests.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
    let schedules: Vec<UnmaskSchedule> = lengths
        .iter()
        .zip(rngs.iter_mut())
        .map(|(&l, rng)| build_schedule(l, config.inference_steps, rng))
        .collect();
    let prompts: Vec<_> = requests.iter().map(|r| text.encode::<T>(&r.prompt)).collect();
    let nulls: Vec<_> = requests.iter().map(|_| text.encode::<T>("")).collect();

    let mask = generator.mask_latent(store).to_vec();
    let mut state = Matrix::zeros(rows, d);
    for r in 0..rows {
        state.row_mut(r).copy_from_slice(&mask);
    }
    let mut masked = vec![true; rows];
    for step in 0..config.inference_steps {
        let mut chosen = Vec::new();
        let mut owners = Vec::new();
        for (i, (seg, sched)) in segments.iter().zip(&schedules).enumerate() {
            for &p in &sched.steps[step] {
                chosen.push(seg.start + p);
                owners.push(i);
            }
        }
        if chosen.is_empty() {
            continue;
        }
        let z_cond = generator.condition(store, &state, &masked, &segments, &prompts)?.select_rows(&chosen);
        let z_null = if config.cfg_scale != 1.0 {
            generator.condition(store, &state, &masked, &segments, &nulls)?.select_rows(&chosen)
        } else {
            z_cond.clone()
        };
        let clean = denoise_rows(&field, &z_cond, &z_null, d, config, &owners, &mut rngs)?;
        for (k, &r) in chosen.iter().enumerate() {
            state.row_mut(r).copy_from_slice(clean.row(k));
            masked[r] = false;
        }
    }
    debug_assert!(masked.iter().all(|&m| !m));
    Ok(segments.iter().map(|s| generator.latent_norm.denormalize(&state.slice_rows(s.start, s.len))).collect())
}

/// Generate raw-unit motions for several prompts; each request has its own noise stream.
pub fn generate_batch<T: Scalar>(
    generator: &Generator<T>,
    autoencoder: &Autoencoder<T>,
    text: &TextSource,
    requests: &[GenerationRequest],
    config: &SampleConfig,
) -> Result<Vec<MotionSequence<T>>> {
    autoencoder.check_compatible(generator.latent_dim, generator.downsample)?;
    let latents = sample_latents(generator, text, requests, config)?;
    let decoded =
        autoencoder.decode_batch(&latents.iter().zip(requests).map(|(z, r)| (z, r.frames)).collect::<Vec<_>>())?;
    decoded
        .into_iter()
        .zip(requests)
        .map(|(frames, r)| {
            let mut m = MotionSequence::new(autoencoder.stats.denormalize(&frames)?, autoencoder.spec)?;
            m.prompts = vec![r.prompt.clone()];
            Ok(m)
        })
        .collect()
}

pub fn generate<T: Scalar>(
    generator: &Generator<T>,
    autoencoder: &Autoencoder<T>,
    text: &TextSource,
    prompt: &str,
    frames: usize,
    seed: u64,
    config: &SampleConfig,
) -> Result<MotionSequence<T>> {
    let request = GenerationRequest { prompt: prompt.to_string(), frames, seed };
    Ok(generate_batch(generator, autoencoder, text, &[request], config)?.remove(0))
}
