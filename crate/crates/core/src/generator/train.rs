//! Generator training on frozen autoencoder latents.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{flow_loss, Generator, GeneratorConfig, LatentNorm};
use crate::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::graph::{GatherPlan, Graph, Segment};
use crate::motion_data::MotionSequence;
use crate::nn::{Adam, Ema};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::text_encoding::{TextSource, TokenEmbeddings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Learning rate after warmup.
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: Option<f64>,
    /// Independent (noise, time) draws per masked position and step.
    pub flow_repeats: usize,
    pub log_every: usize,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 32, lr: 8e-4, warmup_steps: 100, clip_norm: Some(1.0), flow_repeats: 4, log_every: 100 }
    }
}

impl GenTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.flow_repeats == 0 {
            return Err(Error::Config("batch and flow_repeats must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Linear warmup over `warmup` steps, then constant.
pub fn lr_at(step: usize, lr: f64, warmup: usize) -> f64 {
    if warmup == 0 {
        lr
    } else {
        lr * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenStepLog {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Masked positions in the batch.
    pub masked: usize,
    /// Sequences whose prompt was replaced by the null prompt.
    pub null_prompts: usize,
}

pub struct GenTrainOutcome<T> {
    /// Raw and moving-average weights after the last finite update.
    pub model: Generator<T>,
    pub log: Vec<GenStepLog>,
    pub diverged: Option<String>,
}

/// Rows entering the flow loss: the masked ones, `repeats` times over.
pub fn flow_rows(masked: &[bool], repeats: usize) -> Vec<usize> {
    (0..repeats).flat_map(|_| masked.iter().enumerate().filter(|(_, &f)| f).map(|(r, _)| r)).collect()
}

/// Latent means of every corpus sequence under the frozen autoencoder.
pub fn corpus_latents<T: Scalar>(corpus: &[MotionSequence<T>], ae: &Autoencoder<T>) -> Result<Vec<Matrix<T>>> {
    let mut out = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(64) {
        let normalized: Vec<Matrix<T>> = chunk.iter().map(|m| ae.stats.normalize(&m.frames)).collect::<Result<_>>()?;
        let enc = ae.encode_batch(&normalized.iter().collect::<Vec<_>>())?;
        out.extend(enc.into_iter().map(|e| e.mean));
    }
    Ok(out)
}

pub fn train_generator<T: Scalar>(
    corpus: &[MotionSequence<T>],
    ae: &Autoencoder<T>,
    config: GeneratorConfig,
    train: &GenTrainConfig,
    text: &TextSource,
    seed: u64,
) -> Result<GenTrainOutcome<T>> {
    train.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    for m in corpus {
        m.validate()?;
        if m.spec != ae.spec {
            return Err(Error::Incompatible("corpus representation differs from the autoencoder's".into()));
        }
    }
    let mut model = Generator::new(config, ae.latent_dim(), ae.downsample(), text.width(), seed)?;
    let mut latents = corpus_latents(corpus, ae)?;
    model.latent_norm = LatentNorm::fit(&latents)?;
    for m in &mut latents {
        *m = model.latent_norm.normalize(m);
    }
    let mut prompt_cache: HashMap<String, TokenEmbeddings<T>> = HashMap::new();
    for m in corpus {
        for p in &m.prompts {
            prompt_cache.entry(p.clone()).or_insert_with(|| text.encode(p));
        }
    }
    let null = text.encode::<T>("");
    if corpus.iter().all(|m| m.prompts.is_empty()) {
        log::warn!("no sequence has a prompt; the generator will be unconditional");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e_4e_0002);
    let mut opt = Adam::new(&model.store, train.lr);
    opt.clip_norm = train.clip_norm;
    let mut ema = Ema::new(&model.store, model.config.ema_decay);
    let max_l = model.config.max_latents;
    let d = model.latent_dim;
    let mut log = Vec::with_capacity(train.steps);
    let mut diverged = None;

    for step in 0..train.steps {
        let mut parts = Vec::with_capacity(train.batch);
        let mut flags = Vec::new();
        let mut prompts = Vec::with_capacity(train.batch);
        let mut null_prompts = 0;
        for _ in 0..train.batch {
            let i = rng.random_range(0..corpus.len());
            let full = &latents[i];
            let m = if full.rows() > max_l {
                full.slice_rows(rng.random_range(0..=full.rows() - max_l), max_l)
            } else {
                full.clone()
            };
            let prompts_i = &corpus[i].prompts;
            let dropped = rng.random::<f64>() < model.config.cfg_dropout;
            if dropped || prompts_i.is_empty() {
                null_prompts += 1;
                prompts.push(null.clone());
            } else {
                let p = &prompts_i[rng.random_range(0..prompts_i.len())];
                prompts.push(prompt_cache[p].clone());
            }
            let masked = model.mask_latents(&m, &mut rng);
            flags.extend(masked.flags());
            parts.push(m);
        }
        let segments = Segment::pack(parts.iter().map(Matrix::rows));
        let packed = Matrix::vstack(&parts.iter().collect::<Vec<_>>())?;
        let chosen = flow_rows(&flags, train.flow_repeats);
        let clean = packed.select_rows(&chosen);
        let eps = Matrix::from_fn(chosen.len(), d, |_, _| T::lit(StandardNormal.sample(&mut rng)));
        let t: Vec<T> = (0..chosen.len()).map(|_| T::lit(rng.random::<f64>())).collect();

        let mut g = Graph::new();
        let z = model.condition_graph(&mut g, &model.store, &packed, &flags, &segments, &prompts)?;
        let z = g.gather(z, Rc::new(GatherPlan::rows(packed.rows(), &chosen)));
        let loss = flow_loss(&mut g, &model.head, &model.store, z, &clean, &eps, &t);
        let loss_value = g.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            diverged = Some(format!("non-finite flow loss at step {step}"));
            break;
        }
        let grads = g.backward(loss);
        if !model.store.ids().filter_map(|id| grads.param(id)).all(Matrix::is_finite) {
            diverged = Some(format!("non-finite gradient at step {step}"));
            break;
        }
        opt.lr = lr_at(step, train.lr, train.warmup_steps);
        let grad_norm = opt.step(&mut model.store, &grads);
        ema.update(&model.store);
        let entry = GenStepLog {
            step,
            loss: loss_value,
            grad_norm,
            lr: opt.lr,
            masked: chosen.len() / train.flow_repeats,
            null_prompts,
        };
        if train.log_every > 0 && (step % train.log_every == 0 || step + 1 == train.steps) {
            log::info!("gen step {step}: flow loss {:.5} lr {:.2e} grad {:.3}", entry.loss, entry.lr, entry.grad_norm);
        }
        log.push(entry);
    }
    model.ema = ema.shadow;
    Ok(GenTrainOutcome { model, log, diverged })
}
