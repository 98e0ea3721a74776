//! Autoencoder training loop.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::losses::{filter_repetitive, kl_loss, label_windows, recon_terms, semantic_loss};
use super::{Autoencoder, AutoencoderConfig, Variant};
use crate::error::{Error, Result};
use crate::graph::{Graph, Segment};
use crate::motion_data::{pad_to_multiple, MotionSequence, NormalizationStats};
use crate::nn::Adam;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::text_encoding::TextSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Training crops are at most this many frames.
    pub window: usize,
    pub clip_norm: Option<f64>,
    /// Share of labeled sequences whose labels are used by the semantic loss.
    pub labeled_fraction: f64,
    pub log_every: usize,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 32, lr: 5e-5, window: 64, clip_norm: Some(1.0), labeled_fraction: 1.0, log_every: 100 }
    }
}

impl AeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.window == 0 {
            return Err(Error::Config("batch and window must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return Err(Error::Config("labeled_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeStepLog {
    pub step: usize,
    pub total: f64,
    pub feat: f64,
    pub joint: f64,
    pub vel: f64,
    pub kl: f64,
    pub sem: f64,
    /// Class-token positions that entered the semantic loss.
    pub sem_positions: usize,
    pub grad_norm: f64,
}

pub struct AeTrainOutcome<T> {
    /// Weights after the last finite update.
    pub model: Autoencoder<T>,
    pub log: Vec<AeStepLog>,
    /// Reason training stopped early on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

struct Crop<T> {
    frames: Matrix<T>,
    labels: Option<Vec<String>>,
}

fn crop<T: Scalar>(
    frames: &Matrix<T>,
    labels: Option<&Vec<String>>,
    window: usize,
    h: usize,
    rng: &mut impl Rng,
) -> Crop<T> {
    let n = frames.rows();
    let mut len = n.min(window.max(h));
    if len >= h {
        len -= len % h;
    }
    let start = rng.random_range(0..=n - len);
    Crop {
        frames: pad_to_multiple(&frames.slice_rows(start, len), h),
        labels: labels.map(|l| l[start..start + len].to_vec()),
    }
}

/// Train an autoencoder of the configured variant. Normalization statistics are computed from `corpus`.
pub fn train_autoencoder<T: Scalar>(
    corpus: &[MotionSequence<T>],
    config: AutoencoderConfig,
    train: &AeTrainConfig,
    text: &TextSource,
    seed: u64,
) -> Result<AeTrainOutcome<T>> {
    config.validate()?;
    train.validate()?;
    let first = corpus.first().ok_or_else(|| Error::Invalid("training corpus is empty".into()))?;
    let spec = first.spec;
    for m in corpus {
        m.validate()?;
        if m.spec != spec {
            return Err(Error::Incompatible("corpus mixes representations".into()));
        }
    }
    let sae = config.variant == Variant::Sae;
    if sae {
        text.check_width(config.text_width)?;
    }
    let stats = NormalizationStats::from_corpus(corpus)?;
    let mut model = Autoencoder::new(config.clone(), spec, stats, seed)?;
    let normalized: Vec<Matrix<T>> =
        corpus.iter().map(|m| model.stats.normalize(&m.frames)).collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ae7_0001);
    let mut labeled: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].labels.is_some()).collect();
    labeled.shuffle(&mut rng);
    labeled.truncate((train.labeled_fraction * labeled.len() as f64).ceil() as usize);
    let mut is_labeled = vec![false; corpus.len()];
    for &i in &labeled {
        is_labeled[i] = true;
    }
    let unlabeled: Vec<usize> = (0..corpus.len()).filter(|&i| !is_labeled[i]).collect();
    let all: Vec<usize> = (0..corpus.len()).collect();
    if sae && labeled.is_empty() {
        log::warn!("no labeled sequences; the semantic loss will never apply");
    }

    let h = config.downsample;
    let mut opt = Adam::new(&model.store, train.lr);
    opt.clip_norm = train.clip_norm;
    let mut cache: HashMap<String, Vec<T>> = HashMap::new();
    let mut log = Vec::with_capacity(train.steps);
    let mut diverged = None;

    for step in 0..train.steps {
        // Labeled and unlabeled batches alternate when only part of the corpus is labeled.
        let (pool, use_labels) = if !sae || labeled.is_empty() {
            (&all, false)
        } else if unlabeled.is_empty() || step % 2 == 0 {
            (&labeled, true)
        } else {
            (&unlabeled, false)
        };
        let crops: Vec<Crop<T>> = (0..train.batch)
            .map(|_| {
                let i = pool[rng.random_range(0..pool.len())];
                let labels = if use_labels { corpus[i].labels.as_ref() } else { None };
                crop(&normalized[i], labels, train.window, h, &mut rng)
            })
            .collect();
        let segments = Segment::pack(crops.iter().map(|c| c.frames.rows()));
        let target = Matrix::vstack(&crops.iter().map(|c| &c.frames).collect::<Vec<_>>())?;

        let mut g = Graph::new();
        let x = g.constant(target.clone());
        let (mean, log_var, lat_segs) = model.encode_graph(&mut g, x, &segments);
        let z = match log_var {
            Some(lv) => {
                let (r, c) = g.value(mean).shape();
                let eps = Matrix::from_fn(r, c, |_, _| T::lit(StandardNormal.sample(&mut rng)));
                let eps = g.constant(eps);
                let half = g.scale(lv, T::lit(0.5));
                let sd = g.exp(half);
                let noise = g.mul(sd, eps);
                g.add(mean, noise)
            }
            None => mean,
        };
        let (pred, _) = model.decode_graph(&mut g, z, &lat_segs);
        let terms = recon_terms(
            &mut g,
            pred,
            &target,
            &segments,
            &model.stats,
            &spec,
            config.lambda_joint,
            config.lambda_vel,
        );
        let mut total = terms.total;
        let mut kl_value = 0.0;
        if let Some(lv) = log_var {
            let kl = kl_loss(&mut g, mean, lv);
            kl_value = g.value(kl).item().as_f64();
            let w = g.scale(kl, T::lit(config.lambda_kl));
            total = g.add(total, w);
        }
        let (mut sem_value, mut sem_positions) = (0.0, 0);
        if use_labels {
            let projector = model.projector.expect("semantic variant has a projector");
            let mut windows = Matrix::zeros(Segment::total(&lat_segs), text.width());
            let mut valid = vec![false; windows.rows()];
            for (c, seg) in crops.iter().zip(&lat_segs) {
                let labels = c.labels.as_deref().unwrap_or(&[]);
                let (w, v) = label_windows(labels, seg.len, h, text, &mut cache);
                for r in 0..seg.len {
                    windows.row_mut(seg.start + r).copy_from_slice(w.row(r));
                    valid[seg.start + r] = v[r];
                }
            }
            let windows = g.constant(windows);
            let kappa = projector.forward(&mut g, &model.store, windows);
            let kept = filter_repetitive(g.value(kappa), &valid, &lat_segs, config.tau);
            let sem = semantic_loss(&mut g, mean, kappa, &kept);
            sem_positions = sem.used;
            if let Some(l) = sem.loss {
                sem_value = g.value(l).item().as_f64();
                let w = g.scale(l, T::lit(config.lambda_sem));
                total = g.add(total, w);
            }
        }

        let total_value = g.value(total).item().as_f64();
        if !total_value.is_finite() {
            diverged = Some(format!("non-finite loss at step {step}"));
            break;
        }
        let grads = g.backward(total);
        let finite = model.store.ids().filter_map(|id| grads.param(id)).all(Matrix::is_finite);
        if !finite {
            diverged = Some(format!("non-finite gradient at step {step}"));
            break;
        }
        let grad_norm = opt.step(&mut model.store, &grads);
        let v = |var| g.value(var).item().as_f64();
        let entry = AeStepLog {
            step,
            total: total_value,
            feat: v(terms.feat),
            joint: v(terms.joint),
            vel: terms.vel.map_or(0.0, v),
            kl: kl_value,
            sem: sem_value,
            sem_positions,
            grad_norm,
        };
        if train.log_every > 0 && (step % train.log_every == 0 || step + 1 == train.steps) {
            log::info!(
                "ae step {step}: total {:.5} feat {:.5} joint {:.5} vel {:.5} kl {:.4} sem {:.4}",
                entry.total,
                entry.feat,
                entry.joint,
                entry.vel,
                entry.kl,
                entry.sem
            );
        }
        log.push(entry);
    }
    Ok(AeTrainOutcome { model, log, diverged })
}
