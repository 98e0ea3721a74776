//! Reconstruction, KL and semantic-alignment losses, class tokens and the
//! repetitive-token filter.

use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;

use crate::graph::{GatherPlan, Graph, KinematicsPlan, Segment, Var};
use crate::motion_data::{MotionSequence, NormalizationStats, RepresentationSpec};
use crate::nn::{Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::text_encoding::TextSource;

/// Guard on vector norms inside cosine similarities.
pub const COSINE_EPS: f64 = 1e-8;

/// Loss terms on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ReconTerms {
    pub feat: Var,
    pub joint: Var,
    /// `None` when no sequence has two frames.
    pub vel: Option<Var>,
    pub total: Var,
}

/// Joint positions of packed normalized frames, denormalized on the tape.
fn joints_of<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    segments: &[Segment],
    stats: &NormalizationStats<T>,
    spec: &RepresentationSpec,
) -> Var {
    let std = g.constant(Matrix::row_vector(&stats.std));
    let mean = g.constant(Matrix::row_vector(&stats.mean));
    let raw = g.mul_row(x, std);
    let raw = g.add_row(raw, mean);
    let plan = KinematicsPlan { segments: segments.to_vec(), joints: spec.joints, fps: spec.fps };
    g.kinematics(raw, Rc::new(plan))
}

/// `L_feat + lambda_joint L_joint + lambda_vel L_vel` for packed normalized
/// predictions against packed normalized targets.
pub fn recon_terms<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Matrix<T>,
    segments: &[Segment],
    stats: &NormalizationStats<T>,
    spec: &RepresentationSpec,
    lambda_joint: f64,
    lambda_vel: f64,
) -> ReconTerms {
    let target = g.constant(target.clone());
    let feat = g.mse(pred, target);
    let pj = joints_of(g, pred, segments, stats, spec);
    let tj = joints_of(g, target, segments, stats, spec);
    let joint = g.mse(pj, tj);
    let (next, prev) = GatherPlan::successive(segments);
    let vel = (next.out_rows > 0).then(|| {
        let (next, prev) = (Rc::new(next), Rc::new(prev));
        let pn = g.gather(pj, next.clone());
        let pp = g.gather(pj, prev.clone());
        let pd = g.sub(pn, pp);
        let tn = g.gather(tj, next);
        let tp = g.gather(tj, prev);
        let td = g.sub(tn, tp);
        g.mse(pd, td)
    });
    let wj = g.scale(joint, T::lit(lambda_joint));
    let mut total = g.add(feat, wj);
    if let Some(v) = vel {
        let wv = g.scale(v, T::lit(lambda_vel));
        total = g.add(total, wv);
    }
    ReconTerms { feat, joint, vel, total }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconLoss {
    pub feat: f64,
    pub joint: f64,
    pub vel: f64,
    pub total: f64,
    /// Set when the sequence is too short for a velocity term.
    pub vel_skipped: bool,
}

/// Reconstruction loss between two normalized motions of equal shape.
pub fn recon_loss<T: Scalar>(
    x: &MotionSequence<T>,
    x_hat: &MotionSequence<T>,
    stats: &NormalizationStats<T>,
    lambda_joint: f64,
    lambda_vel: f64,
) -> crate::Result<ReconLoss> {
    if x.frames.shape() != x_hat.frames.shape() {
        return Err(crate::Error::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            x_hat.frames.shape(),
            x.frames.shape()
        )));
    }
    let mut g = Graph::new();
    let pred = g.constant(x_hat.frames.clone());
    let segs = [Segment::new(0, x.len())];
    let t = recon_terms(&mut g, pred, &x.frames, &segs, stats, &x.spec, lambda_joint, lambda_vel);
    let v = |var: Var| g.value(var).item().as_f64();
    Ok(ReconLoss {
        feat: v(t.feat),
        joint: v(t.joint),
        vel: t.vel.map_or(0.0, v),
        total: v(t.total),
        vel_skipped: t.vel.is_none(),
    })
}

/// `0.5 * mean(exp(log_var) + mean^2 - 1 - log_var)`.
pub fn kl_loss<T: Scalar>(g: &mut Graph<T>, mean: Var, log_var: Var) -> Var {
    let var = g.exp(log_var);
    let sq = g.mul(mean, mean);
    let a = g.add(var, sq);
    let b = g.sub(a, log_var);
    let c = g.add_scalar(b, -T::one());
    let m = g.mean(c);
    g.scale(m, T::lit(0.5))
}

/// Frame window `[h i - 4h, h i + h]` of latent `i`, clamped to `[0, frames - 1]`.
pub fn label_window(i: usize, downsample: usize, frames: usize) -> (usize, usize) {
    let last = frames.saturating_sub(1) as isize;
    let h = downsample as isize;
    let i = i as isize;
    let lo = (h * i - 4 * h).clamp(0, last) as usize;
    let hi = (h * i + h).clamp(0, last) as usize;
    (lo, hi)
}

/// Average sentence embedding of the distinct labels in each latent's window
/// (`latents x E`) and whether the window contained any label. Empty label
/// strings count as unlabeled frames.
pub fn label_windows<T: Scalar>(
    labels: &[String],
    latents: usize,
    downsample: usize,
    text: &TextSource,
    cache: &mut HashMap<String, Vec<T>>,
) -> (Matrix<T>, Vec<bool>) {
    let width = text.width();
    let mut out = Matrix::zeros(latents, width);
    let mut valid = vec![false; latents];
    if labels.is_empty() {
        return (out, valid);
    }
    for i in 0..latents {
        let (lo, hi) = label_window(i, downsample, labels.len());
        let distinct: BTreeSet<&str> = labels[lo..=hi].iter().map(String::as_str).filter(|l| !l.is_empty()).collect();
        if distinct.is_empty() {
            continue;
        }
        valid[i] = true;
        let inv = T::lit(1.0 / distinct.len() as f64);
        let row = out.row_mut(i);
        for l in distinct {
            let e = cache.entry(l.to_string()).or_insert_with(|| text.sentence_embedding(l));
            for (o, &v) in row.iter_mut().zip(e.iter()) {
                *o += v * inv;
            }
        }
    }
    (out, valid)
}

/// Projected class tokens (`latents x d`) and their validity.
pub fn class_tokens<T: Scalar>(
    labels: &[String],
    latents: usize,
    downsample: usize,
    text: &TextSource,
    projector: &Linear,
    store: &ParamStore<T>,
) -> (Matrix<T>, Vec<bool>) {
    let (avg, valid) = label_windows(labels, latents, downsample, text, &mut HashMap::new());
    let mut g = Graph::new();
    let x = g.constant(avg);
    let y = projector.forward(&mut g, store, x);
    (g.take_value(y), valid)
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt().max(COSINE_EPS);
    let nb = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt().max(COSINE_EPS);
    // Rounding can push parallel vectors just past 1.
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Row indices of packed class tokens kept by the repetition filter.
///
/// Within each sequence, valid positions are visited in temporal order; a
/// position is dropped when its cosine with the next valid position strictly
/// exceeds `tau`. The last valid position of every sequence is kept.
pub fn filter_repetitive<T: Scalar>(tokens: &Matrix<T>, valid: &[bool], segments: &[Segment], tau: f64) -> Vec<usize> {
    assert_eq!(tokens.rows(), valid.len(), "one validity flag per token");
    let mut kept = Vec::new();
    for seg in segments {
        let positions: Vec<usize> = seg.range().filter(|&r| valid[r]).collect();
        for (k, &r) in positions.iter().enumerate() {
            match positions.get(k + 1) {
                Some(&next) if cosine(tokens.row(r), tokens.row(next)) > tau => {}
                _ => kept.push(r),
            }
        }
    }
    kept
}

#[derive(Clone, Copy, Debug)]
pub struct SemanticLoss {
    /// `None` when no position survived (the loss is then taken as 0).
    pub loss: Option<Var>,
    pub used: usize,
    /// Kept positions dropped because a vector had (near) zero norm.
    pub skipped: usize,
}

/// `1 - mean_i cos(latent_i, token_i)` over the kept positions.
pub fn semantic_loss<T: Scalar>(g: &mut Graph<T>, latents: Var, tokens: Var, kept: &[usize]) -> SemanticLoss {
    let (mv, tv) = (g.value(latents), g.value(tokens));
    let norm = |m: &Matrix<T>, r: usize| m.row(r).iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let used: Vec<usize> =
        kept.iter().copied().filter(|&r| norm(mv, r) >= COSINE_EPS && norm(tv, r) >= COSINE_EPS).collect();
    let skipped = kept.len() - used.len();
    if used.is_empty() {
        return SemanticLoss { loss: None, used: 0, skipped };
    }
    let plan = Rc::new(GatherPlan::rows(mv.rows(), &used));
    let m = g.gather(latents, plan.clone());
    let t = g.gather(tokens, plan);
    let cos = g.row_cosine(m, t, T::lit(COSINE_EPS));
    let mean = g.mean(cos);
    let neg = g.scale(mean, -T::one());
    let loss = g.add_scalar(neg, T::one());
    SemanticLoss { loss: Some(loss), used: used.len(), skipped }
}
