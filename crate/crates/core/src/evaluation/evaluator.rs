//! Contrastive text-motion feature extractor used by every metric.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Segment, Var};
use crate::motion_data::{MotionSequence, NormalizationStats, RepresentationSpec};
use crate::nn::{Adam, CausalConv, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::text_encoding::{TextSource, TokenEmbeddings};

const CHECKPOINT_KIND: &str = "evaluator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorConfig {
    /// Width of the shared feature space.
    pub feature_dim: usize,
    pub hidden: usize,
    /// Dilations of the stacked temporal convolutions (kernel 3).
    pub dilations: Vec<usize>,
    pub initial_temperature: f64,
    /// Pairs whose prompts' sentence embeddings are at least this similar
    /// are not used as negatives of each other.
    pub negative_filter: Option<f64>,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self { feature_dim: 32, hidden: 64, dilations: vec![1, 2, 4], initial_temperature: 0.1, negative_filter: Some(0.8) }
    }
}

impl EvaluatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Config("feature_dim, hidden and every dilation must be positive".into()));
        }
        if !(self.initial_temperature.is_finite() && self.initial_temperature > 0.0) {
            return Err(Error::Config("initial_temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub log_every: usize,
}

impl Default for EvalTrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch: 64, lr: 1e-3, log_every: 100 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: EvaluatorConfig,
    spec: RepresentationSpec,
    stats: NormalizationStats<f64>,
    text_width: usize,
}

/// Motion encoder (temporal convolutions, mean pooling, projection) and text
/// encoder (token MLP, mean pooling, projection) into one feature space, with
/// a learned log inverse temperature.
#[derive(Clone, Debug)]
pub struct Evaluator<T> {
    pub config: EvaluatorConfig,
    pub spec: RepresentationSpec,
    pub stats: NormalizationStats<T>,
    pub text_width: usize,
    pub store: ParamStore<T>,
    convs: Vec<CausalConv>,
    motion_out: Linear,
    token: Linear,
    text_out: Linear,
    log_scale: ParamId,
}

impl<T: Scalar> Evaluator<T> {
    pub fn new(
        config: EvaluatorConfig,
        spec: RepresentationSpec,
        stats: NormalizationStats<T>,
        text_width: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if stats.dim() != spec.dim() {
            return Err(Error::Shape(format!("stats cover {} features, representation has {}", stats.dim(), spec.dim())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut input = spec.dim();
        let convs = config
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let c = CausalConv::same(&mut store, &format!("motion.conv{i}"), input, config.hidden, 3, d, &mut rng);
                input = config.hidden;
                c
            })
            .collect();
        let motion_out = Linear::new(&mut store, "motion.out", config.hidden, config.feature_dim, true, &mut rng);
        let token = Linear::new(&mut store, "text.token", text_width, config.hidden, true, &mut rng);
        let text_out = Linear::new(&mut store, "text.out", config.hidden, config.feature_dim, true, &mut rng);
        let log_scale = store.add("log_scale", Matrix::scalar(T::lit((1.0 / config.initial_temperature).ln())));
        Ok(Self { config, spec, stats, text_width, store, convs, motion_out, token, text_out, log_scale })
    }

    /// Raw features of packed normalized frames, one row per segment.
    pub fn motion_graph(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, segments: &[Segment]) -> Var {
        let mut h = x;
        for c in &self.convs {
            let (y, _) = c.forward(g, store, h, segments);
            h = g.silu(y);
        }
        let pooled = g.segment_mean(h, Rc::new(segments.to_vec()));
        self.motion_out.forward(g, store, pooled)
    }

    /// Raw features of prompts, one row per prompt.
    pub fn text_graph(&self, g: &mut Graph<T>, store: &ParamStore<T>, prompts: &[TokenEmbeddings<T>]) -> Var {
        let segments = Segment::pack(prompts.iter().map(|p| p.len()));
        let parts: Vec<&Matrix<T>> = prompts.iter().map(|p| &p.tokens).collect();
        let x = g.constant(Matrix::vstack(&parts).expect("prompt tokens share a width"));
        let h = self.token.forward(g, store, x);
        let h = g.silu(h);
        let pooled = g.segment_mean(h, Rc::new(segments));
        self.text_out.forward(g, store, pooled)
    }

    fn check_motion(&self, m: &MotionSequence<T>) -> Result<()> {
        if m.spec != self.spec {
            return Err(Error::Incompatible("motion representation differs from the evaluator's".into()));
        }
        m.validate()
    }

    /// Raw (unnormalized) features of raw-unit motions, `n x F`.
    pub fn motion_features(&self, motions: &[&MotionSequence<T>]) -> Result<Matrix<f64>> {
        let mut out = Matrix::zeros(motions.len(), self.config.feature_dim);
        let mut row = 0;
        for chunk in motions.chunks(128) {
            let normalized: Vec<Matrix<T>> = chunk
                .iter()
                .map(|m| {
                    self.check_motion(m)?;
                    self.stats.normalize(&m.frames)
                })
                .collect::<Result<_>>()?;
            let segments = Segment::pack(normalized.iter().map(Matrix::rows));
            let mut g = Graph::new();
            let x = g.constant(Matrix::vstack(&normalized.iter().collect::<Vec<_>>())?);
            let f = self.motion_graph(&mut g, &self.store, x, &segments);
            let f = g.value(f);
            for r in 0..f.rows() {
                for (o, v) in out.row_mut(row).iter_mut().zip(f.row(r)) {
                    *o = v.as_f64();
                }
                row += 1;
            }
        }
        Ok(out)
    }

    /// Raw features of prompts, `n x F`.
    pub fn text_features(&self, text: &TextSource, prompts: &[&str]) -> Result<Matrix<f64>> {
        text.check_width(self.text_width)?;
        let mut cache: HashMap<&str, TokenEmbeddings<T>> = HashMap::new();
        let mut out = Matrix::zeros(prompts.len(), self.config.feature_dim);
        let mut row = 0;
        for chunk in prompts.chunks(256) {
            let tokens: Vec<TokenEmbeddings<T>> =
                chunk.iter().map(|p| cache.entry(p).or_insert_with(|| text.encode(p)).clone()).collect();
            let mut g = Graph::new();
            let f = self.text_graph(&mut g, &self.store, &tokens);
            let f = g.value(f);
            for r in 0..f.rows() {
                for (o, v) in out.row_mut(row).iter_mut().zip(f.row(r)) {
                    *o = v.as_f64();
                }
                row += 1;
            }
        }
        Ok(out)
    }

    /// Current temperature `exp(-log_scale)`.
    pub fn temperature(&self) -> f64 {
        (-self.store.value(self.log_scale).item().as_f64()).exp()
    }

    /// Symmetric InfoNCE over a batch of aligned motion and text features.
    /// `exclude[i][j]` removes text `j` as a negative of motion `i` (and vice versa).
    pub fn info_nce(&self, g: &mut Graph<T>, store: &ParamStore<T>, motion: Var, text: Var, exclude: &Matrix<T>) -> Var {
        let eps = T::lit(1e-8);
        let m = g.normalize_rows(motion, eps);
        let t = g.normalize_rows(text, eps);
        let ls = g.param(store, self.log_scale);
        let scale = g.exp(ls);
        let mask = g.constant(exclude.clone());
        let mt = g.matmul_nt(m, t);
        let mt = g.scale_by(mt, scale);
        let mt = g.add(mt, mask);
        let tm = g.matmul_nt(t, m);
        let tm = g.scale_by(tm, scale);
        let mask_t = g.constant(exclude.transpose());
        let tm = g.add(tm, mask_t);
        let targets: Vec<usize> = (0..exclude.rows()).collect();
        let a = g.softmax_xent(mt, &targets);
        let b = g.softmax_xent(tm, &targets);
        let s = g.add(a, b);
        g.scale(s, T::lit(0.5))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            spec: self.spec,
            stats: self.stats.cast(),
            text_width: self.text_width,
        };
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, &meta)?;
        ck.add_store("", &self.store);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = ck.metadata_as()?;
        let mut model = Self::new(meta.config, meta.spec, meta.stats.cast(), meta.text_width, 0)?;
        ck.load_store("", &mut model.store)?;
        Ok(model)
    }
}

/// Additive logit mask: a large negative value where two prompts are too
/// similar to serve as each other's negatives, zero elsewhere.
fn negative_mask<T: Scalar>(sentences: &[Vec<f64>], threshold: Option<f64>) -> Matrix<T> {
    let n = sentences.len();
    let Some(th) = threshold else { return Matrix::zeros(n, n) };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    Matrix::from_fn(n, n, |i, j| {
        if i == j {
            return T::zero();
        }
        let (a, b) = (&sentences[i], &sentences[j]);
        let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b));
        if cos >= th {
            T::lit(-1e4)
        } else {
            T::zero()
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStepLog {
    pub step: usize,
    pub loss: f64,
    pub temperature: f64,
}

pub struct EvalTrainOutcome<T> {
    pub model: Evaluator<T>,
    pub log: Vec<EvalStepLog>,
    pub diverged: Option<String>,
}

/// Train the evaluator on (motion, prompt) pairs; normalization statistics come from `corpus`.
pub fn train_evaluator<T: Scalar>(
    corpus: &[MotionSequence<T>],
    config: EvaluatorConfig,
    train: &EvalTrainConfig,
    text: &TextSource,
    seed: u64,
) -> Result<EvalTrainOutcome<T>> {
    if train.batch < 2 {
        return Err(Error::Config(format!("contrastive training needs a batch of at least 2, got {}", train.batch)));
    }
    if !(train.lr.is_finite() && train.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", train.lr)));
    }
    let paired: Vec<usize> = (0..corpus.len()).filter(|&i| !corpus[i].prompts.is_empty()).collect();
    if paired.len() < 2 {
        return Err(Error::Invalid("the evaluator needs at least two sequences with prompts".into()));
    }
    let spec = corpus[paired[0]].spec;
    for m in corpus {
        m.validate()?;
        if m.spec != spec {
            return Err(Error::Incompatible("corpus mixes representations".into()));
        }
    }
    let stats = NormalizationStats::from_corpus(corpus)?;
    let mut model = Evaluator::new(config, spec, stats, text.width(), seed)?;
    let normalized: Vec<Matrix<T>> = corpus.iter().map(|m| model.stats.normalize(&m.frames)).collect::<Result<_>>()?;
    let mut tokens: HashMap<&str, (TokenEmbeddings<T>, Vec<f64>)> = HashMap::new();
    for &i in &paired {
        for p in &corpus[i].prompts {
            tokens.entry(p.as_str()).or_insert_with(|| (text.encode(p), text.sentence_embedding(p)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1_0003);
    let mut opt = Adam::new(&model.store, train.lr);
    opt.clip_norm = Some(5.0);
    let batch = train.batch.min(paired.len());
    let mut log = Vec::with_capacity(train.steps);
    let mut diverged = None;
    for step in 0..train.steps {
        let picks: Vec<usize> = rand::seq::index::sample(&mut rng, paired.len(), batch).into_iter().map(|k| paired[k]).collect();
        let prompts: Vec<&str> = picks
            .iter()
            .map(|&i| {
                let ps = &corpus[i].prompts;
                ps[rng.random_range(0..ps.len())].as_str()
            })
            .collect();
        let segments = Segment::pack(picks.iter().map(|&i| normalized[i].rows()));
        let x = Matrix::vstack(&picks.iter().map(|&i| &normalized[i]).collect::<Vec<_>>())?;
        let toks: Vec<TokenEmbeddings<T>> = prompts.iter().map(|p| tokens[p].0.clone()).collect();
        let sentences: Vec<Vec<f64>> = prompts.iter().map(|p| tokens[p].1.clone()).collect();
        let exclude = negative_mask(&sentences, model.config.negative_filter);

        let mut g = Graph::new();
        let xv = g.constant(x);
        let mf = model.motion_graph(&mut g, &model.store, xv, &segments);
        let tf = model.text_graph(&mut g, &model.store, &toks);
        let loss = model.info_nce(&mut g, &model.store, mf, tf, &exclude);
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            diverged = Some(format!("non-finite contrastive loss at step {step}"));
            break;
        }
        let grads = g.backward(loss);
        if !model.store.ids().filter_map(|id| grads.param(id)).all(Matrix::is_finite) {
            diverged = Some(format!("non-finite gradient at step {step}"));
            break;
        }
        opt.step(&mut model.store, &grads);
        // Inverse temperature capped at 100.
        let ls = model.store.value_mut(model.log_scale);
        let cap = T::lit(100f64.ln());
        if ls.item() > cap {
            ls.data_mut()[0] = cap;
        }
        let entry = EvalStepLog { step, loss: value, temperature: model.temperature() };
        if train.log_every > 0 && (step % train.log_every == 0 || step + 1 == train.steps) {
            log::info!("evaluator step {step}: loss {:.4} temperature {:.4}", entry.loss, entry.temperature);
        }
        log.push(entry);
    }
    Ok(EvalTrainOutcome { model, log, diverged })
}
