//! Contrastive text-motion evaluator and the metric suite: FID / rFID,
//! R-precision, matching score, CLIP-style score, MModality and MPJPE.

mod evaluator;
mod metrics;


pub use evaluator::{train_evaluator, EvalStepLog, EvalTrainConfig, EvalTrainOutcome, Evaluator, EvaluatorConfig};
pub use metrics::{
    clip_score, fid, frechet_distance, matching_score, mean_and_covariance, mean_and_half_width, mmodality, mpjpe,
    r_precision, unit_rows, Fid, Retrieval, COVARIANCE_RIDGE,
};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::motion_data::MotionSequence;
use crate::sampler::{generate_batch, GenerationRequest, SampleConfig};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::text_encoding::TextSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRunConfig {
    pub runs: usize,
    /// Motions generated per run; `None` uses every prompted sequence.
    pub samples: Option<usize>,
    pub pool: usize,
    pub mmodality_prompts: usize,
    pub mmodality_repeats: usize,
    /// Requests per sampler call.
    pub batch: usize,
    pub seed: u64,
    pub sample: SampleConfig,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        Self {
            runs: 20,
            samples: None,
            pool: 32,
            mmodality_prompts: 32,
            mmodality_repeats: 10,
            batch: 64,
            seed: 0,
            sample: SampleConfig::default(),
        }
    }
}

impl EvalRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 1 {
            return Err(Error::Config("at least one evaluation run is required".into()));
        }
        if self.mmodality_repeats < 2 && self.mmodality_prompts > 0 {
            return Err(Error::Config("mmodality needs at least 2 repeats per prompt".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        self.sample.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub mean: f64,
    /// 95% confidence half-width over runs; absent for a single run.
    pub half_width: Option<f64>,
}

impl MetricValue {
    pub fn over(values: &[f64]) -> Self {
        let (mean, half_width) = mean_and_half_width(values);
        Self { mean, half_width }
    }
}

/// Retrieval scores of the real motions against their own prompts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMetrics {
    pub r_precision: [f64; 3],
    pub matching_score: f64,
    pub clip_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub runs: usize,
    pub samples_per_run: usize,
    pub fid: MetricValue,
    pub r_precision_top1: MetricValue,
    pub r_precision_top2: MetricValue,
    pub r_precision_top3: MetricValue,
    pub matching_score: MetricValue,
    pub clip_score: MetricValue,
    pub mmodality: Option<MetricValue>,
    /// Autoencoder reconstruction error of the real motions, in millimetres.
    pub mpjpe: Option<f64>,
    pub rfid: Option<f64>,
    pub reference: ReferenceMetrics,
    pub covariance_regularized: bool,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug)]
struct RunMetrics {
    fid: Fid,
    retrieval: Retrieval,
    clip: f64,
    mmodality: Option<f64>,
}

/// Random prompt of each sequence.
fn pick_prompts<'a, T>(corpus: &'a [MotionSequence<T>], idx: &[usize], rng: &mut impl Rng) -> Vec<&'a str> {
    idx.iter()
        .map(|&i| {
            let ps = &corpus[i].prompts;
            ps[rng.random_range(0..ps.len())].as_str()
        })
        .collect()
}

fn generate_all<T: Scalar>(
    generator: &Generator<T>,
    autoencoder: &Autoencoder<T>,
    text: &TextSource,
    requests: &[GenerationRequest],
    config: &EvalRunConfig,
) -> Result<Vec<MotionSequence<T>>> {
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(config.batch) {
        out.extend(generate_batch(generator, autoencoder, text, chunk, &config.sample)?);
    }
    Ok(out)
}

/// Reconstruction MPJPE (mm, averaged over sequences) and rFID of `corpus`.
pub fn reconstruction_metrics<T: Scalar>(
    corpus: &[MotionSequence<T>],
    autoencoder: &Autoencoder<T>,
    evaluator: &Evaluator<T>,
) -> Result<(f64, Fid)> {
    if corpus.is_empty() {
        return Err(Error::Invalid("reconstruction metrics need a non-empty corpus".into()));
    }
    let mut recon = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(64) {
        recon.extend(autoencoder.reconstruct_batch(&chunk.iter().collect::<Vec<_>>())?);
    }
    let err: f64 =
        corpus.iter().zip(&recon).map(|(a, b)| mpjpe(a, b)).collect::<Result<Vec<_>>>()?.iter().sum::<f64>();
    let real = evaluator.motion_features(&corpus.iter().collect::<Vec<_>>())?;
    let rec = evaluator.motion_features(&recon.iter().collect::<Vec<_>>())?;
    Ok((err / corpus.len() as f64, fid(&real, &rec)?))
}

/// Repeat generation and scoring `config.runs` times with seeds derived from
/// `config.seed`, and summarize each metric by its mean and 95% half-width.
pub fn evaluate_run<T: Scalar>(
    generator: &Generator<T>,
    autoencoder: &Autoencoder<T>,
    evaluator: &Evaluator<T>,
    corpus: &[MotionSequence<T>],
    text: &TextSource,
    config: &EvalRunConfig,
) -> Result<MetricReport> {
    config.validate()?;
    let prompted: Vec<usize> = (0..corpus.len()).filter(|&i| !corpus[i].prompts.is_empty()).collect();
    let samples = config.samples.unwrap_or(prompted.len()).min(prompted.len());
    if samples < config.pool {
        return Err(Error::Invalid(format!(
            "evaluation needs at least {} prompted sequences per run, corpus offers {}",
            config.pool,
            prompted.len()
        )));
    }
    let max_frames = generator.config.max_latents * generator.downsample;
    if let Some(&i) = prompted.iter().find(|&&i| corpus[i].len() > max_frames) {
        return Err(Error::Invalid(format!(
            "sequence {i} has {} frames; the generator supports at most {max_frames}",
            corpus[i].len()
        )));
    }
    let all_real = evaluator.motion_features(&corpus.iter().collect::<Vec<_>>())?;

    let runs: Vec<RunMetrics> = (0..config.runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(run as u64 + 1);
            let mut picks: Vec<usize> = sample(&mut rng, prompted.len(), samples).into_iter().map(|k| prompted[k]).collect();
            picks.sort_unstable();
            let prompts = pick_prompts(corpus, &picks, &mut rng);
            let requests: Vec<GenerationRequest> = picks
                .iter()
                .zip(&prompts)
                .map(|(&i, p)| GenerationRequest { prompt: p.to_string(), frames: corpus[i].len(), seed: rng.random() })
                .collect();
            let generated = generate_all(generator, autoencoder, text, &requests, config)?;
            let gen_features = evaluator.motion_features(&generated.iter().collect::<Vec<_>>())?;
            let text_features = evaluator.text_features(text, &prompts)?;
            let real = all_real.select_rows(&picks);
            let fid_value = fid(&real, &gen_features)?;
            let retrieval = r_precision(&gen_features, &text_features, config.pool, None, &mut rng)?;
            let clip = clip_score(&gen_features, &text_features)?;

            let mmodality = if config.mmodality_prompts > 0 {
                let count = config.mmodality_prompts.min(prompted.len());
                let chosen: Vec<usize> = sample(&mut rng, prompted.len(), count).into_iter().map(|k| prompted[k]).collect();
                let mm_prompts = pick_prompts(corpus, &chosen, &mut rng);
                let requests: Vec<GenerationRequest> = chosen
                    .iter()
                    .zip(&mm_prompts)
                    .flat_map(|(&i, p)| {
                        (0..config.mmodality_repeats).map(move |_| (i, p.to_string())).collect::<Vec<_>>()
                    })
                    .map(|(i, prompt)| GenerationRequest { prompt, frames: corpus[i].len(), seed: rng.random() })
                    .collect();
                let motions = generate_all(generator, autoencoder, text, &requests, config)?;
                let features = evaluator.motion_features(&motions.iter().collect::<Vec<_>>())?;
                let groups: Vec<Matrix<f64>> = (0..count)
                    .map(|k| features.slice_rows(k * config.mmodality_repeats, config.mmodality_repeats))
                    .collect();
                Some(mmodality(&groups, &mut rng)?)
            } else {
                None
            };
            Ok(RunMetrics { fid: fid_value, retrieval, clip, mmodality })
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let real_prompts = pick_prompts(corpus, &prompted, &mut rng);
    let real_text = evaluator.text_features(text, &real_prompts)?;
    let real_features = all_real.select_rows(&prompted);
    let reference_retrieval = r_precision(&real_features, &real_text, config.pool, None, &mut rng)?;
    let reference = ReferenceMetrics {
        r_precision: reference_retrieval.top,
        matching_score: reference_retrieval.matching_score,
        clip_score: clip_score(&real_features, &real_text)?,
    };
    let (mpjpe_mm, rfid) = reconstruction_metrics(corpus, autoencoder, evaluator)?;

    let over = |f: &dyn Fn(&RunMetrics) -> f64| MetricValue::over(&runs.iter().map(f).collect::<Vec<_>>());
    let regularized = runs.iter().any(|r| r.fid.regularized) || rfid.regularized;
    let mut notes = vec![
        format!("retrieval pools of {} pairs; features are unit-normalized for retrieval and clip score", config.pool),
        "clip_score is the cosine between this evaluator's text and motion features, not a CLIP model".into(),
        "fid and rfid use raw evaluator features".into(),
        format!(
            "sampling: {} inference steps, {} denoising steps, cfg scale {}, churn {}",
            config.sample.inference_steps, config.sample.denoise_steps, config.sample.cfg_scale, config.sample.churn
        ),
    ];
    if regularized {
        notes.push(format!("covariances regularized with {COVARIANCE_RIDGE} I (fewer samples than feature dimensions + 1)"));
    }
    Ok(MetricReport {
        runs: config.runs,
        samples_per_run: samples,
        fid: over(&|r| r.fid.value),
        r_precision_top1: over(&|r| r.retrieval.top[0]),
        r_precision_top2: over(&|r| r.retrieval.top[1]),
        r_precision_top3: over(&|r| r.retrieval.top[2]),
        matching_score: over(&|r| r.retrieval.matching_score),
        clip_score: over(&|r| r.clip),
        mmodality: (config.mmodality_prompts > 0).then(|| over(&|r| r.mmodality.unwrap_or(0.0))),
        mpjpe: Some(mpjpe_mm),
        rfid: Some(rfid.value),
        reference,
        covariance_regularized: regularized,
        notes,
    })
}
