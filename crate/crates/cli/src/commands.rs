use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use motionlab::autoencoder::{train_autoencoder, AeTrainConfig, AutoencoderConfig, Variant};
use motionlab::checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
use motionlab::evaluation::{evaluate_run, train_evaluator, EvalRunConfig, EvalTrainConfig, EvaluatorConfig, MetricValue};
use motionlab::generator::{train_generator, Conditioning, GenTrainConfig, GeneratorConfig};
use motionlab::io::{sha256_file, sha256_hex, Manifest};
use motionlab::motion_data::{decode_corpus, read_corpus, synth_corpus, write_corpus, SynthSpec, CORPUS_MAGIC};
use motionlab::sampler::{generate as sample_motion, SampleConfig};
use motionlab::text_encoding::{decode_embeddings, read_embeddings, write_embeddings, TextSource, ToyTextEncoder, EMBEDDINGS_MAGIC};
use motionlab::{Autoencoder32, Error, Evaluator32, Generator32, MotionSequence32};

use crate::error::CliError;
use crate::export;

type Outcome = Result<(), CliError>;

pub struct Context {
    command_line: String,
    start: Instant,
}

impl Context {
    pub fn new(command_line: String) -> Self {
        Self { command_line, start: Instant::now() }
    }

    /// Write `<artifact>.manifest.json` describing how `artifact` was made.
    fn manifest(&self, seed: u64, config: &impl Serialize, inputs: &[&Path], artifact: &Path) -> Outcome {
        let config_json = serde_json::to_vec(config).map_err(|e| Error::Format(e.to_string()))?;
        let inputs = inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect::<motionlab::Result<Vec<_>>>()?;
        let manifest = Manifest {
            command: self.command_line.clone(),
            seed,
            config_hash: sha256_hex(&config_json),
            inputs,
            output: artifact.display().to_string(),
            output_hash: sha256_file(artifact)?,
            wall_time_secs: self.start.elapsed().as_secs_f64(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        manifest.write(artifact)?;
        Ok(())
    }
}

/// A model section and a training section, as read from a TOML config file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Stage<M, T> {
    model: M,
    train: T,
}

fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C, CliError> {
    let Some(path) = path else { return Ok(C::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())).into())
}

fn text_source(embeddings: Option<&Path>) -> Result<TextSource, CliError> {
    match embeddings {
        Some(path) => {
            let (width, table) = read_embeddings(path)?;
            Ok(TextSource::imported(table, width))
        }
        None => Ok(TextSource::default()),
    }
}

fn load_corpus(path: &Path) -> Result<Vec<MotionSequence32>, CliError> {
    let corpus = read_corpus::<f32>(path)?;
    if corpus.is_empty() {
        return Err(Error::Invalid(format!("corpus {} holds no sequences", path.display())).into());
    }
    Ok(corpus)
}

fn inputs<'a>(required: &[&'a Path], optional: &[Option<&'a Path>]) -> Vec<&'a Path> {
    required.iter().copied().chain(optional.iter().flatten().copied()).collect()
}

fn diverged(reason: Option<String>) -> Outcome {
    match reason {
        Some(r) => Err(Error::Numerical(format!("training aborted: {r}")).into()),
        None => Ok(()),
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of motion archetypes.
    #[arg(long)]
    classes: Option<usize>,
    /// Number of sequences.
    #[arg(long, default_value_t = 500)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with synthesis settings; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    joints: Option<usize>,
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long)]
    min_frames: Option<usize>,
    #[arg(long)]
    max_frames: Option<usize>,
    /// Per-joint positional noise, metres.
    #[arg(long)]
    noise: Option<f64>,
}

pub fn synth_data(ctx: &Context, a: SynthArgs) -> Outcome {
    let mut spec: SynthSpec = load_config(a.config.as_deref())?;
    spec.classes = a.classes.unwrap_or(spec.classes);
    spec.joints = a.joints.unwrap_or(spec.joints);
    spec.fps = a.fps.unwrap_or(spec.fps);
    spec.min_frames = a.min_frames.unwrap_or(spec.min_frames);
    spec.max_frames = a.max_frames.unwrap_or(spec.max_frames);
    spec.noise = a.noise.unwrap_or(spec.noise);
    let corpus = synth_corpus::<f32>(&spec, a.count, a.seed)?;
    write_corpus(&a.out, &corpus)?;
    ctx.manifest(a.seed, &(&spec, a.count), &inputs(&[], &[a.config.as_deref()]), &a.out)?;
    println!("wrote {} sequences of {} classes to {}", corpus.len(), spec.classes, a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainAeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// One of ae, vae, sae.
    #[arg(long)]
    variant: Option<Variant>,
    /// TOML file with [model] and [train] sections; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Imported prompt embeddings used instead of the toy encoder.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

pub fn train_ae(ctx: &Context, a: TrainAeArgs) -> Outcome {
    let mut cfg: Stage<AutoencoderConfig, AeTrainConfig> = load_config(a.config.as_deref())?;
    cfg.model.variant = a.variant.unwrap_or(cfg.model.variant);
    cfg.train.steps = a.steps.unwrap_or(cfg.train.steps);
    cfg.train.batch = a.batch.unwrap_or(cfg.train.batch);
    cfg.train.lr = a.lr.unwrap_or(cfg.train.lr);
    let text = text_source(a.embeddings.as_deref())?;
    cfg.model.text_width = text.width();
    let corpus = load_corpus(&a.corpus)?;
    let outcome = train_autoencoder(&corpus, cfg.model.clone(), &cfg.train, &text, a.seed)?;
    diverged(outcome.diverged)?;
    outcome.model.to_checkpoint()?.save(&a.out)?;
    ctx.manifest(a.seed, &cfg, &inputs(&[&a.corpus], &[a.config.as_deref(), a.embeddings.as_deref()]), &a.out)?;
    let last = outcome.log.last().map_or(f64::NAN, |l| l.total);
    println!("wrote {:?} autoencoder to {} (final loss {last:.5})", cfg.model.variant, a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainGenArgs {
    /// Frozen autoencoder checkpoint.
    #[arg(long)]
    ae: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with [model] and [train] sections; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// cross-attention or pooled.
    #[arg(long)]
    conditioning: Option<Conditioning>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

fn load_ae(path: &Path) -> Result<Autoencoder32, CliError> {
    Ok(Autoencoder32::from_checkpoint(&Checkpoint::load(path)?)?)
}

pub fn train_gen(ctx: &Context, a: TrainGenArgs) -> Outcome {
    let mut cfg: Stage<GeneratorConfig, GenTrainConfig> = load_config(a.config.as_deref())?;
    cfg.model.conditioning = a.conditioning.unwrap_or(cfg.model.conditioning);
    cfg.train.steps = a.steps.unwrap_or(cfg.train.steps);
    cfg.train.batch = a.batch.unwrap_or(cfg.train.batch);
    cfg.train.lr = a.lr.unwrap_or(cfg.train.lr);
    let text = text_source(a.embeddings.as_deref())?;
    let ae = load_ae(&a.ae)?;
    let corpus = load_corpus(&a.corpus)?;
    let outcome = train_generator(&corpus, &ae, cfg.model.clone(), &cfg.train, &text, a.seed)?;
    diverged(outcome.diverged)?;
    outcome.model.to_checkpoint()?.save(&a.out)?;
    let ins = inputs(&[&a.ae, &a.corpus], &[a.config.as_deref(), a.embeddings.as_deref()]);
    ctx.manifest(a.seed, &cfg, &ins, &a.out)?;
    let last = outcome.log.last().map_or(f64::NAN, |l| l.loss);
    println!("wrote generator to {} (final flow loss {last:.5})", a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainEvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with [model] and [train] sections; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

pub fn train_eval(ctx: &Context, a: TrainEvalArgs) -> Outcome {
    let mut cfg: Stage<EvaluatorConfig, EvalTrainConfig> = load_config(a.config.as_deref())?;
    cfg.train.steps = a.steps.unwrap_or(cfg.train.steps);
    cfg.train.batch = a.batch.unwrap_or(cfg.train.batch);
    cfg.train.lr = a.lr.unwrap_or(cfg.train.lr);
    let text = text_source(a.embeddings.as_deref())?;
    let corpus = load_corpus(&a.corpus)?;
    let outcome = train_evaluator(&corpus, cfg.model.clone(), &cfg.train, &text, a.seed)?;
    diverged(outcome.diverged)?;
    outcome.model.to_checkpoint()?.save(&a.out)?;
    ctx.manifest(a.seed, &cfg, &inputs(&[&a.corpus], &[a.config.as_deref(), a.embeddings.as_deref()]), &a.out)?;
    let last = outcome.log.last().map_or(f64::NAN, |l| l.loss);
    println!("wrote evaluator to {} (final contrastive loss {last:.5})", a.out.display());
    Ok(())
}

/// Sampler flags shared by `generate` and `evaluate`.
#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Classifier-free guidance scale.
    #[arg(long)]
    cfg: Option<f64>,
    /// Unmasking steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Euler steps per unmasking step.
    #[arg(long)]
    denoise_steps: Option<usize>,
    /// Noise refresh strength in [0, 1).
    #[arg(long)]
    churn: Option<f64>,
    /// Sample with the raw weights instead of their moving average.
    #[arg(long)]
    raw_weights: bool,
}

impl SampleArgs {
    fn apply(&self, c: &mut SampleConfig) {
        c.cfg_scale = self.cfg.unwrap_or(c.cfg_scale);
        c.inference_steps = self.steps.unwrap_or(c.inference_steps);
        c.denoise_steps = self.denoise_steps.unwrap_or(c.denoise_steps);
        c.churn = self.churn.unwrap_or(c.churn);
        if self.raw_weights {
            c.use_ema = false;
        }
    }
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    prompt: String,
    /// Frames to generate.
    #[arg(long)]
    length: usize,
    #[arg(long)]
    ae: PathBuf,
    #[arg(long)]
    gen: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with sampler settings; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    sample: SampleArgs,
    /// Also write joint positions as `x,y,z` rows, frame-major.
    #[arg(long)]
    export_joints: Option<PathBuf>,
    /// Also write an SVG of the root path and joint heights.
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

fn load_gen(path: &Path) -> Result<Generator32, CliError> {
    Ok(Generator32::from_checkpoint(&Checkpoint::load(path)?)?)
}

pub fn generate(ctx: &Context, a: GenerateArgs) -> Outcome {
    if a.length == 0 {
        return Err(CliError::Usage("--length must be at least 1".into()));
    }
    let mut config: SampleConfig = load_config(a.config.as_deref())?;
    a.sample.apply(&mut config);
    config.validate()?;
    let text = text_source(a.embeddings.as_deref())?;
    let ae = load_ae(&a.ae)?;
    let gen = load_gen(&a.gen)?;
    let started = Instant::now();
    let motion = sample_motion(&gen, &ae, &text, &a.prompt, a.length, a.seed, &config)?;
    let elapsed = started.elapsed().as_secs_f64();
    write_corpus(&a.out, std::slice::from_ref(&motion))?;
    let ins = inputs(&[&a.ae, &a.gen], &[a.config.as_deref(), a.embeddings.as_deref()]);
    let settings = (&config, &a.prompt, a.length);
    ctx.manifest(a.seed, &settings, &ins, &a.out)?;
    if a.export_joints.is_some() || a.plot.is_some() {
        let traj = export::joints(&motion)?;
        if let Some(path) = &a.export_joints {
            std::fs::write(path, export::joints_csv(&traj)).map_err(|e| Error::io(path, e))?;
            ctx.manifest(a.seed, &settings, &ins, path)?;
        }
        if let Some(path) = &a.plot {
            std::fs::write(path, export::plot_svg(&traj, &a.prompt)).map_err(|e| Error::io(path, e))?;
            ctx.manifest(a.seed, &settings, &ins, path)?;
        }
    }
    println!("generated {} frames for {:?} in {elapsed:.3} s per sample", motion.len(), a.prompt);
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    gen: PathBuf,
    #[arg(long)]
    ae: PathBuf,
    #[arg(long)]
    evaluator: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Independent generation runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Motions generated per run (default: every prompted sequence).
    #[arg(long)]
    samples: Option<usize>,
    /// Retrieval pool size.
    #[arg(long)]
    pool: Option<usize>,
    /// Prompts used for MModality (0 disables it).
    #[arg(long)]
    mmodality_prompts: Option<usize>,
    #[arg(long)]
    mmodality_repeats: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with evaluation settings and a [sample] section; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    sample: SampleArgs,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

fn show(name: &str, v: &MetricValue) {
    match v.half_width {
        Some(h) => println!("{name:<16} {:.4} ± {h:.4}", v.mean),
        None => println!("{name:<16} {:.4}", v.mean),
    }
}

pub fn evaluate(ctx: &Context, a: EvaluateArgs) -> Outcome {
    let mut config: EvalRunConfig = load_config(a.config.as_deref())?;
    config.runs = a.runs.unwrap_or(config.runs);
    config.samples = a.samples.or(config.samples);
    config.pool = a.pool.unwrap_or(config.pool);
    config.mmodality_prompts = a.mmodality_prompts.unwrap_or(config.mmodality_prompts);
    config.mmodality_repeats = a.mmodality_repeats.unwrap_or(config.mmodality_repeats);
    config.seed = a.seed;
    a.sample.apply(&mut config.sample);
    let text = text_source(a.embeddings.as_deref())?;
    let ae = load_ae(&a.ae)?;
    let gen = load_gen(&a.gen)?;
    let evaluator = Evaluator32::from_checkpoint(&Checkpoint::load(&a.evaluator)?)?;
    let corpus = load_corpus(&a.corpus)?;
    let started = Instant::now();
    let report = evaluate_run(&gen, &ae, &evaluator, &corpus, &text, &config)?;
    let generated = config.runs * (report.samples_per_run + config.mmodality_prompts * config.mmodality_repeats);
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&a.report, json + "\n").map_err(|e| Error::io(&a.report, e))?;
    let ins = inputs(&[&a.gen, &a.ae, &a.evaluator, &a.corpus], &[a.config.as_deref(), a.embeddings.as_deref()]);
    ctx.manifest(a.seed, &config, &ins, &a.report)?;

    show("fid", &report.fid);
    show("top1", &report.r_precision_top1);
    show("top2", &report.r_precision_top2);
    show("top3", &report.r_precision_top3);
    show("matching_score", &report.matching_score);
    show("clip_score", &report.clip_score);
    if let Some(mm) = &report.mmodality {
        show("mmodality", mm);
    }
    if let (Some(mpjpe), Some(rfid)) = (report.mpjpe, report.rfid) {
        println!("{:<16} {mpjpe:.2} mm", "mpjpe");
        println!("{:<16} {rfid:.4}", "rfid");
    }
    println!(
        "{} motions in {:.1} s ({:.3} s per sample); report written to {}",
        generated,
        started.elapsed().as_secs_f64(),
        started.elapsed().as_secs_f64() / generated.max(1) as f64,
        a.report.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct ExportEmbeddingsArgs {
    /// Text file with one prompt per line.
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn export_embeddings(ctx: &Context, a: ExportEmbeddingsArgs) -> Outcome {
    let text = std::fs::read_to_string(&a.prompts).map_err(|e| Error::io(&a.prompts, e))?;
    let prompts: BTreeSet<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let encoder = ToyTextEncoder::default();
    let entries: Vec<_> = prompts.iter().map(|p| (p.to_string(), encoder.encode::<f32>(p).tokens)).collect();
    write_embeddings(&a.out, encoder.width(), &entries)?;
    ctx.manifest(0, &encoder.width(), &[a.prompts.as_path()], &a.out)?;
    println!("wrote {} prompt embeddings of width {} to {}", entries.len(), encoder.width(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Checkpoint, corpus or embedding file.
    path: PathBuf,
}

pub fn inspect(a: InspectArgs) -> Outcome {
    let bytes = std::fs::read(&a.path).map_err(|e| Error::io(&a.path, e))?;
    let magic = &bytes[..bytes.len().min(8)];
    if magic == CHECKPOINT_MAGIC {
        let ck = Checkpoint::from_bytes(&bytes)?;
        println!("kind: {}", ck.kind);
        let meta = serde_json::to_string_pretty(&ck.metadata).map_err(|e| Error::Format(e.to_string()))?;
        println!("config: {meta}");
        println!("tensors: {}", ck.tensors.len());
        for (name, m) in &ck.tensors {
            println!("  {name} {}x{}", m.rows(), m.cols());
        }
    } else if magic == CORPUS_MAGIC {
        let corpus = decode_corpus::<f32>(&bytes)?;
        println!("kind: corpus");
        println!("sequences: {}", corpus.len());
        if let Some(first) = corpus.first() {
            println!("joints: {} fps: {} features: {}", first.spec.joints, first.spec.fps, first.spec.dim());
        }
        let frames: Vec<usize> = corpus.iter().map(|m| m.len()).collect();
        if let (Some(lo), Some(hi)) = (frames.iter().min(), frames.iter().max()) {
            println!("frames: {lo}..={hi}");
        }
        let labeled = corpus.iter().filter(|m| m.labels.is_some()).count();
        let prompted = corpus.iter().filter(|m| !m.prompts.is_empty()).count();
        println!("labeled: {labeled} prompted: {prompted}");
    } else if magic == EMBEDDINGS_MAGIC {
        let (width, table) = decode_embeddings(&bytes)?;
        println!("kind: embeddings");
        println!("width: {width} prompts: {}", table.len());
        let mut prompts: Vec<_> = table.iter().collect();
        prompts.sort_by(|a, b| a.0.cmp(b.0));
        for (p, m) in prompts {
            println!("  {p:?} {}x{}", m.rows(), m.cols());
        }
    } else {
        return Err(Error::Magic("motionlab checkpoint, corpus or embedding").into());
    }
    let manifest_path = Manifest::path_for(&a.path);
    if manifest_path.exists() {
        let m = Manifest::read(&manifest_path)?;
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
        println!("manifest: {text}");
    } else {
        println!("manifest: none");
    }
    Ok(())
}
