use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::autoencoder::{train_autoencoder, AeTrainConfig, AutoencoderConfig, Variant};
use crate::generator::{train_generator, GenTrainConfig, GeneratorConfig};
use crate::motion_data::{synth_corpus, SynthSpec};
use crate::nn::normal_init;
use crate::text_encoding::AdapterConfig;

#[test]
fn single_position_is_unmasked_first() {
    let s = build_schedule(1, 16, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(s.steps.len(), 16);
    assert_eq!(s.steps[0], vec![0]);
    assert!(s.steps[1..].iter().all(Vec::is_empty));
}

#[test]
fn cosine_counts_for_49_positions() {
    let counts = schedule_counts(49, 16);
    let oracle: Vec<usize> = (1..=16)
        .map(|s| {
            let c = 49.0 * (1.0 - (std::f64::consts::PI * s as f64 / 16.0).cos()) / 2.0;
            c.ceil() as usize
        })
        .collect();
    assert_eq!(counts, oracle);
    assert_eq!(*counts.last().unwrap(), 49);
    assert!(counts.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn one_step_unmasks_everything() {
    let s = build_schedule(7, 1, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(s.steps, vec![(0..7).collect::<Vec<_>>()]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn schedules_partition_the_positions(l in 1usize..=128, steps in 1usize..=24, seed in any::<u64>()) {
        let s = build_schedule(l, steps, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(s.steps.len(), steps);
        let mut seen = BTreeSet::new();
        for step in &s.steps {
            for &p in step {
                prop_assert!(seen.insert(p), "position {} repeated", p);
            }
        }
        prop_assert_eq!(seen, (0..l).collect::<BTreeSet<_>>());
        prop_assert_eq!(s.cumulative(), schedule_counts(l, steps));
    }
}

#[test]
fn schedules_are_seeded() {
    let a = build_schedule(40, 16, &mut ChaCha8Rng::seed_from_u64(5));
    let b = build_schedule(40, 16, &mut ChaCha8Rng::seed_from_u64(5));
    let c = build_schedule(40, 16, &mut ChaCha8Rng::seed_from_u64(6));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    normal_init(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn guidance_identities() {
    let c = random(4, 3, 1);
    let n = random(4, 3, 2);
    assert_eq!(cfg_velocity(&c, &n, 1.0), c);
    assert_eq!(cfg_velocity(&c, &n, 0.0), n);
    for s in [0.0, 0.5, 1.0, 6.0, 7.5] {
        assert_eq!(cfg_velocity(&c, &c, s), c);
    }
    let mid = cfg_velocity(&c, &n, 2.0);
    for i in 0..12 {
        assert!((mid.data()[i] - (2.0 * c.data()[i] - n.data()[i])).abs() < 1e-12);
    }
}

/// The exact velocity of the straight path ending at `target`, whatever the noise.
struct TowardTarget {
    target: Matrix<f64>,
}

impl VelocityField<f64> for TowardTarget {
    fn velocity(&self, x: &Matrix<f64>, t: f64, _z: &Matrix<f64>) -> Matrix<f64> {
        x.zip_map(&self.target, |x, m| (x - m) / t)
    }
}

#[test]
fn exact_velocity_integrates_to_the_target() {
    let target = random(3, 2, 4);
    let field = TowardTarget { target: target.clone() };
    let z = Matrix::zeros(3, 1);
    for churn in [0.0, 0.3] {
        for steps in [1, 4, 32] {
            let config = SampleConfig { denoise_steps: steps, churn, cfg_scale: 3.0, ..SampleConfig::default() };
            let out = denoise_positions(&field, &z, &z, 2, &config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert!(out.max_abs_diff(&target) < 1e-12, "churn {churn} steps {steps}");
        }
    }
}

/// Velocity independent of the state, so Euler is exact for any step count.
struct Constant {
    v: f64,
}

impl VelocityField<f64> for Constant {
    fn velocity(&self, x: &Matrix<f64>, _t: f64, _z: &Matrix<f64>) -> Matrix<f64> {
        x.map(|_| self.v)
    }
}

#[test]
fn constant_velocity_moves_noise_by_one_velocity() {
    let config = SampleConfig { denoise_steps: 8, churn: 0.0, cfg_scale: 1.0, ..SampleConfig::default() };
    let z = Matrix::zeros(2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let out = denoise_positions(&Constant { v: 0.25 }, &z, &z, 3, &config, &mut rng).unwrap();
    // The sampler's first draw is the starting noise.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let start = Matrix::<f64>::from_fn(2, 3, |_, _| StandardNormal.sample(&mut rng));
    assert!(out.max_abs_diff(&start.map(|x| x - 0.25)) < 1e-12);
}

#[test]
fn invalid_sample_configs_are_rejected() {
    for c in [
        SampleConfig { inference_steps: 0, ..SampleConfig::default() },
        SampleConfig { denoise_steps: 0, ..SampleConfig::default() },
        SampleConfig { cfg_scale: -1.0, ..SampleConfig::default() },
        SampleConfig { churn: 1.0, ..SampleConfig::default() },
    ] {
        assert!(c.validate().is_err());
    }
}

struct Fixture {
    ae: Autoencoder<f32>,
    gen: Generator<f32>,
    text: TextSource,
}

fn fixture() -> Fixture {
    let corpus = synth_corpus::<f32>(&SynthSpec::default(), 12, 1).unwrap();
    let text = TextSource::default();
    let ae_config = AutoencoderConfig { variant: Variant::Ae, hidden: 8, latent_dim: 4, ..AutoencoderConfig::default() };
    let ae_train = AeTrainConfig { steps: 5, batch: 4, lr: 1e-3, window: 32, log_every: 0, ..AeTrainConfig::default() };
    let ae = train_autoencoder(&corpus, ae_config, &ae_train, &text, 1).unwrap().model;
    let gen_config = GeneratorConfig {
        layers: 1,
        heads: 2,
        width: 8,
        head_blocks: 1,
        head_width: 8,
        max_latents: 24,
        ema_decay: 0.9,
        adapter: AdapterConfig { depth: 1, heads: 2, max_tokens: 8 },
        ..GeneratorConfig::default()
    };
    let gen_train = GenTrainConfig { steps: 5, batch: 4, lr: 1e-3, log_every: 0, ..GenTrainConfig::default() };
    let gen = train_generator(&corpus, &ae, gen_config, &gen_train, &text, 2).unwrap().model;
    Fixture { ae, gen, text }
}

#[test]
fn generation_is_seeded_and_has_the_requested_length() {
    let f = fixture();
    for churn in [0.0, 0.1] {
        let config = SampleConfig { inference_steps: 4, denoise_steps: 5, churn, ..SampleConfig::default() };
        let a = generate(&f.gen, &f.ae, &f.text, "a person jumps high", 37, 11, &config).unwrap();
        let b = generate(&f.gen, &f.ae, &f.text, "a person jumps high", 37, 11, &config).unwrap();
        assert_eq!(a.frames, b.frames, "bitwise identical");
        assert_eq!(a.len(), 37);
        assert_eq!(a.prompts, vec!["a person jumps high".to_string()]);
        let c = generate(&f.gen, &f.ae, &f.text, "a person jumps high", 37, 12, &config).unwrap();
        assert_ne!(a.frames, c.frames);
    }
}

#[test]
fn batched_generation_matches_single_requests() {
    let f = fixture();
    let config = SampleConfig { inference_steps: 3, denoise_steps: 4, ..SampleConfig::default() };
    let requests = vec![
        GenerationRequest { prompt: "someone squats".into(), frames: 20, seed: 1 },
        GenerationRequest { prompt: "a person waves with the left hand".into(), frames: 45, seed: 2 },
    ];
    let batch = sample_latents(&f.gen, &f.text, &requests, &config).unwrap();
    for (r, z) in requests.iter().zip(&batch) {
        let alone = sample_latents(&f.gen, &f.text, std::slice::from_ref(r), &config).unwrap();
        assert!(alone[0].max_abs_diff(z) < 1e-5);
    }
}

#[test]
fn no_position_keeps_the_mask_latent() {
    let f = fixture();
    let config = SampleConfig { inference_steps: 16, denoise_steps: 2, ..SampleConfig::default() };
    let requests = [GenerationRequest { prompt: "someone walks".into(), frames: 30, seed: 3 }];
    let z = sample_latents(&f.gen, &f.text, &requests, &config).unwrap();
    let mask = f.gen.latent_norm.denormalize(&Matrix::row_vector(f.gen.mask_latent(f.gen.weights(true))));
    assert_eq!(z[0].rows(), 8);
    for r in 0..8 {
        assert_ne!(z[0].row(r), mask.row(0));
    }
}

#[test]
fn overlong_and_incompatible_requests_fail() {
    let f = fixture();
    let config = SampleConfig::default();
    let err = generate(&f.gen, &f.ae, &f.text, "someone walks", 24 * 4 + 1, 0, &config);
    assert!(matches!(err, Err(Error::Invalid(_))));
    let other = Autoencoder::<f32>::new(
        AutoencoderConfig { latent_dim: 6, hidden: 8, ..AutoencoderConfig::default() },
        f.ae.spec,
        f.ae.stats.clone(),
        0,
    )
    .unwrap();
    let err = generate(&f.gen, &other, &f.text, "someone walks", 20, 0, &config);
    assert!(matches!(err, Err(Error::Incompatible(_))));
}
