use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::autoencoder::{AeTrainConfig, AutoencoderConfig, Variant};
use crate::gradcheck::check_params;
use crate::motion_data::{synth_corpus, SynthSpec};
use crate::nn::normal_init;
use crate::text_encoding::{TextSource, ToyTextEncoder};

fn tiny(conditioning: Conditioning) -> GeneratorConfig {
    GeneratorConfig {
        layers: 1,
        heads: 2,
        width: 8,
        head_blocks: 1,
        head_width: 8,
        max_latents: 6,
        conditioning,
        adapter: AdapterConfig { depth: 1, heads: 2, max_tokens: 8 },
        ..GeneratorConfig::default()
    }
}

fn model(conditioning: Conditioning) -> Generator<f64> {
    Generator::new(tiny(conditioning), 2, 4, 64, 5).unwrap()
}

/// Move every parameter off its initial value so zero-initialized maps carry gradient.
fn jitter(m: &mut Generator<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        let v = m.store.value_mut(id);
        let noise = normal_init::<f64>(v.rows(), v.cols(), 0.3, &mut rng);
        v.add_assign(&noise);
    }
}

fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    normal_init(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn prompt(text: &str) -> TokenEmbeddings<f64> {
    ToyTextEncoder::default().encode(text)
}

#[test]
fn mask_count_rounds_up() {
    assert_eq!(mask_count(0.7, 5), 4);
    assert_eq!(mask_count(1.0, 5), 5);
    assert_eq!(mask_count(0.01, 5), 1);
    assert_eq!(mask_count(0.7, 1), 1);
}

#[test]
fn full_ratio_masks_everything_with_the_shared_token() {
    let m = model(Conditioning::CrossAttention);
    let x = random(5, 2, 1);
    let masked = m.mask_with_ratio(&x, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(masked.masked, vec![0, 1, 2, 3, 4]);
    for r in 0..5 {
        assert_eq!(masked.latents.row(r), m.mask_latent(&m.store));
    }
}

#[test]
fn masks_are_seeded_and_keep_unmasked_rows() {
    let m = model(Conditioning::CrossAttention);
    let x = random(6, 2, 1);
    let a = m.mask_latents(&x, &mut ChaCha8Rng::seed_from_u64(9));
    let b = m.mask_latents(&x, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
    assert!(a.masked.len() >= mask_count(0.7, 6));
    for r in 0..6 {
        if !a.masked.contains(&r) {
            assert_eq!(a.latents.row(r), x.row(r));
        }
    }
}

#[test]
fn flow_path_endpoints_and_midpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let m: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert_eq!(flow_interpolate(&m, &e, 0.0), m);
        assert_eq!(flow_interpolate(&m, &e, 1.0), e);
        let mid = flow_interpolate(&m, &e, 0.5);
        for k in 0..4 {
            assert!((mid[k] - (m[k] + e[k]) / 2.0).abs() < 1e-15);
        }
        let target = flow_target(&m, &e);
        for k in 0..4 {
            assert_eq!(target[k], e[k] - m[k]);
        }
    }
}

#[test]
fn flow_target_is_the_time_derivative_of_the_path() {
    let m = [0.3f64, -1.0];
    let e = [2.0f64, 0.5];
    let target = flow_target(&m, &e);
    for &t in &[0.1, 0.5, 0.9] {
        let a = flow_interpolate(&m, &e, t + 1e-6);
        let b = flow_interpolate(&m, &e, t - 1e-6);
        for k in 0..2 {
            assert!(((a[k] - b[k]) / 2e-6 - target[k]).abs() < 1e-8);
        }
    }
}

#[test]
fn flow_loss_is_mse_against_the_velocity_target() {
    let mut m = model(Conditioning::CrossAttention);
    let m_rows = random(5, 2, 1);
    let eps = random(5, 2, 2);
    let z = random(5, 8, 3);
    let t = [0.0, 0.2, 0.5, 0.8, 1.0];
    // Fresh head: the output map is zero, so the loss is the mean squared target.
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let l = flow_loss(&mut g, &m.head, &m.store, zv, &m_rows, &eps, &t);
    let expected: f64 = (0..5)
        .flat_map(|r| flow_target(m_rows.row(r), eps.row(r)))
        .map(|v| v * v)
        .sum::<f64>()
        / 10.0;
    assert!((g.value(l).item() - expected).abs() < 1e-12);

    jitter(&mut m, 4);
    let mut x_t = Matrix::zeros(5, 2);
    for r in 0..5 {
        x_t.row_mut(r).copy_from_slice(&flow_interpolate(m_rows.row(r), eps.row(r), t[r]));
    }
    let v = m.head.velocity(&m.store, &x_t, &t, &z);
    let expected: f64 = (0..5)
        .flat_map(|r| {
            let target = flow_target(m_rows.row(r), eps.row(r));
            (0..2).map(move |k| target[k]).collect::<Vec<_>>()
        })
        .zip(v.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / 10.0;
    let mut g = Graph::new();
    let zv = g.constant(z);
    let l = flow_loss(&mut g, &m.head, &m.store, zv, &m_rows, &eps, &t);
    assert!((g.value(l).item() - expected).abs() < 1e-12);
}

#[test]
fn flow_loss_vanishes_when_the_head_predicts_the_target() {
    // A one-block head whose output is forced through the bias of its output map.
    let mut m = model(Conditioning::CrossAttention);
    let clean = Matrix::from_rows(&[vec![0.5, -0.5]]).unwrap();
    let eps = Matrix::from_rows(&[vec![1.5, 0.5]]).unwrap();
    let bias = m.store.id("head.out.bias").unwrap();
    *m.store.value_mut(bias) = Matrix::row_vector(&flow_target(clean.row(0), eps.row(0)));
    let mut g = Graph::new();
    let z = g.constant(random(1, 8, 1));
    let l = flow_loss(&mut g, &m.head, &m.store, z, &clean, &eps, &[0.3]);
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn loss_rows_are_the_masked_positions() {
    let flags = [false, true, true, false, true];
    assert_eq!(flow_rows(&flags, 1), vec![1, 2, 4]);
    assert_eq!(flow_rows(&flags, 2), vec![1, 2, 4, 1, 2, 4]);
}

#[test]
fn conditioning_output_has_one_row_per_latent() {
    for c in [Conditioning::CrossAttention, Conditioning::Pooled] {
        let m = model(c);
        let segs = Segment::pack([3, 5]);
        let z = m
            .condition(&m.store, &random(8, 2, 1), &[false; 8], &segs, &[prompt("someone jumps"), prompt("")])
            .unwrap();
        assert_eq!(z.shape(), (8, 8));
        assert!(z.is_finite());
    }
}

#[test]
fn too_many_latents_are_rejected() {
    let m = model(Conditioning::CrossAttention);
    let segs = Segment::pack([7]);
    let err = m.condition(&m.store, &random(7, 2, 1), &[false; 7], &segs, &[prompt("someone jumps")]);
    assert!(matches!(err, Err(Error::Shape(_))));
}

#[test]
fn batched_sequences_do_not_interact() {
    for c in [Conditioning::CrossAttention, Conditioning::Pooled] {
        let mut m = model(c);
        jitter(&mut m, 1);
        let a = random(3, 2, 1);
        let b = random(5, 2, 2);
        let pa = prompt("a person squats deeply");
        let pb = prompt("someone waves with the right hand");
        let flags_b = [true, false, true, false, false];
        let alone = m.condition(&m.store, &b, &flags_b, &Segment::pack([5]), std::slice::from_ref(&pb)).unwrap();
        let packed = Matrix::vstack(&[&a, &b]).unwrap();
        let flags: Vec<bool> = [false, true, false].iter().chain(&flags_b).copied().collect();
        let both = m.condition(&m.store, &packed, &flags, &Segment::pack([3, 5]), &[pa, pb]).unwrap();
        assert!(both.slice_rows(3, 5).max_abs_diff(&alone) < 1e-12);
    }
}

#[test]
fn masked_positions_see_every_unmasked_latent() {
    let mut m = model(Conditioning::CrossAttention);
    jitter(&mut m, 2);
    let x = random(5, 2, 1);
    let flags = [true, false, false, true, false];
    let segs = Segment::pack([5]);
    let p = [prompt("someone jumps")];
    let base = m.condition(&m.store, &x, &flags, &segs, &p).unwrap();
    for source in [1, 2, 4] {
        let mut y = x.clone();
        y.set(source, 0, y.get(source, 0) + 0.5);
        let z = m.condition(&m.store, &y, &flags, &segs, &p).unwrap();
        for target in [0, 3] {
            let moved = (0..8).any(|k| (z.get(target, k) - base.get(target, k)).abs() > 1e-9);
            assert!(moved, "masked position {target} ignores latent {source}");
        }
    }
    // Values under the mask never reach the model.
    let mut y = x.clone();
    y.set(0, 1, 40.0);
    assert_eq!(m.condition(&m.store, &y, &flags, &segs, &p).unwrap(), base);
}

#[test]
fn prompt_changes_the_conditioning() {
    let mut m = model(Conditioning::CrossAttention);
    jitter(&mut m, 3);
    let x = random(4, 2, 1);
    let segs = Segment::pack([4]);
    let a = m.condition(&m.store, &x, &[true; 4], &segs, &[prompt("someone jumps high")]).unwrap();
    let b = m.condition(&m.store, &x, &[true; 4], &segs, &[prompt("")]).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6);
}

fn full_loss(m: &Generator<f64>, g: &mut Graph<f64>, store: &ParamStore<f64>) -> Var {
    let x = random(3, 2, 10);
    let y = random(2, 2, 11);
    let packed = Matrix::vstack(&[&x, &y]).unwrap();
    let flags = [true, false, true, true, true];
    let segs = Segment::pack([3, 2]);
    let prompts = [prompt("someone walks slowly forward"), prompt("")];
    let z = m.condition_graph(g, store, &packed, &flags, &segs, &prompts).unwrap();
    let rows = flow_rows(&flags, 2);
    let z = g.gather(z, Rc::new(GatherPlan::rows(5, &rows)));
    let clean = packed.select_rows(&rows);
    let eps = random(rows.len(), 2, 12);
    let t: Vec<f64> = (0..rows.len()).map(|i| (i as f64 + 0.5) / rows.len() as f64).collect();
    flow_loss(g, &m.head, store, z, &clean, &eps, &t)
}

#[test]
fn all_generator_gradients_match_finite_differences() {
    for c in [Conditioning::CrossAttention, Conditioning::Pooled] {
        let mut m = model(c);
        jitter(&mut m, 6);
        let report =
            check_params(&m.store, |g, s| full_loss(&m, g, s), 40, 1e-5, &mut ChaCha8Rng::seed_from_u64(7));
        assert!(report.passes(1e-5), "{c:?}: {report:?}");
    }
}

#[test]
fn head_gradients_match_finite_differences() {
    let mut m = model(Conditioning::CrossAttention);
    jitter(&mut m, 8);
    let clean = random(4, 2, 1);
    let eps = random(4, 2, 2);
    let z = random(4, 8, 3);
    let report = check_params(
        &m.store,
        |g, s| {
            let zv = g.constant(z.clone());
            flow_loss(g, &m.head, s, zv, &clean, &eps, &[0.1, 0.4, 0.6, 0.95])
        },
        40,
        1e-5,
        &mut ChaCha8Rng::seed_from_u64(9),
    );
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn checkpoint_round_trip_keeps_both_weight_sets() {
    let mut m = model(Conditioning::Pooled);
    jitter(&mut m, 1);
    m.latent_norm = LatentNorm { shift: vec![0.5; m.latent_dim], scale: vec![2.5; m.latent_dim] };
    let ck = m.to_checkpoint().unwrap();
    let back = Generator::<f64>::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.latent_norm, m.latent_norm);
    for ((na, a), (nb, b)) in back.store.named().zip(m.store.named()) {
        assert_eq!(na, nb);
        assert!(a.max_abs_diff(&b.cast::<f32>().cast()) == 0.0);
    }
    let differ = back.ema.named().zip(back.store.named()).any(|((_, a), (_, b))| a != b);
    assert!(differ, "moving average kept separately");
}

#[test]
fn latent_norm_standardizes_each_channel() {
    let a = Matrix::<f64>::from_rows(&[vec![1.0, 5.0, 2.0], vec![3.0, 5.0, -2.0]]).unwrap();
    let b = Matrix::<f64>::from_rows(&[vec![2.0, 5.0, 0.0]]).unwrap();
    let norm = LatentNorm::fit(&[a.clone(), b]).unwrap();
    // Channel oracles: mean 2, sd sqrt(2/3); constant channel keeps scale 1; mean 0, sd sqrt(8/3).
    assert!((norm.shift[0] - 2.0).abs() < 1e-12 && (norm.scale[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((norm.shift[1] - 5.0).abs() < 1e-12 && norm.scale[1] == 1.0);
    assert!(norm.shift[2].abs() < 1e-12 && (norm.scale[2] - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!(norm.denormalize(&norm.normalize(&a)).max_abs_diff(&a) < 1e-12);
    assert!(norm.validate(2).is_err());
    assert!(LatentNorm { shift: vec![0.0], scale: vec![0.0] }.validate(1).is_err());
}

#[test]
fn warmup_is_linear_then_constant() {
    assert_eq!(lr_at(0, 8e-4, 4), 2e-4);
    assert_eq!(lr_at(3, 8e-4, 4), 8e-4);
    assert_eq!(lr_at(100, 8e-4, 4), 8e-4);
    assert_eq!(lr_at(0, 8e-4, 0), 8e-4);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        GeneratorConfig { width: 10, heads: 4, ..GeneratorConfig::default() },
        GeneratorConfig { cfg_dropout: 1.0, ..GeneratorConfig::default() },
        GeneratorConfig { mask_ratio_min: 0.9, mask_ratio_max: 0.8, ..GeneratorConfig::default() },
        GeneratorConfig { mask_ratio_min: 0.0, ..GeneratorConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}

fn tiny_ae(corpus: &[crate::motion_data::MotionSequence<f32>]) -> crate::autoencoder::Autoencoder<f32> {
    let config = AutoencoderConfig { variant: Variant::Ae, hidden: 8, latent_dim: 4, ..AutoencoderConfig::default() };
    let train = AeTrainConfig { steps: 5, batch: 4, lr: 1e-3, window: 32, log_every: 0, ..AeTrainConfig::default() };
    crate::autoencoder::train_autoencoder(corpus, config, &train, &TextSource::default(), 1).unwrap().model
}

#[test]
fn null_prompt_rate_matches_the_dropout_probability() {
    let corpus = synth_corpus::<f32>(&SynthSpec::default(), 16, 1).unwrap();
    let ae = tiny_ae(&corpus);
    let config = GeneratorConfig { max_latents: 32, ..tiny(Conditioning::CrossAttention) };
    let train = GenTrainConfig { steps: 200, batch: 50, flow_repeats: 1, log_every: 0, ..GenTrainConfig::default() };
    let out = train_generator(&corpus, &ae, config, &train, &TextSource::default(), 2).unwrap();
    let nulls: usize = out.log.iter().map(|l| l.null_prompts).sum();
    let rate = nulls as f64 / 10_000.0;
    assert!((rate - 0.10).abs() <= 0.01, "null prompt rate {rate}");
    assert!(out.log.iter().all(|l| l.masked >= 1));
}

#[test]
fn ema_with_zero_decay_is_the_raw_model() {
    let corpus = synth_corpus::<f32>(&SynthSpec::default(), 8, 1).unwrap();
    let ae = tiny_ae(&corpus);
    let config = GeneratorConfig { ema_decay: 0.0, max_latents: 32, ..tiny(Conditioning::CrossAttention) };
    let train = GenTrainConfig { steps: 3, batch: 2, log_every: 0, ..GenTrainConfig::default() };
    let out = train_generator(&corpus, &ae, config, &train, &TextSource::default(), 2).unwrap();
    for ((_, a), (_, b)) in out.model.ema.named().zip(out.model.store.named()) {
        assert_eq!(a, b);
    }
}

#[test]
fn training_reduces_flow_loss_and_is_deterministic() {
    let corpus = synth_corpus::<f32>(&SynthSpec::default(), 24, 3).unwrap();
    let ae = tiny_ae(&corpus);
    let config = GeneratorConfig {
        layers: 1,
        heads: 2,
        width: 16,
        head_blocks: 2,
        head_width: 32,
        max_latents: 32,
        adapter: AdapterConfig { depth: 1, heads: 2, max_tokens: 16 },
        ..GeneratorConfig::default()
    };
    let train = GenTrainConfig { steps: 150, batch: 8, lr: 2e-3, warmup_steps: 10, log_every: 0, ..GenTrainConfig::default() };
    let out = train_generator(&corpus, &ae, config.clone(), &train, &TextSource::default(), 4).unwrap();
    assert!(out.diverged.is_none());
    let head: f64 = out.log[..20].iter().map(|l| l.loss).sum::<f64>() / 20.0;
    let tail: f64 = out.log[130..].iter().map(|l| l.loss).sum::<f64>() / 20.0;
    assert!(tail < 0.8 * head, "flow loss {head} -> {tail}");
    let again = train_generator(&corpus, &ae, config, &train, &TextSource::default(), 4).unwrap();
    assert_eq!(again.log, out.log);
    for ((_, a), (_, b)) in again.model.store.named().zip(out.model.store.named()) {
        assert_eq!(a, b, "bitwise identical weights");
    }
}
