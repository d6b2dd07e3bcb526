use std::sync::OnceLock;

use crossgan_core::checkpoint::{load_checkpoint, save_checkpoint, to_archive};
use crossgan_core::data::{build_pairs, Direction, FlowImage, Frame, PairedSample};
use crossgan_core::flow::{compute_flow, FlowConfig};
use crossgan_core::synthetic::{generate_normal_video, SceneSpec};
use crossgan_core::training::{
    discriminator_loss, generator_adversarial_loss, generator_output_gradient, l1_loss, train_task, ModelConfig,
    Task, TrainConfig,
};
use crossgan_core::Error;
use crossgan_nn::{noise_rng, Parameterized, PatchConfig, PatchDiscriminator, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn random_image(rng: &mut ChaCha8Rng, r: usize) -> Tensor<f32> {
    Tensor::from_fn(3, r, r, |_, _, _| rng.random::<f32>())
}

#[test]
fn l1_matches_direct_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let r = rng.random_range(1..20);
        let (a, b) = (random_image(&mut rng, r), random_image(&mut rng, r));
        let mut total = 0.0f64;
        for (x, y) in a.data().iter().zip(b.data()) {
            total += (*x as f64 - *y as f64).abs();
        }
        assert!((l1_loss(&a, &b).unwrap() - total / a.data().len() as f64).abs() < 1e-7);
    }
    let ones = Tensor::filled(3, 4, 4, 1.0f32);
    let zeros = Tensor::filled(3, 4, 4, 0.0f32);
    assert_eq!(l1_loss(&ones, &zeros).unwrap(), 1.0);
    assert_eq!(l1_loss(&ones, &ones).unwrap(), 0.0);
    assert!(matches!(l1_loss(&ones, &Tensor::filled(3, 4, 5, 0.0)), Err(Error::Input(_))));
}

#[test]
fn adversarial_losses_closed_forms() {
    assert!((discriminator_loss(0.5, 0.5) - 2.0 * LN2).abs() < 1e-9);
    assert!((discriminator_loss(0.9, 0.1) + 2.0 * 0.9f64.ln()).abs() < 1e-12);
    assert!(discriminator_loss(1.0, 0.0) < 1e-6);
    assert!((generator_adversarial_loss(0.5) - LN2).abs() < 1e-12);
    assert!(generator_adversarial_loss(1.0) < 1e-6);
    for p in [0.0, 1.0, -0.5, 2.0] {
        assert!(discriminator_loss(p, p).is_finite());
        assert!(generator_adversarial_loss(p).is_finite());
    }
}

proptest! {
    #[test]
    fn generator_loss_falls_as_fake_looks_real(mut ps in prop::collection::vec(1e-6f64..1.0, 100)) {
        ps.sort_by(f64::total_cmp);
        for w in ps.windows(2) {
            prop_assert!(generator_adversarial_loss(w[0]) >= generator_adversarial_loss(w[1]));
        }
    }
}

fn mini_discriminator(seed: u64) -> PatchDiscriminator<f32> {
    let cfg = PatchConfig::for_resolution(8).with_base_filters(3).with_downsampling_stages(1);
    PatchDiscriminator::new(cfg, seed).unwrap()
}

#[test]
fn zero_lambda_leaves_only_the_adversarial_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (x, r) = (random_image(&mut rng, 8), random_image(&mut rng, 8));
    let (y1, y2) = (random_image(&mut rng, 8), random_image(&mut rng, 8));

    // All-zero weights: D outputs exactly 0.5 and passes no gradient to its input.
    let mut frozen = mini_discriminator(1);
    for p in frozen.params_mut() {
        p.value.iter_mut().for_each(|v| *v = 0.0);
    }
    let (g, g_adv, _) = generator_output_gradient(&mut frozen, &x, &r, &y1, 0.0).unwrap();
    assert!((g_adv - LN2).abs() < 1e-12);
    assert!(g.data().iter().all(|&v| v == 0.0));

    let mut d = mini_discriminator(2);
    let (a, _, _) = generator_output_gradient(&mut d, &x, &r, &y1, 0.0).unwrap();
    let (b, _, _) = generator_output_gradient(&mut d, &x, &r, &y2, 0.0).unwrap();
    assert_eq!(a, b);
    let lambda = 100.0;
    let (c, _, l1) = generator_output_gradient(&mut d, &x, &r, &y1, lambda).unwrap();
    assert!((l1 - l1_loss(&y1, &r).unwrap()).abs() < 1e-12);
    let n = r.data().len() as f64;
    for i in 0..r.data().len() {
        let sign = (r.data()[i] - y1.data()[i]).signum() as f64;
        let expected = a.data()[i] as f64 + lambda * sign / n;
        assert!((c.data()[i] as f64 - expected).abs() < 1e-5);
    }
}

fn small_model() -> ModelConfig {
    ModelConfig { generator_filters: 8, discriminator_filters: 8 }
}

/// 20 frames of the default scene and their 19 flows.
fn toy_video() -> &'static (Vec<Frame>, Vec<FlowImage>) {
    static VIDEO: OnceLock<(Vec<Frame>, Vec<FlowImage>)> = OnceLock::new();
    VIDEO.get_or_init(|| {
        let spec = SceneSpec { frames_per_video: 20, ..SceneSpec::default() };
        let video = generate_normal_video(&spec, 0, "toy").unwrap();
        let cfg = FlowConfig::default();
        let flows = video.frames.windows(2).map(|w| compute_flow(&w[0], &w[1], &cfg).unwrap()).collect();
        (video.frames, flows)
    })
}

fn toy_pairs(direction: Direction) -> Vec<PairedSample> {
    let (frames, flows) = toy_video();
    build_pairs(frames, flows, direction).unwrap()
}

#[test]
fn ten_steps_are_reproducible() {
    let pairs = toy_pairs(Direction::FrameToFlow);
    let train = TrainConfig { epochs: 1, seed: 42, ..TrainConfig::default() };
    let run = || {
        let mut task = Task::new(Direction::FrameToFlow, 64, &small_model(), &train).unwrap();
        for p in &pairs[..10] {
            task.train_step(p).unwrap();
        }
        task
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(to_archive(&a).to_bytes(), to_archive(&b).to_bytes());
    assert!(a.history.iter().all(|r| r.l1.is_finite() && r.d_loss.is_finite() && r.g_adv.is_finite()));
}

#[test]
fn history_covers_every_step_and_bad_inputs_fail() {
    let pairs = toy_pairs(Direction::FlowToFrame);
    let train = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let task = train_task(&pairs[..1], 64, &small_model(), &train).unwrap();
    assert_eq!(task.history.len(), 1);
    assert!(matches!(train_task(&[], 64, &small_model(), &train), Err(Error::Input(_))));
    let mut f2o = Task::new(Direction::FrameToFlow, 64, &small_model(), &train).unwrap();
    assert!(matches!(f2o.train_step(&pairs[0]), Err(Error::Input(_))));
}

#[test]
fn training_reduces_l1_and_dropout_stays_stochastic() {
    let pairs = toy_pairs(Direction::FrameToFlow);
    let train = TrainConfig { epochs: 10, seed: 1, ..TrainConfig::default() };
    let task = train_task(&pairs, 64, &small_model(), &train).unwrap();
    let n = pairs.len();
    assert_eq!(task.history.len(), 10 * n);
    let mean = |s: &[_]| s.iter().map(|r: &crossgan_core::training::LossRecord| r.l1).sum::<f64>() / n as f64;
    let (first, last) = (mean(&task.history[..n]), mean(&task.history[9 * n..]));
    assert!(last < first, "L1 rose from {first} to {last}");

    let x = pairs[0].input().tensor();
    let a = task.generator.forward(x, Some(&mut noise_rng(1))).unwrap();
    let b = task.generator.forward(x, Some(&mut noise_rng(2))).unwrap();
    let differing = a.data().iter().zip(b.data()).filter(|(p, q)| (*p - *q).abs() > 1e-4).count();
    assert!(differing as f64 >= 0.01 * a.data().len() as f64, "{differing} differing values");
    assert_eq!(task.generator.forward(x, None).unwrap(), task.generator.forward(x, None).unwrap());
}

#[test]
fn checkpoints_round_trip_and_reject_mismatches() {
    let pairs = toy_pairs(Direction::FlowToFrame);
    let train = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let task = train_task(&pairs[..3], 64, &small_model(), &train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("o2f.ckpt");
    save_checkpoint(&path, &task).unwrap();

    let loaded = load_checkpoint(&path, Some(64), Some(Direction::FlowToFrame)).unwrap();
    assert_eq!(to_archive(&loaded).tensors, to_archive(&task).tensors);
    let x = pairs[0].input().tensor();
    assert_eq!(loaded.generator.forward(x, None).unwrap(), task.generator.forward(x, None).unwrap());

    assert!(matches!(load_checkpoint(&path, Some(256), None), Err(Error::Config(_))));
    assert!(matches!(load_checkpoint(&path, None, Some(Direction::FrameToFlow)), Err(Error::Config(_))));

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    for len in [0, 10, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&cut, &bytes[..len]).unwrap();
        assert!(matches!(load_checkpoint(&cut, None, None), Err(Error::Format(_))), "length {len}");
    }
    assert!(matches!(load_checkpoint(&dir.path().join("missing"), None, None), Err(Error::Io { .. })));
}
