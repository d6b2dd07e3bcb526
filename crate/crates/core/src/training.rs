//! Adversarial training of one cross-channel task.

use std::io::Write;
use std::path::Path;

use crossgan_nn::layers::sigmoid;
use crossgan_nn::{
    noise_rng, Optimizer, OptimizerConfig, OptimizerKind, Parameterized, PatchConfig, PatchDiscriminator,
    Tensor, UNet, UNetConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Direction, PairedSample};
use crate::error::{write_file, Error, Result};

/// Probabilities are kept this far from 0 and 1 before taking logarithms.
pub const PROBABILITY_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Only 1 is supported.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Classical momentum, or the first-moment decay of adaptive moments.
    pub momentum: f64,
    pub learning_rate: f64,
    /// Weight of the L1 reconstruction term against the adversarial term.
    pub l1_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 1,
            optimizer: OptimizerKind::Momentum,
            momentum: 0.5,
            learning_rate: 2e-4,
            l1_weight: 100.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::config(format!("train.{key}: {why}")));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size != 1 {
            return bad("batch_size", "only batch size 1 is supported");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.l1_weight.is_finite() && self.l1_weight >= 0.0) {
            return bad("l1_weight", "must be non-negative");
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            beta1: self.momentum,
            ..OptimizerConfig::default()
        }
    }
}

/// Network widths. Depths follow from the resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub generator_filters: usize,
    pub discriminator_filters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            generator_filters: 64,
            discriminator_filters: 64,
        }
    }
}

impl ModelConfig {
    pub fn generator(&self, resolution: usize) -> Result<UNetConfig> {
        let cfg = UNetConfig::for_resolution(resolution).with_base_filters(self.generator_filters);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn discriminator(&self, resolution: usize) -> Result<PatchConfig> {
        let cfg = PatchConfig::for_resolution(resolution).with_base_filters(self.discriminator_filters);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean absolute difference over every element.
pub fn l1_loss(y: &Tensor<f32>, r: &Tensor<f32>) -> Result<f64> {
    if !y.same_shape(r) {
        return Err(Error::input(format!(
            "L1 operands differ in shape: {:?} vs {:?}",
            y.shape(),
            r.shape()
        )));
    }
    let n = y.data().len().max(1) as f64;
    Ok(y.data().iter().zip(r.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>() / n)
}

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR)
}

/// `-(log d_real + log(1 - d_fake))`.
pub fn discriminator_loss(d_real: f64, d_fake: f64) -> f64 {
    -(clamp_probability(d_real).ln() + (1.0 - clamp_probability(d_fake)).ln())
}

/// Non-saturating generator loss `-log d_fake`.
pub fn generator_adversarial_loss(d_fake: f64) -> f64 {
    -clamp_probability(d_fake).ln()
}

/// Derivative of a loss written in the mean patch probability, pushed back
/// onto the logit grid. `dloss_dp` is ignored where the clamp is active.
fn logit_gradient(logits: &Tensor<f32>, p: f64, dloss_dp: f64) -> Tensor<f32> {
    let outer = if clamp_probability(p) == p { dloss_dp } else { 0.0 };
    let n = logits.data().len() as f64;
    logits.map(|l| {
        let s = sigmoid(l as f64);
        (outer * s * (1.0 - s) / n) as f32
    })
}

fn mean_probability(logits: &Tensor<f32>) -> f64 {
    logits.data().iter().map(|&l| sigmoid(l as f64)).sum::<f64>() / logits.data().len() as f64
}

/// Gradient of `generator_adversarial_loss + lambda * l1_loss` w.r.t. the
/// generated image `r`, returned with the two loss terms. Discriminator
/// gradients accumulated on the way are discarded.
pub fn generator_output_gradient(
    discriminator: &mut PatchDiscriminator<f32>,
    x: &Tensor<f32>,
    r: &Tensor<f32>,
    y: &Tensor<f32>,
    lambda: f64,
) -> Result<(Tensor<f32>, f64, f64)> {
    let l1 = l1_loss(y, r)?;
    let (logits, tape) = discriminator.forward_with_tape(x, r)?;
    let p = mean_probability(&logits);
    let g_adv = generator_adversarial_loss(p);
    let (_, mut grad) = discriminator.backward(&tape, &logit_gradient(&logits, p, -1.0 / p));
    discriminator.zero_grad();
    let n = r.data().len() as f64;
    for ((g, &a), &b) in grad.data_mut().iter_mut().zip(r.data()).zip(y.data()) {
        let sign = if a > b {
            1.0
        } else if a < b {
            -1.0
        } else {
            0.0
        };
        *g += (lambda * sign / n) as f32;
    }
    Ok((grad, g_adv, l1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub l1: f64,
    pub d_loss: f64,
    pub g_adv: f64,
}

/// One cross-channel network pair with its optimizer state.
#[derive(Debug)]
pub struct Task {
    pub direction: Direction,
    pub generator: UNet<f32>,
    pub discriminator: PatchDiscriminator<f32>,
    pub train: TrainConfig,
    pub history: Vec<LossRecord>,
    opt_g: Optimizer<f32>,
    opt_d: Optimizer<f32>,
    noise: ChaCha8Rng,
    shuffle: ChaCha8Rng,
}

/// A task after training; the same value, named for the pipeline stage.
pub type TrainedTask = Task;

fn direction_stream(direction: Direction) -> u64 {
    match direction {
        Direction::FrameToFlow => 1,
        Direction::FlowToFrame => 2,
    }
}

impl Task {
    /// Fresh networks, seeded from `train.seed` and the direction.
    pub fn new(direction: Direction, resolution: usize, model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        let g = model.generator(resolution)?;
        let d = model.discriminator(resolution)?;
        let mut seeds = ChaCha8Rng::seed_from_u64(train.seed);
        seeds.set_stream(direction_stream(direction));
        let (gs, ds) = (seeds.random::<u64>(), seeds.random::<u64>());
        let generator = UNet::new(g, gs)?;
        let discriminator = PatchDiscriminator::new(d, ds)?;
        Self::from_networks(direction, generator, discriminator, train)
    }

    pub fn from_networks(
        direction: Direction,
        generator: UNet<f32>,
        discriminator: PatchDiscriminator<f32>,
        train: &TrainConfig,
    ) -> Result<Self> {
        train.validate()?;
        if generator.config().resolution != discriminator.config().resolution {
            return Err(Error::config(format!(
                "generator resolution {} differs from discriminator resolution {}",
                generator.config().resolution,
                discriminator.config().resolution
            )));
        }
        let mut seeds = ChaCha8Rng::seed_from_u64(train.seed);
        seeds.set_stream(direction_stream(direction) + 16);
        let noise = noise_rng(seeds.random());
        let shuffle = ChaCha8Rng::seed_from_u64(seeds.random());
        Ok(Self {
            direction,
            generator,
            discriminator,
            train: train.clone(),
            history: Vec::new(),
            opt_g: Optimizer::new(train.optimizer_config()),
            opt_d: Optimizer::new(train.optimizer_config()),
            noise,
            shuffle,
        })
    }

    pub fn resolution(&self) -> usize {
        self.generator.config().resolution
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, sample: &PairedSample) -> Result<LossRecord> {
        if sample.direction() != self.direction {
            return Err(Error::input(format!(
                "sample direction {} does not match task {}",
                sample.direction(),
                self.direction
            )));
        }
        let x = sample.input().tensor();
        let y = sample.target().tensor();
        self.generator.check_input(x)?;
        let (r, gen_tape) = self.generator.forward_with_tape(x, Some(&mut self.noise))?;

        self.discriminator.zero_grad();
        let (real_logits, real_tape) = self.discriminator.forward_with_tape(x, y)?;
        let (fake_logits, fake_tape) = self.discriminator.forward_with_tape(x, &r)?;
        let p_real = mean_probability(&real_logits);
        let p_fake = mean_probability(&fake_logits);
        let d_loss = discriminator_loss(p_real, p_fake);
        self.discriminator
            .backward(&real_tape, &logit_gradient(&real_logits, p_real, -1.0 / p_real));
        self.discriminator
            .backward(&fake_tape, &logit_gradient(&fake_logits, p_fake, 1.0 / (1.0 - p_fake)));
        self.opt_d.step(self.discriminator.params_mut());

        let (grad, g_adv, l1) =
            generator_output_gradient(&mut self.discriminator, x, &r, y, self.train.l1_weight)?;
        self.generator.zero_grad();
        self.generator.backward(&gen_tape, &grad);
        self.opt_g.step(self.generator.params_mut());

        let record = LossRecord {
            iter: self.history.len(),
            l1,
            d_loss,
            g_adv,
        };
        self.history.push(record);
        Ok(record)
    }

    /// `epochs` passes over `pairs` in a freshly shuffled order each time.
    pub fn train(&mut self, pairs: &[PairedSample], mut on_step: impl FnMut(&LossRecord)) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::input("no training pairs"));
        }
        if let Some(p) = pairs.iter().find(|p| p.direction() != self.direction) {
            return Err(Error::input(format!(
                "pair direction {} does not match task {}",
                p.direction(),
                self.direction
            )));
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for _ in 0..self.train.epochs {
            order.shuffle(&mut self.shuffle);
            for &i in &order {
                let record = self.train_step(&pairs[i])?;
                on_step(&record);
            }
        }
        Ok(())
    }
}

/// Trains a fresh task on normal-only pairs.
pub fn train_task(
    pairs: &[PairedSample],
    resolution: usize,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<TrainedTask> {
    let direction = pairs
        .first()
        .ok_or_else(|| Error::input("no training pairs"))?
        .direction();
    let mut task = Task::new(direction, resolution, model, train)?;
    task.train(pairs, |_| {})?;
    Ok(task)
}

/// Loss history as CSV with columns `iter,l1,d_loss,g_adv`.
pub fn write_loss_csv(out: &mut impl Write, history: &[LossRecord]) -> std::io::Result<()> {
    writeln!(out, "iter,l1,d_loss,g_adv")?;
    for r in history {
        writeln!(out, "{},{},{},{}", r.iter, r.l1, r.d_loss, r.g_adv)?;
    }
    Ok(())
}

pub fn save_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, history).expect("writing to memory");
    write_file(path, buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discriminator_loss_closed_forms() {
        assert!((discriminator_loss(0.5, 0.5) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((discriminator_loss(0.9, 0.1) - 0.210_721_031_315_652_6).abs() < 1e-12);
        assert!(discriminator_loss(1.0, 0.0) < 1e-6);
        assert!(discriminator_loss(0.0, 1.0).is_finite());
    }

    #[test]
    fn generator_loss_closed_forms() {
        assert!((generator_adversarial_loss(0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(generator_adversarial_loss(1.0) < 1e-6);
        assert!(generator_adversarial_loss(0.0).is_finite());
    }

    #[test]
    fn l1_closed_forms() {
        let ones = Tensor::filled(3, 4, 4, 1.0f32);
        let zeros = Tensor::zeros(3, 4, 4);
        assert_eq!(l1_loss(&ones, &ones).unwrap(), 0.0);
        assert_eq!(l1_loss(&ones, &zeros).unwrap(), 1.0);
        assert!(l1_loss(&ones, &Tensor::zeros(3, 4, 2)).is_err());
    }

    #[test]
    fn config_validation_names_key() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("epochs")));
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("batch_size")));
    }
}
