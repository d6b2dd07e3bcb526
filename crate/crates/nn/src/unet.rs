//! Encoder-decoder generator with symmetric skip connections.
//!
//! Stage `k` of the encoder is a stride-2 4x4 convolution; decoder stage `j`
//! (counted from the bottleneck) is a stride-2 4x4 transposed convolution whose
//! input is the previous decoder output concatenated with encoder stage
//! `stages - 1 - j`. Dropout on the first decoder stages is the only source of
//! noise. Images cross the public boundary in unit range and are mapped to
//! `[-1, 1]` internally, with a `tanh` output head.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layers::{
    apply_mask, dropout_mask, leaky_relu, leaky_relu_backward, tanh, tanh_backward, ChannelNorm,
    ConvGeometry, ConvTranspose2d, Conv2d, NormCache,
};
use crate::param::{Param, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const STAGE_GEOMETRY: ConvGeometry = ConvGeometry::new(4, 2, 1);
const ENCODER_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub resolution: usize,
    pub stages: usize,
    pub base_filters: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dropout_rate: f64,
    /// Number of decoder stages, counted from the bottleneck, that apply dropout.
    pub dropout_stages: usize,
}

impl UNetConfig {
    /// Canonical plan: one stage per halving down to a 1x1 bottleneck.
    pub fn for_resolution(resolution: usize) -> Self {
        let stages = if resolution.is_power_of_two() {
            resolution.trailing_zeros() as usize
        } else {
            0
        };
        Self {
            resolution,
            stages,
            base_filters: 64,
            in_channels: 3,
            out_channels: 3,
            dropout_rate: 0.5,
            dropout_stages: 3,
        }
    }

    pub fn with_stages(mut self, stages: usize) -> Self {
        self.stages = stages;
        self
    }

    pub fn with_base_filters(mut self, base_filters: usize) -> Self {
        self.base_filters = base_filters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() {
            return Err(NnError::Config(format!(
                "generator resolution {} is not a power of two",
                self.resolution
            )));
        }
        if self.stages < 2 {
            return Err(NnError::Config(format!(
                "generator needs at least 2 stages, got {}",
                self.stages
            )));
        }
        if self.stages >= usize::BITS as usize || self.resolution < (1usize << self.stages) {
            return Err(NnError::Config(format!(
                "resolution {} cannot be halved through {} stages",
                self.resolution, self.stages
            )));
        }
        if self.base_filters == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(NnError::Config("filter and channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Filters produced by encoder stage `k`: `base * min(2^k, 8)`.
    pub fn encoder_filters(&self, k: usize) -> usize {
        self.base_filters << k.min(3)
    }

    /// Spatial extent of the bottleneck feature map.
    pub fn bottleneck_size(&self) -> usize {
        self.resolution >> self.stages
    }
}

#[derive(Clone, Debug)]
struct EncoderStage<T> {
    conv: Conv2d<T>,
    norm: Option<ChannelNorm<T>>,
}

#[derive(Clone, Debug)]
struct DecoderStage<T> {
    conv: ConvTranspose2d<T>,
    norm: Option<ChannelNorm<T>>,
    dropout: bool,
}

/// Conditional generator.
#[derive(Debug)]
pub struct UNet<T> {
    config: UNetConfig,
    encoders: Vec<EncoderStage<T>>,
    decoders: Vec<DecoderStage<T>>,
    forward_calls: AtomicUsize,
}

impl<T: Scalar> Clone for UNet<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoders: self.encoders.clone(),
            decoders: self.decoders.clone(),
            forward_calls: AtomicUsize::new(self.forward_calls()),
        }
    }
}

/// Intermediate activations of one generator forward pass.
#[derive(Clone, Debug)]
pub struct UNetTape<T> {
    enc_inputs: Vec<Tensor<T>>,
    enc_conv: Vec<Tensor<T>>,
    enc_norm: Vec<Option<NormCache<T>>>,
    enc_out: Vec<Tensor<T>>,
    dec_pre: Vec<Tensor<T>>,
    dec_inputs: Vec<Tensor<T>>,
    dec_norm: Vec<Option<NormCache<T>>>,
    dec_mask: Vec<Option<Vec<T>>>,
    output_tanh: Tensor<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.stages;
        let mut encoders = Vec::with_capacity(n);
        for k in 0..n {
            let cin = if k == 0 {
                config.in_channels
            } else {
                config.encoder_filters(k - 1)
            };
            let cout = config.encoder_filters(k);
            let name = format!("enc{k}");
            let conv = Conv2d::new(&format!("{name}.conv"), cin, cout, STAGE_GEOMETRY, &mut rng);
            // Outermost and innermost encoder stages carry no normalization.
            let norm = (k > 0 && k + 1 < n)
                .then(|| ChannelNorm::new(&format!("{name}.norm"), cout, &mut rng));
            encoders.push(EncoderStage { conv, norm });
        }
        let mut decoders = Vec::with_capacity(n);
        for j in 0..n {
            let cin = if j == 0 {
                config.encoder_filters(n - 1)
            } else {
                2 * config.encoder_filters(n - 1 - j)
            };
            let last = j + 1 == n;
            let cout = if last {
                config.out_channels
            } else {
                config.encoder_filters(n - 2 - j)
            };
            let name = format!("dec{j}");
            let conv =
                ConvTranspose2d::new(&format!("{name}.conv"), cin, cout, STAGE_GEOMETRY, &mut rng);
            let norm = (!last).then(|| ChannelNorm::new(&format!("{name}.norm"), cout, &mut rng));
            decoders.push(DecoderStage {
                conv,
                norm,
                dropout: !last && j < config.dropout_stages && config.dropout_rate > 0.0,
            });
        }
        Ok(Self {
            config,
            encoders,
            decoders,
            forward_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Number of forward passes evaluated so far (inference and training).
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let r = self.config.resolution;
        if x.shape() != (self.config.in_channels, r, r) {
            return Err(NnError::Shape(format!(
                "generator expects {}x{r}x{r}, got {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Translates a unit-range image. Dropout is active only when `noise` is given.
    pub fn forward(&self, x: &Tensor<T>, noise: Option<&mut dyn rand::RngCore>) -> Result<Tensor<T>> {
        Ok(self.forward_with_tape(x, noise)?.0)
    }

    pub fn forward_with_tape(
        &self,
        x: &Tensor<T>,
        mut noise: Option<&mut dyn rand::RngCore>,
    ) -> Result<(Tensor<T>, UNetTape<T>)> {
        self.check_input(x)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let n = self.config.stages;
        let two = T::from_f64_lossy(2.0);
        let half = T::from_f64_lossy(0.5);

        let mut enc_inputs = Vec::with_capacity(n);
        let mut enc_conv = Vec::with_capacity(n);
        let mut enc_norm = Vec::with_capacity(n);
        let mut enc_out: Vec<Tensor<T>> = Vec::with_capacity(n);
        for (k, stage) in self.encoders.iter().enumerate() {
            let input = if k == 0 {
                x.map(|v| two * v - T::one())
            } else {
                leaky_relu(&enc_out[k - 1], ENCODER_SLOPE)
            };
            let c = stage.conv.forward(&input);
            let (out, cache) = match &stage.norm {
                Some(norm) => {
                    let (y, cache) = norm.forward(&c);
                    (y, Some(cache))
                }
                None => (c.clone(), None),
            };
            enc_inputs.push(input);
            enc_conv.push(c);
            enc_norm.push(cache);
            enc_out.push(out);
        }

        let mut dec_pre = Vec::with_capacity(n);
        let mut dec_inputs = Vec::with_capacity(n);
        let mut dec_norm = Vec::with_capacity(n);
        let mut dec_mask = Vec::with_capacity(n);
        let mut current = enc_out[n - 1].clone();
        let mut output_tanh = None;
        for (j, stage) in self.decoders.iter().enumerate() {
            let pre = if j == 0 {
                current.clone()
            } else {
                Tensor::concat_channels(&current, &enc_out[n - 1 - j])?
            };
            let input = pre.map(|v| v.max(T::zero()));
            let t = stage.conv.forward(&input);
            dec_pre.push(pre);
            dec_inputs.push(input);
            if j + 1 == n {
                output_tanh = Some(tanh(&t));
                dec_norm.push(None);
                dec_mask.push(None);
                break;
            }
            let (mut y, cache) = match &stage.norm {
                Some(norm) => {
                    let (y, cache) = norm.forward(&t);
                    (y, Some(cache))
                }
                None => (t, None),
            };
            let mask = match (&mut noise, stage.dropout) {
                (Some(rng), true) => {
                    let m = dropout_mask(y.data().len(), self.config.dropout_rate, &mut **rng);
                    y = apply_mask(&y, &m);
                    Some(m)
                }
                _ => None,
            };
            dec_norm.push(cache);
            dec_mask.push(mask);
            current = y;
        }
        let output_tanh = output_tanh.expect("decoder has an output stage");
        let out = output_tanh.map(|v| (v + T::one()) * half);
        Ok((
            out,
            UNetTape {
                enc_inputs,
                enc_conv,
                enc_norm,
                enc_out,
                dec_pre,
                dec_inputs,
                dec_norm,
                dec_mask,
                output_tanh,
            },
        ))
    }

    /// Back-propagates `grad_output` (gradient w.r.t. the unit-range output),
    /// accumulating parameter gradients.
    pub fn backward(&mut self, tape: &UNetTape<T>, grad_output: &Tensor<T>) {
        let n = self.config.stages;
        let half = T::from_f64_lossy(0.5);
        let mut enc_grad: Vec<Option<Tensor<T>>> = vec![None; n];
        let add = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            None => *slot = Some(g),
        };

        let mut g = tanh_backward(&tape.output_tanh, &grad_output.map(|v| v * half));
        for j in (0..n).rev() {
            let stage = &mut self.decoders[j];
            if j + 1 < n {
                if let Some(mask) = &tape.dec_mask[j] {
                    g = apply_mask(&g, mask);
                }
                if let (Some(norm), Some(cache)) = (&mut stage.norm, &tape.dec_norm[j]) {
                    g = norm.backward(cache, &g);
                }
            }
            let g_in = stage
                .conv
                .backward(&tape.dec_inputs[j], &g, true)
                .expect("input gradient requested");
            let mut g_pre = g_in;
            for (gv, &p) in g_pre.data_mut().iter_mut().zip(tape.dec_pre[j].data()) {
                if p <= T::zero() {
                    *gv = T::zero();
                }
            }
            if j == 0 {
                add(&mut enc_grad[n - 1], g_pre);
            } else {
                let split = g_pre.channels() - tape.enc_out[n - 1 - j].channels();
                let (g_prev, g_skip) = g_pre.split_channels(split);
                add(&mut enc_grad[n - 1 - j], g_skip);
                g = g_prev;
            }
        }

        for k in (0..n).rev() {
            let Some(mut g) = enc_grad[k].take() else {
                continue;
            };
            let stage = &mut self.encoders[k];
            if let (Some(norm), Some(cache)) = (&mut stage.norm, &tape.enc_norm[k]) {
                g = norm.backward(cache, &g);
            }
            debug_assert_eq!(g.shape(), tape.enc_conv[k].shape());
            let g_in = stage.conv.backward(&tape.enc_inputs[k], &g, k > 0);
            if let Some(g_in) = g_in {
                let g_prev = leaky_relu_backward(&tape.enc_out[k - 1], &g_in, ENCODER_SLOPE);
                add(&mut enc_grad[k - 1], g_prev);
            }
        }
    }
}

impl<T: Scalar> Parameterized<T> for UNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for e in &self.encoders {
            out.push(&e.conv.weight);
            out.push(&e.conv.bias);
            if let Some(n) = &e.norm {
                out.push(&n.gamma);
                out.push(&n.beta);
            }
        }
        for d in &self.decoders {
            out.push(&d.conv.weight);
            out.push(&d.conv.bias);
            if let Some(n) = &d.norm {
                out.push(&n.gamma);
                out.push(&n.beta);
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for e in &mut self.encoders {
            out.push(&mut e.conv.weight);
            out.push(&mut e.conv.bias);
            if let Some(n) = &mut e.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        for d in &mut self.decoders {
            out.push(&mut d.conv.weight);
            out.push(&mut d.conv.bias);
            if let Some(n) = &mut d.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }
}

/// Seeded dropout noise source for [`UNet::forward`].
pub fn noise_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
