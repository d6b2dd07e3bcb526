//! Fully-convolutional patch discriminator.
//!
//! The condition image and the candidate image are stacked into one
//! 6-channel input (condition first). With the default plan of three
//! stride-2 stages followed by two stride-1 stages, all 4x4 kernels with
//! padding 1, a 256x256 input yields a 30x30 logit grid and every grid cell
//! sees a 70x70 input window. There is deliberately no normalization layer:
//! per-sample statistics would couple every cell to the whole image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layers::{leaky_relu, leaky_relu_backward, sigmoid, Conv2d, ConvGeometry};
use crate::param::{Param, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const KERNEL: usize = 4;
const PADDING: usize = 1;
const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub resolution: usize,
    pub base_filters: usize,
    /// Channels of each of the two stacked images.
    pub image_channels: usize,
    /// Number of stride-2 stages; two stride-1 stages always follow.
    pub downsampling_stages: usize,
}

impl PatchConfig {
    pub fn for_resolution(resolution: usize) -> Self {
        Self {
            resolution,
            base_filters: 64,
            image_channels: 3,
            downsampling_stages: 3,
        }
    }

    pub fn with_base_filters(mut self, base_filters: usize) -> Self {
        self.base_filters = base_filters;
        self
    }

    pub fn with_downsampling_stages(mut self, stages: usize) -> Self {
        self.downsampling_stages = stages;
        self
    }

    pub fn input_channels(&self) -> usize {
        2 * self.image_channels
    }

    pub fn stage_count(&self) -> usize {
        self.downsampling_stages + 2
    }

    /// Side length of the score grid: `R / 2^d - 2`.
    pub fn grid_size(&self) -> Result<usize> {
        let d = self.downsampling_stages;
        if d == 0 || d >= 16 {
            return Err(NnError::Config(format!("unsupported downsampling depth {d}")));
        }
        let div = 1usize << d;
        if self.resolution % div != 0 || self.resolution / div < 3 {
            return Err(NnError::Config(format!(
                "resolution {} is unsupported: it must be a multiple of {div} and at least {}",
                self.resolution,
                3 * div
            )));
        }
        Ok(self.resolution / div - 2)
    }

    /// Input window seen by one grid cell.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        for s in (0..self.stage_count()).rev() {
            rf = (rf - 1) * self.stride(s) + KERNEL;
        }
        rf
    }

    /// Top-left input coordinate (possibly negative) of the window seen by grid index `i`.
    pub fn window_origin(&self, i: usize) -> isize {
        let mut start = i as isize;
        for s in (0..self.stage_count()).rev() {
            start = start * self.stride(s) as isize - PADDING as isize;
        }
        start
    }

    fn stride(&self, stage: usize) -> usize {
        if stage < self.downsampling_stages {
            2
        } else {
            1
        }
    }

    fn filters(&self, stage: usize) -> usize {
        if stage + 1 == self.stage_count() {
            1
        } else {
            self.base_filters << stage.min(3)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 || self.image_channels == 0 {
            return Err(NnError::Config("filter and channel counts must be positive".into()));
        }
        self.grid_size().map(|_| ())
    }
}

/// Patch discriminator network producing a grid of logits.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator<T> {
    config: PatchConfig,
    convs: Vec<Conv2d<T>>,
}

/// Intermediate activations of one discriminator forward pass.
#[derive(Clone, Debug)]
pub struct PatchTape<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
}

impl<T: Scalar> PatchDiscriminator<T> {
    pub fn new(config: PatchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(config.stage_count());
        let mut cin = config.input_channels();
        for s in 0..config.stage_count() {
            let cout = config.filters(s);
            convs.push(Conv2d::new(
                &format!("stage{s}.conv"),
                cin,
                cout,
                ConvGeometry::new(KERNEL, config.stride(s), PADDING),
                &mut rng,
            ));
            cin = cout;
        }
        Ok(Self { config, convs })
    }

    pub fn config(&self) -> &PatchConfig {
        &self.config
    }

    pub fn grid_size(&self) -> usize {
        self.config.grid_size().expect("validated at construction")
    }

    fn stack(&self, condition: &Tensor<T>, candidate: &Tensor<T>) -> Result<Tensor<T>> {
        let r = self.config.resolution;
        let c = self.config.image_channels;
        for (what, t) in [("condition", condition), ("candidate", candidate)] {
            if t.shape() != (c, r, r) {
                return Err(NnError::Shape(format!(
                    "discriminator {what} image must be {c}x{r}x{r}, got {:?}",
                    t.shape()
                )));
            }
        }
        Tensor::concat_channels(condition, candidate)
    }

    /// Logit grid (`1 x G x G`) for the pair (condition, candidate).
    pub fn logits(&self, condition: &Tensor<T>, candidate: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_tape(condition, candidate)?.0)
    }

    /// Patch realness probabilities (`1 x G x G`).
    pub fn probabilities(&self, condition: &Tensor<T>, candidate: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.logits(condition, candidate)?.map(sigmoid))
    }

    pub fn forward_with_tape(
        &self,
        condition: &Tensor<T>,
        candidate: &Tensor<T>,
    ) -> Result<(Tensor<T>, PatchTape<T>)> {
        let mut x = self.stack(condition, candidate)?;
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        let last = self.convs.len() - 1;
        for (s, conv) in self.convs.iter().enumerate() {
            let y = conv.forward(&x);
            inputs.push(x);
            x = if s == last { y.clone() } else { leaky_relu(&y, SLOPE) };
            pre.push(y);
        }
        Ok((x, PatchTape { inputs, pre }))
    }

    /// Back-propagates a gradient on the logit grid. Returns the gradients
    /// w.r.t. the condition and candidate images.
    pub fn backward(&mut self, tape: &PatchTape<T>, grad_logits: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let last = self.convs.len() - 1;
        let mut g = grad_logits.clone();
        for s in (0..self.convs.len()).rev() {
            if s != last {
                g = leaky_relu_backward(&tape.pre[s], &g, SLOPE);
            }
            g = self.convs[s]
                .backward(&tape.inputs[s], &g, true)
                .expect("input gradient requested");
        }
        g.split_channels(self.config.image_channels)
    }
}

impl<T: Scalar> Parameterized<T> for PatchDiscriminator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.convs.iter().flat_map(|c| [&c.weight, &c.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }
}
