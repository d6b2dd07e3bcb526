//! Ablation detectors: generator reconstruction error and single-channel
//! discriminators.

use crossgan_nn::Tensor;
use rayon::prelude::*;

use crate::data::{AbnormalityMap, Direction, FlowImage, Frame};
use crate::detection::{appearance_scores, detect_video, maps_from_grids, motion_scores, DetectionMode, GridGeometry};
use crate::error::{Error, Result};
use crate::training::Task;

/// Weights of the appearance and motion errors in the generator baseline.
pub const ERROR_WEIGHTS: (f64, f64) = (1.0, 2.0);

/// Per-pixel absolute reconstruction errors, channel-major `3 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionErrors {
    pub e_f: Tensor<f32>,
    pub e_o: Tensor<f32>,
    pub video_id: String,
    pub index: usize,
}

impl ReconstructionErrors {
    pub fn width(&self) -> usize {
        self.e_f.width()
    }

    pub fn height(&self) -> usize {
        self.e_f.height()
    }
}

/// `(r_O, r_F)`: each generator applied to its input channel, dropout off.
pub fn reconstruct(task_fo: &Task, task_of: &Task, frame: &Frame, flow: &FlowImage) -> Result<(Tensor<f32>, Tensor<f32>)> {
    for (task, direction) in [(task_fo, Direction::FrameToFlow), (task_of, Direction::FlowToFrame)] {
        if task.direction != direction {
            return Err(Error::config(format!("expected a {direction} checkpoint, got {}", task.direction)));
        }
        if task.resolution() != frame.width() || frame.width() != frame.height() {
            return Err(Error::config(format!(
                "checkpoint resolution {} does not match a {}x{} frame",
                task.resolution(),
                frame.width(),
                frame.height()
            )));
        }
    }
    let r_o = task_fo.generator.forward(&frame.pixels, None)?;
    let r_f = task_of.generator.forward(&flow.channels, None)?;
    Ok((r_o, r_f))
}

fn abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    if !a.same_shape(b) {
        return Err(Error::input(format!("shape {:?} does not match {:?}", a.shape(), b.shape())));
    }
    let (c, h, w) = a.shape();
    Ok(Tensor::from_vec(c, h, w, a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect())?)
}

pub fn reconstruction_errors(
    frame: &Frame,
    flow: &FlowImage,
    r_f: &Tensor<f32>,
    r_o: &Tensor<f32>,
) -> Result<ReconstructionErrors> {
    Ok(ReconstructionErrors {
        e_f: abs_diff(&frame.pixels, r_f)?,
        e_o: abs_diff(&flow.channels, r_o)?,
        video_id: frame.video_id.clone(),
        index: frame.index,
    })
}

/// Mean over colour channels.
fn reduce(e: &Tensor<f32>) -> Vec<f64> {
    let n = e.plane_len();
    let c = e.channels() as f64;
    (0..n)
        .map(|i| (0..e.channels()).map(|k| e.plane(k)[i] as f64).sum::<f64>() / c)
        .collect()
}

fn video_max(maps: &[Vec<f64>]) -> f64 {
    maps.iter().flatten().copied().fold(0.0, f64::max)
}

/// Each channel normalized by its own per-video maximum, fused with weights
/// `ERROR_WEIGHTS` and gated by motion. High error means abnormal.
pub fn generator_baseline_map(
    errors: &[ReconstructionErrors],
    flows: &[FlowImage],
    motion_epsilon: f64,
) -> Result<Vec<AbnormalityMap>> {
    if errors.is_empty() {
        return Err(Error::input("cannot normalize an empty video"));
    }
    if errors.len() != flows.len() {
        return Err(Error::input(format!("{} error maps but {} flows", errors.len(), flows.len())));
    }
    let e_f: Vec<Vec<f64>> = errors.iter().map(|e| reduce(&e.e_f)).collect();
    let e_o: Vec<Vec<f64>> = errors.iter().map(|e| reduce(&e.e_o)).collect();
    let (m_f, m_o) = (video_max(&e_f), video_max(&e_o));
    let scale = |v: f64, m: f64| if m > 0.0 { v / m } else { 0.0 };
    let (w_f, w_o) = ERROR_WEIGHTS;
    errors
        .iter()
        .zip(flows)
        .enumerate()
        .map(|(t, (e, o))| {
            if e.width() != o.width() || e.height() != o.height() {
                return Err(Error::input("error map and flow differ in size"));
            }
            let values = o
                .magnitude()
                .into_iter()
                .enumerate()
                .map(|(i, m)| {
                    if m as f64 > motion_epsilon {
                        ((w_f * scale(e_f[t][i], m_f) + w_o * scale(e_o[t][i], m_o)) / (w_f + w_o)).clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            AbnormalityMap::new(e.video_id.clone(), e.index, e.width(), e.height(), values)
        })
        .collect()
}

/// Generator baseline over one video.
pub fn detect_video_generator(
    task_fo: &Task,
    task_of: &Task,
    frames: &[Frame],
    flows: &[FlowImage],
    motion_epsilon: f64,
) -> Result<Vec<AbnormalityMap>> {
    let errors = frames
        .par_iter()
        .zip(flows.par_iter())
        .map(|(f, o)| {
            let (r_o, r_f) = reconstruct(task_fo, task_of, f, o)?;
            reconstruction_errors(f, o, &r_f, &r_o)
        })
        .collect::<Result<Vec<_>>>()?;
    generator_baseline_map(&errors, &flows[..errors.len()], motion_epsilon)
}

/// The discriminator pipeline using the grid of a single task: the
/// flow-to-frame task scores appearance, the frame-to-flow task scores motion.
pub fn single_channel_map(
    task: &Task,
    frames: &[Frame],
    flows: &[FlowImage],
    motion_epsilon: f64,
) -> Result<Vec<AbnormalityMap>> {
    let geometry = GridGeometry::of(task.discriminator.config())?;
    let grids = frames
        .par_iter()
        .zip(flows.par_iter())
        .map(|(f, o)| match task.direction {
            Direction::FlowToFrame => appearance_scores(task, f, o),
            Direction::FrameToFlow => motion_scores(task, f, o),
        })
        .collect::<Result<Vec<_>>>()?;
    let n = grids.len();
    maps_from_grids(grids, &geometry, &flows[..n], motion_epsilon)
}

/// Runs the detector selected by `mode`. Single-channel modes need only
/// their own task.
pub fn detect_with_mode(
    mode: DetectionMode,
    task_fo: Option<&Task>,
    task_of: Option<&Task>,
    frames: &[Frame],
    flows: &[FlowImage],
    motion_epsilon: f64,
) -> Result<Vec<AbnormalityMap>> {
    fn need(t: Option<&Task>, d: Direction) -> Result<&Task> {
        t.ok_or_else(|| Error::config(format!("this detection mode needs a {d} checkpoint")))
    }
    match mode {
        DetectionMode::Discriminator => detect_video(
            need(task_fo, Direction::FrameToFlow)?,
            need(task_of, Direction::FlowToFrame)?,
            frames,
            flows,
            motion_epsilon,
        ),
        DetectionMode::Generator => detect_video_generator(
            need(task_fo, Direction::FrameToFlow)?,
            need(task_of, Direction::FlowToFrame)?,
            frames,
            flows,
            motion_epsilon,
        ),
        DetectionMode::DiscF => single_channel_map(need(task_of, Direction::FlowToFrame)?, frames, flows, motion_epsilon),
        DetectionMode::DiscO => single_channel_map(need(task_fo, Direction::FrameToFlow)?, frames, flows, motion_epsilon),
    }
}
