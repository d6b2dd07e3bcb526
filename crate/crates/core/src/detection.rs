//! Discriminator-only detection: score grids from both tasks, fusion,
//! per-video normalization, upsampling and motion gating.

use crossgan_nn::{PatchConfig, PatchDiscriminator, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AbnormalityMap, Direction, FlowImage, Frame, ScoreMap};
use crate::error::{Error, Result};
use crate::training::Task;

/// Which detector produces the abnormality maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionMode {
    /// Both discriminators, fused.
    #[default]
    Discriminator,
    /// Reconstruction error of both generators.
    Generator,
    /// Appearance channel only: the flow-to-frame discriminator.
    DiscF,
    /// Motion channel only: the frame-to-flow discriminator.
    DiscO,
}

impl std::str::FromStr for DetectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| {
            Error::config(format!(
                "unknown detection mode {s:?} (use discriminator, generator, disc-f or disc-o)"
            ))
        })
    }
}

/// Where the cells of a score grid sit on the input frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub size: usize,
    /// Input pixels between neighbouring cell centres.
    pub stride: f64,
    /// Centre of cell 0, in continuous pixel coordinates (pixel `p` spans `[p, p + 1)`).
    pub first_center: f64,
    /// Side of the frame the grid was computed on.
    pub resolution: usize,
}

impl GridGeometry {
    pub fn of(config: &PatchConfig) -> Result<Self> {
        Ok(Self {
            size: config.grid_size()?,
            stride: (1usize << config.downsampling_stages) as f64,
            first_center: config.window_origin(0) as f64 + config.receptive_field() as f64 / 2.0,
            resolution: config.resolution,
        })
    }

    /// Continuous cell coordinate of output pixel `p` on an axis of `n` pixels.
    fn cell_coordinate(&self, p: usize, n: usize) -> f64 {
        let centre = (p as f64 + 0.5) * self.resolution as f64 / n as f64;
        ((centre - self.first_center) / self.stride).clamp(0.0, (self.size - 1) as f64)
    }
}

/// Patch probabilities of `discriminator` on (condition, candidate).
pub fn score_grid(
    discriminator: &PatchDiscriminator<f32>,
    condition: &Tensor<f32>,
    candidate: &Tensor<f32>,
    video_id: &str,
    index: usize,
) -> Result<ScoreMap> {
    let p = discriminator.probabilities(condition, candidate)?;
    let size = p.width();
    ScoreMap::new(video_id, index, size, p.data().iter().map(|&v| v as f64).collect())
}

/// Mean of all grid cells.
pub fn score_scalar(grid: &ScoreMap) -> f64 {
    grid.grid.iter().sum::<f64>() / grid.grid.len() as f64
}

fn check_task(task: &Task, direction: Direction, resolution: usize) -> Result<()> {
    if task.direction != direction {
        return Err(Error::config(format!(
            "expected a {direction} checkpoint, got {}",
            task.direction
        )));
    }
    if task.resolution() != resolution {
        return Err(Error::config(format!(
            "checkpoint resolution {} does not match frames at {resolution}",
            task.resolution()
        )));
    }
    Ok(())
}

fn check_pair(frame: &Frame, flow: &FlowImage) -> Result<usize> {
    if frame.video_id != flow.video_id || frame.index != flow.index {
        return Err(Error::input(format!(
            "frame {}/{} does not match flow {}/{}",
            frame.video_id, frame.index, flow.video_id, flow.index
        )));
    }
    if frame.pixels.shape() != flow.channels.shape() || frame.width() != frame.height() {
        return Err(Error::input("frame and flow must be square and of equal size"));
    }
    Ok(frame.width())
}

/// Appearance-channel grid `S^F` (from the flow-to-frame discriminator).
pub fn appearance_scores(task_of: &Task, frame: &Frame, flow: &FlowImage) -> Result<ScoreMap> {
    let r = check_pair(frame, flow)?;
    check_task(task_of, Direction::FlowToFrame, r)?;
    score_grid(&task_of.discriminator, &flow.channels, &frame.pixels, &frame.video_id, frame.index)
}

/// Motion-channel grid `S^O` (from the frame-to-flow discriminator).
pub fn motion_scores(task_fo: &Task, frame: &Frame, flow: &FlowImage) -> Result<ScoreMap> {
    let r = check_pair(frame, flow)?;
    check_task(task_fo, Direction::FrameToFlow, r)?;
    score_grid(&task_fo.discriminator, &frame.pixels, &flow.channels, &frame.video_id, frame.index)
}

/// `(S^F, S^O)` for one frame. Generators are never evaluated.
pub fn frame_score_maps(
    task_fo: &Task,
    task_of: &Task,
    frame: &Frame,
    flow: &FlowImage,
) -> Result<(ScoreMap, ScoreMap)> {
    Ok((appearance_scores(task_of, frame, flow)?, motion_scores(task_fo, frame, flow)?))
}

/// Cell-wise sum.
pub fn fuse(s_f: &ScoreMap, s_o: &ScoreMap) -> Result<ScoreMap> {
    if s_f.size != s_o.size {
        return Err(Error::input(format!(
            "cannot fuse {0}x{0} and {1}x{1} grids",
            s_f.size, s_o.size
        )));
    }
    ScoreMap::new(
        s_f.video_id.clone(),
        s_f.index,
        s_f.size,
        s_f.grid.iter().zip(&s_o.grid).map(|(a, b)| a + b).collect(),
    )
}

/// Fused grids of one video together with their common maximum `m_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoScores {
    pub grids: Vec<ScoreMap>,
    pub per_video_max: f64,
}

impl VideoScores {
    pub fn new(grids: Vec<ScoreMap>) -> Result<Self> {
        if grids.is_empty() {
            return Err(Error::input("cannot normalize an empty video"));
        }
        let per_video_max = grids.iter().map(ScoreMap::max).fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { grids, per_video_max })
    }

    /// Every cell divided by `m_s`. A video whose cells are all zero stays zero.
    pub fn normalized(&self) -> Vec<ScoreMap> {
        let m = self.per_video_max;
        self.grids
            .iter()
            .map(|g| ScoreMap {
                grid: g.grid.iter().map(|&v| if m > 0.0 { v / m } else { 0.0 }).collect(),
                ..g.clone()
            })
            .collect()
    }
}

pub fn normalize_video(grids: &[ScoreMap]) -> Result<Vec<ScoreMap>> {
    Ok(VideoScores::new(grids.to_vec())?.normalized())
}

/// Bilinear interpolation between cell centres onto a `width x height` map.
/// Pixels beyond the outermost centres take the nearest edge value.
pub fn upsample_grid(grid: &ScoreMap, geometry: &GridGeometry, width: usize, height: usize) -> Result<Vec<f64>> {
    if grid.size != geometry.size {
        return Err(Error::input(format!(
            "grid is {0}x{0}, geometry expects {1}x{1}",
            grid.size, geometry.size
        )));
    }
    let axis = |n: usize| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|p| {
                let s = geometry.cell_coordinate(p, n);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(grid.size - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let xs = axis(width);
    let ys = axis(height);
    let mut out = Vec::with_capacity(width * height);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = grid.get(y0, x0) * (1.0 - fx) + grid.get(y0, x1) * fx;
            let bottom = grid.get(y1, x0) * (1.0 - fx) + grid.get(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// `1 - N'` on moving pixels, `0` elsewhere.
pub fn abnormality_map(
    upsampled: &[f64],
    flow: &FlowImage,
    motion_epsilon: f64,
) -> Result<AbnormalityMap> {
    let (w, h) = (flow.width(), flow.height());
    if upsampled.len() != w * h {
        return Err(Error::input(format!(
            "{} upsampled values do not cover a {w}x{h} flow",
            upsampled.len()
        )));
    }
    let values = upsampled
        .iter()
        .zip(flow.magnitude())
        .map(|(&n, m)| if m as f64 > motion_epsilon { (1.0 - n).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    AbnormalityMap::new(flow.video_id.clone(), flow.index, w, h, values)
}

fn check_video(frames: &[Frame], flows: &[FlowImage]) -> Result<()> {
    if frames.len() != flows.len() + 1 {
        return Err(Error::input(format!(
            "{} frames need {} flows, got {}",
            frames.len(),
            frames.len().saturating_sub(1),
            flows.len()
        )));
    }
    Ok(())
}

/// Normalization, upsampling and gating shared by every discriminator detector.
pub fn maps_from_grids(
    grids: Vec<ScoreMap>,
    geometry: &GridGeometry,
    flows: &[FlowImage],
    motion_epsilon: f64,
) -> Result<Vec<AbnormalityMap>> {
    let normalized = VideoScores::new(grids)?.normalized();
    normalized
        .par_iter()
        .zip(flows.par_iter())
        .map(|(n, o)| abnormality_map(&upsample_grid(n, geometry, o.width(), o.height())?, o, motion_epsilon))
        .collect()
}

/// Full pipeline over one video: a map for every frame that has a flow.
pub fn detect_video(
    task_fo: &Task,
    task_of: &Task,
    frames: &[Frame],
    flows: &[FlowImage],
    motion_epsilon: f64,
) -> Result<Vec<AbnormalityMap>> {
    check_video(frames, flows)?;
    let geometry = GridGeometry::of(task_fo.discriminator.config())?;
    if GridGeometry::of(task_of.discriminator.config())? != geometry {
        return Err(Error::config("the two checkpoints have different grid geometry"));
    }
    let fused = frames
        .par_iter()
        .zip(flows.par_iter())
        .map(|(f, o)| {
            let (s_f, s_o) = frame_score_maps(task_fo, task_of, f, o)?;
            fuse(&s_f, &s_o)
        })
        .collect::<Result<Vec<_>>>()?;
    maps_from_grids(fused, &geometry, flows, motion_epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_matches_patch_windows() {
        let g = GridGeometry::of(&PatchConfig::for_resolution(256)).unwrap();
        assert_eq!(g.size, 30);
        assert_eq!(g.stride, 8.0);
        assert_eq!(g.first_center, 12.0);
        let g = GridGeometry::of(&PatchConfig::for_resolution(64)).unwrap();
        // Cell centres are symmetric about the frame centre.
        assert_eq!(g.first_center + g.stride * (g.size - 1) as f64, 64.0 - g.first_center);
    }

    #[test]
    fn mode_names() {
        assert_eq!("disc-f".parse::<DetectionMode>().unwrap(), DetectionMode::DiscF);
        assert_eq!("generator".parse::<DetectionMode>().unwrap(), DetectionMode::Generator);
        assert!("both".parse::<DetectionMode>().is_err());
    }
}
