//! Value types shared by the whole pipeline.

use std::fmt;
use std::str::FromStr;

use crossgan_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default flow clamp `c`, in pixels per frame.
pub const DEFAULT_FLOW_CLAMP: f32 = 16.0;

/// One RGB video frame with unit-range pixels, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub pixels: Tensor<f32>,
    pub index: usize,
    pub video_id: String,
}

impl Frame {
    pub fn new(video_id: impl Into<String>, index: usize, pixels: Tensor<f32>) -> Result<Self> {
        if pixels.channels() != 3 {
            return Err(Error::input(format!(
                "a frame has 3 channels, got {}",
                pixels.channels()
            )));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!("frame pixel {v} outside [0, 1]")));
        }
        Ok(Self {
            pixels,
            index,
            video_id: video_id.into(),
        })
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}

/// Dense optical flow: the raw field plus its 3-channel unit-range encoding
/// (horizontal, vertical, magnitude).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowImage {
    pub channels: Tensor<f32>,
    pub raw_u: Vec<f32>,
    pub raw_v: Vec<f32>,
    pub clamp: f32,
    pub index: usize,
    pub video_id: String,
}

impl FlowImage {
    pub fn from_raw(
        video_id: impl Into<String>,
        index: usize,
        width: usize,
        height: usize,
        raw_u: Vec<f32>,
        raw_v: Vec<f32>,
        clamp: f32,
    ) -> Result<Self> {
        let channels = encode_flow(&raw_u, &raw_v, width, height, clamp)?;
        Ok(Self {
            channels,
            raw_u,
            raw_v,
            clamp,
            index,
            video_id: video_id.into(),
        })
    }

    pub fn width(&self) -> usize {
        self.channels.width()
    }

    pub fn height(&self) -> usize {
        self.channels.height()
    }

    /// Raw magnitude in pixels per frame, row-major.
    pub fn magnitude(&self) -> Vec<f32> {
        self.raw_u
            .iter()
            .zip(&self.raw_v)
            .map(|(&u, &v)| (u as f64).hypot(v as f64) as f32)
            .collect()
    }
}

/// Maps raw flow to the `(u, v, magnitude)` unit-range encoding.
///
/// `u` and `v` are clamped to `[-c, c]` and mapped affinely onto `[0, 1]`;
/// the magnitude is clamped to `[0, c * sqrt(2)]` and scaled onto `[0, 1]`.
pub fn encode_flow(
    raw_u: &[f32],
    raw_v: &[f32],
    width: usize,
    height: usize,
    clamp: f32,
) -> Result<Tensor<f32>> {
    let n = width * height;
    if raw_u.len() != n || raw_v.len() != n {
        return Err(Error::input(format!(
            "flow components have {} and {} values, expected {width}x{height}",
            raw_u.len(),
            raw_v.len()
        )));
    }
    if !(clamp.is_finite() && clamp > 0.0) {
        return Err(Error::config(format!("flow clamp {clamp} must be positive")));
    }
    let c = clamp as f64;
    let max_mag = c * std::f64::consts::SQRT_2;
    let mut data = vec![0.0f32; 3 * n];
    for i in 0..n {
        let (u, v) = (raw_u[i] as f64, raw_v[i] as f64);
        if !(u.is_finite() && v.is_finite()) {
            return Err(Error::input("flow contains non-finite values"));
        }
        data[i] = ((u.clamp(-c, c) + c) / (2.0 * c)) as f32;
        data[n + i] = ((v.clamp(-c, c) + c) / (2.0 * c)) as f32;
        data[2 * n + i] = (u.hypot(v).min(max_mag) / max_mag) as f32;
    }
    Ok(Tensor::from_vec(3, height, width, data).expect("length checked"))
}

/// Inverse of [`encode_flow`] on the clamped range. Returns `(u, v, magnitude)`.
pub fn decode_flow(channels: &Tensor<f32>, clamp: f32) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let c = clamp as f64;
    let max_mag = c * std::f64::consts::SQRT_2;
    let lin = |p: &[f32], scale: f64, offset: f64| -> Vec<f32> {
        p.iter().map(|&e| (e as f64 * scale - offset) as f32).collect()
    };
    (
        lin(channels.plane(0), 2.0 * c, c),
        lin(channels.plane(1), 2.0 * c, c),
        lin(channels.plane(2), max_mag, 0.0),
    )
}

/// Translation direction of one cross-channel task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Appearance to motion.
    #[serde(rename = "f2o")]
    FrameToFlow,
    /// Motion to appearance.
    #[serde(rename = "o2f")]
    FlowToFrame,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::FrameToFlow => "f2o",
            Direction::FlowToFrame => "o2f",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f2o" => Ok(Direction::FrameToFlow),
            "o2f" => Ok(Direction::FlowToFrame),
            other => Err(Error::config(format!("unknown direction {other:?} (use f2o or o2f)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ChannelImage {
    Frame(Frame),
    Flow(FlowImage),
}

impl ChannelImage {
    pub fn tensor(&self) -> &Tensor<f32> {
        match self {
            ChannelImage::Frame(f) => &f.pixels,
            ChannelImage::Flow(o) => &o.channels,
        }
    }

    pub fn video_id(&self) -> &str {
        match self {
            ChannelImage::Frame(f) => &f.video_id,
            ChannelImage::Flow(o) => &o.video_id,
        }
    }

    pub fn index(&self) -> usize {
        match self {
            ChannelImage::Frame(f) => f.index,
            ChannelImage::Flow(o) => o.index,
        }
    }
}

/// One training example of a cross-channel task.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    input: ChannelImage,
    target: ChannelImage,
    direction: Direction,
}

impl PairedSample {
    pub fn new(frame: Frame, flow: FlowImage, direction: Direction) -> Result<Self> {
        if frame.video_id != flow.video_id || frame.index != flow.index {
            return Err(Error::input(format!(
                "frame {}/{} cannot pair with flow {}/{}",
                frame.video_id, frame.index, flow.video_id, flow.index
            )));
        }
        if frame.pixels.shape() != flow.channels.shape() {
            return Err(Error::input(format!(
                "frame shape {:?} differs from flow shape {:?}",
                frame.pixels.shape(),
                flow.channels.shape()
            )));
        }
        let (input, target) = match direction {
            Direction::FrameToFlow => (ChannelImage::Frame(frame), ChannelImage::Flow(flow)),
            Direction::FlowToFrame => (ChannelImage::Flow(flow), ChannelImage::Frame(frame)),
        };
        Ok(Self {
            input,
            target,
            direction,
        })
    }

    pub fn input(&self) -> &ChannelImage {
        &self.input
    }

    pub fn target(&self) -> &ChannelImage {
        &self.target
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }
}

/// Pairs `frames[t]` with `flows[t]` (the flow from `t` to `t + 1`).
pub fn build_pairs(
    frames: &[Frame],
    flows: &[FlowImage],
    direction: Direction,
) -> Result<Vec<PairedSample>> {
    if frames.len() != flows.len() + 1 && !(frames.is_empty() && flows.is_empty()) {
        return Err(Error::input(format!(
            "{} frames need {} flows, got {}",
            frames.len(),
            frames.len().saturating_sub(1),
            flows.len()
        )));
    }
    frames
        .iter()
        .zip(flows)
        .map(|(f, o)| PairedSample::new(f.clone(), o.clone(), direction))
        .collect()
}

/// Square grid of patch scores for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub grid: Vec<f64>,
    pub size: usize,
    pub video_id: String,
    pub index: usize,
}

impl ScoreMap {
    pub fn new(video_id: impl Into<String>, index: usize, size: usize, grid: Vec<f64>) -> Result<Self> {
        if grid.len() != size * size {
            return Err(Error::input(format!(
                "{} cells cannot fill a {size}x{size} grid",
                grid.len()
            )));
        }
        Ok(Self {
            grid,
            size,
            video_id: video_id.into(),
            index,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.size + col]
    }

    pub fn max(&self) -> f64 {
        self.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major index of the first maximal cell.
    pub fn argmax(&self) -> usize {
        let m = self.max();
        self.grid.iter().position(|&v| v == m).unwrap_or(0)
    }
}

/// Full-resolution abnormality scores in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AbnormalityMap {
    pub values: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub video_id: String,
    pub index: usize,
}

impl AbnormalityMap {
    pub fn new(
        video_id: impl Into<String>,
        index: usize,
        width: usize,
        height: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::input(format!(
                "{} values cannot fill a {width}x{height} map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!("abnormality value {v} outside [0, 1]")));
        }
        Ok(Self {
            values,
            width,
            height,
            video_id: video_id.into(),
            index,
        })
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Binary pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }
}

/// Per-frame annotation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    frame_label: bool,
    pixel_mask: Option<Mask>,
}

impl GroundTruth {
    pub fn unmasked(abnormal: bool) -> Self {
        Self {
            frame_label: abnormal,
            pixel_mask: None,
        }
    }

    /// The frame label follows from the mask: abnormal iff any pixel is set.
    pub fn from_mask(mask: Mask) -> Self {
        Self {
            frame_label: mask.any(),
            pixel_mask: Some(mask),
        }
    }

    pub fn is_abnormal(&self) -> bool {
        self.frame_label
    }

    pub fn mask(&self) -> Option<&Mask> {
        self.pixel_mask.as_ref()
    }
}

/// Bilinear resampling of one row-major plane with pixel-centre alignment.
pub fn resample_plane(src: &[f32], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    if width == out_w && height == out_h {
        return src.to_vec();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let xs = axis(width, out_w);
    let ys = axis(height, out_h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let p = |y: usize, x: usize| src[y * width + x] as f64;
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

/// Rescales a 1- or 3-channel image to `resolution x resolution`, replicating
/// grayscale into three channels and clamping to `[0, 1]`.
pub fn rescale_frame(image: &Tensor<f32>, resolution: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = image.shape();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::input("cannot rescale an empty image"));
    }
    if c != 1 && c != 3 {
        return Err(Error::input(format!("expected 1 or 3 channels, got {c}")));
    }
    if resolution == 0 {
        return Err(Error::config("resolution must be positive"));
    }
    let mut data = Vec::with_capacity(3 * resolution * resolution);
    for k in 0..3 {
        let plane = image.plane(if c == 1 { 0 } else { k });
        data.extend(
            resample_plane(plane, w, h, resolution, resolution)
                .into_iter()
                .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }),
        );
    }
    Ok(Tensor::from_vec(3, resolution, resolution, data).expect("length matches"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(vid: &str, t: usize) -> Frame {
        Frame::new(vid, t, Tensor::filled(3, 4, 4, 0.25)).unwrap()
    }

    fn flow(vid: &str, t: usize) -> FlowImage {
        FlowImage::from_raw(vid, t, 4, 4, vec![0.0; 16], vec![0.0; 16], DEFAULT_FLOW_CLAMP).unwrap()
    }

    #[test]
    fn zero_flow_encodes_to_midpoint() {
        let o = flow("a", 0);
        assert!(o.channels.plane(0).iter().all(|&v| v == 0.5));
        assert!(o.channels.plane(1).iter().all(|&v| v == 0.5));
        assert!(o.channels.plane(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clamp_boundary_encodes_to_one() {
        let c = DEFAULT_FLOW_CLAMP;
        let t = encode_flow(&[c; 4], &[0.0; 4], 2, 2, c).unwrap();
        assert!(t.plane(0).iter().all(|&v| v == 1.0));
        assert!(t.plane(1).iter().all(|&v| v == 0.5));
        let t = encode_flow(&[100.0], &[-100.0], 1, 1, c).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn encode_rejects_shape_mismatch() {
        assert!(matches!(encode_flow(&[0.0; 3], &[0.0; 4], 2, 2, 16.0), Err(Error::Input(_))));
    }

    #[test]
    fn pairs_follow_direction() {
        let frames: Vec<_> = (0..3).map(|t| frame("v", t)).collect();
        let flows: Vec<_> = (0..2).map(|t| flow("v", t)).collect();
        let fo = build_pairs(&frames, &flows, Direction::FrameToFlow).unwrap();
        assert_eq!(fo.len(), 2);
        assert!(matches!(fo[1].input(), ChannelImage::Frame(f) if f.index == 1));
        assert!(matches!(fo[1].target(), ChannelImage::Flow(o) if o.index == 1));
        let of = build_pairs(&frames, &flows, Direction::FlowToFrame).unwrap();
        assert!(matches!(of[0].input(), ChannelImage::Flow(_)));
        assert!(matches!(of[0].target(), ChannelImage::Frame(_)));
        assert!(build_pairs(&frames[..1], &[], Direction::FrameToFlow).unwrap().is_empty());
        assert!(build_pairs(&frames, &flows[..1], Direction::FrameToFlow).is_err());
    }

    #[test]
    fn pairs_reject_misaligned_indices() {
        let frames = vec![frame("v", 0), frame("v", 1)];
        assert!(build_pairs(&frames, &[flow("v", 5)], Direction::FrameToFlow).is_err());
        assert!(build_pairs(&frames, &[flow("w", 0)], Direction::FrameToFlow).is_err());
    }

    #[test]
    fn rescale_identity_and_constant() {
        let img = Tensor::from_fn(3, 8, 8, |c, y, x| ((c + y * 8 + x) % 7) as f32 / 7.0);
        assert_eq!(rescale_frame(&img, 8).unwrap(), img);
        let constant = Tensor::filled(3, 16, 16, 0.375f32);
        let out = rescale_frame(&constant, 8).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn grayscale_is_replicated() {
        let img = Tensor::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f32 / 16.0);
        let out = rescale_frame(&img, 4).unwrap();
        assert_eq!(out.plane(0), img.plane(0));
        assert_eq!(out.plane(1), img.plane(0));
        assert_eq!(out.plane(2), img.plane(0));
    }

    #[test]
    fn rescale_rejects_empty() {
        assert!(matches!(rescale_frame(&Tensor::zeros(3, 0, 0), 4), Err(Error::Input(_))));
    }

    #[test]
    fn ground_truth_label_follows_mask() {
        let mut m = Mask::empty(3, 3);
        assert!(!GroundTruth::from_mask(m.clone()).is_abnormal());
        m.data[4] = true;
        assert!(GroundTruth::from_mask(m).is_abnormal());
    }
}
