//! Toy crowd videos: disc-shaped agents drifting over a fixed textured
//! background, with one injected anomalous object in test videos.
//!
//! Every random draw comes from ChaCha8 seeded with `SceneSpec::seed`; the
//! background uses stream 0 and video `k` uses stream `k + 1`. Rendering uses
//! only arithmetic and `sqrt`, so output is bit-identical across platforms.

use crossgan_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Frame, GroundTruth, Mask};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Agent-sized object moving faster than any agent.
    FastObject,
    /// Object twice the agent diameter, also moving fast.
    LargeObject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub resolution: usize,
    pub agent_count: usize,
    /// Agent diameter in pixels.
    pub agent_size: f64,
    /// Agent displacement in pixels per frame.
    pub normal_speed: f64,
    pub anomaly_kind: AnomalyKind,
    pub anomaly_speed_multiplier: f64,
    pub frames_per_video: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            agent_count: 4,
            agent_size: 8.0,
            normal_speed: 1.0,
            anomaly_kind: AnomalyKind::FastObject,
            anomaly_speed_multiplier: 4.0,
            frames_per_video: 200,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_video == 0 {
            return Err(Error::input("scene.frames_per_video must be at least 1"));
        }
        if self.resolution < 16 {
            return Err(Error::input("scene.resolution must be at least 16"));
        }
        if !(self.agent_size >= 2.0 && self.anomaly_diameter() * 2.0 < self.resolution as f64) {
            return Err(Error::input(format!(
                "scene.agent_size {} does not fit a {} px scene",
                self.agent_size, self.resolution
            )));
        }
        if !(self.normal_speed > 0.0 && self.anomaly_speed() < self.resolution as f64 / 4.0) {
            return Err(Error::input("scene.normal_speed must be positive and well below the scene size"));
        }
        if !(self.anomaly_speed_multiplier > 1.0) {
            return Err(Error::input("scene.anomaly_speed_multiplier must exceed 1"));
        }
        Ok(())
    }

    pub fn anomaly_speed(&self) -> f64 {
        self.normal_speed * self.anomaly_speed_multiplier
    }

    pub fn anomaly_diameter(&self) -> f64 {
        match self.anomaly_kind {
            AnomalyKind::FastObject => self.agent_size,
            AnomalyKind::LargeObject => 2.0 * self.agent_size,
        }
    }

    /// Frames `[T/4, 3T/4)` show the anomalous object.
    pub fn anomaly_window(&self) -> std::ops::Range<usize> {
        self.frames_per_video / 4..3 * self.frames_per_video / 4
    }
}

/// A generated video with its annotation and the exact object tracks.
#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub frames: Vec<Frame>,
    pub truth: Vec<GroundTruth>,
    /// Per agent, the centre at every frame.
    pub agent_tracks: Vec<Vec<(f64, f64)>>,
    /// Centre of the anomalous object on the frames where it is visible.
    pub anomaly_track: Vec<Option<(f64, f64)>>,
}

const AGENT_COLORS: [[f64; 3]; 4] = [
    [0.40, 0.80, 1.00],
    [0.45, 0.95, 0.70],
    [0.70, 0.65, 1.00],
    [0.30, 0.85, 0.90],
];
const ANOMALY_COLOR: [f64; 3] = [1.00, 0.45, 0.15];

#[derive(Clone, Debug)]
struct Mover {
    pos: (f64, f64),
    vel: (f64, f64),
    radius: f64,
    color: [f64; 3],
}

impl Mover {
    fn spawn(rng: &mut ChaCha8Rng, size: usize, radius: f64, speed: f64, color: [f64; 3]) -> Self {
        let span = size as f64 - 2.0 * radius;
        let pos = (radius + rng.random::<f64>() * span, radius + rng.random::<f64>() * span);
        let (dx, dy) = loop {
            let dx = rng.random::<f64>() * 2.0 - 1.0;
            let dy = rng.random::<f64>() * 2.0 - 1.0;
            let n = (dx * dx + dy * dy).sqrt();
            if n > 0.25 && n <= 1.0 {
                break (dx / n, dy / n);
            }
        };
        Self {
            pos,
            vel: (dx * speed, dy * speed),
            radius,
            color,
        }
    }

    fn advance(&mut self, size: usize) {
        let hi = size as f64 - self.radius;
        let lo = self.radius;
        let reflect = |p: &mut f64, v: &mut f64| {
            *p += *v;
            if *p < lo {
                *p = 2.0 * lo - *p;
                *v = -*v;
            } else if *p > hi {
                *p = 2.0 * hi - *p;
                *v = -*v;
            }
        };
        reflect(&mut self.pos.0, &mut self.vel.0);
        reflect(&mut self.pos.1, &mut self.vel.1);
    }

    fn paint(&self, img: &mut [Vec<f64>; 3], size: usize) {
        let r = self.radius;
        let x0 = ((self.pos.0 - r - 1.0).floor().max(0.0)) as usize;
        let y0 = ((self.pos.1 - r - 1.0).floor().max(0.0)) as usize;
        let x1 = ((self.pos.0 + r + 1.0).ceil() as usize).min(size);
        let y1 = ((self.pos.1 + r + 1.0).ceil() as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - self.pos.0;
                let dy = y as f64 + 0.5 - self.pos.1;
                let d = (dx * dx + dy * dy).sqrt();
                let cover = (r + 0.5 - d).clamp(0.0, 1.0);
                if cover == 0.0 {
                    continue;
                }
                // A central bump plus a horizontal ramp gives the flow solver texture inside the disc.
                let q = (d / r).min(1.0);
                let shade = 0.75 + 0.2 * (1.0 - q * q) + 0.05 * (dx / r).clamp(-1.0, 1.0);
                for c in 0..3 {
                    let p = &mut img[c][y * size + x];
                    *p = *p * (1.0 - cover) + self.color[c] * shade * cover;
                }
            }
        }
    }

    fn footprint(&self, mask: &mut Mask) {
        let size = mask.width;
        for y in 0..mask.height {
            for x in 0..size {
                let dx = x as f64 + 0.5 - self.pos.0;
                let dy = y as f64 + 0.5 - self.pos.1;
                if (dx * dx + dy * dy).sqrt() <= self.radius {
                    mask.data[y * size + x] = true;
                }
            }
        }
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Two octaves of lattice value noise around a muted base colour.
pub fn background(spec: &SceneSpec) -> [Vec<f64>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.resolution;
    let base = [0.45, 0.42, 0.38];
    let mut out: [Vec<f64>; 3] = Default::default();
    let octaves = [(8usize, 0.18f64), (3usize, 0.10f64)];
    let lattices: Vec<Vec<f64>> = octaves
        .iter()
        .map(|&(cell, _)| {
            let n = size / cell + 2;
            (0..3 * n * n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
        })
        .collect();
    for c in 0..3 {
        out[c] = vec![base[c]; size * size];
        for (&(cell, amp), lattice) in octaves.iter().zip(&lattices) {
            let n = size / cell + 2;
            for y in 0..size {
                for x in 0..size {
                    let gx = x as f64 / cell as f64;
                    let gy = y as f64 / cell as f64;
                    let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
                    let (fx, fy) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
                    let at = |i: usize, j: usize| lattice[(c * n + j) * n + i];
                    let top = at(ix, iy) * (1.0 - fx) + at(ix + 1, iy) * fx;
                    let bottom = at(ix, iy + 1) * (1.0 - fx) + at(ix + 1, iy + 1) * fx;
                    out[c][y * size + x] += amp * (top * (1.0 - fy) + bottom * fy);
                }
            }
        }
    }
    out
}

fn render(
    spec: &SceneSpec,
    movers: &mut [Mover],
    anomaly: Option<&mut Mover>,
    video_id: &str,
) -> Result<SyntheticVideo> {
    let size = spec.resolution;
    let bg = background(spec);
    let window = spec.anomaly_window();
    let mut frames = Vec::with_capacity(spec.frames_per_video);
    let mut truth = Vec::with_capacity(spec.frames_per_video);
    let mut agent_tracks = vec![Vec::with_capacity(spec.frames_per_video); movers.len()];
    let mut anomaly_track = Vec::with_capacity(spec.frames_per_video);
    let mut anomaly = anomaly;
    for t in 0..spec.frames_per_video {
        let mut img = bg.clone();
        for (m, track) in movers.iter().zip(agent_tracks.iter_mut()) {
            m.paint(&mut img, size);
            track.push(m.pos);
        }
        let mut mask = Mask::empty(size, size);
        match anomaly.as_deref_mut() {
            Some(a) if window.contains(&t) => {
                a.paint(&mut img, size);
                a.footprint(&mut mask);
                anomaly_track.push(Some(a.pos));
                a.advance(size);
            }
            _ => anomaly_track.push(None),
        }
        for m in movers.iter_mut() {
            m.advance(size);
        }
        let data = img
            .iter()
            .flat_map(|p| p.iter().map(|&v| v.clamp(0.0, 1.0) as f32))
            .collect();
        frames.push(Frame::new(video_id, t, Tensor::from_vec(3, size, size, data)?)?);
        truth.push(GroundTruth::from_mask(mask));
    }
    Ok(SyntheticVideo {
        video_id: video_id.to_owned(),
        frames,
        truth,
        agent_tracks,
        anomaly_track,
    })
}

fn agents(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Mover> {
    (0..spec.agent_count)
        .map(|k| {
            Mover::spawn(
                rng,
                spec.resolution,
                spec.agent_size / 2.0,
                spec.normal_speed,
                AGENT_COLORS[k % AGENT_COLORS.len()],
            )
        })
        .collect()
}

fn video_rng(spec: &SceneSpec, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream + 1);
    rng
}

/// Agents only; every frame is labeled normal.
pub fn generate_normal_video(spec: &SceneSpec, stream: u64, video_id: &str) -> Result<SyntheticVideo> {
    spec.validate()?;
    let mut rng = video_rng(spec, stream);
    let mut movers = agents(spec, &mut rng);
    render(spec, &mut movers, None, video_id)
}

/// Agents plus one anomalous object, visible on [`SceneSpec::anomaly_window`].
pub fn generate_abnormal_video(spec: &SceneSpec, stream: u64, video_id: &str) -> Result<SyntheticVideo> {
    spec.validate()?;
    let mut rng = video_rng(spec, stream);
    let mut movers = agents(spec, &mut rng);
    let mut anomaly = Mover::spawn(
        &mut rng,
        spec.resolution,
        spec.anomaly_diameter() / 2.0,
        spec.anomaly_speed(),
        ANOMALY_COLOR,
    );
    render(spec, &mut movers, Some(&mut anomaly), video_id)
}

/// A full train/test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub train_videos: usize,
    /// One abnormal test video per entry.
    pub test_anomalies: Vec<AnomalyKind>,
    pub scene: SceneSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            train_videos: 2,
            test_anomalies: vec![AnomalyKind::FastObject, AnomalyKind::LargeObject],
            scene: SceneSpec::default(),
        }
    }
}

impl DatasetSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        spec.scene.validate()?;
        Ok(spec)
    }

    /// Normal training videos, named `train_000`, ...
    pub fn train(&self) -> Result<Vec<SyntheticVideo>> {
        (0..self.train_videos)
            .map(|k| generate_normal_video(&self.scene, k as u64, &format!("train_{k:03}")))
            .collect()
    }

    /// Abnormal test videos, named `test_000`, ...; their streams follow the training ones.
    pub fn test(&self) -> Result<Vec<SyntheticVideo>> {
        self.test_anomalies
            .iter()
            .enumerate()
            .map(|(k, &kind)| {
                let scene = SceneSpec {
                    anomaly_kind: kind,
                    ..self.scene.clone()
                };
                generate_abnormal_video(&scene, (self.train_videos + k) as u64, &format!("test_{k:03}"))
            })
            .collect()
    }
}
