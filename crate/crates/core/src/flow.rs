//! Dense optical flow between consecutive frames (coarse-to-fine Horn-Schunck
//! with warping) and the `.flo` file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{resample_plane, FlowImage, Frame, Mask, DEFAULT_FLOW_CLAMP};
use crate::error::{write_file, Error, Result};

/// Little-endian `f32` tag that opens every `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

/// Largest per-warp change of either flow component, in pixels at the current level.
const MAX_INCREMENT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub pyramid_levels: usize,
    /// Jacobi sweeps after each warp.
    pub iterations_per_level: usize,
    pub warps_per_level: usize,
    /// Horn-Schunck `alpha`, in unit-range intensity units.
    pub smoothness_weight: f64,
    /// Raw magnitude (px/frame) above which a pixel counts as moving.
    pub motion_epsilon: f64,
    /// Encoding clamp `c` in px/frame.
    pub clamp: f32,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 2,
            iterations_per_level: 60,
            warps_per_level: 1,
            smoothness_weight: 0.01,
            motion_epsilon: 0.1,
            clamp: DEFAULT_FLOW_CLAMP,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::config(format!("flow.{key}: {why}")));
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels", "must be at least 1");
        }
        if self.iterations_per_level == 0 {
            return bad("iterations_per_level", "must be at least 1");
        }
        if self.warps_per_level == 0 {
            return bad("warps_per_level", "must be at least 1");
        }
        if !(self.smoothness_weight.is_finite() && self.smoothness_weight > 0.0) {
            return bad("smoothness_weight", "must be positive");
        }
        if !(self.motion_epsilon.is_finite() && self.motion_epsilon >= 0.0) {
            return bad("motion_epsilon", "must be non-negative");
        }
        if !(self.clamp.is_finite() && self.clamp > 0.0) {
            return bad("clamp", "must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn zeros(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            data: vec![0.0; w * h],
        }
    }

    fn at(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x0 + 1, y0) * fx;
        let bottom = self.at(x0, y0 + 1) * (1.0 - fx) + self.at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    fn halve(&self) -> Self {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut out = Self::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (2 * x as isize, 2 * y as isize);
                out.data[y * w + x] = 0.25
                    * (self.at(sx, sy) + self.at(sx + 1, sy) + self.at(sx, sy + 1) + self.at(sx + 1, sy + 1));
            }
        }
        out
    }

    /// Bilinear resize; values are multiplied by `gain`.
    fn resize(&self, w: usize, h: usize, gain: f64) -> Self {
        let src: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        let mut out = Self::zeros(w, h);
        for (o, v) in out.data.iter_mut().zip(resample_plane(&src, self.w, self.h, w, h)) {
            *o = v as f64 * gain;
        }
        out
    }
}

fn luminance(frame: &Frame) -> Plane {
    let p = &frame.pixels;
    let (r, g, b) = (p.plane(0), p.plane(1), p.plane(2));
    Plane {
        w: frame.width(),
        h: frame.height(),
        data: (0..r.len())
            .map(|i| 0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64)
            .collect(),
    }
}

fn pyramid(base: Plane, levels: usize) -> Vec<Plane> {
    let mut out = vec![base];
    while out.len() < levels {
        let last = out.last().expect("nonempty");
        if last.w < 16 || last.h < 16 {
            break;
        }
        let next = last.halve();
        out.push(next);
    }
    out
}

fn refine(a: &Plane, b: &Plane, u: &mut Plane, v: &mut Plane, cfg: &FlowConfig) {
    let (w, h) = (a.w, a.h);
    let alpha2 = cfg.smoothness_weight * cfg.smoothness_weight;
    let mut ix = vec![0.0; w * h];
    let mut iy = vec![0.0; w * h];
    let mut it = vec![0.0; w * h];
    for _ in 0..cfg.warps_per_level {
        let mut warped = Plane::zeros(w, h);
        let mut inside = vec![true; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (sx, sy) = (x as f64 + u.data[i], y as f64 + v.data[i]);
                inside[i] = (0.0..=(w - 1) as f64).contains(&sx) && (0.0..=(h - 1) as f64).contains(&sy);
                warped.data[i] = b.sample(sx, sy);
            }
        }
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = y as usize * w + x as usize;
                let dx = |p: &Plane| 0.5 * (p.at(x + 1, y) - p.at(x - 1, y));
                let dy = |p: &Plane| 0.5 * (p.at(x, y + 1) - p.at(x, y - 1));
                ix[i] = 0.5 * (dx(a) + dx(&warped));
                iy[i] = 0.5 * (dy(a) + dy(&warped));
                it[i] = warped.data[i] - a.data[i];
                // Pixels warped out of frame carry no brightness evidence; smoothness alone fills them.
                if !inside[i] {
                    (ix[i], iy[i], it[i]) = (0.0, 0.0, 0.0);
                }
            }
        }
        let (u0, v0) = (u.clone(), v.clone());
        for _ in 0..cfg.iterations_per_level {
            let (uo, vo) = (u.clone(), v.clone());
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let i = y as usize * w + x as usize;
                    let avg = |p: &Plane| {
                        (p.at(x - 1, y) + p.at(x + 1, y) + p.at(x, y - 1) + p.at(x, y + 1)) / 6.0
                            + (p.at(x - 1, y - 1) + p.at(x + 1, y - 1) + p.at(x - 1, y + 1) + p.at(x + 1, y + 1))
                                / 12.0
                    };
                    let (ub, vb) = (avg(&uo), avg(&vo));
                    let residual = ix[i] * (ub - u0.data[i]) + iy[i] * (vb - v0.data[i]) + it[i];
                    let t = residual / (alpha2 + ix[i] * ix[i] + iy[i] * iy[i]);
                    u.data[i] = ub - ix[i] * t;
                    v.data[i] = vb - iy[i] * t;
                }
            }
        }
        // Residual motion per level is sub-pixel once the coarser estimate is in place.
        for (x, x0) in u.data.iter_mut().zip(&u0.data).chain(v.data.iter_mut().zip(&v0.data)) {
            *x = x0 + (*x - x0).clamp(-MAX_INCREMENT, MAX_INCREMENT);
        }
    }
}

/// Raw flow `(u, v)` from `a` to `b`, row-major, in pixels per frame.
pub fn compute_raw_flow(a: &Frame, b: &Frame, cfg: &FlowConfig) -> Result<(Vec<f32>, Vec<f32>)> {
    cfg.validate()?;
    if a.pixels.shape() != b.pixels.shape() {
        return Err(Error::input(format!(
            "flow endpoints differ in shape: {:?} vs {:?}",
            a.pixels.shape(),
            b.pixels.shape()
        )));
    }
    if a.width() == 0 || a.height() == 0 {
        return Err(Error::input("cannot compute flow on an empty frame"));
    }
    let pa = pyramid(luminance(a), cfg.pyramid_levels);
    let pb = pyramid(luminance(b), cfg.pyramid_levels);
    let coarsest = pa.last().expect("nonempty");
    let mut u = Plane::zeros(coarsest.w, coarsest.h);
    let mut v = Plane::zeros(coarsest.w, coarsest.h);
    for level in (0..pa.len()).rev() {
        let (la, lb) = (&pa[level], &pb[level]);
        if u.w != la.w || u.h != la.h {
            let gx = la.w as f64 / u.w as f64;
            let gy = la.h as f64 / u.h as f64;
            u = u.resize(la.w, la.h, gx);
            v = v.resize(la.w, la.h, gy);
        }
        refine(la, lb, &mut u, &mut v, cfg);
    }
    Ok((
        u.data.iter().map(|&x| x as f32).collect(),
        v.data.iter().map(|&x| x as f32).collect(),
    ))
}

/// Encoded flow from frame `a` to the next frame `b`, indexed like `a`.
pub fn compute_flow(a: &Frame, b: &Frame, cfg: &FlowConfig) -> Result<FlowImage> {
    if a.video_id != b.video_id || b.index != a.index + 1 {
        return Err(Error::input(format!(
            "flow needs consecutive frames, got {}/{} and {}/{}",
            a.video_id, a.index, b.video_id, b.index
        )));
    }
    let (u, v) = compute_raw_flow(a, b, cfg)?;
    FlowImage::from_raw(a.video_id.clone(), a.index, a.width(), a.height(), u, v, cfg.clamp)
}

/// Pixels whose raw flow magnitude exceeds `motion_epsilon`.
pub fn motion_mask(flow: &FlowImage, motion_epsilon: f64) -> Mask {
    Mask {
        width: flow.width(),
        height: flow.height(),
        data: flow
            .magnitude()
            .into_iter()
            .map(|m| m as f64 > motion_epsilon)
            .collect(),
    }
}

/// Raw `.flo` contents: width, height, interleaved `(u, v)` row-major.
pub fn flo_to_bytes(width: usize, height: usize, u: &[f32], v: &[f32]) -> Result<Vec<u8>> {
    if u.len() != width * height || v.len() != width * height {
        return Err(Error::input("flow components do not match the stated size"));
    }
    let dim = |n: usize| i32::try_from(n).map_err(|_| Error::input("flow too large for .flo"));
    let mut out = Vec::with_capacity(12 + 8 * u.len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&dim(width)?.to_le_bytes());
    out.extend_from_slice(&dim(height)?.to_le_bytes());
    for (a, b) in u.iter().zip(v) {
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
    }
    Ok(out)
}

/// Parses `.flo` bytes into `(width, height, u, v)`.
pub fn flo_from_bytes(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>, Vec<f32>)> {
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|s| [s[0], s[1], s[2], s[3]])
            .ok_or_else(|| Error::format("flow file truncated"))
    };
    if f32::from_le_bytes(word(0)?) != FLO_MAGIC {
        return Err(Error::format("bad flow file magic"));
    }
    let width = i32::from_le_bytes(word(1)?);
    let height = i32::from_le_bytes(word(2)?);
    if width <= 0 || height <= 0 {
        return Err(Error::format(format!("bad flow dimensions {width}x{height}")));
    }
    let n = (width as usize)
        .checked_mul(height as usize)
        .ok_or_else(|| Error::format("flow dimensions overflow"))?;
    if bytes.len() != 12 + 8 * n {
        return Err(Error::format(format!(
            "flow file holds {} bytes, a {width}x{height} field needs {}",
            bytes.len(),
            12 + 8 * n
        )));
    }
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        u.push(f32::from_le_bytes(word(3 + 2 * i)?));
        v.push(f32::from_le_bytes(word(4 + 2 * i)?));
    }
    Ok((width as usize, height as usize, u, v))
}

pub fn save_flow(path: &Path, flow: &FlowImage) -> Result<()> {
    let bytes = flo_to_bytes(flow.width(), flow.height(), &flow.raw_u, &flow.raw_v)?;
    write_file(path, bytes)
}

/// Reads a `.flo` file, rescaling the field to `resolution` when needed.
pub fn load_precomputed_flow(
    path: &Path,
    video_id: &str,
    index: usize,
    resolution: Option<usize>,
    clamp: f32,
) -> Result<FlowImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let (w, h, u, v) = flo_from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let (u, v, w, h) = match resolution {
        Some(r) if r != w || r != h => {
            let gx = r as f64 / w as f64;
            let gy = r as f64 / h as f64;
            let scale = |p: Vec<f32>, g: f64| -> Vec<f32> {
                resample_plane(&p, w, h, r, r).into_iter().map(|x| (x as f64 * g) as f32).collect()
            };
            (scale(u, gx), scale(v, gy), r, r)
        }
        _ => (u, v, w, h),
    };
    FlowImage::from_raw(video_id, index, w, h, u, v, clamp)
}
