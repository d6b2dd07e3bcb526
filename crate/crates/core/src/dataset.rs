//! On-disk layout.
//!
//! ```text
//! <root>/<video>/frames/000000.png   RGB or grayscale, any size
//! <root>/<video>/flow/000000.flo     optional, flow from frame t to t+1
//! <root>/<video>/gt/000000.png       optional mask, nonzero = abnormal
//! ```
//!
//! Abnormality maps are stored as `<dir>/<video>/000000.png` (16-bit
//! grayscale, `round(A * 65535)`) with an `index.csv` of per-frame maxima.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crossgan_nn::Tensor;
use image::{ImageBuffer, Luma, Rgb};
use rayon::prelude::*;

use crate::config::FlowSource;
use crate::data::{build_pairs, rescale_frame, AbnormalityMap, Direction, FlowImage, Frame, GroundTruth, Mask, PairedSample};
use crate::error::{Error, Result};
use crate::flow::{compute_flow, load_precomputed_flow, FlowConfig};
use crate::synthetic::{DatasetSpec, SyntheticVideo};

pub const FRAMES_DIR: &str = "frames";
pub const FLOW_DIR: &str = "flow";
pub const GT_DIR: &str = "gt";
pub const MAP_INDEX: &str = "index.csv";
const MAP_SCALE: f64 = 65535.0;

fn numbered(dir: &Path, index: usize, ext: &str) -> PathBuf {
    dir.join(format!("{index:06}.{ext}"))
}

pub fn frame_path(root: &Path, video: &str, index: usize) -> PathBuf {
    numbered(&root.join(video).join(FRAMES_DIR), index, "png")
}

pub fn flow_path(root: &Path, video: &str, index: usize) -> PathBuf {
    numbered(&root.join(video).join(FLOW_DIR), index, "flo")
}

pub fn gt_path(root: &Path, video: &str, index: usize) -> PathBuf {
    numbered(&root.join(video).join(GT_DIR), index, "png")
}

pub fn map_path(dir: &Path, video: &str, index: usize) -> PathBuf {
    numbered(&dir.join(video), index, "png")
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(format!("listing {}", dir.display()), err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Videos under `root`: subdirectories holding a `frames` directory, sorted by name.
pub fn list_videos(root: &Path) -> Result<Vec<String>> {
    let videos: Vec<String> = read_dir_sorted(root)?
        .into_iter()
        .filter(|p| p.join(FRAMES_DIR).is_dir())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_owned))
        .collect();
    if videos.is_empty() {
        return Err(Error::input(format!("no videos with a {FRAMES_DIR}/ directory under {}", root.display())));
    }
    Ok(videos)
}

/// Number of frames of a video; files must be numbered `000000.png` upwards without gaps.
pub fn frame_count(root: &Path, video: &str) -> Result<usize> {
    let files: Vec<PathBuf> = read_dir_sorted(&root.join(video).join(FRAMES_DIR))?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    for (i, p) in files.iter().enumerate() {
        if *p != frame_path(root, video, i) {
            return Err(Error::input(format!("expected {}, found {}", frame_path(root, video, i).display(), p.display())));
        }
    }
    Ok(files.len())
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(format!("reading {}", path.display()), io),
        other => Error::format(format!("{}: {other}", path.display())),
    })
}

fn save_image<P: image::Pixel<Subpixel = S> + image::PixelWithColorType, S: image::Primitive>(
    path: &Path,
    img: &ImageBuffer<P, Vec<S>>,
) -> Result<()>
where
    [S]: image::EncodableLayout,
{
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(format!("writing {}", path.display()), io),
        other => Error::format(format!("{}: {other}", path.display())),
    })
}

/// Reads a frame and rescales it to `resolution`; grayscale is replicated.
pub fn load_frame(path: &Path, video: &str, index: usize, resolution: usize) -> Result<Frame> {
    let img = open_image(path)?.into_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = Tensor::from_fn(3, h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c]);
    Frame::new(video, index, rescale_frame(&raw, resolution)?)
}

pub fn load_frames(root: &Path, video: &str, resolution: usize) -> Result<Vec<Frame>> {
    let n = frame_count(root, video)?;
    (0..n)
        .into_par_iter()
        .map(|t| load_frame(&frame_path(root, video, t), video, t, resolution))
        .collect()
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a unit-range 3-channel tensor as 8-bit RGB.
pub fn save_rgb_png(path: &Path, pixels: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = pixels.shape();
    if c != 3 {
        return Err(Error::input(format!("expected 3 channels, got {c}")));
    }
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(pixels.plane(0)[i]), to_u8(pixels.plane(1)[i]), to_u8(pixels.plane(2)[i])])
    });
    save_image(path, &img)
}

pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let img = ImageBuffer::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([if mask.data[y as usize * mask.width + x as usize] { 255u8 } else { 0 }])
    });
    save_image(path, &img)
}

/// Reads a mask, nearest-neighbour rescaled to `resolution`.
pub fn load_mask(path: &Path, resolution: usize) -> Result<Mask> {
    let img = open_image(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pick = |p: usize, n: usize| (((p as f64 + 0.5) * n as f64 / resolution as f64) as usize).min(n - 1);
    let mut mask = Mask::empty(resolution, resolution);
    for y in 0..resolution {
        for x in 0..resolution {
            mask.data[y * resolution + x] = img.get_pixel(pick(x, w) as u32, pick(y, h) as u32)[0] != 0;
        }
    }
    Ok(mask)
}

/// Ground truth for the first `count` frames. Without a `gt/` directory every
/// frame is normal; with one, every frame needs its mask.
pub fn load_ground_truth(root: &Path, video: &str, count: usize, resolution: usize) -> Result<Vec<GroundTruth>> {
    if !root.join(video).join(GT_DIR).is_dir() {
        return Ok(vec![GroundTruth::unmasked(false); count]);
    }
    (0..count)
        .into_par_iter()
        .map(|t| {
            let path = gt_path(root, video, t);
            if !path.is_file() {
                return Err(Error::input(format!("missing ground-truth mask {}", path.display())));
            }
            Ok(GroundTruth::from_mask(load_mask(&path, resolution)?))
        })
        .collect()
}

/// Flow for every consecutive frame pair.
pub fn load_flows(
    root: &Path,
    frames: &[Frame],
    source: FlowSource,
    cfg: &FlowConfig,
    resolution: usize,
) -> Result<Vec<FlowImage>> {
    let pairs = frames.len().saturating_sub(1);
    (0..pairs)
        .into_par_iter()
        .map(|t| match source {
            FlowSource::Computed => compute_flow(&frames[t], &frames[t + 1], cfg),
            FlowSource::Precomputed => {
                let f = &frames[t];
                load_precomputed_flow(&flow_path(root, &f.video_id, t), &f.video_id, t, Some(resolution), cfg.clamp)
            }
        })
        .collect()
}

/// Frames, flows and ground truth of one video.
#[derive(Clone, Debug)]
pub struct VideoData {
    pub video_id: String,
    pub frames: Vec<Frame>,
    pub flows: Vec<FlowImage>,
    pub truth: Vec<GroundTruth>,
}

pub fn load_video(root: &Path, video: &str, source: FlowSource, cfg: &FlowConfig, resolution: usize) -> Result<VideoData> {
    let frames = load_frames(root, video, resolution)?;
    if frames.len() < 2 {
        return Err(Error::input(format!("video {video} needs at least two frames")));
    }
    let flows = load_flows(root, &frames, source, cfg, resolution)?;
    let truth = load_ground_truth(root, video, frames.len(), resolution)?;
    Ok(VideoData { video_id: video.to_owned(), frames, flows, truth })
}

/// Training pairs from every video under `root`. Videos whose ground truth
/// marks any frame abnormal are refused.
pub fn training_pairs(
    root: &Path,
    direction: Direction,
    source: FlowSource,
    cfg: &FlowConfig,
    resolution: usize,
) -> Result<Vec<PairedSample>> {
    let mut pairs = Vec::new();
    for video in list_videos(root)? {
        let data = load_video(root, &video, source, cfg, resolution)?;
        if let Some(t) = data.truth.iter().position(GroundTruth::is_abnormal) {
            return Err(Error::input(format!(
                "training video {video} has an abnormal frame ({t}); training uses normal footage only"
            )));
        }
        pairs.extend(build_pairs(&data.frames, &data.flows, direction)?);
    }
    Ok(pairs)
}

/// Writes frames, and masks when `with_truth`, in the dataset layout.
pub fn write_video(root: &Path, video: &SyntheticVideo, with_truth: bool) -> Result<()> {
    video.frames.par_iter().enumerate().try_for_each(|(t, f)| {
        save_rgb_png(&frame_path(root, &video.video_id, t), &f.pixels)?;
        if with_truth {
            let mask = match video.truth[t].mask() {
                Some(m) => m.clone(),
                None => Mask::empty(f.width(), f.height()),
            };
            save_mask_png(&gt_path(root, &video.video_id, t), &mask)?;
        }
        Ok(())
    })
}

/// Generates a dataset into `<out>/train` (normal only) and `<out>/test` (with masks).
pub fn write_dataset(out: &Path, spec: &DatasetSpec) -> Result<()> {
    spec.scene.validate()?;
    for video in spec.train()? {
        write_video(&out.join("train"), &video, false)?;
    }
    for video in spec.test()? {
        write_video(&out.join("test"), &video, true)?;
    }
    Ok(())
}

pub fn save_map_png(path: &Path, map: &AbnormalityMap) -> Result<()> {
    let img = ImageBuffer::from_fn(map.width as u32, map.height as u32, |x, y| {
        Luma([(map.values[y as usize * map.width + x as usize] * MAP_SCALE).round() as u16])
    });
    save_image(path, &img)
}

pub fn load_map_png(path: &Path, video: &str, index: usize) -> Result<AbnormalityMap> {
    let img = open_image(path)?;
    if !matches!(img, image::DynamicImage::ImageLuma16(_)) {
        return Err(Error::format(format!("{}: expected a 16-bit grayscale map", path.display())));
    }
    let img = img.into_luma16();
    let values = img.pixels().map(|p| p[0] as f64 / MAP_SCALE).collect();
    AbnormalityMap::new(video, index, img.width() as usize, img.height() as usize, values)
}

/// Writes maps and their index. Maps are listed in the order given.
pub fn write_maps(dir: &Path, maps: &[AbnormalityMap]) -> Result<()> {
    create_dir(dir)?;
    maps.par_iter().try_for_each(|m| save_map_png(&map_path(dir, &m.video_id, m.index), m))?;
    let mut csv = String::from("video,frame,max\n");
    for m in maps {
        csv.push_str(&format!("{},{},{}\n", m.video_id, m.index, m.max()));
    }
    let path = dir.join(MAP_INDEX);
    let mut file = fs::File::create(&path).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    file.write_all(csv.as_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// `(video, frame)` entries of a map index.
pub fn read_map_index(dir: &Path) -> Result<Vec<(String, usize)>> {
    let path = dir.join(MAP_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines();
    if lines.next() != Some("video,frame,max") {
        return Err(Error::format(format!("{}: missing header video,frame,max", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let bad = || Error::format(format!("{}:{}: malformed row {line:?}", path.display(), n + 2));
            let mut cols = line.split(',');
            let (Some(video), Some(frame), Some(_), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
                return Err(bad());
            };
            Ok((video.to_owned(), frame.parse().map_err(|_| bad())?))
        })
        .collect()
}

pub fn read_maps(dir: &Path) -> Result<Vec<AbnormalityMap>> {
    read_map_index(dir)?
        .par_iter()
        .map(|(v, t)| load_map_png(&map_path(dir, v, *t), v, *t))
        .collect()
}

/// Ground truth matching each map, read from a dataset root at the map's size.
pub fn truth_for_maps(root: &Path, maps: &[AbnormalityMap]) -> Result<Vec<GroundTruth>> {
    maps.par_iter()
        .map(|m| {
            if m.width != m.height {
                return Err(Error::input(format!("map {}/{} is not square", m.video_id, m.index)));
            }
            if !root.join(&m.video_id).join(GT_DIR).is_dir() {
                return Ok(GroundTruth::unmasked(false));
            }
            let path = gt_path(root, &m.video_id, m.index);
            if !path.is_file() {
                return Err(Error::input(format!("missing ground-truth mask {}", path.display())));
            }
            Ok(GroundTruth::from_mask(load_mask(&path, m.width)?))
        })
        .collect()
}
