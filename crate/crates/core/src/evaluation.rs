//! Frame-level and pixel-level ROC analysis.
//!
//! Both protocols sweep a threshold `θ` over abnormality maps. At the frame
//! level a frame is flagged when its maximum reaches `θ`. At the pixel level
//! an abnormal frame counts as detected only when the flagged pixels cover at
//! least [`OVERLAP_FRACTION`] of its ground-truth region; false positives are
//! normal frames with any flagged pixel. Abnormal frames that flag pixels but
//! miss the overlap test are counted separately as mislocalized.

use serde::{Deserialize, Serialize};

use crate::data::{AbnormalityMap, GroundTruth};
use crate::error::{Error, Result};

pub const OVERLAP_FRACTION: f64 = 0.4;
/// Evenly spaced thresholds over `[0, 1]`.
pub const GRID_THRESHOLDS: usize = 201;
/// Above every map value, so the curve always starts at `(0, 0)`.
pub const SENTINEL_THRESHOLD: f64 = 1.005;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Frame,
    Pixel,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame" => Ok(Self::Frame),
            "pixel" => Ok(Self::Pixel),
            _ => Err(Error::config(format!("unknown protocol {s:?} (use frame or pixel)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// Pixel protocol only: abnormal frames flagged in the wrong place.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mislocalized: Option<usize>,
}

/// Points ordered by strictly decreasing threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// The default sweep: the even grid, every distinct value in `extra`, and the sentinel.
pub fn thresholds(extra: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut t: Vec<f64> = (0..GRID_THRESHOLDS)
        .map(|i| i as f64 / (GRID_THRESHOLDS - 1) as f64)
        .chain(extra.into_iter().filter(|v| v.is_finite()))
        .chain(std::iter::once(SENTINEL_THRESHOLD))
        .collect();
    sort_descending(&mut t);
    t
}

fn sort_descending(t: &mut Vec<f64>) {
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
}

fn check_classes(positives: usize, negatives: usize) -> Result<()> {
    if positives == 0 || negatives == 0 {
        return Err(Error::input(format!(
            "ROC analysis needs both classes ({positives} abnormal, {negatives} normal frames)"
        )));
    }
    Ok(())
}

/// Number of values in the descending slice that are `>= theta`.
fn count_at_least(descending: &[f64], theta: f64) -> usize {
    descending.partition_point(|&v| v >= theta)
}

fn rate(count: usize, total: usize) -> f64 {
    count as f64 / total as f64
}

fn descending(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Frame-level ROC on per-frame labels.
pub fn frame_level_eval(maps: &[AbnormalityMap], labels: &[bool], thresholds: &[f64]) -> Result<RocCurve> {
    if maps.len() != labels.len() {
        return Err(Error::input(format!("{} maps but {} labels", maps.len(), labels.len())));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (m, &abnormal) in maps.iter().zip(labels) {
        if abnormal { &mut pos } else { &mut neg }.push(m.max());
    }
    check_classes(pos.len(), neg.len())?;
    let (pos, neg) = (descending(pos), descending(neg));
    let mut t = thresholds.to_vec();
    sort_descending(&mut t);
    Ok(RocCurve {
        points: t
            .into_iter()
            .map(|theta| RocPoint {
                threshold: theta,
                tpr: rate(count_at_least(&pos, theta), pos.len()),
                fpr: rate(count_at_least(&neg, theta), neg.len()),
                mislocalized: None,
            })
            .collect(),
    })
}

/// Per-frame quantities the pixel protocol needs, independent of `θ`.
struct PixelFrame {
    max: f64,
    /// Map values inside the ground-truth region, descending. Empty for normal frames.
    inside: Vec<f64>,
}

impl PixelFrame {
    /// Largest `θ` at which the overlap rule still passes.
    fn overlap_threshold(&self) -> f64 {
        let needed = (OVERLAP_FRACTION * self.inside.len() as f64).ceil().max(1.0) as usize;
        self.inside[needed - 1]
    }

    fn overlaps(&self, theta: f64) -> bool {
        count_at_least(&self.inside, theta) as f64 >= OVERLAP_FRACTION * self.inside.len() as f64
    }
}

fn pixel_frames(maps: &[AbnormalityMap], truth: &[GroundTruth]) -> Result<(Vec<PixelFrame>, Vec<f64>)> {
    if maps.len() != truth.len() {
        return Err(Error::input(format!("{} maps but {} ground truths", maps.len(), truth.len())));
    }
    let mut abnormal = Vec::new();
    let mut normal = Vec::new();
    for (m, g) in maps.iter().zip(truth) {
        if !g.is_abnormal() {
            normal.push(m.max());
            continue;
        }
        let mask = g.mask().ok_or_else(|| {
            Error::input(format!("abnormal frame {}/{} has no pixel mask", m.video_id, m.index))
        })?;
        if mask.width != m.width || mask.height != m.height {
            return Err(Error::input(format!(
                "mask {}x{} does not match map {}x{} for frame {}/{}",
                mask.width, mask.height, m.width, m.height, m.video_id, m.index
            )));
        }
        let inside = m.values.iter().zip(&mask.data).filter(|(_, &g)| g).map(|(&v, _)| v).collect();
        abnormal.push(PixelFrame { max: m.max(), inside: descending(inside) });
    }
    check_classes(abnormal.len(), normal.len())?;
    Ok((abnormal, descending(normal)))
}

/// Thresholds for the pixel protocol: the default sweep plus every value at
/// which a frame's overlap test flips.
pub fn pixel_thresholds(maps: &[AbnormalityMap], truth: &[GroundTruth]) -> Result<Vec<f64>> {
    let (abnormal, _) = pixel_frames(maps, truth)?;
    Ok(thresholds(
        maps.iter().map(AbnormalityMap::max).chain(abnormal.iter().map(PixelFrame::overlap_threshold)),
    ))
}

/// Pixel-level ROC with the 40% overlap rule.
pub fn pixel_level_eval(maps: &[AbnormalityMap], truth: &[GroundTruth], thresholds: &[f64]) -> Result<RocCurve> {
    let (abnormal, normal) = pixel_frames(maps, truth)?;
    let mut t = thresholds.to_vec();
    sort_descending(&mut t);
    Ok(RocCurve {
        points: t
            .into_iter()
            .map(|theta| {
                let (mut tp, mut missed) = (0, 0);
                for f in &abnormal {
                    if f.overlaps(theta) {
                        tp += 1;
                    } else if f.max >= theta {
                        missed += 1;
                    }
                }
                RocPoint {
                    threshold: theta,
                    tpr: rate(tp, abnormal.len()),
                    fpr: rate(count_at_least(&normal, theta), normal.len()),
                    mislocalized: Some(missed),
                }
            })
            .collect(),
    })
}

fn check_curve(curve: &RocCurve) -> Result<()> {
    if curve.points.len() < 2 {
        return Err(Error::input("a ROC curve needs at least two points"));
    }
    Ok(())
}

/// Trapezoidal area under TPR over FPR.
pub fn auc(curve: &RocCurve) -> Result<f64> {
    check_curve(curve)?;
    Ok(curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum())
}

/// Rate at which `FPR = 1 - TPR`, interpolated linearly between the two
/// bracketing points.
pub fn eer(curve: &RocCurve) -> Result<f64> {
    check_curve(curve)?;
    let gap = |p: &RocPoint| p.fpr + p.tpr - 1.0;
    for w in curve.points.windows(2) {
        let (a, b) = (gap(&w[0]), gap(&w[1]));
        if a <= 0.0 && b >= 0.0 {
            if a == b {
                return Ok(w[0].fpr);
            }
            let t = -a / (b - a);
            return Ok(w[0].fpr + t * (w[1].fpr - w[0].fpr));
        }
    }
    Err(Error::input("ROC curve never crosses FPR = 1 - TPR"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub protocol: Protocol,
    pub auc: f64,
    pub eer: f64,
    pub frames: usize,
    pub abnormal_frames: usize,
    pub curve: RocCurve,
}

/// Runs one protocol with its default threshold sweep.
pub fn evaluate(protocol: Protocol, maps: &[AbnormalityMap], truth: &[GroundTruth]) -> Result<Report> {
    let curve = match protocol {
        Protocol::Frame => {
            let labels: Vec<bool> = truth.iter().map(GroundTruth::is_abnormal).collect();
            frame_level_eval(maps, &labels, &thresholds(maps.iter().map(AbnormalityMap::max)))?
        }
        Protocol::Pixel => pixel_level_eval(maps, truth, &pixel_thresholds(maps, truth)?)?,
    };
    Ok(Report {
        protocol,
        auc: auc(&curve)?,
        eer: eer(&curve)?,
        frames: maps.len(),
        abnormal_frames: truth.iter().filter(|g| g.is_abnormal()).count(),
        curve,
    })
}
