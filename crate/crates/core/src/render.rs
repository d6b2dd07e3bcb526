//! Heat-map overlays of abnormality maps on frames.

use crossgan_nn::Tensor;

use crate::data::{AbnormalityMap, Frame};
use crate::error::{Error, Result};

/// Overlay opacity at `A = 1`; opacity scales linearly with `A`.
pub const MAX_ALPHA: f64 = 0.5;

/// The jet colormap: blue through cyan, yellow and red to dark red at 1.
pub fn jet(a: f64) -> [f64; 3] {
    let a = a.clamp(0.0, 1.0);
    let ramp = |centre: f64| (1.5 - (4.0 * a - centre).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// `(1 - α) F + α jet(A)` with `α = MAX_ALPHA · A`, so zero abnormality
/// leaves the frame untouched.
pub fn render_heatmap(map: &AbnormalityMap, frame: &Frame) -> Result<Tensor<f32>> {
    if map.width != frame.width() || map.height != frame.height() {
        return Err(Error::input(format!(
            "map {}x{} does not match frame {}x{}",
            map.width,
            map.height,
            frame.width(),
            frame.height()
        )));
    }
    let (w, h) = (map.width, map.height);
    let mut out = frame.pixels.clone();
    for (i, &a) in map.values.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let alpha = MAX_ALPHA * a;
        let colour = jet(a);
        for (c, &k) in colour.iter().enumerate() {
            let v = &mut out.plane_mut(c)[i];
            *v = ((1.0 - alpha) * *v as f64 + alpha * k) as f32;
        }
    }
    debug_assert_eq!(out.shape(), (3, h, w));
    Ok(out)
}
