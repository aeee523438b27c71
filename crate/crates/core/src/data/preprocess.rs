//! Silhouette normalization: crop to the vertical extent of the figure,
//! rescale to a fixed height preserving aspect ratio, and center a
//! fixed-width window on the upper-body centroid.
//!
//! The output geometry is 64 x 44. The transform is a fixpoint: running it
//! on its own output reproduces the frame (bit-exactly after the first
//! 8-bit quantization), because a frame that is already at target height
//! samples on the integer pixel grid and its centroid window lands at
//! offset zero. Integer translations of the figure inside a larger canvas
//! produce identical output, since the sampling grid is anchored to the
//! figure's centroid rather than to the canvas.

use crate::error::{CoreError, Result};

pub const OUT_H: usize = 64;
pub const OUT_W: usize = 44;

/// Half-pixel-centered column of the output window: the centroid of the
/// figure's upper half is placed here.
const CENTER_X: f64 = (OUT_W as f64 - 1.0) / 2.0;

/// Normalize one grayscale frame (values in [0, 1], row-major `h x w`).
///
/// Returns `None` when the frame holds no foreground at all (nothing to
/// crop against); such frames carry no figure and are dropped upstream.
pub fn normalize_frame(px: &[f32], h: usize, w: usize) -> Result<Option<Vec<f32>>> {
    if px.len() != h * w || h == 0 || w == 0 {
        return Err(CoreError::Data(format!(
            "frame buffer {} does not match {h}x{w}",
            px.len()
        )));
    }
    let row_has_fg = |y: usize| px[y * w..(y + 1) * w].iter().any(|&v| v > 0.0);
    let top = match (0..h).find(|&y| row_has_fg(y)) {
        Some(t) => t,
        None => return Ok(None),
    };
    let bot = (0..h).rev().find(|&y| row_has_fg(y)).unwrap();
    let ch = bot - top + 1;
    let scale = ch as f64 / OUT_H as f64;

    // Intensity-weighted centroid column of the upper half of the crop.
    let half_rows = ch.div_ceil(2);
    let mut mass = 0.0f64;
    let mut moment = 0.0f64;
    for y in top..top + half_rows {
        for x in 0..w {
            let v = px[y * w + x] as f64;
            mass += v;
            moment += v * x as f64;
        }
    }
    // The top row of the crop has foreground, so the upper half has mass.
    let cx = moment / mass;

    // Horizontal sampling grid anchored on the centroid; when the crop is
    // already at target height (scale 1) snap the anchor to the pixel grid
    // so no gratuitous resampling happens.
    let mut anchor = cx - CENTER_X * scale;
    if scale == 1.0 {
        anchor = anchor.round();
    }

    let mut out = vec![0.0f32; OUT_H * OUT_W];
    for oy in 0..OUT_H {
        let sy = top as f64 + (oy as f64 + 0.5) * scale - 0.5;
        for ox in 0..OUT_W {
            let sx = anchor + ox as f64 * scale;
            out[oy * OUT_W + ox] = bilinear(px, h, w, sy, sx).clamp(0.0, 1.0);
        }
    }
    Ok(Some(out))
}

/// Bilinear sample with out-of-bounds taps reading zero.
fn bilinear(px: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = (y - y0) as f32;
    let fx = (x - x0) as f32;
    let at = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            px[yy as usize * w + xx as usize]
        }
    };
    let v00 = at(y0, x0);
    let v01 = at(y0, x0 + 1.0);
    let v10 = at(y0 + 1.0, x0);
    let v11 = at(y0 + 1.0, x0 + 1.0);
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}
