//! `gaitrm heatmap`: where does the trained model look? For one
//! silhouette sequence, render the channel-averaged activation energy of
//! the final stage as one grayscale image per retained frame, upsampled
//! back to input resolution.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use gaitrm_core::error::{CoreError, Result};
use gaitrm_core::model::forward_eval;
use gaitrm_tensor::{Graph, Tensor};
use image::GrayImage;

use crate::common;
use crate::config::{INPUT_H, INPUT_W};

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    /// Checkpoint base path (the part before `.manifest` / `.bin`)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of grayscale PNG frames, consumed in filename order
    #[arg(long)]
    pub sequence: PathBuf,
    /// Output directory for frame_NNN.png and manifest.txt
    #[arg(long)]
    pub out: PathBuf,
}

/// Bilinear resample with centers aligned (each output pixel samples the
/// source at `(i + 0.5) * scale - 0.5`), the usual choice for feature-map
/// upsampling.
fn upsample_bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    assert_eq!(src.len(), sh * sw);
    let mut out = vec![0.0f32; dh * dw];
    for dy in 0..dh {
        let fy = ((dy as f32 + 0.5) * sh as f32 / dh as f32 - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f32;
        for dx in 0..dw {
            let fx =
                ((dx as f32 + 0.5) * sw as f32 / dw as f32 - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f32;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[dy * dw + dx] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Per-frame channel-mean absolute activation: `(n, c, h, w)` data (the
/// batch axis already stripped) reduced to `n` maps of `h x w`.
fn energy_maps(data: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<Vec<f32>> {
    let plane = h * w;
    let mut maps = Vec::with_capacity(n);
    for t in 0..n {
        let mut map = vec![0.0f32; plane];
        for ch in 0..c {
            let base = (t * c + ch) * plane;
            for (m, &v) in map.iter_mut().zip(&data[base..base + plane]) {
                *m += v.abs();
            }
        }
        for m in map.iter_mut() {
            *m /= c as f32;
        }
        maps.push(map);
    }
    maps
}

fn load_sequence(dir: &Path) -> Result<Tensor<f32>> {
    if !dir.is_dir() {
        return Err(CoreError::Data(format!(
            "sequence directory {} does not exist",
            dir.display()
        )));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CoreError::Data(format!(
            "{} holds no .png frames",
            dir.display()
        )));
    }
    let mut frames = Vec::with_capacity(files.len() * INPUT_H * INPUT_W);
    for path in &files {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        if (h as usize, w as usize) != (INPUT_H, INPUT_W) {
            return Err(CoreError::Data(format!(
                "{}: frame is {w}x{h}, expected {INPUT_W}x{INPUT_H}",
                path.display()
            )));
        }
        frames.extend(img.as_raw().iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Tensor::new(
        vec![1, files.len(), 1, INPUT_H, INPUT_W],
        frames,
    )?)
}

pub fn run(args: &HeatmapArgs) -> Result<i32> {
    let mut run = common::restore_run(&args.checkpoint)?;
    let x = load_sequence(&args.sequence)?;
    let n_in = x.shape()[1];

    let mut g = Graph::<f32>::new();
    let xid = g.constant(x);
    let out = forward_eval(&mut g, xid, &run.model_cfg, &mut run.params)?;
    let feats = g.value(out.final_features);
    let (_b, n, c, h, w) = feats.dims5("final features")?;

    let maps = energy_maps(feats.data(), n, c, h, w);
    let upsampled: Vec<Vec<f32>> = maps
        .iter()
        .map(|m| upsample_bilinear(m, h, w, INPUT_H, INPUT_W))
        .collect();
    // One global scale across the sequence, so frames stay comparable:
    // the hottest pixel anywhere maps to 255. An all-zero activation
    // volume renders as uniform black.
    let peak = upsampled
        .iter()
        .flat_map(|m| m.iter())
        .fold(0.0f32, |a, &v| a.max(v));

    fs::create_dir_all(&args.out)?;
    for (i, map) in upsampled.iter().enumerate() {
        let bytes: Vec<u8> = map
            .iter()
            .map(|&v| {
                if peak > 0.0 {
                    (v / peak * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        let img = GrayImage::from_raw(INPUT_W as u32, INPUT_H as u32, bytes)
            .expect("buffer length matches image dimensions");
        img.save(args.out.join(format!("frame_{i:03}.png")))?;
    }

    let manifest = format!(
        "config {}\nseed {}\ncheckpoint {}\nsequence {}\ninput_frames {n_in}\nmaps {n}\npeak {peak}\n",
        run.hash,
        run.seed,
        args.checkpoint.display(),
        args.sequence.display(),
    );
    common::write_text(&args.out.join("manifest.txt"), &manifest)?;
    println!(
        "{n} map(s) from {n_in} input frame(s) -> {}",
        args.out.display()
    );
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_preserves_constants_and_identity() {
        let src = vec![3.5f32; 4 * 3];
        let up = upsample_bilinear(&src, 4, 3, 64, 44);
        assert!(up.iter().all(|&v| (v - 3.5).abs() < 1e-6));

        let src: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let same = upsample_bilinear(&src, 4, 3, 4, 3);
        assert_eq!(same, src);

        let single = upsample_bilinear(&[2.0], 1, 1, 5, 7);
        assert!(single.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn upsample_interpolates_between_rows() {
        // Two rows: 0s on top, 2s below. The vertical midline of a 4-row
        // upsample must hold intermediate values in-between.
        let src = vec![0.0, 0.0, 2.0, 2.0];
        let up = upsample_bilinear(&src, 2, 2, 4, 2);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[7], 2.0);
        assert!(up[2] > 0.0 && up[2] < 2.0);
        assert!(up[4] > up[2]);
    }

    #[test]
    fn energy_maps_average_channel_magnitudes() {
        // n=1, c=2, h=1, w=2: channels (1, -3) and (2, 5).
        let data = vec![1.0, -3.0, 2.0, 5.0];
        let maps = energy_maps(&data, 1, 2, 1, 2);
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0], vec![1.5, 4.0]);
    }
}
