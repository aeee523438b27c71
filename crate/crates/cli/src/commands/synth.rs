//! `gaitrm synth`: render the synthetic silhouette corpus to a disk cache
//! that later train/eval runs can pick up by fingerprint.

use std::path::PathBuf;

use clap::Args;
use gaitrm_core::data::{cache, synth};
use gaitrm_core::data::synth::SynthSpec;
use gaitrm_core::error::{CoreError, Result};

use crate::common;

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of walking identities (at least 2)
    #[arg(long, default_value_t = 20)]
    pub ids: usize,
    /// View angles in degrees: a comma list (`0,18,36`) or a stepped
    /// range (`0..180:18`, inclusive ends)
    #[arg(long, default_value = "0..180:18")]
    pub views: String,
    /// Frames per sequence
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    /// Generator seed
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Cache directory to write
    #[arg(long)]
    pub out: PathBuf,
}

/// Expand the `--views` argument. `0..180:18` means every 18 degrees from
/// 0 through 180.
pub fn parse_views(arg: &str) -> Result<Vec<u16>> {
    let bad = |detail: &str| CoreError::InvalidConfig(format!("--views `{arg}`: {detail}"));
    let parse_deg = |s: &str| -> Result<u16> {
        s.trim()
            .parse::<u16>()
            .ok()
            .filter(|&d| d <= 360)
            .ok_or_else(|| bad("angles must be integers in 0..=360"))
    };
    let views: Vec<u16> = if let Some((range, step)) = arg.split_once(':') {
        let (lo, hi) = range
            .split_once("..")
            .ok_or_else(|| bad("expected START..END:STEP"))?;
        let (lo, hi, step) = (parse_deg(lo)?, parse_deg(hi)?, parse_deg(step)?);
        if step == 0 || hi < lo {
            return Err(bad("need START <= END and STEP > 0"));
        }
        (lo..=hi).step_by(step as usize).collect()
    } else {
        arg.split(',')
            .map(parse_deg)
            .collect::<Result<Vec<u16>>>()?
    };
    if views.is_empty() {
        return Err(bad("no views listed"));
    }
    Ok(views)
}

pub fn run(args: &SynthArgs) -> Result<i32> {
    if args.ids < 2 {
        return Err(CoreError::InvalidConfig(format!(
            "--ids {} is too few: retrieval needs at least 2 identities",
            args.ids
        )));
    }
    let spec = SynthSpec {
        ids: args.ids,
        views: parse_views(&args.views)?,
        frames: args.frames,
        seed: args.seed,
        nm_trials: 6,
        bg_trials: 2,
        cl_trials: 2,
    };
    let data = synth::generate(&spec)?;
    let fingerprint = common::synth_fingerprint(&spec);
    cache::save(&args.out, &data, &fingerprint)?;
    println!(
        "{} sequences ({} ids x {} views x 10 trials) -> {}",
        data.sequences.len(),
        spec.ids,
        spec.views.len(),
        args.out.display()
    );
    println!("fingerprint {fingerprint}");
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_accept_lists_and_stepped_ranges() {
        assert_eq!(parse_views("0,90,180").unwrap(), vec![0, 90, 180]);
        assert_eq!(
            parse_views("0..180:18").unwrap(),
            vec![0, 18, 36, 54, 72, 90, 108, 126, 144, 162, 180]
        );
        assert!(parse_views("0..180:0").is_err());
        assert!(parse_views("180..0:18").is_err());
        assert!(parse_views("").is_err());
        assert!(parse_views("12,badger").is_err());
        assert!(parse_views("400").is_err());
    }
}
