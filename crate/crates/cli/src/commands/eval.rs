//! `gaitrm eval`: score a trained checkpoint under a retrieval protocol
//! and leave the per-cell and per-condition accuracy tables beside it.

use std::path::PathBuf;

use clap::Args;
use gaitrm_core::error::Result;
use gaitrm_core::eval::{cells_to_csv, embed_dataset, rank1_matrix, summary_csv, summary_table};

use crate::common;
use crate::config::Protocol;

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint base path (the part before `.manifest` / `.bin`)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus location, as for training
    #[arg(long)]
    pub data_root: PathBuf,
    /// Retrieval protocol: synth, casia-b-st, casia-b-mt, casia-b-lt or
    /// oumvlp. Defaults to the checkpoint's own `eval.protocol`.
    #[arg(long)]
    pub protocol: Option<String>,
}

pub fn run(args: &EvalArgs) -> Result<i32> {
    let mut run = common::restore_run(&args.checkpoint)?;
    let protocol = match &args.protocol {
        Some(name) => Protocol::parse(name)?,
        None => run.cfg.eval.protocol,
    };
    let (split_label, split) = common::protocol_split(&run.cfg, protocol)?;

    let full = common::load_dataset(&run.cfg, &args.data_root)?;
    let (_, test_data) = common::split_dataset(&full, split)?;
    log::info!(
        "embedding {} held-out sequences under protocol {}",
        test_data.sequences.len(),
        protocol.name()
    );

    let set = embed_dataset(&run.model_cfg, &mut run.params, &test_data)?;
    // The casia-b protocols fix the trial layout; only the synthetic
    // protocol inherits it from the config.
    let trials = match protocol {
        Protocol::Synth => run.cfg.data.synth_trials,
        _ => [6, 2, 2],
    };
    let spec = common::protocol_spec(trials, run.cfg.eval.include_unmatched_probes);
    let result = rank1_matrix(&set, &spec)?;

    let provenance = format!(
        "# seed {} config {}\n# protocol {} checkpoint-iteration {}\n",
        run.seed,
        run.hash,
        protocol.name(),
        run.iteration
    );
    let cells_path = run.dir.join("rank1_cells.csv");
    let summary_path = run.dir.join("rank1_summary.csv");
    common::write_text(
        &cells_path,
        &format!("{provenance}{}", cells_to_csv(&result, &split_label)),
    )?;
    common::write_text(
        &summary_path,
        &format!("{provenance}{}", summary_csv(&result, &split_label)),
    )?;

    print!("{}", summary_table(&result, &split_label));
    match result.grand_mean() {
        Some(g) => println!("grand mean rank-1: {g:.4}"),
        None => println!("grand mean rank-1: n/a (no scoreable cells)"),
    }
    println!("wrote {}", cells_path.display());
    println!("wrote {}", summary_path.display());
    Ok(0)
}
