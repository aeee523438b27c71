//! `gaitrm train`: fit a model and leave a reproducible trail — the
//! resolved config, a loss log, and checkpoints that restore bit-exactly.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use gaitrm_core::error::Result;
use gaitrm_core::model::ModelParams;
use gaitrm_core::optim::Adam;
use gaitrm_core::train::{loss_csv, run_training};

use crate::common;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration file (flat `key = value`)
    #[arg(long)]
    pub config: PathBuf,
    /// Corpus location: a synth cache or a silhouette tree, per `data.kind`
    #[arg(long)]
    pub data_root: PathBuf,
    /// Output directory for config.resolved, loss.csv and checkpoints
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed; every random stream of the run derives from it
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
}

pub fn run(args: &TrainArgs) -> Result<i32> {
    let (cfg, overrides) = common::load_config(&args.config)?;
    for (key, value) in &overrides {
        log::info!("environment override: {key} = {value}");
    }
    let hash = cfg.hash();
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config(args.seed)?;

    let full = common::load_dataset(&cfg, &args.data_root)?;
    let (train_data, held_out) = common::split_dataset(&full, cfg.data.split)?;
    log::info!(
        "corpus: {} train / {} held-out sequences",
        train_data.sequences.len(),
        held_out.sequences.len()
    );

    fs::create_dir_all(&args.out)?;
    common::write_text(&args.out.join(common::RESOLVED_NAME), &cfg.emit())?;

    let every = cfg.train.checkpoint_every;
    let out_dir = args.out.clone();
    let cb_hash = hash.clone();
    let seed = args.seed;
    let mut on_checkpoint = move |iter: u64, p: &ModelParams<f32>, o: &Adam| -> Result<()> {
        let base = out_dir.join(format!("checkpoint-{iter:06}"));
        common::save_run_checkpoint(&base, seed, iter, &cb_hash, p, o)
    };
    let cb = (every > 0).then_some((
        every,
        &mut on_checkpoint as &mut dyn FnMut(u64, &ModelParams<f32>, &Adam) -> Result<()>,
    ));

    let started = Instant::now();
    let output = run_training(&model_cfg, &train_cfg, &train_data, &hash, cb)?;
    let elapsed = started.elapsed();

    let final_base = args.out.join("checkpoint-final");
    common::save_run_checkpoint(
        &final_base,
        args.seed,
        train_cfg.iterations,
        &hash,
        &output.params,
        &output.optimizer,
    )?;
    common::write_text(
        &args.out.join("loss.csv"),
        &loss_csv(&output.rows, args.seed, &hash),
    )?;

    let last = output.rows.last();
    println!(
        "trained {} iterations in {:.1}s (final loss {})",
        train_cfg.iterations,
        elapsed.as_secs_f64(),
        last.map_or("n/a".to_string(), |r| format!("{:.4}", r.loss)),
    );
    println!("config {hash}");
    println!("wrote {}", args.out.join("loss.csv").display());
    println!("wrote {}.manifest", final_base.display());
    Ok(0)
}
