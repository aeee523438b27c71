//! `gaitrm ablate`: sweep a small grid of config points, run the full
//! train+eval cycle at each, and aggregate the rank-1 numbers into one CSV.
//!
//! Grid syntax: semicolon-separated axes, each `key = v1, v2, ...`. Keys
//! are ordinary config keys, plus the shorthand axis `regularizer` whose
//! values pick the whole perturbation setup in one word (see
//! [`apply_regularizer`]). The points are the Cartesian product, first
//! axis outermost; point `i` trains with seed `base_seed + i`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use gaitrm_core::data::Dataset;
use gaitrm_core::error::{CoreError, Result};
use gaitrm_core::eval::{embed_dataset, rank1_matrix};
use gaitrm_core::train::{loss_csv, run_training};
use gaitrm_core::data::Condition;
use gaitrm_core::model::StageVariant;

use crate::common;
use crate::config::{DataKind, Protocol, RunConfig};

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Base run configuration; grid values override it per point
    #[arg(long)]
    pub config: PathBuf,
    /// Grid: `key = v1, v2; key2 = w1, w2` (Cartesian product)
    #[arg(long)]
    pub grid: String,
    /// Output directory: per-point subdirectories plus ablation.csv
    #[arg(long)]
    pub out: PathBuf,
    /// Base seed; point i runs with seed base + i
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
}

#[derive(Debug, Clone)]
struct GridAxis {
    key: String,
    values: Vec<String>,
}

fn parse_grid(text: &str) -> Result<Vec<GridAxis>> {
    let mut axes = Vec::new();
    for part in text.split(';') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (key, values) = part.split_once('=').ok_or_else(|| {
            CoreError::InvalidConfig(format!("grid axis `{part}` is not `key = v1, v2, ...`"))
        })?;
        let key = key.trim().to_string();
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(CoreError::InvalidConfig(format!(
                "grid axis `{key}` lists no values"
            )));
        }
        axes.push(GridAxis { key, values });
    }
    if axes.is_empty() {
        return Err(CoreError::InvalidConfig(
            "the grid is empty; pass at least one `key = v1, v2` axis".into(),
        ));
    }
    Ok(axes)
}

/// One-word perturbation setups for the `regularizer` grid axis. Each
/// value rewrites the stage variants (every stage plain conv except the
/// last, which gets the named block) and pins input erasing accordingly,
/// so points differ in exactly one design choice.
fn apply_regularizer(cfg: &mut RunConfig, value: &str) -> Result<()> {
    let (last, erase) = match value {
        "none" => (StageVariant::Conv, 0.0),
        "dropblock" => (StageVariant::DropBlock, 0.0),
        "scaling_dropblock" => (StageVariant::ScalingDropBlock, 0.0),
        "plain_dropping" => (StageVariant::PlainDropping, 0.0),
        "plain_scaling" => (StageVariant::PlainScaling, 0.0),
        "inception" => (StageVariant::Inception, 0.0),
        "random_erasing" => (StageVariant::Conv, 0.5),
        "inception+random_erasing" => (StageVariant::Inception, 0.5),
        other => {
            return Err(CoreError::InvalidConfig(format!(
                "unknown regularizer `{other}` (expected none, dropblock, scaling_dropblock, \
                 plain_dropping, plain_scaling, inception, random_erasing or \
                 inception+random_erasing)"
            )))
        }
    };
    let n = cfg.model.variants.len();
    for v in cfg.model.variants.iter_mut() {
        *v = StageVariant::Conv;
    }
    if let Some(v) = cfg.model.variants.get_mut(n.saturating_sub(1)) {
        *v = last;
    }
    cfg.reg.erase_prob = erase;
    Ok(())
}

fn point_config(base: &RunConfig, axes: &[GridAxis], choice: &[usize]) -> Result<RunConfig> {
    let mut cfg = base.clone();
    for (axis, &vi) in axes.iter().zip(choice) {
        let value = &axis.values[vi];
        if axis.key == "regularizer" {
            apply_regularizer(&mut cfg, value)?;
        } else {
            cfg.set(&axis.key, value)?;
        }
    }
    Ok(cfg)
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.4}"))
}

pub fn run(args: &AblateArgs) -> Result<i32> {
    let (base, overrides) = common::load_config(&args.config)?;
    for (key, value) in &overrides {
        log::info!("environment override: {key} = {value}");
    }
    if base.data.kind != DataKind::Synth {
        return Err(CoreError::InvalidConfig(
            "ablate runs train+eval per grid point and therefore only supports \
             data.kind = synth (self-contained, regenerated per point)"
                .into(),
        ));
    }
    if base.eval.protocol != Protocol::Synth {
        return Err(CoreError::InvalidConfig(
            "ablate scores points with eval.protocol = synth".into(),
        ));
    }
    let axes = parse_grid(&args.grid)?;
    let n_points: usize = axes.iter().map(|a| a.values.len()).product();
    log::info!(
        "{n_points} grid points over {} axis(es)",
        axes.len()
    );

    fs::create_dir_all(&args.out)?;
    // Corpora are reused across points that share the same data keys.
    let mut corpora: HashMap<String, Dataset> = HashMap::new();

    let mut rows = Vec::new();
    let mut choice = vec![0usize; axes.len()];
    for point in 0..n_points {
        // Decode `point` into per-axis indices, first axis outermost.
        let mut rest = point;
        for (ai, axis) in axes.iter().enumerate().rev() {
            choice[ai] = rest % axis.values.len();
            rest /= axis.values.len();
        }
        let cfg = point_config(&base, &axes, &choice)?;
        let seed = args.seed + point as u64;
        let hash = cfg.hash();
        let point_dir = args.out.join(format!("point-{point:03}"));
        fs::create_dir_all(&point_dir)?;
        common::write_text(&point_dir.join(common::RESOLVED_NAME), &cfg.emit())?;

        let spec = cfg.synth_spec();
        let fp = common::synth_fingerprint(&spec);
        if !corpora.contains_key(&fp) {
            corpora.insert(fp.clone(), gaitrm_core::data::synth::generate(&spec)?);
        }
        let full = &corpora[&fp];
        let (train_data, test_data) = common::split_dataset(full, cfg.data.split)?;

        let labels: Vec<String> = axes
            .iter()
            .zip(&choice)
            .map(|(a, &vi)| format!("{}={}", a.key, a.values[vi]))
            .collect();
        log::info!("point {point}: {} (seed {seed})", labels.join(" "));

        let model_cfg = cfg.model_config()?;
        let train_cfg = cfg.train_config(seed)?;
        let output = run_training(&model_cfg, &train_cfg, &train_data, &hash, None)?;
        common::write_text(
            &point_dir.join("loss.csv"),
            &loss_csv(&output.rows, seed, &hash),
        )?;
        let mut params = output.params;
        common::save_run_checkpoint(
            &point_dir.join("checkpoint-final"),
            seed,
            train_cfg.iterations,
            &hash,
            &params,
            &output.optimizer,
        )?;

        let set = embed_dataset(&model_cfg, &mut params, &test_data)?;
        let proto = common::protocol_spec(
            cfg.data.synth_trials,
            cfg.eval.include_unmatched_probes,
        );
        let result = rank1_matrix(&set, &proto)?;
        let split_label = crate::config::split_label(cfg.data.split);
        common::write_text(
            &point_dir.join("rank1_cells.csv"),
            &format!(
                "# seed {seed} config {hash}\n{}",
                gaitrm_core::eval::cells_to_csv(&result, &split_label)
            ),
        )?;

        rows.push((
            point,
            seed,
            choice.clone(),
            result.condition_mean(Condition::Nm),
            result.condition_mean(Condition::Bg),
            result.condition_mean(Condition::Cl),
            result.grand_mean(),
            hash,
        ));
    }

    let mut csv = format!(
        "# base-seed {} base-config {}\n# grid {}\n",
        args.seed,
        base.hash(),
        args.grid.replace('\n', " ")
    );
    csv.push_str("point,seed,");
    for axis in &axes {
        let _ = write!(csv, "{},", axis.key);
    }
    csv.push_str("nm_rank1,bg_rank1,cl_rank1,grand_rank1,config_hash\n");
    for (point, seed, choice, nm, bg, cl, grand, hash) in &rows {
        let _ = write!(csv, "{point},{seed},");
        for (axis, &vi) in axes.iter().zip(choice) {
            let _ = write!(csv, "{},", axis.values[vi]);
        }
        let _ = writeln!(
            csv,
            "{},{},{},{},{hash}",
            fmt_acc(*nm),
            fmt_acc(*bg),
            fmt_acc(*cl),
            fmt_acc(*grand),
        );
    }
    let csv_path = args.out.join("ablation.csv");
    common::write_text(&csv_path, &csv)?;
    println!("{} points -> {}", rows.len(), csv_path.display());
    Ok(0)
}
