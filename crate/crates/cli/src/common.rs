//! Plumbing shared by the subcommands: config loading with environment
//! overrides, dataset acquisition, checkpoint save/restore with metadata,
//! and the retrieval protocol derivation.

use std::fs;
use std::path::{Path, PathBuf};

use gaitrm_core::data::{cache, casia, synth, Condition, Dataset};
use gaitrm_core::data::synth::SynthSpec;
use gaitrm_core::error::{CoreError, Result};
use gaitrm_core::eval::ProtocolSpec;
use gaitrm_core::model::{ModelConfig, ModelParams};
use gaitrm_core::optim::Adam;
use gaitrm_core::train::init_params;
use gaitrm_tensor::checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
use sha2::{Digest, Sha256};

use crate::config::{DataKind, Protocol, RunConfig, SplitSpec};

/// File written next to the checkpoints: the canonical emission of the
/// run's configuration, exactly the bytes the config hash covers.
pub const RESOLVED_NAME: &str = "config.resolved";

/// Read a config file, parse it, and fold in `GAITRM_*` environment
/// overrides. Returns the resolved config and the overrides applied.
pub fn load_config(path: &Path) -> Result<(RunConfig, Vec<(String, String)>)> {
    let text = fs::read_to_string(path).map_err(|e| {
        CoreError::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut cfg = RunConfig::parse(&text)
        .map_err(|e| CoreError::InvalidConfig(format!("{}: {}", path.display(), msg_of(&e))))?;
    let applied = cfg.apply_overrides(|var| std::env::var(var).ok())?;
    Ok((cfg, applied))
}

fn msg_of(e: &CoreError) -> String {
    match e {
        CoreError::InvalidConfig(m) | CoreError::Data(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Stable fingerprint of a synthetic-data request. Stamped into caches by
/// the synth command and recomputed by consumers to decide whether a cache
/// at `--data-root` matches the configured corpus.
pub fn synth_fingerprint(spec: &SynthSpec) -> String {
    let views = spec
        .views
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let canon = format!(
        "ids={};views={};frames={};seed={};trials={},{},{}",
        spec.ids, views, spec.frames, spec.seed, spec.nm_trials, spec.bg_trials, spec.cl_trials
    );
    let mut h = Sha256::new();
    h.update(canon.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Materialize the full (unsplit) corpus the config points at.
///
/// `synth`: if `data_root` holds a cache written for exactly the
/// configured corpus it is loaded, otherwise the corpus is generated in
/// memory (nothing is written). `casia-b`: scan and load silhouette
/// directories under `data_root`. Either way a missing root is a data
/// error, not a config error.
pub fn load_dataset(cfg: &RunConfig, data_root: &Path) -> Result<Dataset> {
    if !data_root.is_dir() {
        return Err(CoreError::Data(format!(
            "data root {} does not exist",
            data_root.display()
        )));
    }
    match cfg.data.kind {
        DataKind::Synth => {
            let spec = cfg.synth_spec();
            let fp = synth_fingerprint(&spec);
            if cache::stored_hash(data_root).as_deref() == Some(fp.as_str()) {
                log::info!("loading cached synthetic corpus from {}", data_root.display());
                cache::load(data_root, &fp)
            } else {
                log::info!(
                    "generating synthetic corpus ({} ids, {} views)",
                    spec.ids,
                    spec.views.len()
                );
                synth::generate(&spec)
            }
        }
        DataKind::CasiaB => {
            let index = casia::scan(data_root)?;
            for warning in &index.warnings {
                log::warn!("{warning}");
            }
            index.materialize()
        }
    }
}

/// Split the corpus by subject: the first `train_subjects` (sorted) train,
/// the rest are held out.
pub fn split_dataset(data: &Dataset, split: SplitSpec) -> Result<(Dataset, Dataset)> {
    data.split(split.train_subjects())
}

/// Save model + optimizer state under `base` (two files: manifest and
/// blob), stamped with the run identity.
pub fn save_run_checkpoint(
    base: &Path,
    seed: u64,
    iteration: u64,
    config_hash: &str,
    params: &ModelParams<f32>,
    opt: &Adam,
) -> Result<()> {
    let meta = vec![
        ("config_hash".to_string(), config_hash.to_string()),
        ("seed".to_string(), seed.to_string()),
        ("iteration".to_string(), iteration.to_string()),
        ("step_count".to_string(), opt.step_count().to_string()),
    ];
    let mut tensors = params.named_tensors();
    tensors.extend(opt.export_tensors());
    save_checkpoint(base, &meta, &tensors)?;
    Ok(())
}

/// Everything needed to run a restored model.
pub struct RestoredRun {
    pub cfg: RunConfig,
    pub model_cfg: ModelConfig,
    pub params: ModelParams<f32>,
    pub seed: u64,
    pub iteration: u64,
    pub hash: String,
    /// Directory holding the checkpoint and its sibling artifacts.
    pub dir: PathBuf,
}

fn meta_u64(ck: &LoadedCheckpoint, key: &str) -> Result<u64> {
    let raw = ck
        .meta_value(key)
        .ok_or_else(|| CoreError::CheckpointMeta(format!("missing meta key `{key}`")))?;
    raw.parse()
        .map_err(|_| CoreError::CheckpointMeta(format!("meta `{key}` is not an integer: {raw}")))
}

/// Load a checkpoint plus the `config.resolved` beside it, verify that the
/// config hashes to what the checkpoint was trained with, and restore the
/// parameters. Any mismatch is a checkpoint error: evaluating weights
/// under the wrong configuration would be silently meaningless.
pub fn restore_run(checkpoint: &Path) -> Result<RestoredRun> {
    let ck = load_checkpoint(checkpoint)?;
    let hash = ck
        .meta_value("config_hash")
        .ok_or_else(|| CoreError::CheckpointMeta("missing meta key `config_hash`".into()))?
        .to_string();
    let seed = meta_u64(&ck, "seed")?;
    let iteration = meta_u64(&ck, "iteration")?;

    let dir = checkpoint
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let resolved = dir.join(RESOLVED_NAME);
    let text = fs::read_to_string(&resolved).map_err(|_| {
        CoreError::CheckpointMeta(format!(
            "no {RESOLVED_NAME} next to the checkpoint (looked at {})",
            resolved.display()
        ))
    })?;
    let cfg = RunConfig::parse(&text)?;
    let file_hash = cfg.hash();
    if file_hash != hash {
        return Err(CoreError::CheckpointMeta(format!(
            "{} hashes to {} but the checkpoint was trained under {}",
            resolved.display(),
            &file_hash[..12.min(file_hash.len())],
            &hash[..12.min(hash.len())]
        )));
    }

    let model_cfg = cfg.model_config()?;
    let mut params = init_params(&model_cfg, seed)?;
    params.load_from(&ck)?;
    Ok(RestoredRun {
        cfg,
        model_cfg,
        params,
        seed,
        iteration,
        hash,
        dir,
    })
}

/// Gallery/probe assignment for a corpus with `nm,bg,cl` trials per
/// subject and view: the first `nm - 2` normal trials (at least one) form
/// the gallery, remaining normal trials plus every bg/cl trial probe it.
/// The standard six-normal-trial corpus thus galleries nm 1-4 and probes
/// nm 5-6, bg 1-2, cl 1-2.
pub fn protocol_spec(trials: [u8; 3], include_unmatched_probes: bool) -> ProtocolSpec {
    let nm = trials[0];
    let gallery_n = nm.saturating_sub(2).max(1).min(nm);
    let gallery: Vec<(Condition, u8)> =
        (1..=gallery_n).map(|t| (Condition::Nm, t)).collect();
    let mut probes = Vec::new();
    if nm > gallery_n {
        probes.push((Condition::Nm, (gallery_n + 1..=nm).collect::<Vec<u8>>()));
    }
    if trials[1] > 0 {
        probes.push((Condition::Bg, (1..=trials[1]).collect()));
    }
    if trials[2] > 0 {
        probes.push((Condition::Cl, (1..=trials[2]).collect()));
    }
    ProtocolSpec {
        gallery,
        probes,
        include_unmatched_probes,
    }
}

/// The split label and effective train-subject split a protocol implies.
pub fn protocol_split(cfg: &RunConfig, protocol: Protocol) -> Result<(String, SplitSpec)> {
    use gaitrm_core::data::SplitPreset;
    Ok(match protocol {
        Protocol::Synth => {
            if cfg.data.kind != DataKind::Synth {
                return Err(CoreError::InvalidConfig(
                    "protocol `synth` needs data.kind = synth".into(),
                ));
            }
            (crate::config::split_label(cfg.data.split), cfg.data.split)
        }
        Protocol::CasiaSt => ("st".into(), SplitSpec::Preset(SplitPreset::St)),
        Protocol::CasiaMt => ("mt".into(), SplitSpec::Preset(SplitPreset::Mt)),
        Protocol::CasiaLt => ("lt".into(), SplitSpec::Preset(SplitPreset::Lt)),
        Protocol::Oumvlp => {
            return Err(CoreError::InvalidConfig(
                "protocol `oumvlp` is recognized but this build ships no loader for that \
                 corpus; use synth or one of the casia-b splits"
                    .into(),
            ))
        }
    })
}

/// Write text to a file, mapping failures to data errors that name the
/// path.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| CoreError::Data(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_spec_degrades_gracefully_with_few_trials() {
        let spec = protocol_spec([6, 2, 2], false);
        assert_eq!(spec.gallery.len(), 4);
        assert_eq!(spec.probes.len(), 3);
        assert_eq!(spec.probes[0].1, vec![5, 6]);

        let spec = protocol_spec([2, 1, 1], false);
        assert_eq!(spec.gallery, vec![(Condition::Nm, 1)]);
        assert_eq!(spec.probes[0], (Condition::Nm, vec![2]));

        let spec = protocol_spec([1, 0, 1], true);
        assert_eq!(spec.gallery.len(), 1);
        // no nm probes, no bg probes
        assert_eq!(spec.probes.len(), 1);
        assert_eq!(spec.probes[0].0, Condition::Cl);
        assert!(spec.include_unmatched_probes);
    }

    #[test]
    fn fingerprint_is_order_sensitive_and_stable() {
        let mut spec = SynthSpec {
            ids: 4,
            views: vec![0, 90],
            frames: 12,
            seed: 5,
            nm_trials: 2,
            bg_trials: 1,
            cl_trials: 1,
        };
        let a = synth_fingerprint(&spec);
        assert_eq!(a, synth_fingerprint(&spec));
        spec.views = vec![90, 0];
        assert_ne!(a, synth_fingerprint(&spec));
    }
}
