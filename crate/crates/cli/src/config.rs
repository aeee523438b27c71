//! Flat `key = value` run configuration.
//!
//! One file drives a whole run: model geometry, perturbation settings,
//! optimizer schedule, data source and evaluation protocol. The format is
//! line-oriented: blank lines and `#` comments are ignored, later duplicates
//! win, and unknown keys are rejected with the offending line number.
//! [`RunConfig::emit`] serializes every key in one fixed order, so
//! `parse(emit(c)) == c` and the SHA-256 of the emission is a stable
//! fingerprint of the run ([`RunConfig::hash`]).
//!
//! Every key can also be overridden from the environment: `train.lr`
//! becomes `GAITRM_TRAIN_LR`, applied after the file is parsed and before
//! the hash is taken.

use gaitrm_core::batch::BatchSpec;
use gaitrm_core::blocks::InferenceMasking;
use gaitrm_core::data::synth::SynthSpec;
use gaitrm_core::data::SplitPreset;
use gaitrm_core::error::{CoreError, Result};
use gaitrm_core::loss::TripletConfig;
use gaitrm_core::masking::{RegConfig, SamplerKind};
use gaitrm_core::model::{BranchToggles, ModelConfig, StageVariant};
use gaitrm_core::optim::{AdamConfig, LrSchedule};
use gaitrm_core::train::TrainConfig;
use sha2::{Digest, Sha256};

/// Prefix for environment overrides: `train.lr` -> `GAITRM_TRAIN_LR`.
pub const ENV_PREFIX: &str = "GAITRM_";

/// Silhouette geometry is fixed by the data pipeline (both the synthetic
/// generator and the silhouette loader emit this frame size), so it is not
/// a config key.
pub const INPUT_H: usize = 64;
pub const INPUT_W: usize = 44;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    pub kernels: Vec<[usize; 3]>,
    pub strides: Vec<[usize; 3]>,
    pub stem_pool: [usize; 2],
    pub lta: [usize; 2],
    pub variants: Vec<StageVariant>,
    pub branches: BranchToggles,
    pub strips: usize,
    pub embed_dim: usize,
    pub gem_power: f64,
    pub negative_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub double_channels: bool,
    pub infer: InferenceMasking,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegSection {
    pub prob: f64,
    pub mask_ratio: f64,
    pub sampler: SamplerKind,
    /// Input-level random erasing probability (applied to raw frames, not
    /// features); 0 disables it.
    pub erase_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub p: usize,
    pub k: usize,
    pub iterations: u64,
    pub frames: usize,
    pub lr: f64,
    pub milestones: Vec<(u64, f64)>,
    pub margin: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub log_every: u64,
    /// Checkpoint interval in iterations; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Synth,
    CasiaB,
}

/// How many subjects go to the training half: a named preset of the
/// 124-subject protocol, or an explicit count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSpec {
    Preset(SplitPreset),
    Count(usize),
}

impl SplitSpec {
    pub fn train_subjects(&self) -> usize {
        match self {
            SplitSpec::Preset(p) => p.train_subjects(),
            SplitSpec::Count(n) => *n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub kind: DataKind,
    pub synth_ids: usize,
    pub synth_views: Vec<u16>,
    pub synth_frames: usize,
    pub synth_seed: u64,
    /// nm,bg,cl trials per subject and view.
    pub synth_trials: [u8; 3],
    pub split: SplitSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Evaluate on the held-out half of the configured synthetic set.
    Synth,
    CasiaSt,
    CasiaMt,
    CasiaLt,
    /// Recognized for forward compatibility; this build ships no loader
    /// for it and rejects it at startup.
    Oumvlp,
}

impl Protocol {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "synth" => Self::Synth,
            "casia-b-st" => Self::CasiaSt,
            "casia-b-mt" => Self::CasiaMt,
            "casia-b-lt" => Self::CasiaLt,
            "oumvlp" => Self::Oumvlp,
            other => {
                return Err(CoreError::InvalidConfig(format!(
                    "unknown protocol `{other}` (expected synth, casia-b-st, \
                     casia-b-mt, casia-b-lt or oumvlp)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::CasiaSt => "casia-b-st",
            Self::CasiaMt => "casia-b-mt",
            Self::CasiaLt => "casia-b-lt",
            Self::Oumvlp => "oumvlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub protocol: Protocol,
    /// Score probes whose subject is absent from a gallery cell as misses
    /// instead of skipping them.
    pub include_unmatched_probes: bool,
}

/// The fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub reg: RegSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    /// Desk-scale defaults: a model small enough to train on a laptop CPU
    /// in minutes, against the built-in synthetic corpus.
    fn default() -> Self {
        RunConfig {
            model: ModelSection {
                widths: vec![16, 32, 64],
                kernels: vec![[3, 3, 3], [1, 3, 3], [1, 3, 3]],
                strides: vec![[1, 2, 2], [1, 2, 1], [1, 2, 1]],
                stem_pool: [2, 2],
                lta: [3, 3],
                variants: vec![StageVariant::Conv, StageVariant::Inception],
                branches: BranchToggles {
                    global: true,
                    dropping: true,
                    scaling: true,
                },
                strips: 4,
                embed_dim: 64,
                gem_power: 6.5,
                negative_slope: 0.01,
                bn_momentum: 0.1,
                bn_eps: 1e-5,
                double_channels: false,
                infer: InferenceMasking::Fixed,
            },
            reg: RegSection {
                prob: 1.0,
                mask_ratio: 0.5,
                sampler: SamplerKind::Band,
                erase_prob: 0.0,
            },
            train: TrainSection {
                p: 4,
                k: 4,
                iterations: 2000,
                frames: 8,
                lr: 1e-3,
                milestones: vec![(1500, 1e-4)],
                margin: 0.2,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
                weight_decay: 0.0,
                log_every: 10,
                checkpoint_every: 0,
            },
            data: DataSection {
                kind: DataKind::Synth,
                synth_ids: 20,
                synth_views: (0..=180).step_by(18).map(|v| v as u16).collect(),
                synth_frames: 40,
                synth_seed: 7,
                synth_trials: [6, 2, 2],
                split: SplitSpec::Count(14),
            },
            eval: EvalSection {
                protocol: Protocol::Synth,
                include_unmatched_probes: false,
            },
        }
    }
}

fn bad(key: &str, detail: impl std::fmt::Display) -> CoreError {
    CoreError::InvalidConfig(format!("{key}: {detail}"))
}

/// The bare message of a config error, without the enum's display prefix,
/// for re-wrapping with position context.
fn inner_msg(e: &CoreError) -> String {
    match e {
        CoreError::InvalidConfig(m) | CoreError::Data(m) => m.clone(),
        other => other.to_string(),
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| bad(key, format_args!("`{v}` is not a non-negative integer")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| bad(key, format_args!("`{v}` is not a non-negative integer")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| bad(key, format_args!("`{v}` is not a number")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, format_args!("`{v}` is not `true` or `false`"))),
    }
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Err(bad(key, "empty list"));
    }
    v.split(',').map(|p| parse_usize(key, p.trim())).collect()
}

fn parse_triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = v.split('x').collect();
    if parts.len() != 3 {
        return Err(bad(key, format_args!("`{v}` is not of the form AxBxC")));
    }
    Ok([
        parse_usize(key, parts[0])?,
        parse_usize(key, parts[1])?,
        parse_usize(key, parts[2])?,
    ])
}

fn parse_pair(key: &str, v: &str) -> Result<[usize; 2]> {
    let parts: Vec<&str> = v.split('x').collect();
    if parts.len() != 2 {
        return Err(bad(key, format_args!("`{v}` is not of the form AxB")));
    }
    Ok([parse_usize(key, parts[0])?, parse_usize(key, parts[1])?])
}

fn parse_triple_list(key: &str, v: &str) -> Result<Vec<[usize; 3]>> {
    if v.is_empty() {
        return Err(bad(key, "empty list"));
    }
    v.split(',').map(|p| parse_triple(key, p.trim())).collect()
}

fn sampler_parse(key: &str, v: &str) -> Result<SamplerKind> {
    Ok(match v {
        "band" => SamplerKind::Band,
        "iid" => SamplerKind::IidUnit,
        "bipartition" => SamplerKind::FixedBipartition,
        _ => {
            return Err(bad(
                key,
                format_args!("`{v}` is not a sampler (expected band, iid or bipartition)"),
            ))
        }
    })
}

fn sampler_name(s: SamplerKind) -> &'static str {
    match s {
        SamplerKind::Band => "band",
        SamplerKind::IidUnit => "iid",
        SamplerKind::FixedBipartition => "bipartition",
    }
}

fn infer_parse(key: &str, v: &str) -> Result<InferenceMasking> {
    Ok(match v {
        "fixed" => InferenceMasking::Fixed,
        "off" => InferenceMasking::Off,
        _ => {
            return Err(bad(
                key,
                format_args!("`{v}` is not an inference mode (expected fixed or off)"),
            ))
        }
    })
}

fn infer_name(i: InferenceMasking) -> &'static str {
    match i {
        InferenceMasking::Fixed => "fixed",
        InferenceMasking::Off => "off",
    }
}

fn branches_parse(key: &str, v: &str) -> Result<BranchToggles> {
    let mut b = BranchToggles {
        global: false,
        dropping: false,
        scaling: false,
    };
    for part in v.split(',') {
        match part.trim() {
            "global" => b.global = true,
            "dropping" => b.dropping = true,
            "scaling" => b.scaling = true,
            other => {
                return Err(bad(
                    key,
                    format_args!(
                        "`{other}` is not a branch (expected global, dropping or scaling)"
                    ),
                ))
            }
        }
    }
    if !(b.global || b.dropping || b.scaling) {
        return Err(bad(key, "at least one branch must be enabled"));
    }
    Ok(b)
}

fn branches_emit(b: BranchToggles) -> String {
    let mut names = Vec::new();
    if b.global {
        names.push("global");
    }
    if b.dropping {
        names.push("dropping");
    }
    if b.scaling {
        names.push("scaling");
    }
    names.join(",")
}

fn milestones_parse(key: &str, v: &str) -> Result<Vec<(u64, f64)>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|part| {
            let part = part.trim();
            let (it, lr) = part.split_once(':').ok_or_else(|| {
                bad(key, format_args!("`{part}` is not of the form ITER:LR"))
            })?;
            Ok((parse_u64(key, it)?, parse_f64(key, lr)?))
        })
        .collect()
}

fn milestones_emit(m: &[(u64, f64)]) -> String {
    m.iter()
        .map(|(it, lr)| format!("{it}:{lr}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn split_parse(key: &str, v: &str) -> Result<SplitSpec> {
    if let Ok(p) = SplitPreset::parse(v) {
        return Ok(SplitSpec::Preset(p));
    }
    let n: usize = v.parse().map_err(|_| {
        bad(
            key,
            format_args!("`{v}` is not a split (expected st, mt, lt or a subject count)"),
        )
    })?;
    Ok(SplitSpec::Count(n))
}

/// Textual form of a split, as written in configs and CSV split columns.
pub fn split_label(s: SplitSpec) -> String {
    match s {
        SplitSpec::Preset(SplitPreset::St) => "st".into(),
        SplitSpec::Preset(SplitPreset::Mt) => "mt".into(),
        SplitSpec::Preset(SplitPreset::Lt) => "lt".into(),
        SplitSpec::Count(n) => n.to_string(),
    }
}

fn trials_parse(key: &str, v: &str) -> Result<[u8; 3]> {
    let parts: Vec<&str> = v.split(',').collect();
    if parts.len() != 3 {
        return Err(bad(
            key,
            format_args!("`{v}` is not of the form NM,BG,CL (three counts)"),
        ));
    }
    let one = |s: &str| -> Result<u8> {
        s.trim()
            .parse()
            .map_err(|_| bad(key, format_args!("`{s}` is not a trial count")))
    };
    Ok([one(parts[0])?, one(parts[1])?, one(parts[2])?])
}

impl RunConfig {
    /// Set one key from its textual value. Unknown keys and malformed
    /// values produce an error that names the key but not the line; the
    /// caller adds position info.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "model.widths" => self.model.widths = parse_usize_list(key, v)?,
            "model.kernels" => self.model.kernels = parse_triple_list(key, v)?,
            "model.strides" => self.model.strides = parse_triple_list(key, v)?,
            "model.stem_pool" => self.model.stem_pool = parse_pair(key, v)?,
            "model.lta" => self.model.lta = parse_pair(key, v)?,
            "model.variants" => {
                self.model.variants = v
                    .split(',')
                    .map(|p| StageVariant::parse(p.trim()))
                    .collect::<Result<_>>()?
            }
            "model.branches" => self.model.branches = branches_parse(key, v)?,
            "model.strips" => self.model.strips = parse_usize(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse_usize(key, v)?,
            "model.gem_power" => self.model.gem_power = parse_f64(key, v)?,
            "model.negative_slope" => self.model.negative_slope = parse_f64(key, v)?,
            "model.bn_momentum" => self.model.bn_momentum = parse_f64(key, v)?,
            "model.bn_eps" => self.model.bn_eps = parse_f64(key, v)?,
            "model.double_channels" => self.model.double_channels = parse_bool(key, v)?,
            "model.infer" => self.model.infer = infer_parse(key, v)?,
            "reg.prob" => self.reg.prob = parse_f64(key, v)?,
            "reg.mask_ratio" => self.reg.mask_ratio = parse_f64(key, v)?,
            "reg.sampler" => self.reg.sampler = sampler_parse(key, v)?,
            "reg.erase_prob" => self.reg.erase_prob = parse_f64(key, v)?,
            "train.p" => self.train.p = parse_usize(key, v)?,
            "train.k" => self.train.k = parse_usize(key, v)?,
            "train.iterations" => self.train.iterations = parse_u64(key, v)?,
            "train.frames" => self.train.frames = parse_usize(key, v)?,
            "train.lr" => self.train.lr = parse_f64(key, v)?,
            "train.milestones" => self.train.milestones = milestones_parse(key, v)?,
            "train.margin" => self.train.margin = parse_f64(key, v)?,
            "train.beta1" => self.train.beta1 = parse_f64(key, v)?,
            "train.beta2" => self.train.beta2 = parse_f64(key, v)?,
            "train.epsilon" => self.train.epsilon = parse_f64(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_f64(key, v)?,
            "train.log_every" => self.train.log_every = parse_u64(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_u64(key, v)?,
            "data.kind" => {
                self.data.kind = match v {
                    "synth" => DataKind::Synth,
                    "casia-b" => DataKind::CasiaB,
                    _ => {
                        return Err(bad(
                            key,
                            format_args!("`{v}` is not a data kind (expected synth or casia-b)"),
                        ))
                    }
                }
            }
            "data.synth_ids" => self.data.synth_ids = parse_usize(key, v)?,
            "data.synth_views" => {
                let list = parse_usize_list(key, v)?;
                self.data.synth_views = list
                    .into_iter()
                    .map(|d| {
                        u16::try_from(d)
                            .ok()
                            .filter(|&d| d <= 360)
                            .ok_or_else(|| bad(key, format_args!("view {d} out of range")))
                    })
                    .collect::<Result<_>>()?;
            }
            "data.synth_frames" => self.data.synth_frames = parse_usize(key, v)?,
            "data.synth_seed" => self.data.synth_seed = parse_u64(key, v)?,
            "data.synth_trials" => self.data.synth_trials = trials_parse(key, v)?,
            "data.split" => self.data.split = split_parse(key, v)?,
            "eval.protocol" => {
                self.eval.protocol = Protocol::parse(v).map_err(|e| bad(key, inner_msg(&e)))?
            }
            "eval.include_unmatched_probes" => {
                self.eval.include_unmatched_probes = parse_bool(key, v)?
            }
            _ => {
                return Err(CoreError::InvalidConfig(format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }

    /// Parse a config file body. Lines are `key = value`; `#` starts a
    /// comment (whole-line or trailing); blank lines are skipped; when a
    /// key repeats, the last assignment wins. Errors carry the 1-based
    /// line number.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::InvalidConfig(format!(
                    "line {lineno}: expected `key = value`, got `{line}`"
                ))
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| {
                CoreError::InvalidConfig(format!("line {lineno}: {}", inner_msg(&e)))
            })?;
        }
        Ok(cfg)
    }

    /// Serialize every key in canonical order. `parse(emit(c)) == c`, and
    /// the run hash is the SHA-256 of exactly these bytes.
    pub fn emit(&self) -> String {
        let m = &self.model;
        let r = &self.reg;
        let t = &self.train;
        let d = &self.data;
        let e = &self.eval;
        let join = |xs: &[usize]| {
            xs.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let join_triples = |xs: &[[usize; 3]]| {
            xs.iter()
                .map(|k| format!("{}x{}x{}", k[0], k[1], k[2]))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("model.widths", join(&m.widths));
        kv("model.kernels", join_triples(&m.kernels));
        kv("model.strides", join_triples(&m.strides));
        kv("model.stem_pool", format!("{}x{}", m.stem_pool[0], m.stem_pool[1]));
        kv("model.lta", format!("{}x{}", m.lta[0], m.lta[1]));
        kv(
            "model.variants",
            m.variants
                .iter()
                .map(|v| v.name())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("model.branches", branches_emit(m.branches));
        kv("model.strips", m.strips.to_string());
        kv("model.embed_dim", m.embed_dim.to_string());
        kv("model.gem_power", m.gem_power.to_string());
        kv("model.negative_slope", m.negative_slope.to_string());
        kv("model.bn_momentum", m.bn_momentum.to_string());
        kv("model.bn_eps", m.bn_eps.to_string());
        kv("model.double_channels", m.double_channels.to_string());
        kv("model.infer", infer_name(m.infer).to_string());
        kv("reg.prob", r.prob.to_string());
        kv("reg.mask_ratio", r.mask_ratio.to_string());
        kv("reg.sampler", sampler_name(r.sampler).to_string());
        kv("reg.erase_prob", r.erase_prob.to_string());
        kv("train.p", t.p.to_string());
        kv("train.k", t.k.to_string());
        kv("train.iterations", t.iterations.to_string());
        kv("train.frames", t.frames.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.milestones", milestones_emit(&t.milestones));
        kv("train.margin", t.margin.to_string());
        kv("train.beta1", t.beta1.to_string());
        kv("train.beta2", t.beta2.to_string());
        kv("train.epsilon", t.epsilon.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.log_every", t.log_every.to_string());
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv(
            "data.kind",
            match d.kind {
                DataKind::Synth => "synth".into(),
                DataKind::CasiaB => "casia-b".into(),
            },
        );
        kv("data.synth_ids", d.synth_ids.to_string());
        kv(
            "data.synth_views",
            d.synth_views
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("data.synth_frames", d.synth_frames.to_string());
        kv("data.synth_seed", d.synth_seed.to_string());
        kv(
            "data.synth_trials",
            format!(
                "{},{},{}",
                d.synth_trials[0], d.synth_trials[1], d.synth_trials[2]
            ),
        );
        kv("data.split", split_label(d.split));
        kv("eval.protocol", e.protocol.name().to_string());
        kv(
            "eval.include_unmatched_probes",
            e.include_unmatched_probes.to_string(),
        );
        out
    }

    /// Every documented key, in canonical emission order.
    pub fn keys() -> Vec<&'static str> {
        vec![
            "model.widths",
            "model.kernels",
            "model.strides",
            "model.stem_pool",
            "model.lta",
            "model.variants",
            "model.branches",
            "model.strips",
            "model.embed_dim",
            "model.gem_power",
            "model.negative_slope",
            "model.bn_momentum",
            "model.bn_eps",
            "model.double_channels",
            "model.infer",
            "reg.prob",
            "reg.mask_ratio",
            "reg.sampler",
            "reg.erase_prob",
            "train.p",
            "train.k",
            "train.iterations",
            "train.frames",
            "train.lr",
            "train.milestones",
            "train.margin",
            "train.beta1",
            "train.beta2",
            "train.epsilon",
            "train.weight_decay",
            "train.log_every",
            "train.checkpoint_every",
            "data.kind",
            "data.synth_ids",
            "data.synth_views",
            "data.synth_frames",
            "data.synth_seed",
            "data.synth_trials",
            "data.split",
            "eval.protocol",
            "eval.include_unmatched_probes",
        ]
    }

    /// Environment variable that overrides `key`.
    pub fn env_name(key: &str) -> String {
        format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
    }

    /// Apply `GAITRM_*` overrides through an injectable lookup (tests pass
    /// a closure; commands pass `std::env::var`). Returns the `(key,
    /// value)` pairs that were applied, in canonical key order.
    pub fn apply_overrides(
        &mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<Vec<(String, String)>> {
        let mut applied = Vec::new();
        for key in RunConfig::keys() {
            let var = RunConfig::env_name(key);
            if let Some(value) = lookup(&var) {
                self.set(key, value.trim()).map_err(|e| {
                    CoreError::InvalidConfig(format!("{var}: {}", inner_msg(&e)))
                })?;
                applied.push((key.to_string(), value));
            }
        }
        Ok(applied)
    }

    /// SHA-256 of the canonical emission, lowercase hex. This fingerprint
    /// is stamped into every artifact the commands write.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.emit().as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Build the model description this config describes.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            in_channels: 1,
            input_h: INPUT_H,
            input_w: INPUT_W,
            widths: m.widths.clone(),
            kernels: m.kernels.clone(),
            strides: m.strides.clone(),
            stem_pool: m.stem_pool,
            lta_kernel: m.lta[0],
            lta_stride: m.lta[1],
            variants: m.variants.clone(),
            branches: m.branches,
            strips: m.strips,
            embed_dim: m.embed_dim,
            gem_power: m.gem_power,
            negative_slope: m.negative_slope,
            bn_momentum: m.bn_momentum,
            bn_eps: m.bn_eps,
            reg: RegConfig {
                reg_prob: self.reg.prob,
                mask_ratio: self.reg.mask_ratio,
                sampler: self.reg.sampler,
                ..RegConfig::default()
            },
            infer: m.infer,
            double_channels: m.double_channels,
        };
        cfg.plan()?;
        cfg.reg.validate()?;
        Ok(cfg)
    }

    /// Build the training settings for `seed`.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            iterations: t.iterations,
            batch: BatchSpec { p: t.p, k: t.k },
            frames: t.frames,
            schedule: LrSchedule::new(t.lr, t.milestones.clone())?,
            adam: AdamConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                epsilon: t.epsilon,
                weight_decay: t.weight_decay,
            },
            triplet: TripletConfig { margin: t.margin },
            erase_prob: self.reg.erase_prob,
            log_every: t.log_every,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Build the synthetic-data request (only meaningful for
    /// `data.kind = synth`).
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            ids: self.data.synth_ids,
            views: self.data.synth_views.clone(),
            frames: self.data.synth_frames,
            seed: self.data.synth_seed,
            nm_trials: self.data.synth_trials[0],
            bg_trials: self.data.synth_trials[1],
            cl_trials: self.data.synth_trials[2],
        }
    }
}
