//! The backbone: stem conv + temporal aggregation, a configurable stack of
//! feature stages (plain conv or one of the perturbation blocks), then
//! horizontal-strip pooling into per-strip embeddings.
//!
//! Data layout end to end:
//!
//! ```text
//! (b, n, c_in, h, w)  input silhouette clips
//!   -> stem conv + spatial max pool + temporal aggregation (max pool)
//!   -> stages 1..            (b, n', c_i, h_i, w_i)
//!   -> temporal max          (b, c_last, H, w_last)
//!   -> strip GeM pooling     (b, strips, c_last)
//!   -> per-strip linear      (b, strips, embed)  = pre_bn
//!   -> batchnorm1d           (b, strips, embed)  = post_bn
//! ```
//!
//! The metric loss trains on `pre_bn`; retrieval compares `post_bn`.

use gaitrm_tensor::checkpoint::LoadedCheckpoint;
use gaitrm_tensor::{elem, Element, Graph, Mode, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    conv_act, inception_rmb_forward, plain_rmb_forward, ConvGeometry, Fusion, InceptionWeights,
    InferenceMasking, RmfeWeights,
};
use crate::error::{CoreError, Result};
use crate::masking::{dropblock_apply, scaling_dropblock_apply, RegConfig, ScalePolicy};

/// What a non-stem stage does to its features before/while convolving.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageVariant {
    /// Plain conv + activation.
    Conv,
    /// Zero a masked region, then conv. The dropped signal is lost.
    DropBlock,
    /// Rescale the two mask halves (no complementary path), then conv.
    ScalingDropBlock,
    /// Paired extraction with dropping scales `(1, 0)`.
    PlainDropping,
    /// Paired extraction with random scales.
    PlainScaling,
    /// Three-branch block (global / dropping / scaling), summed at
    /// intermediate stages, concatenated along height at the final stage.
    Inception,
}

impl StageVariant {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "conv" => Self::Conv,
            "dropblock" => Self::DropBlock,
            "scaling_dropblock" => Self::ScalingDropBlock,
            "plain_dropping" => Self::PlainDropping,
            "plain_scaling" => Self::PlainScaling,
            "inception" => Self::Inception,
            other => {
                return Err(CoreError::InvalidConfig(format!(
                    "unknown stage variant `{other}` (expected conv, dropblock, \
                     scaling_dropblock, plain_dropping, plain_scaling, inception)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Conv => "conv",
            Self::DropBlock => "dropblock",
            Self::ScalingDropBlock => "scaling_dropblock",
            Self::PlainDropping => "plain_dropping",
            Self::PlainScaling => "plain_scaling",
            Self::Inception => "inception",
        }
    }
}

/// Which branches an Inception stage instantiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchToggles {
    pub global: bool,
    pub dropping: bool,
    pub scaling: bool,
}

impl Default for BranchToggles {
    fn default() -> Self {
        Self {
            global: true,
            dropping: true,
            scaling: true,
        }
    }
}

impl BranchToggles {
    pub fn count(&self) -> usize {
        self.global as usize + self.dropping as usize + self.scaling as usize
    }
}

/// Full architecture + perturbation configuration.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    /// Channel widths; `widths[0]` is the stem, the rest are stages.
    pub widths: Vec<usize>,
    /// Per-conv kernel `(kt, kh, kw)`, same length as `widths`.
    pub kernels: Vec<[usize; 3]>,
    /// Per-conv stride, same length as `widths`.
    pub strides: Vec<[usize; 3]>,
    /// Spatial max pool `(ph, pw)` after the stem; `[1, 1]` disables it.
    pub stem_pool: [usize; 2],
    /// Temporal max-pool aggregation after the stem; kernel 1 disables it.
    pub lta_kernel: usize,
    pub lta_stride: usize,
    /// One variant per non-stem stage (`widths.len() - 1` entries).
    pub variants: Vec<StageVariant>,
    pub branches: BranchToggles,
    pub strips: usize,
    pub embed_dim: usize,
    pub gem_power: f64,
    pub negative_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub reg: RegConfig,
    pub infer: InferenceMasking,
    /// Double every channel width (larger-corpus preset knob).
    pub double_channels: bool,
}

impl ModelConfig {
    /// Small preset sized for CPU training in tests: three conv levels,
    /// aggressive spatial downsampling, final plane 4x11 (12x11 after the
    /// three-branch concat).
    pub fn desk() -> Self {
        Self {
            in_channels: 1,
            input_h: 64,
            input_w: 44,
            widths: vec![16, 32, 64],
            kernels: vec![[3, 3, 3], [1, 3, 3], [1, 3, 3]],
            strides: vec![[1, 2, 2], [1, 2, 1], [1, 2, 1]],
            stem_pool: [2, 2],
            lta_kernel: 3,
            lta_stride: 3,
            variants: vec![StageVariant::Conv, StageVariant::Inception],
            branches: BranchToggles::default(),
            strips: 4,
            embed_dim: 64,
            gem_power: 6.5,
            negative_slope: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            reg: RegConfig::default(),
            infer: InferenceMasking::Fixed,
            double_channels: false,
        }
    }

    /// Full-size preset analogous to the published geometry: wider channels,
    /// height preserved through the stages, many strips. Constructible and
    /// shape-checked in tests, but never trained there.
    pub fn paper() -> Self {
        Self {
            in_channels: 1,
            input_h: 64,
            input_w: 44,
            widths: vec![32, 64, 128],
            kernels: vec![[3, 3, 3], [3, 3, 3], [3, 3, 3]],
            strides: vec![[1, 1, 1], [1, 1, 1], [1, 1, 1]],
            stem_pool: [2, 2],
            lta_kernel: 3,
            lta_stride: 3,
            variants: vec![StageVariant::Conv, StageVariant::Inception],
            branches: BranchToggles::default(),
            strips: 32,
            embed_dim: 256,
            gem_power: 6.5,
            negative_slope: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            reg: RegConfig::default(),
            infer: InferenceMasking::Fixed,
            double_channels: false,
        }
    }

    fn width(&self, i: usize) -> usize {
        if self.double_channels {
            self.widths[i] * 2
        } else {
            self.widths[i]
        }
    }

    /// Static shape walk; errors describe the offending stage.
    pub fn plan(&self) -> Result<ModelPlan> {
        if self.widths.len() < 2 {
            return Err(CoreError::InvalidConfig(
                "need at least a stem and one stage".into(),
            ));
        }
        if self.kernels.len() != self.widths.len() || self.strides.len() != self.widths.len() {
            return Err(CoreError::InvalidConfig(format!(
                "kernels ({}) and strides ({}) must match widths ({})",
                self.kernels.len(),
                self.strides.len(),
                self.widths.len()
            )));
        }
        if self.variants.len() != self.widths.len() - 1 {
            return Err(CoreError::InvalidConfig(format!(
                "expected {} stage variants, got {}",
                self.widths.len() - 1,
                self.variants.len()
            )));
        }
        if self.branches.count() == 0 {
            return Err(CoreError::InvalidConfig(
                "at least one inception branch must be enabled".into(),
            ));
        }
        if self.embed_dim == 0 || self.strips == 0 {
            return Err(CoreError::InvalidConfig(
                "strips and embed_dim must be positive".into(),
            ));
        }
        if self.gem_power < 1.0 {
            return Err(CoreError::InvalidConfig(format!(
                "gem_power must be >= 1, got {}",
                self.gem_power
            )));
        }
        if self.lta_kernel == 0 || self.lta_stride == 0 {
            return Err(CoreError::InvalidConfig(
                "temporal aggregation kernel and stride must be >= 1".into(),
            ));
        }
        self.reg.validate()?;

        let spatial =
            |name: String, h: usize, w: usize, k: &[usize; 3], s: &[usize; 3]| -> Result<(usize, usize)> {
                let p = [k[0] / 2, k[1] / 2, k[2] / 2];
                let oh = conv_extent(&name, "height", h, k[1], p[1], s[1])?;
                let ow = conv_extent(&name, "width", w, k[2], p[2], s[2])?;
                Ok((oh, ow))
            };

        let mut stages = Vec::new();
        // stem
        let (mut h, mut w) = spatial(
            "stem".into(),
            self.input_h,
            self.input_w,
            &self.kernels[0],
            &self.strides[0],
        )?;
        let stem = StagePlan {
            name: "stem".into(),
            variant: StageVariant::Conv,
            c_in: self.in_channels,
            c_out: self.width(0),
            h_in: self.input_h,
            w_in: self.input_w,
            h_out: h,
            w_out: w,
            geom: ConvGeometry::same(self.kernels[0], self.strides[0]),
        };
        let [ph, pw] = self.stem_pool;
        if ph == 0 || pw == 0 {
            return Err(CoreError::InvalidConfig("stem_pool must be >= 1".into()));
        }
        if ph > 1 || pw > 1 {
            if ph > h || pw > w {
                return Err(CoreError::InvalidConfig(format!(
                    "stem_pool {ph}x{pw} exceeds stem output {h}x{w}"
                )));
            }
            h = (h - ph) / ph + 1;
            w = (w - pw) / pw + 1;
        }

        let mut c = self.width(0);
        for (i, variant) in self.variants.iter().enumerate() {
            let idx = i + 1;
            let name = format!("stage{idx}");
            let (oh, ow) = spatial(name.clone(), h, w, &self.kernels[idx], &self.strides[idx])?;
            let c_out = self.width(idx);
            stages.push(StagePlan {
                name,
                variant: *variant,
                c_in: c,
                c_out,
                h_in: h,
                w_in: w,
                h_out: oh,
                w_out: ow,
                geom: ConvGeometry::same(self.kernels[idx], self.strides[idx]),
            });
            h = oh;
            w = ow;
            c = c_out;
        }

        // final-stage inception concatenates branches along height
        let last_is_inception = self
            .variants
            .last()
            .map(|v| *v == StageVariant::Inception)
            .unwrap_or(false);
        let final_h = if last_is_inception {
            h * self.branches.count()
        } else {
            h
        };
        if final_h % self.strips != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "strips ({}) must divide the final feature height ({final_h})",
                self.strips
            )));
        }
        Ok(ModelPlan {
            stem,
            stages,
            final_h,
            final_w: w,
            feat_c: c,
            descriptor_dim: self.strips * self.embed_dim,
        })
    }
}

fn conv_extent(stage: &str, axis: &str, extent: usize, k: usize, p: usize, s: usize) -> Result<usize> {
    if s == 0 {
        return Err(CoreError::InvalidConfig(format!(
            "{stage}: stride must be >= 1 on {axis}"
        )));
    }
    let padded = extent + 2 * p;
    if k == 0 || k > padded {
        return Err(CoreError::InvalidConfig(format!(
            "{stage}: kernel {k} does not fit {axis} extent {extent} (padded {padded})"
        )));
    }
    Ok((padded - k) / s + 1)
}

/// Resolved shapes of one conv stage.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub name: String,
    pub variant: StageVariant,
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub geom: ConvGeometry,
}

/// Resolved shapes of the whole model.
#[derive(Debug, Clone)]
pub struct ModelPlan {
    pub stem: StagePlan,
    pub stages: Vec<StagePlan>,
    /// Feature height entering strip pooling (after any final concat).
    pub final_h: usize,
    pub final_w: usize,
    pub feat_c: usize,
    /// `strips * embed_dim`, the flattened retrieval descriptor length.
    pub descriptor_dim: usize,
}

/// One conv's parameters.
#[derive(Debug, Clone)]
pub struct ConvParams<E: Element> {
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

/// A stage holds one conv per enabled path, keyed by a stable name:
/// `conv` for single-path variants, `global`/`dropping`/`scaling` for
/// inception stages.
#[derive(Debug, Clone)]
pub struct StageParams<E: Element> {
    pub convs: Vec<(String, ConvParams<E>)>,
}

impl<E: Element> StageParams<E> {
    fn get(&self, key: &str) -> Option<&ConvParams<E>> {
        self.convs.iter().find(|(k, _)| k == key).map(|(_, c)| c)
    }
}

/// Embedding head parameters.
#[derive(Debug, Clone)]
pub struct HeadParams<E: Element> {
    pub fc: Tensor<E>,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
}

/// All model parameters, in checkpointable form.
#[derive(Debug, Clone)]
pub struct ModelParams<E: Element> {
    pub stem: ConvParams<E>,
    pub stages: Vec<StageParams<E>>,
    pub head: HeadParams<E>,
}

fn stage_conv_keys(variant: StageVariant, branches: &BranchToggles) -> Vec<&'static str> {
    match variant {
        StageVariant::Inception => {
            let mut keys = Vec::new();
            if branches.global {
                keys.push("global");
            }
            if branches.dropping {
                keys.push("dropping");
            }
            if branches.scaling {
                keys.push("scaling");
            }
            keys
        }
        _ => vec!["conv"],
    }
}

impl<E: Element> ModelParams<E> {
    /// Fresh parameters. Weight draws happen in a fixed documented order
    /// (stem, stages in order with conv keys in canonical order, then the
    /// head fc), one uniform per element, row-major. Kaiming-uniform bounds
    /// for convs, Xavier-uniform for the per-strip linear; biases, BN affine
    /// and running stats are constants and consume no draws.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let plan = cfg.plan()?;
        let conv = |p: &StagePlan, rng: &mut R| -> ConvParams<E> {
            let [kt, kh, kw] = p.geom.kernel;
            let fan_in = (p.c_in * kt * kh * kw) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w = Tensor::new(
                vec![p.c_out, p.c_in, kt, kh, kw],
                (0..p.c_out * p.c_in * kt * kh * kw)
                    .map(|_| elem(rng.gen_range(-bound..bound)))
                    .collect(),
            )
            .expect("conv weight shape");
            let b = Tensor::zeros(vec![p.c_out]);
            ConvParams { w, b }
        };

        let stem = conv(&plan.stem, rng);
        let mut stages = Vec::new();
        for sp in &plan.stages {
            let mut convs = Vec::new();
            for key in stage_conv_keys(sp.variant, &cfg.branches) {
                convs.push((key.to_string(), conv(sp, rng)));
            }
            stages.push(StageParams { convs });
        }

        let (s, c, e) = (cfg.strips, plan.feat_c, cfg.embed_dim);
        let bound = (6.0 / (c + e) as f64).sqrt();
        let fc = Tensor::new(
            vec![s, c, e],
            (0..s * c * e)
                .map(|_| elem(rng.gen_range(-bound..bound)))
                .collect(),
        )
        .expect("fc shape");
        let head = HeadParams {
            fc,
            gamma: Tensor::full(vec![s, e], elem(1.0)),
            beta: Tensor::zeros(vec![s, e]),
            running_mean: Tensor::zeros(vec![s, e]),
            running_var: Tensor::full(vec![s, e], elem(1.0)),
        };
        Ok(Self { stem, stages, head })
    }

    /// Stable name -> tensor listing; the order is the checkpoint and
    /// optimizer-state order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> = vec![
            ("stem.conv.w".into(), &self.stem.w),
            ("stem.conv.b".into(), &self.stem.b),
        ];
        for (i, st) in self.stages.iter().enumerate() {
            for (key, c) in &st.convs {
                out.push((format!("stage{}.{key}.w", i + 1), &c.w));
                out.push((format!("stage{}.{key}.b", i + 1), &c.b));
            }
        }
        out.push(("head.fc.w".into(), &self.head.fc));
        out.push(("head.bn.gamma".into(), &self.head.gamma));
        out.push(("head.bn.beta".into(), &self.head.beta));
        out.push(("head.bn.running_mean".into(), &self.head.running_mean));
        out.push(("head.bn.running_var".into(), &self.head.running_var));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = vec![
            ("stem.conv.w".into(), &mut self.stem.w),
            ("stem.conv.b".into(), &mut self.stem.b),
        ];
        for (i, st) in self.stages.iter_mut().enumerate() {
            for (key, c) in &mut st.convs {
                out.push((format!("stage{}.{key}.w", i + 1), &mut c.w));
                out.push((format!("stage{}.{key}.b", i + 1), &mut c.b));
            }
        }
        out.push(("head.fc.w".into(), &mut self.head.fc));
        out.push(("head.bn.gamma".into(), &mut self.head.gamma));
        out.push(("head.bn.beta".into(), &mut self.head.beta));
        out.push(("head.bn.running_mean".into(), &mut self.head.running_mean));
        out.push(("head.bn.running_var".into(), &mut self.head.running_var));
        out
    }

    /// Everything the optimizer touches: all tensors except BN running
    /// statistics.
    pub fn trainable_names(&self) -> Vec<String> {
        self.named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !n.contains("running"))
            .collect()
    }

    pub fn cast<T: Element>(&self) -> ModelParams<T> {
        ModelParams {
            stem: ConvParams {
                w: self.stem.w.cast(),
                b: self.stem.b.cast(),
            },
            stages: self
                .stages
                .iter()
                .map(|st| StageParams {
                    convs: st
                        .convs
                        .iter()
                        .map(|(k, c)| {
                            (
                                k.clone(),
                                ConvParams {
                                    w: c.w.cast(),
                                    b: c.b.cast(),
                                },
                            )
                        })
                        .collect(),
                })
                .collect(),
            head: HeadParams {
                fc: self.head.fc.cast(),
                gamma: self.head.gamma.cast(),
                beta: self.head.beta.cast(),
                running_mean: self.head.running_mean.cast(),
                running_var: self.head.running_var.cast(),
            },
        }
    }
}

impl ModelParams<f32> {
    /// Fill from a loaded checkpoint, validating that every expected tensor
    /// exists with the expected shape.
    pub fn load_from(&mut self, ck: &LoadedCheckpoint) -> Result<()> {
        for (name, t) in self.named_tensors_mut() {
            let src = ck
                .tensor(&name)
                .ok_or_else(|| CoreError::CheckpointMissing { name: name.clone() })?;
            if src.shape() != t.shape() {
                return Err(CoreError::CheckpointShape {
                    name,
                    expected: t.shape().to_vec(),
                    got: src.shape().to_vec(),
                });
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Result of one forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `(b, n', c, h, w)` output of the last stage, before temporal pooling
    /// (activation-energy visualizations read this).
    pub final_features: NodeId,
    /// `(b, strips, embed)` before batch norm; the loss trains this.
    pub pre_bn: NodeId,
    /// `(b, strips, embed)` after batch norm; retrieval compares this.
    pub post_bn: NodeId,
    /// Trainable leaves bound this call, in parameter order.
    pub bound: Vec<(String, NodeId)>,
}

/// Train-mode forward; `rng` drives all perturbation draws.
pub fn forward_train<E: Element, R: Rng>(
    g: &mut Graph<E>,
    x: NodeId,
    cfg: &ModelConfig,
    params: &mut ModelParams<E>,
    rng: &mut R,
) -> Result<ForwardOutput> {
    forward(g, x, cfg, params, Mode::Train, Some(rng))
}

/// Eval-mode forward; deterministic, consumes no randomness.
pub fn forward_eval<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    cfg: &ModelConfig,
    params: &mut ModelParams<E>,
) -> Result<ForwardOutput> {
    forward::<E, ChaCha8Rng>(g, x, cfg, params, Mode::Eval, None)
}

fn forward<E: Element, R: Rng>(
    g: &mut Graph<E>,
    x: NodeId,
    cfg: &ModelConfig,
    params: &mut ModelParams<E>,
    mode: Mode,
    mut rng: Option<&mut R>,
) -> Result<ForwardOutput> {
    let plan = cfg.plan()?;
    let (_b, _n, c_in, h, w) = g.value(x).dims5("model input")?;
    if c_in != cfg.in_channels || h != cfg.input_h || w != cfg.input_w {
        return Err(CoreError::InvalidConfig(format!(
            "input is {c_in}x{h}x{w} per frame, config expects {}x{}x{}",
            cfg.in_channels, cfg.input_h, cfg.input_w
        )));
    }
    if mode == Mode::Train && rng.is_none() {
        return Err(CoreError::InvalidConfig(
            "train-mode forward requires an rng".into(),
        ));
    }
    let requires_grad = mode == Mode::Train;
    let mut bound: Vec<(String, NodeId)> = Vec::new();
    fn bind<E: Element>(
        g: &mut Graph<E>,
        bound: &mut Vec<(String, NodeId)>,
        requires_grad: bool,
        name: &str,
        t: &Tensor<E>,
    ) -> NodeId {
        let id = g.leaf(t.clone(), requires_grad);
        bound.push((name.to_string(), id));
        id
    }

    // stem
    let stem_w = bind(g, &mut bound, requires_grad, "stem.conv.w", &params.stem.w);
    let stem_b = bind(g, &mut bound, requires_grad, "stem.conv.b", &params.stem.b);
    let mut feat = conv_act(
        g,
        x,
        &RmfeWeights {
            w: stem_w,
            b: stem_b,
        },
        &plan.stem.geom,
        cfg.negative_slope,
    )?;
    let [ph, pw] = cfg.stem_pool;
    if ph > 1 || pw > 1 {
        feat = g.max_pool3d(feat, [1, ph, pw], [1, ph, pw])?;
    }
    if cfg.lta_kernel > 1 || cfg.lta_stride > 1 {
        let frames_now = g.value(feat).dims5("temporal aggregation")?.1;
        if frames_now < cfg.lta_kernel {
            return Err(CoreError::Data(format!(
                "{frames_now} frames reach temporal aggregation, kernel needs {}",
                cfg.lta_kernel
            )));
        }
        feat = g.max_pool3d(feat, [cfg.lta_kernel, 1, 1], [cfg.lta_stride, 1, 1])?;
    }

    // stages
    let n_stages = plan.stages.len();
    for (i, sp) in plan.stages.iter().enumerate() {
        let is_last = i + 1 == n_stages;
        let stage = &params.stages[i];
        let prefix = format!("stage{}", i + 1);
        let bind_conv = |g: &mut Graph<E>, bound: &mut Vec<(String, NodeId)>, key: &str| -> Result<RmfeWeights> {
            let c = stage.get(key).ok_or_else(|| {
                CoreError::InvalidConfig(format!("{prefix} has no `{key}` conv parameters"))
            })?;
            let w = bind(g, bound, requires_grad, &format!("{prefix}.{key}.w"), &c.w);
            let b = bind(g, bound, requires_grad, &format!("{prefix}.{key}.b"), &c.b);
            Ok(RmfeWeights { w, b })
        };

        feat = match sp.variant {
            StageVariant::Conv => {
                let wts = bind_conv(g, &mut bound, "conv")?;
                conv_act(g, feat, &wts, &sp.geom, cfg.negative_slope)?
            }
            StageVariant::DropBlock => {
                let wts = bind_conv(g, &mut bound, "conv")?;
                let perturbed = match (mode, rng.as_deref_mut()) {
                    (Mode::Train, Some(r)) => dropblock_apply(g, feat, &cfg.reg, r)?,
                    _ => feat, // eval: identity
                };
                conv_act(g, perturbed, &wts, &sp.geom, cfg.negative_slope)?
            }
            StageVariant::ScalingDropBlock => {
                let wts = bind_conv(g, &mut bound, "conv")?;
                let perturbed = match (mode, rng.as_deref_mut()) {
                    (Mode::Train, Some(r)) => scaling_dropblock_apply(g, feat, &cfg.reg, r)?,
                    _ => feat,
                };
                conv_act(g, perturbed, &wts, &sp.geom, cfg.negative_slope)?
            }
            StageVariant::PlainDropping | StageVariant::PlainScaling => {
                let wts = bind_conv(g, &mut bound, "conv")?;
                let policy = if sp.variant == StageVariant::PlainDropping {
                    ScalePolicy::Dropping
                } else {
                    ScalePolicy::Scaling
                };
                let mut fallback = ChaCha8Rng::seed_from_u64(0);
                match (mode, rng.as_deref_mut()) {
                    (Mode::Train, Some(r)) => plain_rmb_forward(
                        g, feat, &wts, &sp.geom, cfg.negative_slope, &cfg.reg, policy, mode,
                        cfg.infer, r,
                    )?,
                    _ => plain_rmb_forward(
                        g, feat, &wts, &sp.geom, cfg.negative_slope, &cfg.reg, policy, mode,
                        cfg.infer, &mut fallback,
                    )?,
                }
            }
            StageVariant::Inception => {
                let global = if cfg.branches.global {
                    Some(bind_conv(g, &mut bound, "global")?)
                } else {
                    None
                };
                let dropping = if cfg.branches.dropping {
                    Some(bind_conv(g, &mut bound, "dropping")?)
                } else {
                    None
                };
                let scaling = if cfg.branches.scaling {
                    Some(bind_conv(g, &mut bound, "scaling")?)
                } else {
                    None
                };
                let wts = InceptionWeights {
                    global,
                    dropping,
                    scaling,
                };
                let fusion = if is_last {
                    Fusion::ConcatHeight
                } else {
                    Fusion::Sum
                };
                let mut fallback = ChaCha8Rng::seed_from_u64(0);
                match (mode, rng.as_deref_mut()) {
                    (Mode::Train, Some(r)) => inception_rmb_forward(
                        g, feat, &wts, &sp.geom, cfg.negative_slope, &cfg.reg, fusion, mode,
                        cfg.infer, r,
                    )?,
                    _ => inception_rmb_forward(
                        g, feat, &wts, &sp.geom, cfg.negative_slope, &cfg.reg, fusion, mode,
                        cfg.infer, &mut fallback,
                    )?,
                }
            }
        };
    }

    // head
    let final_features = feat;
    let set_level = g.temporal_max_pool(feat)?;
    let strips = g.gem_pool_strip(set_level, cfg.strips, cfg.gem_power, 1e-6)?;
    let fc = bind(g, &mut bound, requires_grad, "head.fc.w", &params.head.fc);
    let pre_bn = g.linear_map(strips, fc)?;
    let gamma = bind(g, &mut bound, requires_grad, "head.bn.gamma", &params.head.gamma);
    let beta = bind(g, &mut bound, requires_grad, "head.bn.beta", &params.head.beta);
    let post_bn = g.batchnorm1d(
        pre_bn,
        gamma,
        beta,
        &mut params.head.running_mean,
        &mut params.head.running_var,
        mode,
        cfg.bn_momentum,
        cfg.bn_eps,
    )?;
    Ok(ForwardOutput {
        final_features,
        pre_bn,
        post_bn,
        bound,
    })
}

/// Embed one silhouette sequence (rank-3 `(n, h, w)`) in eval mode,
/// returning the flattened `(strips * embed)` retrieval descriptor
/// (post-BN, running statistics).
pub fn embed_sequence(
    cfg: &ModelConfig,
    params: &mut ModelParams<f32>,
    frames: &Tensor<f32>,
) -> Result<Vec<f32>> {
    let (n, h, w) = frames.dims3("embed_sequence")?;
    let x = Tensor::new(vec![1, n, 1, h, w], frames.data().to_vec())?;
    let mut g = Graph::<f32>::new();
    let xid = g.constant(x);
    let out = forward_eval(&mut g, xid, cfg, params)?;
    Ok(g.value(out.post_bn).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(b: usize, n: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![b, n, 1, 64, 44], |i| {
            if (i * 31 + 11) % 97 < 30 {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn desk_plan_shapes() {
        let plan = ModelConfig::desk().plan().unwrap();
        assert_eq!((plan.stem.h_out, plan.stem.w_out), (32, 22));
        assert_eq!(plan.stages.len(), 2);
        // after stem pool 16x11; stage1 halves height; stage2 again
        assert_eq!((plan.stages[0].h_in, plan.stages[0].w_in), (16, 11));
        assert_eq!((plan.stages[0].h_out, plan.stages[0].w_out), (8, 11));
        assert_eq!((plan.stages[1].h_out, plan.stages[1].w_out), (4, 11));
        // three branches concatenated
        assert_eq!(plan.final_h, 12);
        assert_eq!(plan.feat_c, 64);
        assert_eq!(plan.descriptor_dim, 4 * 64);
    }

    #[test]
    fn paper_plan_is_constructible() {
        let plan = ModelConfig::paper().plan().unwrap();
        assert_eq!(plan.final_h % 32, 0);
        assert_eq!(plan.feat_c, 128);
        let cfg = ModelConfig {
            double_channels: true,
            ..ModelConfig::paper()
        };
        assert_eq!(cfg.plan().unwrap().feat_c, 256);
    }

    #[test]
    fn init_is_deterministic_and_orders_draws() {
        let cfg = ModelConfig::desk();
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = ModelParams::<f32>::init(&cfg, &mut r1).unwrap();
        let b = ModelParams::<f32>::init(&cfg, &mut r2).unwrap();
        for ((na, ta), (nb, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "tensor {na} differs across same-seed inits");
        }
    }

    #[test]
    fn named_tensor_listing_matches_desk_layout() {
        let cfg = ModelConfig::desk();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::<f32>::init(&cfg, &mut r).unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        let expected = [
            "stem.conv.w",
            "stem.conv.b",
            "stage1.conv.w",
            "stage1.conv.b",
            "stage2.global.w",
            "stage2.global.b",
            "stage2.dropping.w",
            "stage2.dropping.b",
            "stage2.scaling.w",
            "stage2.scaling.b",
            "head.fc.w",
            "head.bn.gamma",
            "head.bn.beta",
            "head.bn.running_mean",
            "head.bn.running_var",
        ];
        assert_eq!(names, expected);
        let trainables = p.trainable_names();
        assert!(!trainables.iter().any(|n| n.contains("running")));
        assert_eq!(trainables.len(), names.len() - 2);
    }

    #[test]
    fn eval_forward_has_descriptor_shape_and_is_deterministic() {
        let cfg = ModelConfig::desk();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut params = ModelParams::<f32>::init(&cfg, &mut r).unwrap();
        let x = clip(2, 7);
        let run = |params: &mut ModelParams<f32>| {
            let mut g = Graph::<f32>::new();
            let xid = g.constant(x.clone());
            let out = forward_eval(&mut g, xid, &cfg, params).unwrap();
            assert_eq!(g.value(out.post_bn).shape(), &[2, 4, 64]);
            g.value(out.post_bn).data().to_vec()
        };
        let a = run(&mut params);
        let b = run(&mut params);
        assert_eq!(a, b);
    }

    #[test]
    fn train_forward_updates_running_stats_eval_does_not() {
        let cfg = ModelConfig::desk();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut params = ModelParams::<f32>::init(&cfg, &mut r).unwrap();
        let before = params.head.running_mean.data().to_vec();
        let x = clip(2, 7);

        let mut g = Graph::<f32>::new();
        let xid = g.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        forward_train(&mut g, xid, &cfg, &mut params, &mut rng).unwrap();
        let after_train = params.head.running_mean.data().to_vec();
        assert_ne!(before, after_train, "train forward must update running stats");

        let mut g2 = Graph::<f32>::new();
        let xid2 = g2.constant(x);
        forward_eval(&mut g2, xid2, &cfg, &mut params).unwrap();
        assert_eq!(
            after_train,
            params.head.running_mean.data(),
            "eval forward must not touch running stats"
        );
    }

    /// Degenerate head: one strip, GeM power 1, identity per-strip linear,
    /// untouched BN running stats -> the embedding is exactly the global
    /// average of the temporally max-pooled feature map (up to the BN eps in
    /// the variance denominator).
    #[test]
    fn degenerate_head_is_global_average() {
        let cfg = ModelConfig {
            strips: 1,
            embed_dim: 64,
            gem_power: 1.0,
            bn_eps: 1e-12,
            ..ModelConfig::desk()
        };
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut params = ModelParams::<f32>::init(&cfg, &mut r).unwrap();
        // identity fc: (1, 64, 64)
        params.head.fc = Tensor::from_fn(vec![1, 64, 64], |i| {
            if i / 64 == i % 64 {
                1.0
            } else {
                0.0
            }
        });
        let mut g = Graph::<f32>::new();
        let xid = g.constant(clip(1, 7));
        let out = forward_eval(&mut g, xid, &cfg, &mut params).unwrap();
        // hand-average the final features after a temporal max
        let feats = g.value(out.final_features).clone();
        let (b, n, c, h, w) = feats.dims5("test").unwrap();
        assert_eq!(b, 1);
        let mut want = vec![0.0f32; c];
        for ci in 0..c {
            let mut acc = 0.0f32;
            for hi in 0..h {
                for wi in 0..w {
                    let mut m = f32::NEG_INFINITY;
                    for ni in 0..n {
                        m = m.max(feats.data()[((ni * c + ci) * h + hi) * w + wi]);
                    }
                    // GeM clamps at 1e-6 before averaging
                    acc += m.max(1e-6);
                }
            }
            want[ci] = acc / (h * w) as f32;
        }
        let got = g.value(out.post_bn).data();
        for (gv, wv) in got.iter().zip(&want) {
            assert!((gv - wv).abs() <= 1e-5, "got {gv}, want {wv}");
        }
    }

    #[test]
    fn too_few_frames_is_a_clean_error() {
        let cfg = ModelConfig::desk();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut params = ModelParams::<f32>::init(&cfg, &mut r).unwrap();
        let mut g = Graph::<f32>::new();
        // 2 frames survive the stem; temporal aggregation needs 3
        let xid = g.constant(clip(1, 2));
        let err = forward_eval(&mut g, xid, &cfg, &mut params).unwrap_err();
        assert!(matches!(err, CoreError::Data(_)), "got {err:?}");
    }

    #[test]
    fn strips_must_divide_final_height() {
        let cfg = ModelConfig {
            strips: 5,
            ..ModelConfig::desk()
        };
        assert!(cfg.plan().is_err());
    }

    #[test]
    fn checkpoint_roundtrip_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("model");
        let cfg = ModelConfig::desk();
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let params = ModelParams::<f32>::init(&cfg, &mut r).unwrap();
        let named = params.named_tensors();
        gaitrm_tensor::checkpoint::save_checkpoint(&base, &[], &named).unwrap();

        let loaded = gaitrm_tensor::checkpoint::load_checkpoint(&base).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(999);
        let mut fresh = ModelParams::<f32>::init(&cfg, &mut r2).unwrap();
        fresh.load_from(&loaded).unwrap();
        for ((na, ta), (nb, tb)) in params.named_tensors().iter().zip(fresh.named_tensors().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na} not restored");
        }
    }

    #[test]
    fn missing_checkpoint_tensor_is_reported_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("model");
        let cfg = ModelConfig::desk();
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let params = ModelParams::<f32>::init(&cfg, &mut r).unwrap();
        let named = params.named_tensors();
        // drop one tensor
        let partial: Vec<_> = named
            .iter()
            .filter(|(n, _)| n != "head.fc.w")
            .cloned()
            .collect();
        gaitrm_tensor::checkpoint::save_checkpoint(&base, &[], &partial).unwrap();
        let loaded = gaitrm_tensor::checkpoint::load_checkpoint(&base).unwrap();
        let mut fresh = params.clone();
        let err = fresh.load_from(&loaded).unwrap_err();
        match err {
            CoreError::CheckpointMissing { name } => assert_eq!(name, "head.fc.w"),
            other => panic!("expected CheckpointMissing, got {other:?}"),
        }
    }
}
