//! Central-difference verification of every backward implementation, from
//! single ops through the composite blocks up to the full model. All
//! checks run in f64; randomness inside a checked function is frozen by
//! cloning a pinned generator per evaluation, so every check is
//! deterministic for a given seed.

use gaitrm_tensor::fdcheck::{finite_diff_check, FdOptions};
use gaitrm_tensor::{Graph, Mode, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    inception_rmb_forward, plain_rmb_forward, rmfe_forward, ConvGeometry, Fusion,
    InceptionWeights, InferenceMasking, RmfeWeights,
};
use crate::error::{CoreError, Result};
use crate::loss::{ba_plus_triplet, TripletConfig};
use crate::masking::{apply_reverse_mask, sample_mask, RegConfig, ScalePair, ScalePolicy};
use crate::model::{forward_train, ModelConfig, ModelParams, StageVariant};

/// How much of the stack to verify. Scopes are cumulative: `Block` also
/// runs the op checks, `Model` runs everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CheckScope {
    Op,
    Block,
    Model,
}

impl CheckScope {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "op" => Self::Op,
            "block" => Self::Block,
            "model" => Self::Model,
            other => {
                return Err(CoreError::InvalidConfig(format!(
                    "unknown gradcheck scope `{other}` (expected op, block or model)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

const OP_TOL: f64 = 1e-6;
const BN_TOL: f64 = 1e-5;
const BLOCK_TOL: f64 = 1e-5;
const MODEL_TOL: f64 = 1e-4;

/// Values guaranteed pairwise distinct (for max pools) and bounded; the
/// multiplier must be coprime to the modulus.
fn distinct_values(shape: Vec<usize>, scale: f64, offset: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i * 149) % 997) as f64 * scale + offset)
}

/// Smooth pseudo-random values in roughly [-1, 1].
fn wavy(shape: Vec<usize>, phase: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| (i as f64 * 0.7391 + phase).sin())
}

fn check(
    reports: &mut Vec<CheckReport>,
    name: &str,
    tol: f64,
    x: &Tensor<f64>,
    opts: &FdOptions,
    build: impl Fn(&mut Graph<f64>, NodeId) -> gaitrm_tensor::Result<NodeId>,
) -> Result<()> {
    let max_rel_err = finite_diff_check(x, opts, build)?;
    reports.push(CheckReport {
        name: name.to_string(),
        max_rel_err,
        tol,
    });
    Ok(())
}

/// Like `check`, but probes only coordinates whose analytic gradient is at
/// least 1% of the largest one. Secant noise is absolute, so a coordinate
/// whose gradient happens to nearly cancel reports pure noise under the
/// relative metric; per-op checks (exhaustive, smooth fixtures) cover the
/// small-gradient cases, composite checks verify the chain-rule plumbing.
fn check_salient(
    reports: &mut Vec<CheckReport>,
    name: &str,
    tol: f64,
    x: &Tensor<f64>,
    step: f64,
    want: usize,
    build: impl Fn(&mut Graph<f64>, NodeId) -> gaitrm_tensor::Result<NodeId>,
) -> Result<()> {
    let grad: Tensor<f64> = {
        let mut g = Graph::new();
        let leaf = g.leaf(x.clone(), true);
        let loss = build(&mut g, leaf)?;
        g.backward(loss)?;
        g.grad(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    };
    let peak = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let eligible: Vec<usize> = (0..grad.len())
        .filter(|&i| grad.data()[i].abs() >= 0.01 * peak)
        .collect();
    let picked = spread_coords(eligible.len(), want)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let opts = FdOptions {
        step,
        coords: Some(picked),
    };
    check(reports, name, tol, x, &opts, build)
}

fn op_checks(reports: &mut Vec<CheckReport>) -> Result<()> {
    let d = &FdOptions::default();

    // conv3d: input, weight and bias gradients.
    let x = wavy(vec![2, 3, 2, 5, 4], 0.3);
    let w = wavy(vec![3, 2, 2, 3, 3], 1.1);
    let b = wavy(vec![3], 2.2);
    let conv = |g: &mut Graph<f64>, xi: NodeId, wi: NodeId, bi: NodeId| {
        let y = g.conv3d(xi, wi, Some(bi), [0, 1, 1], [1, 2, 1])?;
        Ok(g.sum(y))
    };
    {
        let (w, b) = (w.clone(), b.clone());
        check(reports, "op/conv3d/input", OP_TOL, &x, d, move |g, leaf| {
            let wi = g.constant(w.clone());
            let bi = g.constant(b.clone());
            conv(g, leaf, wi, bi)
        })?;
    }
    {
        let (x, b) = (x.clone(), b.clone());
        check(reports, "op/conv3d/weight", OP_TOL, &w, d, move |g, leaf| {
            let xi = g.constant(x.clone());
            let bi = g.constant(b.clone());
            conv(g, xi, leaf, bi)
        })?;
    }
    {
        let (x, w) = (x.clone(), w.clone());
        check(reports, "op/conv3d/bias", OP_TOL, &b, d, move |g, leaf| {
            let xi = g.constant(x.clone());
            let wi = g.constant(w.clone());
            conv(g, xi, wi, leaf)
        })?;
    }

    // leaky_relu, probed away from the kink at zero.
    let x = Tensor::from_fn(vec![3, 7], |i| {
        let v = (i as f64 * 0.83).sin();
        v + v.signum() * 0.1
    });
    check(reports, "op/leaky_relu", OP_TOL, &x, d, |g, leaf| {
        let y = g.leaky_relu(leaf, 0.2)?;
        Ok(g.sum(y))
    })?;

    // add and mul with the same node on both slots (accumulation path).
    let x = wavy(vec![2, 5], 0.9);
    check(reports, "op/add", OP_TOL, &x, d, |g, leaf| {
        let y = g.add(leaf, leaf)?;
        Ok(g.sum(y))
    })?;
    check(reports, "op/mul", OP_TOL, &x, d, |g, leaf| {
        let y = g.mul(leaf, leaf)?;
        Ok(g.sum(y))
    })?;
    check(reports, "op/scale", OP_TOL, &x, d, |g, leaf| {
        let y = g.scale(leaf, -1.7);
        Ok(g.sum(y))
    })?;
    check(reports, "op/sum", OP_TOL, &x, d, |g, leaf| Ok(g.sum(leaf)))?;

    // scale_hw: per-position coefficient map.
    let x = wavy(vec![2, 2, 3, 4, 5], 1.7);
    let coef: Vec<f64> = (0..20).map(|i| 0.1 * i as f64 - 0.7).collect();
    check(reports, "op/scale_hw", OP_TOL, &x, d, move |g, leaf| {
        let y = g.scale_hw(leaf, &coef)?;
        Ok(g.sum(y))
    })?;

    // concat_height with the probed tensor feeding all three parts.
    let x = wavy(vec![2, 2, 2, 3, 4], 0.2);
    check(reports, "op/concat_height", OP_TOL, &x, d, |g, leaf| {
        let a = g.scale(leaf, 0.5);
        let b = g.mul(leaf, leaf)?;
        let y = g.concat_height(&[leaf, a, b])?;
        Ok(g.sum(y))
    })?;

    // Max pools need pairwise-distinct values so the argmax is stable
    // under the probe step.
    let x = distinct_values(vec![2, 4, 3, 2, 2], 0.05, -10.0);
    check(reports, "op/temporal_max_pool", OP_TOL, &x, d, |g, leaf| {
        let y = g.temporal_max_pool(leaf)?;
        Ok(g.sum(y))
    })?;
    let x = distinct_values(vec![2, 3, 2, 6, 5], 0.02, -6.0);
    check(reports, "op/max_pool3d", OP_TOL, &x, d, |g, leaf| {
        let y = g.max_pool3d(leaf, [2, 2, 2], [1, 2, 2])?;
        Ok(g.sum(y))
    })?;

    // GeM pooling: mean regime and a fractional power. Values sit well
    // above the clamp floor.
    let x = Tensor::from_fn(vec![2, 3, 6, 4], |i| 0.5 + ((i * 31) % 53) as f64 / 26.0);
    check(reports, "op/gem_pool_strip/p1", OP_TOL, &x, d, |g, leaf| {
        let y = g.gem_pool_strip(leaf, 3, 1.0, 1e-6)?;
        Ok(g.sum(y))
    })?;
    // For the fractional power, keep the values in a narrow band: x^6.5
    // spreads per-coordinate gradients over four orders of magnitude
    // otherwise, and the smallest ones drown in secant roundoff.
    let x = Tensor::from_fn(vec![2, 3, 6, 4], |i| 0.8 + ((i * 31) % 53) as f64 / 132.5);
    check(
        reports,
        "op/gem_pool_strip/p6.5",
        OP_TOL,
        &x,
        d,
        |g, leaf| {
            let y = g.gem_pool_strip(leaf, 3, 6.5, 1e-6)?;
            Ok(g.sum(y))
        },
    )?;

    // linear_map: input and weight gradients.
    let x = wavy(vec![2, 3, 4], 0.45);
    let w = wavy(vec![3, 4, 5], 1.3);
    {
        let w = w.clone();
        check(reports, "op/linear_map/input", OP_TOL, &x, d, move |g, leaf| {
            let wi = g.constant(w.clone());
            let y = g.linear_map(leaf, wi)?;
            Ok(g.sum(y))
        })?;
    }
    {
        let x = x.clone();
        check(reports, "op/linear_map/weight", OP_TOL, &w, d, move |g, leaf| {
            let xi = g.constant(x.clone());
            let y = g.linear_map(xi, leaf)?;
            Ok(g.sum(y))
        })?;
    }

    // batchnorm1d, train mode: gradients flow through the batch statistics.
    // The plain sum of normalized outputs is gradient-free by symmetry, so
    // weight the outputs to get a non-trivial objective.
    let x = wavy(vec![4, 2, 3], 0.8);
    let gamma = Tensor::from_fn(vec![2, 3], |i| 1.0 + 0.2 * i as f64);
    let beta = Tensor::from_fn(vec![2, 3], |i| 0.1 * i as f64 - 0.2);
    let weights: Vec<f64> = (0..24).map(|i| (i as f64 * 0.31).cos()).collect();
    let bn = move |g: &mut Graph<f64>,
                   xi: NodeId,
                   gi: NodeId,
                   bi: NodeId,
                   mode: Mode|
          -> gaitrm_tensor::Result<NodeId> {
        let mut rm = Tensor::zeros(vec![2, 3]);
        let mut rv = Tensor::from_fn(vec![2, 3], |i| 1.0 + 0.1 * i as f64);
        let y = g.batchnorm1d(xi, gi, bi, &mut rm, &mut rv, mode, 0.1, 1e-5)?;
        let wmap = Tensor::new(vec![4, 2, 3], weights.clone())?;
        let wi = g.constant(wmap);
        let z = g.mul(y, wi)?;
        Ok(g.sum(z))
    };
    {
        let (gamma, beta, bn) = (gamma.clone(), beta.clone(), bn.clone());
        check(reports, "op/batchnorm1d/input", BN_TOL, &x, d, move |g, leaf| {
            let gi = g.constant(gamma.clone());
            let bi = g.constant(beta.clone());
            bn(g, leaf, gi, bi, Mode::Train)
        })?;
    }
    {
        let (x, beta, bn) = (x.clone(), beta.clone(), bn.clone());
        check(reports, "op/batchnorm1d/gamma", BN_TOL, &gamma, d, move |g, leaf| {
            let xi = g.constant(x.clone());
            let bi = g.constant(beta.clone());
            bn(g, xi, leaf, bi, Mode::Train)
        })?;
    }
    {
        let (x, gamma, bn) = (x.clone(), gamma.clone(), bn.clone());
        check(reports, "op/batchnorm1d/beta", BN_TOL, &beta, d, move |g, leaf| {
            let xi = g.constant(x.clone());
            let gi = g.constant(gamma.clone());
            bn(g, xi, gi, leaf, Mode::Train)
        })?;
    }
    {
        let (gamma, beta, bn) = (gamma.clone(), beta.clone(), bn.clone());
        check(reports, "op/batchnorm1d/eval", OP_TOL, &x, d, move |g, leaf| {
            let gi = g.constant(gamma.clone());
            let bi = g.constant(beta.clone());
            bn(g, leaf, gi, bi, Mode::Eval)
        })?;
    }
    Ok(())
}

fn block_checks(reports: &mut Vec<CheckReport>, seed: u64) -> Result<()> {
    let d = &FdOptions::default();
    let geom = ConvGeometry::same([1, 3, 3], [1, 1, 1]);
    let x = wavy(vec![2, 2, 2, 6, 5], 0.37);
    let w = wavy(vec![3, 2, 1, 3, 3], 1.9);
    let b = wavy(vec![3], 0.6);

    // A fixed mask and scale pair, drawn once outside the closures.
    let mask = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
        sample_mask(&RegConfig::default(), 6, 5, &mut rng)?
    };
    let pair = ScalePair {
        alpha: 0.7,
        beta: 0.3,
        policy: ScalePolicy::Fixed {
            alpha: 0.7,
            beta: 0.3,
        },
    };

    // The paired split itself: both halves weighted by distinct maps so
    // each output's gradient path is exercised.
    {
        let mask = mask.clone();
        let m1: Vec<f64> = (0..30).map(|i| (i as f64 * 0.21).sin() + 1.5).collect();
        let m2: Vec<f64> = (0..30).map(|i| (i as f64 * 0.17).cos() - 1.5).collect();
        check(reports, "block/paired_split", OP_TOL, &x, d, move |g, leaf| {
            let p = apply_reverse_mask(g, leaf, &mask, pair).map_err(to_tensor_err)?;
            let a = g.scale_hw(p.masked, &m1)?;
            let bb = g.scale_hw(p.paired, &m2)?;
            let y = g.add(a, bb)?;
            Ok(g.sum(y))
        })?;
    }

    // Shared-weight double conv: input and weight gradients, activations on.
    {
        let (mask, w, b) = (mask.clone(), w.clone(), b.clone());
        check(reports, "block/paired_conv/input", BLOCK_TOL, &x, d, move |g, leaf| {
            let wts = RmfeWeights {
                w: g.leaf(w.clone(), false),
                b: g.leaf(b.clone(), false),
            };
            let p = apply_reverse_mask(g, leaf, &mask, pair).map_err(to_tensor_err)?;
            let y = rmfe_forward(g, &p, &wts, &geom, 0.2, true).map_err(to_tensor_err)?;
            Ok(g.sum(y))
        })?;
    }
    {
        let (mask, x, b) = (mask.clone(), x.clone(), b.clone());
        check(reports, "block/paired_conv/weight", BLOCK_TOL, &w, d, move |g, leaf| {
            let xi = g.constant(x.clone());
            let wts = RmfeWeights {
                w: leaf,
                b: g.leaf(b.clone(), false),
            };
            let p = apply_reverse_mask(g, xi, &mask, pair).map_err(to_tensor_err)?;
            let y = rmfe_forward(g, &p, &wts, &geom, 0.2, true).map_err(to_tensor_err)?;
            Ok(g.sum(y))
        })?;
    }

    // Single-branch blocks in train mode, both scale policies. The rng is
    // cloned per evaluation so every call sees identical draws.
    for (name, policy) in [
        ("block/single_branch/dropping", ScalePolicy::Dropping),
        ("block/single_branch/scaling", ScalePolicy::Scaling),
    ] {
        let (w, b) = (w.clone(), b.clone());
        let base = ChaCha8Rng::seed_from_u64(seed ^ 0x17);
        check_salient(reports, name, BLOCK_TOL, &x, 1e-5, 60, move |g, leaf| {
            let wts = RmfeWeights {
                w: g.leaf(w.clone(), false),
                b: g.leaf(b.clone(), false),
            };
            let mut rng = base.clone();
            let y = plain_rmb_forward(
                g,
                leaf,
                &wts,
                &geom,
                0.2,
                &RegConfig::default(),
                policy,
                Mode::Train,
                InferenceMasking::Fixed,
                &mut rng,
            )
            .map_err(to_tensor_err)?;
            Ok(g.sum(y))
        })?;
    }

    // Full three-branch block, sum fusion, train mode: input gradient and
    // one branch's weight gradient.
    let wg = wavy(vec![3, 2, 1, 3, 3], 0.51);
    let wd = wavy(vec![3, 2, 1, 3, 3], 2.3);
    let ws = wavy(vec![3, 2, 1, 3, 3], 3.1);
    let bias3 = wavy(vec![3], 1.8);

    {
        let (wg, wd, ws, bias3) = (wg.clone(), wd.clone(), ws.clone(), bias3.clone());
        let base = ChaCha8Rng::seed_from_u64(seed ^ 0x71);
        check_salient(reports, "block/inception/input", BLOCK_TOL, &x, 1e-5, 60, move |g, leaf| {
            let wts = InceptionWeights {
                global: Some(RmfeWeights {
                    w: g.leaf(wg.clone(), false),
                    b: g.leaf(bias3.clone(), false),
                }),
                dropping: Some(RmfeWeights {
                    w: g.leaf(wd.clone(), false),
                    b: g.leaf(bias3.clone(), false),
                }),
                scaling: Some(RmfeWeights {
                    w: g.leaf(ws.clone(), false),
                    b: g.leaf(bias3.clone(), false),
                }),
            };
            let mut rng = base.clone();
            let y = inception_rmb_forward(
                g,
                leaf,
                &wts,
                &geom,
                0.2,
                &RegConfig::default(),
                Fusion::Sum,
                Mode::Train,
                InferenceMasking::Fixed,
                &mut rng,
            )
            .map_err(to_tensor_err)?;
            Ok(g.sum(y))
        })?;
    }
    {
        let (wg, x, ws, bias3) = (wg.clone(), x.clone(), ws.clone(), bias3.clone());
        let base = ChaCha8Rng::seed_from_u64(seed ^ 0x71);
        check_salient(
            reports,
            "block/inception/branch_weight",
            BLOCK_TOL,
            &wd,
            1e-5,
            60,
            move |g, leaf| {
                let xi = g.constant(x.clone());
                let wts = InceptionWeights {
                    global: Some(RmfeWeights {
                        w: g.leaf(wg.clone(), false),
                        b: g.leaf(bias3.clone(), false),
                    }),
                    dropping: Some(RmfeWeights {
                        w: leaf,
                        b: g.leaf(bias3.clone(), false),
                    }),
                    scaling: Some(RmfeWeights {
                        w: g.leaf(ws.clone(), false),
                        b: g.leaf(bias3.clone(), false),
                    }),
                };
                let mut rng = base.clone();
                let y = inception_rmb_forward(
                    g,
                    xi,
                    &wts,
                    &geom,
                    0.2,
                    &RegConfig::default(),
                    Fusion::ConcatHeight,
                    Mode::Train,
                    InferenceMasking::Fixed,
                    &mut rng,
                )
                .map_err(to_tensor_err)?;
                Ok(g.sum(y))
            },
        )?;
    }

    // Metric loss, probed off its hinge kinks.
    let emb = Tensor::new(
        vec![4, 2, 3],
        vec![
            0.10, 0.20, -0.30, 0.90, -0.10, 0.40, //
            0.15, 0.25, -0.20, 0.80, -0.20, 0.50, //
            1.10, -0.70, 0.60, -0.40, 0.30, -0.90, //
            1.00, -0.60, 0.70, -0.50, 0.20, -0.80, //
        ],
    )?;
    let labels = vec![1u32, 1, 2, 2];
    check(reports, "block/triplet_loss", OP_TOL, &emb, d, move |g, leaf| {
        ba_plus_triplet(g, leaf, &labels, &TripletConfig::default()).map_err(to_tensor_err)
    })?;
    Ok(())
}

/// Adapter: core errors surfacing inside a tensor-level closure.
fn to_tensor_err(e: CoreError) -> gaitrm_tensor::TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => gaitrm_tensor::TensorError::InvalidArg {
            context: "gradcheck closure",
            what: other.to_string(),
        },
    }
}

/// Evenly spread probe coordinates, always including the first and last.
fn spread_coords(len: usize, want: usize) -> Vec<usize> {
    if len <= want {
        return (0..len).collect();
    }
    let mut out: Vec<usize> = (0..want).map(|i| i * (len - 1) / (want - 1)).collect();
    out.dedup();
    out
}

/// Full-model check: finite differences through the whole train-mode
/// forward plus metric loss, probing the input and sampled coordinates of
/// every trainable tensor. Gradient-free parameters (the post-norm scale
/// and shift) are verified to stay gradient-free.
fn model_checks(reports: &mut Vec<CheckReport>, seed: u64) -> Result<()> {
    let mut cfg = ModelConfig::desk();
    cfg.variants = vec![StageVariant::Conv, StageVariant::Inception];
    let frames = 5;
    let b = 4;
    let labels = vec![1u32, 1, 2, 2];

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd00d);
    let mut params0 = ModelParams::<f64>::init(&cfg, &mut init_rng)?;
    // Fresh conv biases are zero, and a fully masked-out window convolves to
    // exactly the bias, so those pre-activations would sit on the LeakyReLU
    // kink where a central difference averages the two one-sided slopes no
    // matter how small the step. Shift every bias to a generic point; the
    // magnitude is far above the FD step so the probe stays off the kink.
    {
        let mut named = params0.named_tensors_mut();
        for (name, t) in named.iter_mut() {
            if name.ends_with(".b") {
                for v in t.data_mut() {
                    let mag = init_rng.gen_range(0.02..0.1);
                    *v += if init_rng.gen_bool(0.5) { mag } else { -mag };
                }
            }
        }
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    let x0 = Tensor::from_fn(vec![b, frames, 1, cfg.input_h, cfg.input_w], |_| {
        data_rng.gen_range(0.0..1.0)
    });
    let reg_base = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);

    let eval = |x: &Tensor<f64>, params: &ModelParams<f64>| -> Result<f64> {
        let mut params = params.clone();
        let mut g = Graph::<f64>::new();
        let xi = g.constant(x.clone());
        let mut rng = reg_base.clone();
        let out = forward_train(&mut g, xi, &cfg, &mut params, &mut rng)?;
        let loss = ba_plus_triplet(&mut g, out.pre_bn, &labels, &TripletConfig::default())?;
        Ok(g.value(loss).data()[0])
    };

    // Analytic pass.
    let (loss0, input_grad, param_grads) = {
        let mut params = params0.clone();
        let mut g = Graph::<f64>::new();
        let xi = g.leaf(x0.clone(), true);
        let mut rng = reg_base.clone();
        let out = forward_train(&mut g, xi, &cfg, &mut params, &mut rng)?;
        let loss = ba_plus_triplet(&mut g, out.pre_bn, &labels, &TripletConfig::default())?;
        let loss0 = g.value(loss).data()[0];
        g.backward(loss)?;
        let input_grad = g
            .grad(xi)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x0.shape().to_vec()));
        let mut param_grads: Vec<(String, Option<Tensor<f64>>)> = Vec::new();
        for (name, node) in &out.bound {
            param_grads.push((name.clone(), g.grad(*node).cloned()));
        }
        (loss0, input_grad, param_grads)
    };
    if !(loss0 > 0.0) {
        return Err(CoreError::Data(format!(
            "model gradcheck objective degenerated to {loss0}; the check would be vacuous"
        )));
    }

    // A full forward crosses many activation kinks, and a central difference
    // that straddles one measures the slope jump, not the local derivative.
    // A genuine backward bug disagrees at every step size, so each coordinate
    // gets a short step ladder and keeps its best agreement; f64 keeps
    // rounding noise orders of magnitude below the tolerance even at the
    // smallest step.
    let steps = [1e-5, 1e-6];
    // The difference quotient is quantized to ulp(loss)/step (~3e-12 here),
    // so disagreements under a comfortable multiple of that are measurement
    // noise, not evidence: both sides are saying "zero".
    let noise = 1e-9;
    let rel = move |fd: f64, an: f64| {
        let diff = (fd - an).abs();
        if diff <= noise {
            0.0
        } else {
            diff / fd.abs().max(an.abs()).max(1e-8)
        }
    };
    let fd_rel = |f: &dyn Fn(f64) -> Result<f64>, an: f64| -> Result<f64> {
        let mut best = f64::INFINITY;
        for &h in &steps {
            let fp = f(h)?;
            let fm = f(-h)?;
            best = best.min(rel((fp - fm) / (2.0 * h), an));
            if best <= MODEL_TOL / 10.0 {
                return Ok(best);
            }
            // When the evaluation point sits exactly on a kink the central
            // quotient averages the two one-sided slopes at every step size,
            // while the true derivative is one of the one-sided limits; a
            // wrong gradient matches neither side.
            best = best.min(rel((fp - loss0) / h, an));
            best = best.min(rel((loss0 - fm) / h, an));
            if best <= MODEL_TOL / 10.0 {
                return Ok(best);
            }
        }
        Ok(best)
    };

    // Input coordinates.
    {
        let mut worst = 0.0f64;
        for ci in spread_coords(x0.len(), 8) {
            let probe = |delta: f64| -> Result<f64> {
                let mut p = x0.clone();
                p.data_mut()[ci] += delta;
                eval(&p, &params0)
            };
            worst = worst.max(fd_rel(&probe, input_grad.data()[ci])?);
        }
        reports.push(CheckReport {
            name: "model/input".into(),
            max_rel_err: worst,
            tol: MODEL_TOL,
        });
    }

    // Every bound parameter tensor.
    for (name, grad) in &param_grads {
        let len = params0
            .named_tensors()
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.len())
            .expect("bound name must resolve");
        let want = if len <= 16 { 4 } else { 8 };
        let mut worst = 0.0f64;
        for ci in spread_coords(len, want) {
            let perturbed = |delta: f64| -> Result<f64> {
                let mut p = params0.clone();
                {
                    let mut named = p.named_tensors_mut();
                    let (_, t) = named
                        .iter_mut()
                        .find(|(n, _)| n == name)
                        .expect("bound name must resolve");
                    t.data_mut()[ci] += delta;
                }
                eval(&x0, &p)
            };
            let an = grad.as_ref().map(|t| t.data()[ci]).unwrap_or(0.0);
            worst = worst.max(fd_rel(&perturbed, an)?);
        }
        reports.push(CheckReport {
            name: format!("model/{name}"),
            max_rel_err: worst,
            tol: MODEL_TOL,
        });
    }
    Ok(())
}

/// Run all checks for `scope`. `corrupt` injects a deliberately wrong
/// analytic gradient as a final negative-control report, which must fail;
/// it exists so the harness around this function can be tested.
pub fn run_gradcheck(scope: CheckScope, seed: u64, corrupt: bool) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    op_checks(&mut reports)?;
    if scope >= CheckScope::Block {
        block_checks(&mut reports, seed)?;
    }
    if scope >= CheckScope::Model {
        model_checks(&mut reports, seed)?;
    }
    if corrupt {
        // f = sum(x*x) checked against an analytic gradient scaled by 1.03.
        let x = Tensor::from_fn(vec![6], |i| 0.4 + 0.2 * i as f64);
        let fd_vs_wrong = {
            let f = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
            let mut worst = 0.0f64;
            for ci in 0..x.len() {
                let mut p = x.clone();
                p.data_mut()[ci] += 1e-4;
                let mut m = x.clone();
                m.data_mut()[ci] -= 1e-4;
                let fd = (f(&p) - f(&m)) / 2e-4;
                let wrong = 2.0 * x.data()[ci] * 1.03;
                worst = worst.max((fd - wrong).abs() / fd.abs().max(wrong.abs()).max(1e-8));
            }
            worst
        };
        reports.push(CheckReport {
            name: "negative-control/corrupted".into(),
            max_rel_err: fd_vs_wrong,
            tol: OP_TOL,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_scope_passes() {
        let reports = run_gradcheck(CheckScope::Op, 3, false).unwrap();
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(r.passed(), "{} rel err {} > {}", r.name, r.max_rel_err, r.tol);
        }
    }

    #[test]
    fn block_scope_passes_and_includes_op_checks() {
        let reports = run_gradcheck(CheckScope::Block, 3, false).unwrap();
        assert!(reports.iter().any(|r| r.name.starts_with("op/")));
        assert!(reports.iter().any(|r| r.name.starts_with("block/")));
        for r in &reports {
            assert!(r.passed(), "{} rel err {} > {}", r.name, r.max_rel_err, r.tol);
        }
    }

    #[test]
    fn corrupted_control_fails() {
        let reports = run_gradcheck(CheckScope::Op, 3, true).unwrap();
        let control = reports.last().unwrap();
        assert_eq!(control.name, "negative-control/corrupted");
        assert!(!control.passed(), "the corrupted control must fail");
        assert!(control.max_rel_err > 1e-3);
    }

    // The model scope runs in the acceptance suite (it takes tens of
    // seconds); here we only make sure scope parsing round-trips.
    #[test]
    fn scope_parsing() {
        assert_eq!(CheckScope::parse("op").unwrap(), CheckScope::Op);
        assert_eq!(CheckScope::parse("block").unwrap(), CheckScope::Block);
        assert_eq!(CheckScope::parse("model").unwrap(), CheckScope::Model);
        assert!(CheckScope::parse("everything").is_err());
    }
}
