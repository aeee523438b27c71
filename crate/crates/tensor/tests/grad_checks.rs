//! Central-difference verification of every op's backward pass, on small
//! tensors with full coordinate sweeps. Inputs are deterministic and chosen
//! to stay away from max-pool ties / clamp kinks, where a subgradient choice
//! would show up as a (legitimate) FD mismatch.

use gaitrm_tensor::{finite_diff_check, FdOptions, Graph, Mode, NodeId, Result, Tensor};

const TOL: f64 = 1e-6;

fn wiggle(shape: Vec<usize>, seed: f64) -> Tensor<f64> {
    // Smooth deterministic values in roughly [-1, 1], no two alike.
    Tensor::from_fn(shape, |i| ((i as f64 + 1.3) * seed).sin() * 0.9 + ((i as f64) * 0.013).cos() * 0.05)
}

/// Reduce any node to a scalar through fixed pseudo-random weights so every
/// output coordinate influences the loss.
fn spread_sum(g: &mut Graph<f64>, y: NodeId) -> Result<NodeId> {
    let n = g.value(y).len();
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(Tensor::from_fn(shape, |i| ((i * 37 + 11) % 23) as f64 / 7.0 - 1.0));
    let _ = n;
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn conv3d_input_gradient() {
    let x = wiggle(vec![2, 3, 2, 5, 4], 0.734);
    let err = finite_diff_check(&x, &FdOptions::default(), |g, leaf| {
        let w = g.constant(wiggle(vec![3, 2, 2, 3, 3], 0.451));
        let b = g.constant(wiggle(vec![3], 0.9));
        let y = g.conv3d(leaf, w, Some(b), [1, 1, 1], [1, 2, 1])?;
        spread_sum(g, y)
    })
    .unwrap();
    assert!(err < TOL, "conv3d dX rel err {err}");
}

#[test]
fn conv3d_weight_and_bias_gradient() {
    // Probe the weight by making it the leaf.
    let w0 = wiggle(vec![2, 3, 1, 3, 3], 0.377);
    let err = finite_diff_check(&w0, &FdOptions::default(), |g, leaf| {
        let x = g.constant(wiggle(vec![1, 2, 3, 4, 5], 0.618));
        let y = g.conv3d(x, leaf, None, [0, 1, 1], [1, 1, 2])?;
        spread_sum(g, y)
    })
    .unwrap();
    assert!(err < TOL, "conv3d dW rel err {err}");

    let b0 = wiggle(vec![2], 0.21);
    let err = finite_diff_check(&b0, &FdOptions::default(), |g, leaf| {
        let x = g.constant(wiggle(vec![1, 2, 3, 4, 5], 0.618));
        let w = g.constant(wiggle(vec![2, 3, 1, 3, 3], 0.377));
        let y = g.conv3d(x, w, Some(leaf), [0, 1, 1], [1, 1, 2])?;
        spread_sum(g, y)
    })
    .unwrap();
    assert!(err < TOL, "conv3d dB rel err {err}");
}

#[test]
fn leaky_relu_gradient() {
    // keep values away from the kink at 0
    let mut x = wiggle(vec![3, 7], 0.912);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let err = finite_diff_check(&x, &FdOptions::default(), |g, leaf| {
        let y = g.leaky_relu(leaf, 0.01)?;
        spread_sum(g, y)
    })
    .unwrap();
    assert!(err < TOL, "leaky_relu rel err {err}");
}

#[test]
fn temporal_max_pool_gradient() {
    let x = wiggle(vec![2, 4, 2, 3, 3], 0.587);
    let err = finite_diff_check(&x, &FdOptions::default(), |g, leaf| {
        let y = g.temporal_max_pool(leaf)?;
        spread_sum(g, y)
    })
    .unwrap();
    assert!(err < TOL, "temporal_max_pool rel err {err}");
}

#[test]
fn max_pool3d_gradient() {
    let x = wiggle(vec![1, 6, 2, 4, 4], 0.709);
    let err = finite_diff_check(&x, &FdOptions::default(), |g, leaf| {
        let y = g.max_pool3d(leaf, [3, 2, 2], [3, 2, 2])?;
        spread_sum(g, y)
    })
    .unwrap();
    assert!(err < TOL, "max_pool3d rel err {err}");
}

#[test]
fn gem_pool_gradient_at_paper_power() {
    // strictly positive, clear of the eps clamp; p = 6.5 has a large third
    // derivative, so use a finer step than the default to keep the
    // central-difference truncation term below the tolerance
    let x = Tensor::from_fn(vec![2, 3, 4, 3], |i| 0.2 + 0.7 * (((i * 29 + 5) % 17) as f64 / 17.0));
    let opts = FdOptions {
        step: 1e-5,
        coords: None,
    };
    let err = finite_diff_check(&x, &opts, |g, leaf| {
        let y = g.gem_pool_strip(leaf, 2, 6.5, 1e-6)?;
        spread_sum(g, y)
    })
    .unwrap();
    assert!(err < TOL, "gem p=6.5 rel err {err}");
}

#[test]
fn gem_pool_gradient_at_power_one() {
    let x = Tensor::from_fn(vec![1, 2, 4, 3], |i| 0.1 + ((i * 13 + 3) % 11) as f64 / 12.0);
    let err = finite_diff_check(&x, &FdOptions::default(), |g, leaf| {
        let y = g.gem_pool_strip(leaf, 4, 1.0, 1e-6)?;
        spread_sum(g, y)
    })
    .unwrap();
    assert!(err < TOL, "gem p=1 rel err {err}");
}

#[test]
fn linear_map_gradients() {
    let x0 = wiggle(vec![3, 2, 4], 0.313);
    let err = finite_diff_check(&x0, &FdOptions::default(), |g, leaf| {
        let w = g.constant(wiggle(vec![2, 4, 5], 0.641));
        let y = g.linear_map(leaf, w)?;
        spread_sum(g, y)
    })
    .unwrap();
    assert!(err < TOL, "linear_map dX rel err {err}");

    let w0 = wiggle(vec![2, 4, 5], 0.641);
    let err = finite_diff_check(&w0, &FdOptions::default(), |g, leaf| {
        let x = g.constant(wiggle(vec![3, 2, 4], 0.313));
        let y = g.linear_map(x, leaf)?;
        spread_sum(g, y)
    })
    .unwrap();
    assert!(err < TOL, "linear_map dW rel err {err}");
}

#[test]
fn batchnorm_train_gradients() {
    let x0 = wiggle(vec![6, 2, 3], 0.871);
    for (name, probe) in ["x", "gamma", "beta"].into_iter().enumerate() {
        let leaf_shape = if name == 0 { vec![6, 2, 3] } else { vec![2, 3] };
        let x_fixed = x0.clone();
        let init = if name == 0 {
            x_fixed.clone()
        } else {
            wiggle(leaf_shape.clone(), 0.42 + name as f64)
        };
        let err = finite_diff_check(&init, &FdOptions::default(), move |g, leaf| {
            let (x, gamma, beta);
            let g_t = wiggle(vec![2, 3], 1.42);
            let b_t = wiggle(vec![2, 3], 2.42);
            match name {
                0 => {
                    x = leaf;
                    gamma = g.constant(g_t);
                    beta = g.constant(b_t);
                }
                1 => {
                    x = g.constant(x_fixed.clone());
                    gamma = leaf;
                    beta = g.constant(b_t);
                }
                _ => {
                    x = g.constant(x_fixed.clone());
                    gamma = g.constant(g_t);
                    beta = leaf;
                }
            }
            let mut rm = Tensor::zeros(vec![2, 3]);
            let mut rv = Tensor::full(vec![2, 3], 1.0);
            let y = g.batchnorm1d(x, gamma, beta, &mut rm, &mut rv, Mode::Train, 0.1, 1e-5)?;
            spread_sum(g, y)
        })
        .unwrap();
        assert!(err < 1e-5, "batchnorm d{probe} rel err {err}");
    }
}

#[test]
fn batchnorm_eval_gradient() {
    let x0 = wiggle(vec![3, 2, 2], 0.64);
    let err = finite_diff_check(&x0, &FdOptions::default(), |g, leaf| {
        let gamma = g.constant(wiggle(vec![2, 2], 1.1));
        let beta = g.constant(wiggle(vec![2, 2], 2.1));
        let mut rm = Tensor::from_fn(vec![2, 2], |i| i as f64 * 0.1);
        let mut rv = Tensor::from_fn(vec![2, 2], |i| 0.5 + i as f64 * 0.2);
        let y = g.batchnorm1d(leaf, gamma, beta, &mut rm, &mut rv, Mode::Eval, 0.1, 1e-5)?;
        spread_sum(g, y)
    })
    .unwrap();
    assert!(err < TOL, "batchnorm eval rel err {err}");
}

#[test]
fn scale_hw_and_concat_gradients() {
    let x = wiggle(vec![2, 2, 1, 3, 2], 0.53);
    let err = finite_diff_check(&x, &FdOptions::default(), |g, leaf| {
        let coef: Vec<f64> = (0..6).map(|i| 0.3 + 0.2 * i as f64).collect();
        let a = g.scale_hw(leaf, &coef)?;
        let b = g.leaky_relu(leaf, 0.1)?;
        let y = g.concat_height(&[a, b])?;
        spread_sum(g, y)
    })
    .unwrap();
    assert!(err < TOL, "scale_hw+concat rel err {err}");
}

#[test]
fn composite_chain_gradient() {
    // conv -> lrelu -> temporal pool -> gem -> linear -> batchnorm(train)
    // one FD sweep through the whole stack wiring
    let x = Tensor::from_fn(vec![3, 2, 1, 4, 4], |i| 0.15 + 0.6 * (((i * 31 + 7) % 19) as f64 / 19.0));
    let err = finite_diff_check(&x, &FdOptions::default(), |g, leaf| {
        let w = g.constant(wiggle(vec![2, 1, 1, 3, 3], 0.83));
        let b = g.constant(wiggle(vec![2], 0.19));
        let c = g.conv3d(leaf, w, Some(b), [0, 1, 1], [1, 1, 1])?;
        let a = g.leaky_relu(c, 0.01)?;
        let t = g.temporal_max_pool(a)?;
        let p = g.gem_pool_strip(t, 2, 6.5, 1e-6)?;
        let fc = g.constant(wiggle(vec![2, 2, 3], 0.44));
        let e = g.linear_map(p, fc)?;
        let gamma = g.constant(Tensor::full(vec![2, 3], 1.1));
        let beta = g.constant(Tensor::zeros(vec![2, 3]));
        let mut rm = Tensor::zeros(vec![2, 3]);
        let mut rv = Tensor::full(vec![2, 3], 1.0);
        let y = g.batchnorm1d(e, gamma, beta, &mut rm, &mut rv, Mode::Train, 0.1, 1e-5)?;
        spread_sum(g, y)
    })
    .unwrap();
    assert!(err < 1e-5, "composite chain rel err {err}");
}
