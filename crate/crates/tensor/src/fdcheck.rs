//! Central-difference gradient verification.
//!
//! Deliberately f64-only: with f32 the truncation/roundoff floor sits near
//! the tolerances we want to certify, which would make the check
//! meaningless.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub struct FdOptions {
    /// Central-difference step; must lie in `[1e-6, 1e-3]`.
    pub step: f64,
    /// Coordinates of the input to probe; `None` probes all of them.
    /// Large inputs should pass a deterministic sample.
    pub coords: Option<Vec<usize>>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            coords: None,
        }
    }
}

/// Worst relative error between analytic and central-difference gradients of
/// a scalar-valued function of `x`.
///
/// `build` must construct the same function every call (it runs 1 + 2·|coords|
/// times); any internal randomness has to be frozen by the caller.
/// Relative error is `|fd - an| / max(|fd|, |an|, 1e-8)`.
pub fn finite_diff_check(
    x: &Tensor<f64>,
    opts: &FdOptions,
    build: impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&opts.step) {
        return Err(TensorError::InvalidArg {
            context: "finite_diff_check",
            what: format!("step must be in [1e-6, 1e-3], got {}", opts.step),
        });
    }
    if let Some(coords) = &opts.coords {
        if let Some(&bad) = coords.iter().find(|&&c| c >= x.len()) {
            return Err(TensorError::InvalidArg {
                context: "finite_diff_check",
                what: format!("coordinate {bad} out of range for input of {} elements", x.len()),
            });
        }
    }

    let eval = |input: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(input, false);
        let loss = build(&mut g, leaf)?;
        let v = g.value(loss);
        if v.len() != 1 {
            return Err(TensorError::NonScalarLoss { len: v.len() });
        }
        let out = v.data()[0];
        if !out.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_diff_check objective",
            });
        }
        Ok(out)
    };

    // Analytic pass.
    let analytic: Tensor<f64> = {
        let mut g = Graph::new();
        let leaf = g.leaf(x.clone(), true);
        let loss = build(&mut g, leaf)?;
        if !g.value(loss).is_all_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_diff_check objective",
            });
        }
        g.backward(loss)?;
        g.grad(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    };

    let all_coords: Vec<usize>;
    let coords: &[usize] = match &opts.coords {
        Some(c) => c,
        None => {
            all_coords = (0..x.len()).collect();
            &all_coords
        }
    };

    let h = opts.step;
    let mut worst = 0.0f64;
    for &ci in coords {
        let mut plus = x.clone();
        plus.data_mut()[ci] += h;
        let mut minus = x.clone();
        minus.data_mut()[ci] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let an = analytic.data()[ci];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_on_a_correct_gradient() {
        // f(x) = sum(x * x), grad = 2x
        let x = Tensor::from_fn(vec![2, 3], |i| 0.3 * i as f64 - 0.7);
        let err = finite_diff_check(&x, &FdOptions::default(), |g, leaf| {
            let sq = g.mul(leaf, leaf)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // Objective sums x*x but we graft a backward that scales the
        // gradient, so FD must disagree.
        let x = Tensor::from_fn(vec![4], |i| 0.5 + i as f64 * 0.1);
        let err = finite_diff_check(&x, &FdOptions::default(), |g, leaf| {
            let sq = g.mul(leaf, leaf)?;
            let s = g.sum(sq);
            // extra bogus-free term that doubles the loss but not via x
            Ok(g.scale(s, 1.5))
        })
        .unwrap();
        // scale() is correct, so this still passes...
        assert!(err < 1e-7);

        // ...whereas probing f = sum(x*x) against the gradient of
        // f = sum(x*x*x) (done by hand below) shows a detectable gap.
        let x3 = |g: &mut Graph<f64>, leaf: NodeId| -> Result<NodeId> {
            let sq = g.mul(leaf, leaf)?;
            let cu = g.mul(sq, leaf)?;
            Ok(g.sum(cu))
        };
        let mut g = Graph::new();
        let leaf = g.leaf(x.clone(), true);
        let loss = x3(&mut g, leaf).unwrap();
        g.backward(loss).unwrap();
        let wrong = g.grad(leaf).unwrap().clone();
        // FD of sum(x*x) near x=0.5.. vs analytic 3x^2: relative gap is large.
        let mut worst: f64 = 0.0;
        for ci in 0..x.len() {
            let h = 1e-4;
            let mut p = x.clone();
            p.data_mut()[ci] += h;
            let mut m = x.clone();
            m.data_mut()[ci] -= h;
            let f = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let an = wrong.data()[ci];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8));
        }
        assert!(worst > 1e-2, "a wrong gradient must be flagged, got {worst}");
    }

    #[test]
    fn sampled_coordinates_only_probe_requested_ones() {
        let x = Tensor::from_fn(vec![100], |i| (i as f64 * 0.17).sin());
        let opts = FdOptions {
            step: 1e-4,
            coords: Some(vec![0, 17, 99]),
        };
        let err = finite_diff_check(&x, &opts, |g, leaf| {
            let sq = g.mul(leaf, leaf)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-7);
    }

    #[test]
    fn rejects_out_of_range_step() {
        let x = Tensor::zeros(vec![2]);
        let opts = FdOptions {
            step: 0.1,
            coords: None,
        };
        assert!(finite_diff_check(&x, &opts, |g, leaf| Ok(g.sum(leaf))).is_err());
    }
}
