//! 1-D batch normalization over `(batch, strip, channel)` embeddings.
//!
//! Each (strip, channel) pair is its own normalized feature. Train mode uses
//! batch statistics (biased variance in the normalizer, unbiased in the
//! running-variance update, the usual convention) and mutates the running
//! stats in place; eval mode reads the running stats and touches nothing.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Mode, NodeId};
use crate::tensor::{elem, Element, Tensor};

impl<E: Element> Graph<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm1d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut Tensor<E>,
        running_var: &mut Tensor<E>,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId> {
        let (b, s, c) = self.value(x).dims3("batchnorm1d")?;
        let feat = s * c;
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            let v = self.value(t);
            if v.shape() != [s, c] {
                return Err(TensorError::InvalidArg {
                    context: "batchnorm1d",
                    what: format!("{name} must have shape [{s}, {c}], got {:?}", v.shape()),
                });
            }
        }
        for (name, t) in [("running_mean", &*running_mean), ("running_var", &*running_var)] {
            if t.shape() != [s, c] {
                return Err(TensorError::InvalidArg {
                    context: "batchnorm1d",
                    what: format!("{name} must have shape [{s}, {c}], got {:?}", t.shape()),
                });
            }
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(TensorError::InvalidArg {
                context: "batchnorm1d",
                what: format!("momentum must be in [0, 1], got {momentum}"),
            });
        }
        if !(eps > 0.0) {
            return Err(TensorError::InvalidArg {
                context: "batchnorm1d",
                what: format!("eps must be > 0, got {eps}"),
            });
        }
        if mode == Mode::Train && b < 2 {
            return Err(TensorError::BatchTooSmall { got: b });
        }

        let eps_e: E = elem(eps);
        // Statistics the normalizer actually uses, one per feature.
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let xd = self.value(x).data();
                let inv_b: E = elem(1.0 / b as f64);
                let mut mean = vec![E::zero(); feat];
                let mut var = vec![E::zero(); feat];
                for bi in 0..b {
                    let row = &xd[bi * feat..][..feat];
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                for m in mean.iter_mut() {
                    *m = *m * inv_b;
                }
                for bi in 0..b {
                    let row = &xd[bi * feat..][..feat];
                    for ((vv, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *vv = *vv + d * d;
                    }
                }
                for vv in var.iter_mut() {
                    *vv = *vv * inv_b;
                }
                // Update running stats: mean as-is, variance unbiased.
                let mom: E = elem(momentum);
                let keep = E::one() - mom;
                let bessel: E = elem(b as f64 / (b as f64 - 1.0));
                for (r, &m) in running_mean.data_mut().iter_mut().zip(&mean) {
                    *r = keep * *r + mom * m;
                }
                for (r, &v) in running_var.data_mut().iter_mut().zip(&var) {
                    *r = keep * *r + mom * (v * bessel);
                }
                let inv_std: Vec<E> = var.iter().map(|&v| (v + eps_e).sqrt().recip()).collect();
                (mean, inv_std)
            }
            Mode::Eval => {
                let mean = running_mean.data().to_vec();
                let inv_std: Vec<E> = running_var
                    .data()
                    .iter()
                    .map(|&v| (v + eps_e).sqrt().recip())
                    .collect();
                (mean, inv_std)
            }
        };

        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![E::zero(); b * feat];
        for bi in 0..b {
            let xr = &xd[bi * feat..][..feat];
            let or = &mut out[bi * feat..][..feat];
            for j in 0..feat {
                let xh = (xr[j] - mean[j]) * inv_std[j];
                or[j] = gd[j] * xh + bd[j];
            }
        }

        let train = mode == Mode::Train;
        Ok(self.push_op(
            "batchnorm1d",
            Tensor::new(vec![b, s, c], out)?,
            &[x, gamma, beta],
            Some(Box::new(move |up, ctx, sink| {
                let xd = ctx.value(x).data();
                let gd = ctx.value(gamma).data();
                let inv_b: E = elem(1.0 / b as f64);
                // Per-feature sums needed by every output.
                let mut sum_u = vec![E::zero(); feat];
                let mut sum_ux = vec![E::zero(); feat];
                for bi in 0..b {
                    let ur = &up[bi * feat..][..feat];
                    let xr = &xd[bi * feat..][..feat];
                    for j in 0..feat {
                        let xh = (xr[j] - mean[j]) * inv_std[j];
                        sum_u[j] = sum_u[j] + ur[j];
                        sum_ux[j] = sum_ux[j] + ur[j] * xh;
                    }
                }
                if sink.wants(gamma) {
                    let gg = sink.accum(gamma);
                    for j in 0..feat {
                        gg[j] = gg[j] + sum_ux[j];
                    }
                }
                if sink.wants(beta) {
                    let gb = sink.accum(beta);
                    for j in 0..feat {
                        gb[j] = gb[j] + sum_u[j];
                    }
                }
                if sink.wants(x) {
                    let gx = sink.accum(x);
                    if train {
                        // Batch statistics depend on x, so the gradient has
                        // the usual three-term shape.
                        for bi in 0..b {
                            let ur = &up[bi * feat..][..feat];
                            let xr = &xd[bi * feat..][..feat];
                            let gr = &mut gx[bi * feat..][..feat];
                            for j in 0..feat {
                                let xh = (xr[j] - mean[j]) * inv_std[j];
                                let t = ur[j] - sum_u[j] * inv_b - xh * (sum_ux[j] * inv_b);
                                gr[j] = gr[j] + gd[j] * inv_std[j] * t;
                            }
                        }
                    } else {
                        // Eval stats are constants.
                        for bi in 0..b {
                            let ur = &up[bi * feat..][..feat];
                            let gr = &mut gx[bi * feat..][..feat];
                            for j in 0..feat {
                                gr[j] = gr[j] + ur[j] * gd[j] * inv_std[j];
                            }
                        }
                    }
                }
            })),
        ))
    }
}
