//! Generalized-mean pooling over horizontal strips.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::tensor::{elem, Element, Tensor};

impl<E: Element> Graph<E> {
    /// Split `(b, c, h, w)` into `strips` equal horizontal bands and reduce
    /// each band to `(b, strips, c)` with a generalized mean:
    ///
    /// `y = (mean(clamp(x, eps)^p))^(1/p)`
    ///
    /// The clamp keeps the fractional power away from zero. `power == 1`
    /// short-circuits to a plain arithmetic mean of the clamped values (no
    /// pow round-trip), `power >= 1` is required.
    pub fn gem_pool_strip(
        &mut self,
        x: NodeId,
        strips: usize,
        power: f64,
        epsilon: f64,
    ) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4("gem_pool_strip")?;
        if strips == 0 || h % strips != 0 {
            return Err(TensorError::Partition {
                context: "gem_pool_strip",
                len: h,
                parts: strips,
            });
        }
        if !(power >= 1.0) {
            return Err(TensorError::InvalidArg {
                context: "gem_pool_strip",
                what: format!("power must be >= 1, got {power}"),
            });
        }
        if !(epsilon > 0.0) {
            return Err(TensorError::InvalidArg {
                context: "gem_pool_strip",
                what: format!("epsilon must be > 0, got {epsilon}"),
            });
        }
        let strip_h = h / strips;
        let count = strip_h * w;
        let eps: E = elem(epsilon);
        let p: E = elem(power);
        let inv_p: E = elem(1.0 / power);
        let inv_count: E = elem(1.0 / count as f64);
        let exact_mean = power == 1.0;

        let xd = self.value(x).data();
        let mut out = vec![E::zero(); b * strips * c];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &xd[(bi * c + ci) * h * w..][..h * w];
                for si in 0..strips {
                    let band = &plane[si * strip_h * w..][..strip_h * w];
                    let mut acc = E::zero();
                    if exact_mean {
                        for &v in band {
                            acc = acc + v.max(eps);
                        }
                    } else {
                        for &v in band {
                            acc = acc + v.max(eps).powf(p);
                        }
                    }
                    let m = acc * inv_count;
                    out[(bi * strips + si) * c + ci] = if exact_mean { m } else { m.powf(inv_p) };
                }
            }
        }
        let out_t = Tensor::new(vec![b, strips, c], out)?;
        let out_data_for_bw = out_t.data().to_vec();
        Ok(self.push_op(
            "gem_pool_strip",
            out_t,
            &[x],
            Some(Box::new(move |up, ctx, sink| {
                if !sink.wants(x) {
                    return;
                }
                let xd = ctx.value(x).data();
                let gx = sink.accum(x);
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        for si in 0..strips {
                            let o = (bi * strips + si) * c + ci;
                            let u = up[o];
                            if u == E::zero() {
                                continue;
                            }
                            let y = out_data_for_bw[o];
                            let row0 = base + si * strip_h * w;
                            if exact_mean {
                                // d mean(clamp)/dx = 1/N on the pass-through side.
                                for (gv, &xv) in gx[row0..row0 + count]
                                    .iter_mut()
                                    .zip(&xd[row0..row0 + count])
                                {
                                    if xv > eps {
                                        *gv = *gv + u * inv_count;
                                    }
                                }
                            } else {
                                // dy/dx_i = (clamp(x_i)/y)^(p-1) / N for x_i > eps.
                                // y >= clamp(x_i)/N^(1/p) keeps the ratio bounded.
                                let pm1 = p - E::one();
                                for (gv, &xv) in gx[row0..row0 + count]
                                    .iter_mut()
                                    .zip(&xd[row0..row0 + count])
                                {
                                    if xv > eps {
                                        let r = (xv / y).powf(pm1);
                                        *gv = *gv + u * r * inv_count;
                                    }
                                }
                            }
                        }
                    }
                }
            })),
        ))
    }
}
