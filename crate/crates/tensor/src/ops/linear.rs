//! Per-strip linear projection (separate FC per horizontal strip).

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Tensor};

impl<E: Element> Graph<E> {
    /// `x: (b, s, c_in)` times `w: (s, c_in, c_out)` -> `(b, s, c_out)`.
    /// Strip `s` uses only its own weight slice; there is no bias.
    pub fn linear_map(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (b, s, c_in) = self.value(x).dims3("linear_map input")?;
        let (ws, wc_in, c_out) = self.value(w).dims3("linear_map weight")?;
        if ws != s {
            return Err(TensorError::AxisMismatch {
                context: "linear_map",
                axis: "strips",
                expected: s,
                got: ws,
            });
        }
        if wc_in != c_in {
            return Err(TensorError::AxisMismatch {
                context: "linear_map",
                axis: "in_features",
                expected: c_in,
                got: wc_in,
            });
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![E::zero(); b * s * c_out];
        for bi in 0..b {
            for si in 0..s {
                let xrow = &xd[(bi * s + si) * c_in..][..c_in];
                let orow = &mut out[(bi * s + si) * c_out..][..c_out];
                let wblk = &wd[si * c_in * c_out..][..c_in * c_out];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let wrow = &wblk[ci * c_out..][..c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o = *o + xv * wv;
                    }
                }
            }
        }
        Ok(self.push_op(
            "linear_map",
            Tensor::new(vec![b, s, c_out], out)?,
            &[x, w],
            Some(Box::new(move |up, ctx, sink| {
                if sink.wants(x) {
                    let wd = ctx.value(w).data();
                    let gx = sink.accum(x);
                    for bi in 0..b {
                        for si in 0..s {
                            let urow = &up[(bi * s + si) * c_out..][..c_out];
                            let grow = &mut gx[(bi * s + si) * c_in..][..c_in];
                            let wblk = &wd[si * c_in * c_out..][..c_in * c_out];
                            for (gv, wrow) in grow.iter_mut().zip(wblk.chunks_exact(c_out)) {
                                let mut acc = E::zero();
                                for (&u, &wv) in urow.iter().zip(wrow) {
                                    acc = acc + u * wv;
                                }
                                *gv = *gv + acc;
                            }
                        }
                    }
                }
                if sink.wants(w) {
                    let xd = ctx.value(x).data();
                    let gw = sink.accum(w);
                    for bi in 0..b {
                        for si in 0..s {
                            let xrow = &xd[(bi * s + si) * c_in..][..c_in];
                            let urow = &up[(bi * s + si) * c_out..][..c_out];
                            let gblk = &mut gw[si * c_in * c_out..][..c_in * c_out];
                            for (ci, &xv) in xrow.iter().enumerate() {
                                let grow = &mut gblk[ci * c_out..][..c_out];
                                for (gv, &u) in grow.iter_mut().zip(urow) {
                                    *gv = *gv + xv * u;
                                }
                            }
                        }
                    }
                }
            })),
        ))
    }
}
