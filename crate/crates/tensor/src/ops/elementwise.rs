//! Elementwise ops, reductions and the height-axis concat.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Tensor};

impl<E: Element> Graph<E> {
    /// Elementwise `a + b`; shapes must match exactly.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| *x + *y)
                .collect(),
        )?;
        Ok(self.push_op(
            "add",
            out,
            &[a, b],
            Some(Box::new(move |up, _ctx, sink| {
                for &p in &[a, b] {
                    if sink.wants(p) {
                        let gp = sink.accum(p);
                        for (g, u) in gp.iter_mut().zip(up) {
                            *g = *g + *u;
                        }
                    }
                }
            })),
        ))
    }

    /// Elementwise `a * b`; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| *x * *y)
                .collect(),
        )?;
        Ok(self.push_op(
            "mul",
            out,
            &[a, b],
            Some(Box::new(move |up, ctx, sink| {
                if sink.wants(a) {
                    let bv = ctx.value(b).data();
                    let ga = sink.accum(a);
                    for ((g, u), y) in ga.iter_mut().zip(up).zip(bv) {
                        *g = *g + *u * *y;
                    }
                }
                if sink.wants(b) {
                    let av = ctx.value(a).data();
                    let gb = sink.accum(b);
                    for ((g, u), x) in gb.iter_mut().zip(up).zip(av) {
                        *g = *g + *u * *x;
                    }
                }
            })),
        ))
    }

    /// Scale every element by a fixed scalar (not a node).
    pub fn scale(&mut self, x: NodeId, k: E) -> NodeId {
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|v| *v * k).collect(),
        )
        .expect("same shape");
        self.push_op(
            "scale",
            out,
            &[x],
            Some(Box::new(move |up, _ctx, sink| {
                if sink.wants(x) {
                    let gx = sink.accum(x);
                    for (g, u) in gx.iter_mut().zip(up) {
                        *g = *g + *u * k;
                    }
                }
            })),
        )
    }

    /// Sum all elements into a rank-0 scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = E::zero();
        for v in self.value(x).data() {
            acc = acc + *v;
        }
        self.push_op(
            "sum",
            Tensor::scalar(acc),
            &[x],
            Some(Box::new(move |up, _ctx, sink| {
                if sink.wants(x) {
                    let u = up[0];
                    let gx = sink.accum(x);
                    for g in gx.iter_mut() {
                        *g = *g + u;
                    }
                }
            })),
        )
    }

    /// Multiply a rank-5 `(b, n, c, h, w)` tensor by a fixed per-pixel
    /// coefficient map of length `h*w`, broadcast over batch, frames and
    /// channels. This is how every mask/scale perturbation reaches the tape:
    /// the coefficients are data, not nodes, so nothing differentiates
    /// through mask sampling.
    pub fn scale_hw(&mut self, x: NodeId, coef: &[E]) -> Result<NodeId> {
        let (b, n, c, h, w) = self.value(x).dims5("scale_hw")?;
        if coef.len() != h * w {
            return Err(TensorError::AxisMismatch {
                context: "scale_hw coefficient map",
                axis: "h*w",
                expected: h * w,
                got: coef.len(),
            });
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let mut out = vec![E::zero(); xd.len()];
        for (o_blk, x_blk) in out.chunks_exact_mut(plane).zip(xd.chunks_exact(plane)) {
            for ((o, v), k) in o_blk.iter_mut().zip(x_blk).zip(coef) {
                *o = *v * *k;
            }
        }
        let coef_bw: Vec<E> = coef.to_vec();
        let _ = (b, n, c);
        Ok(self.push_op(
            "scale_hw",
            Tensor::new(self.value(x).shape().to_vec(), out)?,
            &[x],
            Some(Box::new(move |up, _ctx, sink| {
                if sink.wants(x) {
                    let gx = sink.accum(x);
                    for (g_blk, u_blk) in gx.chunks_exact_mut(plane).zip(up.chunks_exact(plane)) {
                        for ((g, u), k) in g_blk.iter_mut().zip(u_blk).zip(&coef_bw) {
                            *g = *g + *u * *k;
                        }
                    }
                }
            })),
        ))
    }

    /// Concatenate rank-5 tensors along the height axis, in argument order.
    pub fn concat_height(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArg {
                context: "concat_height",
                what: "need at least one input".into(),
            });
        }
        let (b, n, c, h0, w) = self.value(parts[0]).dims5("concat_height")?;
        let mut heights = Vec::with_capacity(parts.len());
        heights.push(h0);
        for (i, &p) in parts.iter().enumerate().skip(1) {
            let (bi, ni, ci, hi, wi) = self.value(p).dims5("concat_height")?;
            for (axis, exp, got) in [
                ("batch", b, bi),
                ("frames", n, ni),
                ("channels", c, ci),
                ("width", w, wi),
            ] {
                if exp != got {
                    return Err(TensorError::AxisMismatch {
                        context: "concat_height",
                        axis,
                        expected: exp,
                        got,
                    });
                }
            }
            let _ = i;
            heights.push(hi);
        }
        let h_total: usize = heights.iter().sum();
        let mut out = vec![E::zero(); b * n * c * h_total * w];
        // Copy part-by-part: for each (b, n, c) block the parts stack in order.
        let blocks = b * n * c;
        let mut h_off = 0usize;
        for (&p, &hp) in parts.iter().zip(&heights) {
            let src = self.value(p).data();
            for blk in 0..blocks {
                let s = &src[blk * hp * w..(blk + 1) * hp * w];
                let d = &mut out[blk * h_total * w + h_off * w..][..hp * w];
                d.copy_from_slice(s);
            }
            h_off += hp;
        }
        let parts_bw: Vec<NodeId> = parts.to_vec();
        let heights_bw = heights.clone();
        Ok(self.push_op(
            "concat_height",
            Tensor::new(vec![b, n, c, h_total, w], out)?,
            parts,
            Some(Box::new(move |up, _ctx, sink| {
                let mut h_off = 0usize;
                for (&p, &hp) in parts_bw.iter().zip(&heights_bw) {
                    if sink.wants(p) {
                        let gp = sink.accum(p);
                        for blk in 0..blocks {
                            let d = &mut gp[blk * hp * w..(blk + 1) * hp * w];
                            let s = &up[blk * h_total * w + h_off * w..][..hp * w];
                            for (g, u) in d.iter_mut().zip(s) {
                                *g = *g + *u;
                            }
                        }
                    }
                    h_off += hp;
                }
            })),
        ))
    }

    fn check_same_shape(&self, context: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(TensorError::InvalidArg {
                context,
                what: format!("shape {:?} vs {:?}", sa, sb),
            });
        }
        Ok(())
    }
}
