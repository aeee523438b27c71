//! Max pooling: set-level over the frame axis, and windowed 3-D pooling used
//! for spatial downsampling / local temporal aggregation.
//!
//! Ties take the first (lowest index) element so backward routing is
//! deterministic.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Tensor};

impl<E: Element> Graph<E> {
    /// Max over the whole frame axis: `(b, n, c, h, w) -> (b, c, h, w)`.
    /// Requires `n >= 1`; the gradient flows to the first argmax frame only.
    pub fn temporal_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, n, c, h, w) = self.value(x).dims5("temporal_max_pool")?;
        if n == 0 {
            return Err(TensorError::InvalidArg {
                context: "temporal_max_pool",
                what: "frame axis is empty".into(),
            });
        }
        let frame = c * h * w;
        let xd = self.value(x).data();
        let mut out = vec![E::zero(); b * frame];
        let mut arg = vec![0u32; b * frame];
        for bi in 0..b {
            let ob = &mut out[bi * frame..][..frame];
            let ab = &mut arg[bi * frame..][..frame];
            ob.copy_from_slice(&xd[bi * n * frame..][..frame]);
            for ni in 1..n {
                let fr = &xd[(bi * n + ni) * frame..][..frame];
                for ((o, a), v) in ob.iter_mut().zip(ab.iter_mut()).zip(fr) {
                    if *v > *o {
                        *o = *v;
                        *a = ni as u32;
                    }
                }
            }
        }
        Ok(self.push_op(
            "temporal_max_pool",
            Tensor::new(vec![b, c, h, w], out)?,
            &[x],
            Some(Box::new(move |up, _ctx, sink| {
                if sink.wants(x) {
                    let gx = sink.accum(x);
                    for bi in 0..b {
                        let ab = &arg[bi * frame..][..frame];
                        let ub = &up[bi * frame..][..frame];
                        for (i, (&a, &u)) in ab.iter().zip(ub).enumerate() {
                            let slot = (bi * n + a as usize) * frame + i;
                            gx[slot] = gx[slot] + u;
                        }
                    }
                }
            })),
        ))
    }

    /// Windowed max pool over `(frames, height, width)` with no padding.
    /// Each output cell takes the max of its `kt x kh x kw` window.
    pub fn max_pool3d(
        &mut self,
        x: NodeId,
        kernel: [usize; 3],
        stride: [usize; 3],
    ) -> Result<NodeId> {
        let (b, n, c, h, w) = self.value(x).dims5("max_pool3d")?;
        let mut out_dims = [0usize; 3];
        for (i, (axis, d)) in [("frames", n), ("height", h), ("width", w)]
            .into_iter()
            .enumerate()
        {
            if stride[i] == 0 {
                return Err(TensorError::InvalidArg {
                    context: "max_pool3d",
                    what: format!("stride on axis `{axis}` must be >= 1"),
                });
            }
            if kernel[i] == 0 || kernel[i] > d {
                return Err(TensorError::InvalidArg {
                    context: "max_pool3d",
                    what: format!("kernel {} exceeds input {d} on axis `{axis}`", kernel[i]),
                });
            }
            out_dims[i] = (d - kernel[i]) / stride[i] + 1;
        }
        let [no, ho, wo] = out_dims;
        let xd = self.value(x).data();
        let mut out = vec![E::zero(); b * no * c * ho * wo];
        // Argmax as linear index into x for a deterministic backward scatter.
        let mut arg = vec![0u64; out.len()];
        let mut oi = 0usize;
        for bi in 0..b {
            for noi in 0..no {
                for ci in 0..c {
                    for hoi in 0..ho {
                        for woi in 0..wo {
                            let mut best = E::neg_infinity();
                            let mut best_at = 0usize;
                            for dt in 0..kernel[0] {
                                let ti = noi * stride[0] + dt;
                                for dh in 0..kernel[1] {
                                    let hi = hoi * stride[1] + dh;
                                    let row = (((bi * n + ti) * c + ci) * h + hi) * w
                                        + woi * stride[2];
                                    for dw in 0..kernel[2] {
                                        let v = xd[row + dw];
                                        if v > best {
                                            best = v;
                                            best_at = row + dw;
                                        }
                                    }
                                }
                            }
                            out[oi] = best;
                            arg[oi] = best_at as u64;
                            oi += 1;
                        }
                    }
                }
            }
        }
        Ok(self.push_op(
            "max_pool3d",
            Tensor::new(vec![b, no, c, ho, wo], out)?,
            &[x],
            Some(Box::new(move |up, _ctx, sink| {
                if sink.wants(x) {
                    let gx = sink.accum(x);
                    for (&a, &u) in arg.iter().zip(up) {
                        gx[a as usize] = gx[a as usize] + u;
                    }
                }
            })),
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn temporal_pool_takes_per_pixel_max() {
        let mut g = Graph::<f64>::new();
        // two frames of a 1x2 image
        let x = g.leaf(
            Tensor::new(vec![1, 2, 1, 1, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap(),
            true,
        );
        let y = g.temporal_max_pool(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 2]);
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn temporal_pool_tie_goes_to_first_frame() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(vec![1, 3, 1, 1, 1], 7.0), true);
        let y = g.temporal_max_pool(x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn single_frame_is_identity_reshape() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![2, 1, 3, 2, 2], |i| i as f64));
        let y = g.temporal_max_pool(x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 2, 2]);
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn spatial_window_pool() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(
            vec![1, 1, 1, 2, 4],
            vec![1.0, 2.0, 3.0, 4.0, 8.0, 7.0, 6.0, 5.0],
        ).unwrap());
        let y = g.max_pool3d(x, [1, 2, 2], [1, 2, 2]).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1, 2]);
        assert_eq!(g.value(y).data(), &[8.0, 6.0]);
    }

    #[test]
    fn temporal_window_pool_grads_route_to_argmax() {
        let mut g = Graph::<f64>::new();
        // 6 frames of a single pixel, windows of 3 stride 3
        let x = g.leaf(
            Tensor::new(vec![1, 6, 1, 1, 1], vec![0.0, 9.0, 1.0, 4.0, 4.0, 2.0]).unwrap(),
            true,
        );
        let y = g.max_pool3d(x, [3, 1, 1], [3, 1, 1]).unwrap();
        assert_eq!(g.value(y).data(), &[9.0, 4.0]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        // tie between frames 3 and 4 resolves to frame 3
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }
}
