//! Leaky ReLU.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::tensor::{elem, Element, Tensor};

impl<E: Element> Graph<E> {
    /// `y = x` for `x >= 0`, `y = slope * x` otherwise. Slope must lie in
    /// `[0, 1)`; the subgradient at 0 takes the positive branch.
    pub fn leaky_relu(&mut self, x: NodeId, negative_slope: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&negative_slope) {
            return Err(TensorError::InvalidArg {
                context: "leaky_relu",
                what: format!("negative_slope must be in [0, 1), got {negative_slope}"),
            });
        }
        let slope: E = elem(negative_slope);
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .map(|&v| if v >= E::zero() { v } else { v * slope })
                .collect(),
        )?;
        Ok(self.push_op(
            "leaky_relu",
            out,
            &[x],
            Some(Box::new(move |up, ctx, sink| {
                if sink.wants(x) {
                    let xv = ctx.value(x).data();
                    let gx = sink.accum(x);
                    for ((g, u), v) in gx.iter_mut().zip(up).zip(xv) {
                        let k = if *v >= E::zero() { E::one() } else { slope };
                        *g = *g + *u * k;
                    }
                }
            })),
        ))
    }
}
