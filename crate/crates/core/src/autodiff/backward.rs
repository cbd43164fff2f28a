//! Reverse-mode differentiation that records its own operations.

use super::graph::{Graph, NodeId, Op, Unary as Fun};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    /// Appends nodes computing `d output / d wrt[i]` and returns their ids.
    ///
    /// `output` must hold a single element. Every `wrt` node must influence
    /// `output`, otherwise [`Error::Disconnected`] is returned. The returned
    /// nodes are ordinary graph nodes and may be differentiated again.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let adj = self.backprop(output, wrt)?;
        wrt.iter()
            .map(|w| adj[w.0].ok_or(Error::Disconnected { node: w.0 }))
            .collect()
    }

    /// Like [`Graph::grad`] but yields zero constants for disconnected nodes.
    pub fn grad_or_zeros(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let adj = self.backprop(output, wrt)?;
        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            out.push(match adj[w.0] {
                Some(g) => g,
                None => {
                    let shape = self.value(*w).shape().to_vec();
                    self.constant(Tensor::zeros(&shape))?
                }
            });
        }
        Ok(out)
    }

    fn backprop(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Option<NodeId>>> {
        if !self.value(output).is_scalar() {
            return Err(Error::NonScalarOutput {
                shape: self.value(output).shape().to_vec(),
            });
        }
        let n = output.0 + 1;
        for w in wrt {
            if w.0 >= self.len() {
                return Err(Error::InvalidArgument(format!("unknown node {}", w.0)));
            }
        }
        // reach[i]: node i depends on some wrt node.
        let mut reach = vec![false; n];
        for w in wrt {
            if w.0 < n {
                reach[w.0] = true;
            }
        }
        for i in 0..n {
            if !reach[i] && self.nodes[i].op.inputs().iter().any(|p| reach[p.0]) {
                reach[i] = true;
            }
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; self.len().max(n)];
        if !reach[output.0] {
            return Ok(adj);
        }
        let seed_shape = self.value(output).shape().to_vec();
        adj[output.0] = Some(self.constant(Tensor::full(&seed_shape, T::one()))?);

        for i in (0..n).rev() {
            if !reach[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let contributions = self.vjp(NodeId(i), &op, g, &reach)?;
            for (input, c) in contributions {
                adj[input.0] = Some(match adj[input.0] {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }
        Ok(adj)
    }

    // Vector-Jacobian products for one node; only reachable inputs get a term.
    fn vjp(
        &mut self,
        y: NodeId,
        op: &Op<T>,
        g: NodeId,
        reach: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>> {
        use Op::*;
        let wants = |id: &NodeId| reach[id.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Leaf(_) => {}
            Add(a, b) => {
                if wants(a) {
                    out.push((*a, g));
                }
                if wants(b) {
                    out.push((*b, g));
                }
            }
            Sub(a, b) => {
                if wants(a) {
                    out.push((*a, g));
                }
                if wants(b) {
                    out.push((*b, self.neg(g)?));
                }
            }
            Mul(a, b) => {
                if wants(a) {
                    out.push((*a, self.mul(g, *b)?));
                }
                if wants(b) {
                    out.push((*b, self.mul(g, *a)?));
                }
            }
            Neg(a) => out.push((*a, self.neg(g)?)),
            Scale(a, c) => out.push((*a, self.scale(g, *c)?)),
            AddScalar(a, _) => out.push((*a, g)),
            Unary(f, a) => {
                let local = match f {
                    Fun::Softplus => Some(self.unary(Fun::Sigmoid, *a)?),
                    Fun::Sigmoid => {
                        let ny = self.neg(y)?;
                        let one_minus = self.add_scalar(ny, T::one())?;
                        Some(self.mul(y, one_minus)?)
                    }
                    Fun::Tanh => {
                        let y2 = self.square(y)?;
                        let ny2 = self.neg(y2)?;
                        Some(self.add_scalar(ny2, T::one())?)
                    }
                    Fun::Relu => Some(self.unary(Fun::Step, *a)?),
                    Fun::Exp => Some(y),
                    Fun::Log => Some(self.unary(Fun::Recip, *a)?),
                    Fun::Recip => {
                        let y2 = self.square(y)?;
                        Some(self.neg(y2)?)
                    }
                    Fun::Step => None,
                };
                if let Some(local) = local {
                    out.push((*a, self.mul(g, local)?));
                }
            }
            MatMul(a, b) => {
                if wants(a) {
                    let bt = self.transpose(*b)?;
                    out.push((*a, self.matmul(g, bt)?));
                }
                if wants(b) {
                    let at = self.transpose(*a)?;
                    out.push((*b, self.matmul(at, g)?));
                }
            }
            Transpose(a) => out.push((*a, self.transpose(g)?)),
            AddRow(a, b) => {
                if wants(a) {
                    out.push((*a, g));
                }
                if wants(b) {
                    out.push((*b, self.sum_rows(g)?));
                }
            }
            SumAll(a) => {
                let shape = self.value(*a).shape().to_vec();
                out.push((*a, self.expand(g, &shape)?));
            }
            SumRows(a) => {
                let n = self.value(*a).rows();
                out.push((*a, self.broadcast_rows(g, n)?));
            }
            SumCols(a) => {
                let m = self.value(*a).cols();
                out.push((*a, self.broadcast_cols(g, m)?));
            }
            BroadcastRows(a, _) => out.push((*a, self.sum_rows(g)?)),
            BroadcastCols(a, _) => out.push((*a, self.sum_cols(g)?)),
            Expand(a, _) => out.push((*a, self.sum(g)?)),
            SoftmaxRows(a) => {
                // s ⊙ (g − rowsum(g ⊙ s))
                let m = self.value(*a).cols();
                let gs = self.mul(g, y)?;
                let rs = self.sum_cols(gs)?;
                let rb = self.broadcast_cols(rs, m)?;
                let centered = self.sub(g, rb)?;
                out.push((*a, self.mul(y, centered)?));
            }
            LogSumExpRows(a) => {
                let m = self.value(*a).cols();
                let gb = self.broadcast_cols(g, m)?;
                let s = self.softmax_rows(*a)?;
                out.push((*a, self.mul(gb, s)?));
            }
        }
        Ok(out)
    }
}
