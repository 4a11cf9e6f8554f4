//! Parameterised layers built from graph primitives.

use alloc::format;

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

/// Fully connected layer `W x + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights uniform in ±1/√d_in, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / libm::sqrt(d_in as f64);
        let w = store.add_uniform(format!("{name}.w"), &[d_out, d_in], bound, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), true);
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId, TensorError> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(w, x, Some(b))
    }

    pub fn scalar_count(&self) -> usize {
        self.d_out * (self.d_in + 1)
    }
}

/// LSTM cell with a single fused weight over `[x, h]`; gate order is input, forget, cell, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// Weights uniform in ±1/√hidden, forget-gate bias 1, other biases 0.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / libm::sqrt(hidden as f64);
        let w = store.add_uniform(format!("{name}.w"), &[4 * hidden, d_in + hidden], bound, rng);
        let mut bias = Tensor::zeros(&[4 * hidden]);
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        let b = store.add(format!("{name}.b"), bias, true);
        Self { w, b, d_in, hidden }
    }

    pub fn scalar_count(&self) -> usize {
        4 * self.hidden * (self.d_in + self.hidden + 1)
    }

    /// One recurrence step; returns `(h, c)`.
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        x: NodeId,
        h_prev: NodeId,
        c_prev: NodeId,
    ) -> Result<(NodeId, NodeId), TensorError> {
        let d = self.hidden;
        let xh = g.concat(&[x, h_prev])?;
        let w = g.param(self.w);
        let b = g.param(self.b);
        let z = g.linear(w, xh, Some(b))?;
        let zi = g.slice(z, 0, d)?;
        let zf = g.slice(z, d, d)?;
        let zg = g.slice(z, 2 * d, d)?;
        let zo = g.slice(z, 3 * d, d)?;
        let i = g.sigmoid(zi)?;
        let f = g.sigmoid(zf)?;
        let cand = g.tanh(zg)?;
        let o = g.sigmoid(zo)?;
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    pub fn zero_state(&self, g: &mut Graph<'_>) -> (NodeId, NodeId) {
        let h = g.constant(Tensor::zeros(&[self.hidden]));
        let c = g.constant(Tensor::zeros(&[self.hidden]));
        (h, c)
    }
}
