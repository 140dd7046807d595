use crate::diffkit::{Graph, Tensor};
use crate::error::{Error, Result};

use super::model::condconv_graph;

/// Multi-expert 3×3 convolution with input-conditioned softmax routing.
#[derive(Debug, Clone, PartialEq)]
pub struct CondConvUnit {
    /// `[E, O, C, 3, 3]`.
    pub experts: Tensor,
    /// `[O]`.
    pub bias: Tensor,
    /// `[E, C]`.
    pub router_weight: Tensor,
    /// `[E]`.
    pub router_bias: Tensor,
}

impl CondConvUnit {
    pub fn new(
        experts: Tensor,
        bias: Tensor,
        router_weight: Tensor,
        router_bias: Tensor,
    ) -> Result<Self> {
        let es = experts.shape();
        if es.len() != 5 || es[0] == 0 || es[3] != 3 || es[4] != 3 {
            return Err(Error::config(format!(
                "CondConv experts must be [E,O,C,3,3], got {es:?}"
            )));
        }
        let (e, o, c) = (es[0], es[1], es[2]);
        for (what, got, want) in [
            ("bias", bias.shape().to_vec(), vec![o]),
            ("router weight", router_weight.shape().to_vec(), vec![e, c]),
            ("router bias", router_bias.shape().to_vec(), vec![e]),
        ] {
            if got != want {
                return Err(Error::config(format!(
                    "CondConv {what} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        Ok(Self {
            experts,
            bias,
            router_weight,
            router_bias,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.shape()[0]
    }

    /// Kernel of expert `i` as `[O, C, 3, 3]`.
    pub fn expert(&self, i: usize) -> Tensor {
        self.experts.index_first(i)
    }

    /// Routing coefficients `[N, E]` for `x: [N, C, H, W]`.
    pub fn routing(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.constant(self.router_weight.clone());
        let b = g.constant(self.router_bias.clone());
        let pooled = g.global_avg_pool(xv)?;
        let logits = g.linear(pooled, w, Some(b))?;
        let r = g.softmax(logits)?;
        Ok(g.value(r).clone())
    }

    /// Per-sample effective kernels `[N, O, C, 3, 3]`.
    pub fn effective_kernels(&self, x: &Tensor) -> Result<Tensor> {
        let r = self.routing(x)?;
        let mut g = Graph::new();
        let rv = g.constant(r);
        let e = g.constant(self.experts.clone());
        let k = g.mix_kernels(rv, e)?;
        Ok(g.value(k).clone())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let e = g.constant(self.experts.clone());
        let b = g.constant(self.bias.clone());
        let w = g.constant(self.router_weight.clone());
        let rb = g.constant(self.router_bias.clone());
        let y = condconv_graph(&mut g, xv, e, Some(b), w, rb)?;
        Ok(g.value(y).clone())
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let c = self.experts.shape()[2];
        if x.rank() != 4 || x.shape()[1] != c {
            return Err(Error::DimensionMismatch {
                op: "condconv",
                lhs: x.shape().to_vec(),
                rhs: self.experts.shape().to_vec(),
            });
        }
        Ok(())
    }
}
