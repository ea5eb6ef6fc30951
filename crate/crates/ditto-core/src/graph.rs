//! Dataflow graph of the denoising model: linear, non-linear, and
//! structural nodes plus producer->consumer edges.

use crate::tensor::TensorF;
use crate::{Error, Result};

pub type NodeId = u32;

/// Hard cap on graph size, matching the decision-table capacity.
pub const MAX_NODES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonLinKind {
    SiLU,
    GeLU,
    /// Row softmax of `scale * x`; the scale lives in the node weight.
    Softmax,
    GroupNorm {
        groups: usize,
    },
    LayerNorm,
    Quant,
    Dequant,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    /// Model input (the noisy image / token grid being denoised).
    Input,
    /// Constant operand, e.g. the cross-attention context. Payload lives in
    /// the node weight.
    Constant,
    Conv {
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    Fc {
        in_dim: usize,
        out_dim: usize,
    },
    /// Q x K^T; inputs ordered (Q, K).
    AttnScore,
    /// P x V; inputs ordered (P, V).
    AttnContext,
    Add,
    Concat {
        axis: usize,
    },
    Split {
        axis: usize,
        offset: usize,
        len: usize,
    },
    NonLinear(NonLinKind),
}

impl NodeKind {
    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            NodeKind::Conv { .. }
                | NodeKind::Fc { .. }
                | NodeKind::AttnScore
                | NodeKind::AttnContext
        )
    }

    /// Whether the node can consume and produce difference-domain data
    /// without materialization.
    pub fn tolerates_diff(&self) -> bool {
        self.is_linear() || matches!(self, NodeKind::Add)
    }

    pub fn expected_fan_in(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            NodeKind::Input | NodeKind::Constant => 0..=0,
            NodeKind::AttnScore | NodeKind::AttnContext | NodeKind::Add => 2..=2,
            NodeKind::Concat { .. } => 2..=usize::MAX,
            _ => 1..=1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: NodeId,
    pub kind: NodeKind,
    /// Output dims, known after construction or shape inference.
    pub dims: Vec<usize>,
    /// Weights for Conv/Fc, the payload for Constant, the softmax scale for
    /// Softmax; None otherwise.
    pub weight: Option<TensorF>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerGraph {
    pub nodes: Vec<LayerNode>,
    /// (producer, consumer) pairs. Per-consumer input order follows edge
    /// insertion order.
    pub edges: Vec<(NodeId, NodeId)>,
}

impl LayerGraph {
    pub fn add_node(
        &mut self,
        kind: NodeKind,
        dims: Vec<usize>,
        weight: Option<TensorF>,
    ) -> NodeId {
        let id = self.nodes.len() as NodeId;
        self.nodes.push(LayerNode {
            id,
            kind,
            dims,
            weight,
        });
        id
    }

    pub fn add_edge(&mut self, from: NodeId, to: NodeId) {
        self.edges.push((from, to));
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id as usize]
    }

    /// Producers feeding `id`, in input order.
    pub fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        self.edges
            .iter()
            .filter(|&&(_, d)| d == id)
            .map(|&(s, _)| s)
            .collect()
    }

    /// Consumers fed by `id`.
    pub fn consumers_of(&self, id: NodeId) -> Vec<NodeId> {
        self.edges
            .iter()
            .filter(|&&(s, _)| s == id)
            .map(|&(_, d)| d)
            .collect()
    }

    pub fn linear_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.kind.is_linear())
            .map(|n| n.id)
            .collect()
    }

    /// Topological order; errors on cycles.
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for &(_, d) in &self.edges {
            indeg[d as usize] += 1;
        }
        let mut queue: Vec<NodeId> = (0..n as NodeId)
            .filter(|&i| indeg[i as usize] == 0)
            .collect();
        let mut order = Vec::with_capacity(n);
        let mut head = 0;
        while head < queue.len() {
            let u = queue[head];
            head += 1;
            order.push(u);
            for v in self.consumers_of(u) {
                indeg[v as usize] -= 1;
                if indeg[v as usize] == 0 {
                    queue.push(v);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Graph("graph contains a cycle".into()));
        }
        Ok(order)
    }

    /// Structural checks: size bound, acyclicity, fan-in per kind, weights
    /// present on linear nodes.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.len() > MAX_NODES {
            return Err(Error::Graph(format!(
                "node count {} exceeds {}",
                self.nodes.len(),
                MAX_NODES
            )));
        }
        self.topo_order()?;
        for node in &self.nodes {
            let fan_in = self.inputs_of(node.id).len();
            let expected = node.kind.expected_fan_in();
            if !expected.contains(&fan_in) {
                return Err(Error::Graph(format!(
                    "node {} ({:?}) has fan-in {}, expected {:?}",
                    node.id, node.kind, fan_in, expected
                )));
            }
            match node.kind {
                NodeKind::Conv { .. } | NodeKind::Fc { .. } | NodeKind::Constant
                    if node.weight.is_none() =>
                {
                    return Err(Error::Graph(format!(
                        "node {} ({:?}) is missing its weight",
                        node.id, node.kind
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycle_detected() {
        let mut g = LayerGraph::default();
        let a = g.add_node(NodeKind::Add, vec![1], None);
        let b = g.add_node(NodeKind::Add, vec![1], None);
        g.add_edge(a, b);
        g.add_edge(b, a);
        assert!(g.topo_order().is_err());
    }

    #[test]
    fn fan_in_checked() {
        let mut g = LayerGraph::default();
        let i = g.add_node(NodeKind::Input, vec![4], None);
        let add = g.add_node(NodeKind::Add, vec![4], None);
        g.add_edge(i, add);
        // Add requires two inputs
        assert!(g.validate().is_err());
    }
}
