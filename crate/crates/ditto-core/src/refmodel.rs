//! Deterministic toy denoising models and the iterative sampler that
//! produces per-step, per-layer activation traces.
//!
//! The models are untrained; their job is to exercise the same layer kinds
//! and graph structures as real denoising networks at desk scale. The
//! sampler's high-similarity mode bounds the step-to-step change of the
//! latent so traces sit in the similarity regime the difference mechanism
//! targets; reports always carry that flag.

use crate::graph::{LayerGraph, NodeId, NodeKind, NonLinKind};
use crate::rng::SplitMix64;
use crate::tensor::TensorF;
use crate::trace::{LayerRecord, Trace};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const MAX_PARAMS: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    ToyUnet,
    ToyDit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Channel count (toy-unet) or embedding width (toy-dit).
    pub width: usize,
    /// Block count.
    pub depth: usize,
    pub heads: usize,
    /// Spatial edge length (toy-unet) or token count (toy-dit).
    pub spatial: usize,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl ModelSpec {
    pub fn toy_unet() -> Self {
        Self {
            kind: ModelKind::ToyUnet,
            width: 8,
            depth: 2,
            heads: 1,
            spatial: 8,
            seed: 0,
        }
    }

    pub fn toy_dit() -> Self {
        Self {
            kind: ModelKind::ToyDit,
            width: 32,
            depth: 2,
            heads: 2,
            spatial: 16,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.heads == 0 || self.spatial == 0 {
            return Err(Error::InvalidSpec("all dimensions must be >= 1".into()));
        }
        if self.kind == ModelKind::ToyDit && !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidSpec(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    /// Alpha schedule in execution order (first entry used at the first
    /// executed step), values in (0,1], strictly decreasing.
    pub schedule: Vec<f64>,
    /// Bound the step-to-step latent change so adjacent steps stay in the
    /// high-similarity regime.
    pub high_similarity: bool,
}

impl SamplerConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            seed,
            schedule: linear_schedule(steps),
            high_similarity: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::InvalidSampler(format!(
                "need at least 2 steps, got {}",
                self.steps
            )));
        }
        if self.schedule.len() != self.steps {
            return Err(Error::InvalidSampler(format!(
                "schedule length {} != steps {}",
                self.schedule.len(),
                self.steps
            )));
        }
        for w in self.schedule.windows(2) {
            // negated form so NaN also fails the check
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(w[1] < w[0]) {
                return Err(Error::InvalidSampler(
                    "schedule must be strictly decreasing".into(),
                ));
            }
        }
        if self.schedule.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::InvalidSampler(
                "schedule values must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Evenly spaced alphas from 0.99 down to 0.50.
pub fn linear_schedule(steps: usize) -> Vec<f64> {
    let (hi, lo) = (0.99, 0.50);
    (0..steps)
        .map(|i| hi - (hi - lo) * i as f64 / (steps.max(2) - 1) as f64)
        .collect()
}

struct Builder {
    graph: LayerGraph,
    rng: SplitMix64,
    params: usize,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            graph: LayerGraph::default(),
            rng: SplitMix64::new(seed),
            params: 0,
        }
    }

    fn weight(&mut self, dims: Vec<usize>, fan_in: usize) -> TensorF {
        let n: usize = dims.iter().product();
        self.params += n;
        let scale = 1.0 / (fan_in as f64).sqrt();
        let data = (0..n)
            .map(|_| (self.rng.uniform(-0.5, 0.5) * scale) as f32)
            .collect();
        TensorF::new(dims, data)
    }

    fn conv(&mut self, from: NodeId, in_ch: usize, out_ch: usize, k: usize) -> NodeId {
        let w = self.weight(vec![out_ch, in_ch, k, k], in_ch * k * k);
        let kind = NodeKind::Conv {
            out_ch,
            in_ch,
            kh: k,
            kw: k,
            stride: 1,
            pad: k / 2,
        };
        let id = self.graph.add_node(kind, vec![], Some(w));
        self.graph.add_edge(from, id);
        id
    }

    fn fc(&mut self, from: NodeId, in_dim: usize, out_dim: usize) -> NodeId {
        let w = self.weight(vec![in_dim, out_dim], in_dim);
        let id = self
            .graph
            .add_node(NodeKind::Fc { in_dim, out_dim }, vec![], Some(w));
        self.graph.add_edge(from, id);
        id
    }

    fn nonlin(&mut self, from: NodeId, kind: NonLinKind, weight: Option<TensorF>) -> NodeId {
        let id = self
            .graph
            .add_node(NodeKind::NonLinear(kind), vec![], weight);
        self.graph.add_edge(from, id);
        id
    }

    fn softmax(&mut self, from: NodeId, dim: usize) -> NodeId {
        let scale = TensorF::new(vec![1], vec![1.0 / (dim as f32).sqrt()]);
        self.nonlin(from, NonLinKind::Softmax, Some(scale))
    }

    fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let id = self.graph.add_node(NodeKind::Add, vec![], None);
        self.graph.add_edge(a, id);
        self.graph.add_edge(b, id);
        id
    }

    fn attn_score(&mut self, q: NodeId, k: NodeId) -> NodeId {
        let id = self.graph.add_node(NodeKind::AttnScore, vec![], None);
        self.graph.add_edge(q, id);
        self.graph.add_edge(k, id);
        id
    }

    fn attn_context(&mut self, p: NodeId, v: NodeId) -> NodeId {
        let id = self.graph.add_node(NodeKind::AttnContext, vec![], None);
        self.graph.add_edge(p, id);
        self.graph.add_edge(v, id);
        id
    }

    /// Self-attention over the row view of `from`: rows become tokens.
    fn self_attention(&mut self, from: NodeId, tokens: usize, dim: usize, heads: usize) -> NodeId {
        let q = self.fc(from, dim, dim);
        let k = self.fc(from, dim, dim);
        let v = self.fc(from, dim, dim);
        let hd = dim / heads;
        let mut head_outs = Vec::new();
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                let slice = |b: &mut Self, src: NodeId| {
                    let id = b.graph.add_node(
                        NodeKind::Split {
                            axis: 1,
                            offset: h * hd,
                            len: hd,
                        },
                        vec![],
                        None,
                    );
                    b.graph.add_edge(src, id);
                    id
                };
                (slice(self, q), slice(self, k), slice(self, v))
            };
            let scores = self.attn_score(qh, kh);
            let p = self.softmax(scores, hd);
            head_outs.push(self.attn_context(p, vh));
        }
        let ctx = if heads == 1 {
            head_outs[0]
        } else {
            let id = self
                .graph
                .add_node(NodeKind::Concat { axis: 1 }, vec![], None);
            for &h in &head_outs {
                self.graph.add_edge(h, id);
            }
            id
        };
        let _ = tokens;
        self.fc(ctx, dim, dim)
    }
}

/// Builds the toy model graph with deterministic seeded weights.
pub fn build_model(spec: &ModelSpec) -> Result<LayerGraph> {
    spec.validate()?;
    let mut b = Builder::new(spec.seed);
    match spec.kind {
        ModelKind::ToyUnet => build_unet(&mut b, spec),
        ModelKind::ToyDit => build_dit(&mut b, spec),
    }
    if b.params > MAX_PARAMS {
        return Err(Error::InvalidSpec(format!(
            "parameter count {} exceeds desk-scale bound {}",
            b.params, MAX_PARAMS
        )));
    }
    b.graph.validate()?;
    Ok(b.graph)
}

fn build_unet(b: &mut Builder, spec: &ModelSpec) {
    let c = spec.width;
    let s = spec.spatial;
    let input = b.graph.add_node(NodeKind::Input, vec![c, s, s], None);
    let conv_in = b.conv(input, c, c, 3);
    let skip = conv_in;
    let mut h = conv_in;
    for _ in 0..spec.depth {
        // ResNet block: conv - GN - SiLU - conv - skip add
        let block_in = h;
        let c1 = b.conv(h, c, c, 3);
        let gn = b.nonlin(
            c1,
            NonLinKind::GroupNorm {
                groups: groups_for(c),
            },
            None,
        );
        let silu = b.nonlin(gn, NonLinKind::SiLU, None);
        let c2 = b.conv(silu, c, c, 3);
        h = b.add(c2, block_in);
        // attention block over the row-token view [c*s, s]
        let gn2 = b.nonlin(
            h,
            NonLinKind::GroupNorm {
                groups: groups_for(c),
            },
            None,
        );
        let attn = b.self_attention(gn2, c * s, s, spec.heads);
        h = b.add(h, attn);
    }
    // model-level skip through Concat, merged by a 1x1 conv
    let cat = b.graph.add_node(NodeKind::Concat { axis: 0 }, vec![], None);
    b.graph.add_edge(h, cat);
    b.graph.add_edge(skip, cat);
    let _out = b.conv(cat, 2 * c, c, 1);
}

fn build_dit(b: &mut Builder, spec: &ModelSpec) {
    let w = spec.width;
    let t = spec.spatial;
    let ctx_tokens = (t / 2).max(1);
    let input = b.graph.add_node(NodeKind::Input, vec![t, w], None);
    let ctx_data = {
        let n = ctx_tokens * w;
        let data = (0..n).map(|_| b.rng.uniform(-1.0, 1.0) as f32).collect();
        TensorF::new(vec![ctx_tokens, w], data)
    };
    let ctx = b
        .graph
        .add_node(NodeKind::Constant, vec![ctx_tokens, w], Some(ctx_data));
    let mut x = input;
    for _ in 0..spec.depth {
        // self-attention
        let ln1 = b.nonlin(x, NonLinKind::LayerNorm, None);
        let attn = b.self_attention(ln1, t, w, spec.heads);
        x = b.add(x, attn);
        // cross-attention against the constant context
        let ln2 = b.nonlin(x, NonLinKind::LayerNorm, None);
        let q = b.fc(ln2, w, w);
        let kc = b.fc(ctx, w, w);
        let vc = b.fc(ctx, w, w);
        let scores = b.attn_score(q, kc);
        let p = b.softmax(scores, w);
        let cctx = b.attn_context(p, vc);
        let proj = b.fc(cctx, w, w);
        x = b.add(x, proj);
        // MLP
        let ln3 = b.nonlin(x, NonLinKind::LayerNorm, None);
        let h1 = b.fc(ln3, w, 2 * w);
        let gelu = b.nonlin(h1, NonLinKind::GeLU, None);
        let h2 = b.fc(gelu, 2 * w, w);
        x = b.add(x, h2);
    }
    let _out = b.fc(x, w, w);
}

fn groups_for(channels: usize) -> usize {
    for g in [4, 2, 1] {
        if channels.is_multiple_of(g) {
            return g;
        }
    }
    1
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f32) -> f32 {
    // tanh approximation
    let c = (2.0 / std::f32::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn row_softmax(t: &TensorF, scale: f32) -> TensorF {
    let (rows, cols) = t.as_rows();
    let mut out = vec![0.0f32; t.len()];
    for r in 0..rows {
        let row = &t.data[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) * scale;
        let mut denom = 0.0f32;
        for (i, &v) in row.iter().enumerate() {
            let e = (v * scale - m).exp();
            out[r * cols + i] = e;
            denom += e;
        }
        for v in &mut out[r * cols..(r + 1) * cols] {
            *v /= denom;
        }
    }
    TensorF::new(t.dims.clone(), out)
}

fn group_norm(t: &TensorF, groups: usize) -> TensorF {
    let c = t.dims[0];
    let per = t.len() / c;
    let gsize = c / groups;
    let mut out = t.data.clone();
    for g in 0..groups {
        let span = g * gsize * per..(g + 1) * gsize * per;
        let n = span.len() as f32;
        let mean: f32 = t.data[span.clone()].iter().sum::<f32>() / n;
        let var: f32 = t.data[span.clone()]
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f32>()
            / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for v in &mut out[span] {
            *v = (*v - mean) * inv;
        }
    }
    TensorF::new(t.dims.clone(), out)
}

fn layer_norm(t: &TensorF) -> TensorF {
    let (rows, cols) = t.as_rows();
    let mut out = t.data.clone();
    for r in 0..rows {
        let row = r * cols..(r + 1) * cols;
        let n = cols as f32;
        let mean: f32 = t.data[row.clone()].iter().sum::<f32>() / n;
        let var: f32 = t.data[row.clone()]
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f32>()
            / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for v in &mut out[row] {
            *v = (*v - mean) * inv;
        }
    }
    TensorF::new(t.dims.clone(), out)
}

/// One float forward pass. Records every linear node's inputs and output
/// into `records` when provided.
pub fn exec_graph(
    graph: &LayerGraph,
    x: &TensorF,
    step: u16,
    mut records: Option<&mut Vec<LayerRecord>>,
) -> Result<TensorF> {
    let order = graph.topo_order()?;
    let mut values: HashMap<NodeId, TensorF> = HashMap::new();
    for id in &order {
        let node = graph.node(*id);
        let inputs: Vec<TensorF> = graph
            .inputs_of(*id)
            .iter()
            .map(|i| values[i].clone())
            .collect();
        let out = match &node.kind {
            NodeKind::Input => x.clone(),
            NodeKind::Constant => node.weight.clone().expect("constant payload"),
            NodeKind::Conv {
                out_ch,
                in_ch,
                kh,
                kw,
                stride,
                pad,
            } => {
                let a = &inputs[0];
                if a.dims.len() != 3 || a.dims[0] != *in_ch {
                    return Err(Error::ShapeMismatch(format!(
                        "conv node {} expects [{in_ch}, h, w], got {:?}",
                        node.id, a.dims
                    )));
                }
                let w = node.weight.as_ref().expect("conv weight");
                let (data, oh, ow) = crate::kernel::conv2d_f32(
                    &a.data, *in_ch, a.dims[1], a.dims[2], &w.data, *out_ch, *kh, *kw, *stride,
                    *pad,
                );
                TensorF::new(vec![*out_ch, oh, ow], data)
            }
            NodeKind::Fc { in_dim, out_dim } => {
                let a = &inputs[0];
                let (rows, cols) = a.as_rows();
                if cols != *in_dim {
                    return Err(Error::ShapeMismatch(format!(
                        "fc node {} expects row width {in_dim}, got {cols}",
                        node.id
                    )));
                }
                let w = node.weight.as_ref().expect("fc weight");
                let data = crate::kernel::matmul_f32(&a.data, &w.data, rows, cols, *out_dim);
                TensorF::new(vec![rows, *out_dim], data)
            }
            NodeKind::AttnScore => {
                let (q, k) = (&inputs[0], &inputs[1]);
                let (tq, d) = q.as_rows();
                let (tk, dk) = k.as_rows();
                if d != dk {
                    return Err(Error::ShapeMismatch(format!(
                        "attention operand widths {d} vs {dk}"
                    )));
                }
                let mut kt = vec![0.0f32; k.len()];
                for r in 0..tk {
                    for c in 0..d {
                        kt[c * tk + r] = k.data[r * d + c];
                    }
                }
                TensorF::new(
                    vec![tq, tk],
                    crate::kernel::matmul_f32(&q.data, &kt, tq, d, tk),
                )
            }
            NodeKind::AttnContext => {
                let (p, v) = (&inputs[0], &inputs[1]);
                let (tp, cp) = p.as_rows();
                let (tv, dv) = v.as_rows();
                if cp != tv {
                    return Err(Error::ShapeMismatch(format!(
                        "context operands [{tp},{cp}] x [{tv},{dv}]"
                    )));
                }
                TensorF::new(
                    vec![tp, dv],
                    crate::kernel::matmul_f32(&p.data, &v.data, tp, cp, dv),
                )
            }
            NodeKind::Add => {
                let (a, bb) = (&inputs[0], &inputs[1]);
                if a.len() != bb.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "add node {} element counts {} vs {}",
                        node.id,
                        a.len(),
                        bb.len()
                    )));
                }
                let data = a.data.iter().zip(&bb.data).map(|(x, y)| x + y).collect();
                TensorF::new(a.dims.clone(), data)
            }
            NodeKind::Concat { axis } => concat(&inputs, *axis)?,
            NodeKind::Split { axis, offset, len } => split(&inputs[0], *axis, *offset, *len)?,
            NodeKind::NonLinear(kind) => {
                let a = &inputs[0];
                match kind {
                    NonLinKind::SiLU => TensorF::new(
                        a.dims.clone(),
                        a.data.iter().map(|&v| v * sigmoid(v)).collect(),
                    ),
                    NonLinKind::GeLU => {
                        TensorF::new(a.dims.clone(), a.data.iter().map(|&v| gelu(v)).collect())
                    }
                    NonLinKind::Softmax => {
                        let scale = node.weight.as_ref().map(|w| w.data[0]).unwrap_or(1.0);
                        row_softmax(a, scale)
                    }
                    NonLinKind::GroupNorm { groups } => group_norm(a, *groups),
                    NonLinKind::LayerNorm => layer_norm(a),
                    NonLinKind::Quant | NonLinKind::Dequant => a.clone(),
                }
            }
        };
        if node.kind.is_linear() {
            if let Some(recs) = records.as_deref_mut() {
                let mut tensors = inputs.clone();
                tensors.push(out.clone());
                recs.push(LayerRecord {
                    step,
                    layer: node.id,
                    tensors,
                });
            }
        }
        values.insert(*id, out);
    }
    // unique sink is the model output
    let sinks: Vec<NodeId> = graph
        .nodes
        .iter()
        .map(|n| n.id)
        .filter(|&id| graph.consumers_of(id).is_empty())
        .collect();
    if sinks.len() != 1 {
        return Err(Error::Graph(format!(
            "expected one output node, found {}",
            sinks.len()
        )));
    }
    Ok(values.remove(&sinks[0]).unwrap())
}

fn concat(inputs: &[TensorF], axis: usize) -> Result<TensorF> {
    let rank = inputs[0].dims.len();
    if axis >= rank {
        return Err(Error::ShapeMismatch(format!(
            "concat axis {axis} out of rank {rank}"
        )));
    }
    let mut dims = inputs[0].dims.clone();
    dims[axis] = inputs.iter().map(|t| t.dims[axis]).sum();
    let outer: usize = inputs[0].dims[..axis].iter().product();
    let inner: usize = inputs[0].dims[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(dims.iter().product());
    for o in 0..outer {
        for t in inputs {
            let span = t.dims[axis] * inner;
            data.extend_from_slice(&t.data[o * span..(o + 1) * span]);
        }
    }
    Ok(TensorF::new(dims, data))
}

fn split(t: &TensorF, axis: usize, offset: usize, len: usize) -> Result<TensorF> {
    let rank = t.dims.len();
    if axis >= rank || offset + len > t.dims[axis] {
        return Err(Error::ShapeMismatch(format!(
            "split [{offset}..{}) on axis {axis} of {:?}",
            offset + len,
            t.dims
        )));
    }
    let outer: usize = t.dims[..axis].iter().product();
    let inner: usize = t.dims[axis + 1..].iter().product();
    let mut dims = t.dims.clone();
    dims[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * t.dims[axis] * inner + offset * inner;
        data.extend_from_slice(&t.data[base..base + len * inner]);
    }
    Ok(TensorF::new(dims, data))
}

fn run_sampler_inner(
    graph: &LayerGraph,
    cfg: &SamplerConfig,
    zero_eps_at: Option<usize>,
) -> Result<Trace> {
    cfg.validate()?;
    let order = graph.topo_order()?;
    let input_id = order
        .iter()
        .find(|&&id| graph.node(id).kind == NodeKind::Input)
        .copied()
        .ok_or_else(|| Error::Graph("graph has no input node".into()))?;
    let input_dims = graph.node(input_id).dims.clone();
    let mut noise_rng = SplitMix64::new(cfg.seed ^ 0x6e_6f69_7365u64);
    let n: usize = input_dims.iter().product();
    let mut x = TensorF::new(
        input_dims,
        (0..n)
            .map(|_| noise_rng.uniform(-1.0, 1.0) as f32)
            .collect(),
    );

    let mut records = Vec::new();
    for i in 0..cfg.steps {
        let mut eps = exec_graph(graph, &x, i as u16, Some(&mut records))?;
        if zero_eps_at == Some(i) {
            eps = TensorF::zeros(eps.dims.clone());
        }
        if let Err(Error::NonFinite { .. }) = eps.check_finite() {
            return Err(Error::NonFiniteTrace {
                step: i,
                layer: u32::MAX,
            });
        }
        if i + 1 < cfg.steps {
            let a_t = cfg.schedule[i];
            let a_next = cfg.schedule[i + 1];
            let mut next = vec![0.0f32; x.len()];
            for (j, v) in next.iter_mut().enumerate() {
                let xt = x.data[j] as f64;
                let e = eps.data[j] as f64;
                let x0 = (xt - (1.0 - a_t).sqrt() * e) / a_t.sqrt();
                *v = (a_next.sqrt() * x0 + (1.0 - a_next).sqrt() * e) as f32;
            }
            if cfg.high_similarity {
                // bounded perturbation toward the DDIM target
                let eta = 0.05f32;
                for (j, v) in next.iter_mut().enumerate() {
                    *v = x.data[j] + eta * (*v - x.data[j]);
                }
            }
            x = TensorF::new(x.dims.clone(), next);
            if x.check_finite().is_err() {
                return Err(Error::NonFiniteTrace {
                    step: i,
                    layer: u32::MAX,
                });
            }
        }
    }
    Ok(Trace {
        graph: graph.clone(),
        steps: cfg.steps,
        records,
    })
}

/// Iterates the deterministic DDIM update, recording every linear layer's
/// inputs and output at every step.
pub fn run_sampler(graph: &LayerGraph, cfg: &SamplerConfig) -> Result<Trace> {
    run_sampler_inner(graph, cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeKind;

    #[test]
    fn dit_contains_expected_node_kinds() {
        let g = build_model(&ModelSpec {
            depth: 1,
            ..ModelSpec::toy_dit()
        })
        .unwrap();
        let has = |pred: &dyn Fn(&NodeKind) -> bool| g.nodes.iter().any(|n| pred(&n.kind));
        assert!(has(&|k| matches!(
            k,
            NodeKind::NonLinear(NonLinKind::LayerNorm)
        )));
        assert!(has(&|k| matches!(k, NodeKind::Fc { .. })));
        assert!(has(&|k| matches!(k, NodeKind::AttnScore)));
        assert!(has(&|k| matches!(
            k,
            NodeKind::NonLinear(NonLinKind::Softmax)
        )));
        assert!(has(&|k| matches!(k, NodeKind::AttnContext)));
        assert!(has(&|k| matches!(k, NodeKind::NonLinear(NonLinKind::GeLU))));
        assert!(has(&|k| matches!(k, NodeKind::Constant)));
    }

    #[test]
    fn unet_contains_expected_node_kinds() {
        let g = build_model(&ModelSpec {
            depth: 1,
            ..ModelSpec::toy_unet()
        })
        .unwrap();
        let has = |pred: &dyn Fn(&NodeKind) -> bool| g.nodes.iter().any(|n| pred(&n.kind));
        assert!(has(&|k| matches!(k, NodeKind::Conv { .. })));
        assert!(has(&|k| matches!(
            k,
            NodeKind::NonLinear(NonLinKind::GroupNorm { .. })
        )));
        assert!(has(&|k| matches!(k, NodeKind::NonLinear(NonLinKind::SiLU))));
        assert!(has(&|k| matches!(k, NodeKind::AttnScore)));
        assert!(has(&|k| matches!(k, NodeKind::Add)));
        assert!(has(&|k| matches!(k, NodeKind::Concat { .. })));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model(&ModelSpec::toy_unet().with_seed(9)).unwrap();
        let b = build_model(&ModelSpec::toy_unet().with_seed(9)).unwrap();
        assert_eq!(a, b);
        let c = build_model(&ModelSpec::toy_unet().with_seed(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn trace_has_steps_entries_per_layer() {
        let g = build_model(&ModelSpec {
            depth: 1,
            ..ModelSpec::toy_dit()
        })
        .unwrap();
        let tr = run_sampler(&g, &SamplerConfig::new(2, 1)).unwrap();
        for id in g.linear_nodes() {
            assert_eq!(tr.records_for(id).len(), 2, "layer {id}");
        }
    }

    #[test]
    fn sampler_deterministic() {
        let g = build_model(&ModelSpec {
            depth: 1,
            ..ModelSpec::toy_unet()
        })
        .unwrap();
        let a = run_sampler(&g, &SamplerConfig::new(3, 5)).unwrap();
        let b = run_sampler(&g, &SamplerConfig::new(3, 5)).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn shape_stationary_across_steps() {
        let g = build_model(&ModelSpec {
            depth: 1,
            ..ModelSpec::toy_unet()
        })
        .unwrap();
        let tr = run_sampler(&g, &SamplerConfig::new(4, 5)).unwrap();
        for id in g.linear_nodes() {
            let recs = tr.records_for(id);
            for r in &recs[1..] {
                for (a, b) in r.tensors.iter().zip(&recs[0].tensors) {
                    assert_eq!(a.dims, b.dims);
                }
            }
        }
    }

    #[test]
    fn zeroing_one_step_changes_all_later_inputs() {
        let g = build_model(&ModelSpec {
            depth: 1,
            ..ModelSpec::toy_unet()
        })
        .unwrap();
        let mut cfg = SamplerConfig::new(6, 3);
        cfg.high_similarity = false;
        let base = run_sampler_inner(&g, &cfg, None).unwrap();
        let zeroed = run_sampler_inner(&g, &cfg, Some(2)).unwrap();
        for id in g.linear_nodes() {
            let a = base.records_for(id);
            let b = zeroed.records_for(id);
            for step in 3..6 {
                assert_ne!(
                    a[step].tensors[0].data, b[step].tensors[0].data,
                    "layer {id} step {step}"
                );
            }
            for step in 0..3 {
                assert_eq!(a[step].tensors[0].data, b[step].tensors[0].data);
            }
        }
    }

    #[test]
    fn steps_below_two_rejected() {
        assert!(SamplerConfig::new(1, 0).validate().is_err());
    }

    #[test]
    fn oversized_spec_rejected() {
        let spec = ModelSpec {
            width: 512,
            depth: 8,
            ..ModelSpec::toy_dit()
        };
        assert!(build_model(&spec).is_err());
    }
}
