//! Per-step, per-layer activation traces and their binary file format.
//!
//! Layout (little-endian throughout): magic "DITT", version u16 = 1, then
//! the graph descriptor (node count u32; per node: id u32, kind u8,
//! dims u32 x 4, weight blob length u64, raw f32 weights; then edge count
//! u32 and (src u32, dst u32) pairs), then record count u64; each record:
//! step u16, layer id u32, tensor rank u8, dims u32 x rank, payload length
//! u64, f32 payload. Records for one (step, layer) appear in input order
//! followed by the output, so roles are implied by the node's fan-in.
//!
//! Kind-specific parameters ride in the dims x 4 field: Conv packs its
//! weight shape [out_ch, in_ch, kh, kw] (stride fixed at 1, pad = kh/2),
//! Fc packs [in_dim, out_dim], GroupNorm its group count, Split
//! [axis, offset, len], Concat [axis], Input/Constant their tensor dims.
//! Node output dims are not stored; they are reconstructed from the
//! recorded tensors where needed.

use crate::graph::{LayerGraph, LayerNode, NodeId, NodeKind, NonLinKind};
use crate::tensor::TensorF;
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const TRACE_MAGIC: &[u8; 4] = b"DITT";
pub const TRACE_VERSION: u16 = 1;

/// All tensors a linear layer touched at one step: inputs in order, then
/// the output.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub step: u16,
    pub layer: NodeId,
    pub tensors: Vec<TensorF>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub graph: LayerGraph,
    pub steps: usize,
    pub records: Vec<LayerRecord>,
}

impl Trace {
    /// Records of one layer ordered by step.
    pub fn records_for(&self, layer: NodeId) -> Vec<&LayerRecord> {
        let mut recs: Vec<&LayerRecord> =
            self.records.iter().filter(|r| r.layer == layer).collect();
        recs.sort_by_key(|r| r.step);
        recs
    }

    pub fn linear_layers(&self) -> Vec<NodeId> {
        self.graph.linear_nodes()
    }
}

fn kind_to_parts(node: &LayerNode) -> (u8, [u32; 4]) {
    let mut dims = [0u32; 4];
    let tag = match &node.kind {
        NodeKind::Input => {
            for (i, &d) in node.dims.iter().take(4).enumerate() {
                dims[i] = d as u32;
            }
            0
        }
        NodeKind::Constant => {
            if let Some(w) = &node.weight {
                for (i, &d) in w.dims.iter().take(4).enumerate() {
                    dims[i] = d as u32;
                }
            }
            1
        }
        NodeKind::Conv {
            out_ch,
            in_ch,
            kh,
            kw,
            ..
        } => {
            dims = [*out_ch as u32, *in_ch as u32, *kh as u32, *kw as u32];
            2
        }
        NodeKind::Fc { in_dim, out_dim } => {
            dims = [*in_dim as u32, *out_dim as u32, 0, 0];
            3
        }
        NodeKind::AttnScore => 4,
        NodeKind::AttnContext => 5,
        NodeKind::Add => 6,
        NodeKind::Concat { axis } => {
            dims[0] = *axis as u32;
            7
        }
        NodeKind::Split { axis, offset, len } => {
            dims = [*axis as u32, *offset as u32, *len as u32, 0];
            8
        }
        NodeKind::NonLinear(nl) => match nl {
            NonLinKind::SiLU => 9,
            NonLinKind::GeLU => 10,
            NonLinKind::Softmax => 11,
            NonLinKind::GroupNorm { groups } => {
                dims[0] = *groups as u32;
                12
            }
            NonLinKind::LayerNorm => 13,
            NonLinKind::Quant => 14,
            NonLinKind::Dequant => 15,
        },
    };
    (tag, dims)
}

fn kind_from_parts(tag: u8, dims: [u32; 4]) -> Result<(NodeKind, Vec<usize>)> {
    let d = |i: usize| dims[i] as usize;
    let node_dims = |n: usize| dims[..n].iter().map(|&v| v as usize).collect::<Vec<_>>();
    Ok(match tag {
        0 => {
            let rank = dims.iter().take_while(|&&v| v != 0).count();
            (NodeKind::Input, node_dims(rank))
        }
        1 => {
            let rank = dims.iter().take_while(|&&v| v != 0).count();
            (NodeKind::Constant, node_dims(rank))
        }
        2 => (
            NodeKind::Conv {
                out_ch: d(0),
                in_ch: d(1),
                kh: d(2),
                kw: d(3),
                stride: 1,
                pad: d(2) / 2,
            },
            vec![],
        ),
        3 => (
            NodeKind::Fc {
                in_dim: d(0),
                out_dim: d(1),
            },
            vec![],
        ),
        4 => (NodeKind::AttnScore, vec![]),
        5 => (NodeKind::AttnContext, vec![]),
        6 => (NodeKind::Add, vec![]),
        7 => (NodeKind::Concat { axis: d(0) }, vec![]),
        8 => (
            NodeKind::Split {
                axis: d(0),
                offset: d(1),
                len: d(2),
            },
            vec![],
        ),
        9 => (NodeKind::NonLinear(NonLinKind::SiLU), vec![]),
        10 => (NodeKind::NonLinear(NonLinKind::GeLU), vec![]),
        11 => (NodeKind::NonLinear(NonLinKind::Softmax), vec![]),
        12 => (
            NodeKind::NonLinear(NonLinKind::GroupNorm { groups: d(0) }),
            vec![],
        ),
        13 => (NodeKind::NonLinear(NonLinKind::LayerNorm), vec![]),
        14 => (NodeKind::NonLinear(NonLinKind::Quant), vec![]),
        15 => (NodeKind::NonLinear(NonLinKind::Dequant), vec![]),
        other => return Err(Error::TraceFormat(format!("unknown node kind tag {other}"))),
    })
}

struct Writer<W: Write> {
    w: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.w.write_all(&[v])?)
    }
    fn u16(&mut self, v: u16) -> Result<()> {
        Ok(self.w.write_all(&v.to_le_bytes())?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.w.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.w.write_all(&v.to_le_bytes())?)
    }
    fn f32s(&mut self, vs: &[f32]) -> Result<()> {
        for v in vs {
            self.w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| Error::TraceFormat("unexpected end of file".into()))?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn write_trace<W: Write>(trace: &Trace, out: W) -> Result<()> {
    let mut w = Writer { w: out };
    w.w.write_all(TRACE_MAGIC)?;
    w.u16(TRACE_VERSION)?;
    w.u32(trace.graph.nodes.len() as u32)?;
    for node in &trace.graph.nodes {
        let (tag, dims) = kind_to_parts(node);
        w.u32(node.id)?;
        w.u8(tag)?;
        for d in dims {
            w.u32(d)?;
        }
        match &node.weight {
            Some(t) => {
                w.u64((t.len() * 4) as u64)?;
                w.f32s(&t.data)?;
            }
            None => w.u64(0)?,
        }
    }
    w.u32(trace.graph.edges.len() as u32)?;
    for &(s, d) in &trace.graph.edges {
        w.u32(s)?;
        w.u32(d)?;
    }
    let n_records: u64 = trace.records.iter().map(|r| r.tensors.len() as u64).sum();
    w.u64(n_records)?;
    for rec in &trace.records {
        for t in &rec.tensors {
            w.u16(rec.step)?;
            w.u32(rec.layer)?;
            w.u8(t.dims.len() as u8)?;
            for &d in &t.dims {
                w.u32(d as u32)?;
            }
            w.u64((t.len() * 4) as u64)?;
            w.f32s(&t.data)?;
        }
    }
    Ok(())
}

pub fn read_trace<R: Read>(input: R) -> Result<Trace> {
    let mut r = Reader { r: input };
    let magic = r.bytes(4)?;
    if magic != TRACE_MAGIC {
        return Err(Error::TraceFormat("not a trace file (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != TRACE_VERSION {
        return Err(Error::TraceFormat(format!(
            "unsupported trace version {version}"
        )));
    }
    let n_nodes = r.u32()? as usize;
    if n_nodes > crate::graph::MAX_NODES {
        return Err(Error::TraceFormat(format!(
            "node count {n_nodes} exceeds limit"
        )));
    }
    let mut graph = LayerGraph::default();
    for i in 0..n_nodes {
        let id = r.u32()?;
        if id != i as u32 {
            return Err(Error::TraceFormat(format!("non-sequential node id {id}")));
        }
        let tag = r.u8()?;
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let blob_len = r.u64()? as usize;
        if !blob_len.is_multiple_of(4) {
            return Err(Error::TraceFormat(format!(
                "weight blob length {blob_len} not a multiple of 4"
            )));
        }
        let data = r.f32s(blob_len / 4)?;
        let (kind, node_dims) = kind_from_parts(tag, dims)?;
        let weight = if blob_len == 0 {
            None
        } else {
            let wdims = match &kind {
                NodeKind::Conv {
                    out_ch,
                    in_ch,
                    kh,
                    kw,
                    ..
                } => vec![*out_ch, *in_ch, *kh, *kw],
                NodeKind::Fc { in_dim, out_dim } => vec![*in_dim, *out_dim],
                NodeKind::Constant => node_dims.clone(),
                _ => vec![data.len()],
            };
            if wdims.iter().product::<usize>() != data.len() {
                return Err(Error::TraceFormat(format!(
                    "weight blob for node {id} has {} values, kind implies {:?}",
                    data.len(),
                    wdims
                )));
            }
            Some(TensorF::new(wdims, data))
        };
        graph.nodes.push(LayerNode {
            id,
            kind,
            dims: node_dims,
            weight,
        });
    }
    let n_edges = r.u32()? as usize;
    for _ in 0..n_edges {
        let s = r.u32()?;
        let d = r.u32()?;
        if s as usize >= n_nodes || d as usize >= n_nodes {
            return Err(Error::TraceFormat(format!("edge ({s}, {d}) out of range")));
        }
        graph.edges.push((s, d));
    }
    graph
        .validate()
        .map_err(|e| Error::TraceFormat(format!("invalid graph in trace: {e}")))?;

    let n_records = r.u64()? as usize;
    let mut flat: Vec<(u16, NodeId, TensorF)> = Vec::with_capacity(n_records);
    let mut max_step = 0u16;
    for _ in 0..n_records {
        let step = r.u16()?;
        let layer = r.u32()?;
        let rank = r.u8()? as usize;
        if rank > 8 {
            return Err(Error::TraceFormat(format!("tensor rank {rank} too large")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u32()? as usize;
            if d > 1 << 24 {
                return Err(Error::TraceFormat(format!(
                    "dimension {d} overflows the desk-scale bound"
                )));
            }
            dims.push(d);
        }
        let payload = r.u64()? as usize;
        let n: usize = dims.iter().product();
        if payload != n * 4 {
            return Err(Error::TraceFormat(format!(
                "payload length {payload} does not match dims {dims:?}"
            )));
        }
        let data = r.f32s(n)?;
        max_step = max_step.max(step);
        flat.push((step, layer, TensorF::new(dims, data)));
    }
    // regroup: per (step, layer) the fan-in count of tensors, then the output
    let mut records = Vec::new();
    let mut iter = flat.into_iter().peekable();
    while let Some((step, layer, first)) = iter.next() {
        if layer as usize >= n_nodes || !graph.node(layer).kind.is_linear() {
            return Err(Error::TraceFormat(format!(
                "record for non-linear node {layer}"
            )));
        }
        let fan_in = graph.inputs_of(layer).len();
        let mut tensors = vec![first];
        for _ in 0..fan_in {
            match iter.peek() {
                Some(&(s, l, _)) if s == step && l == layer => tensors.push(iter.next().unwrap().2),
                _ => {
                    return Err(Error::TraceFormat(format!(
                        "truncated record group for layer {layer} step {step}"
                    )))
                }
            }
        }
        records.push(LayerRecord {
            step,
            layer,
            tensors,
        });
    }
    Ok(Trace {
        graph,
        steps: max_step as usize + 1,
        records,
    })
}

pub fn export_trace(trace: &Trace, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trace(trace, std::io::BufWriter::new(file))
}

pub fn import_trace(path: &Path) -> Result<Trace> {
    let file = std::fs::File::open(path)?;
    read_trace(std::io::BufReader::new(file))
}

pub fn trace_to_bytes(trace: &Trace) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refmodel::{build_model, run_sampler, ModelSpec, SamplerConfig};

    fn small_trace() -> Trace {
        let g = build_model(&ModelSpec {
            depth: 1,
            ..ModelSpec::toy_dit()
        })
        .unwrap();
        run_sampler(&g, &SamplerConfig::new(2, 3)).unwrap()
    }

    #[test]
    fn roundtrip_is_lossless() {
        let tr = small_trace();
        let bytes = trace_to_bytes(&tr).unwrap();
        let back = read_trace(bytes.as_slice()).unwrap();
        assert_eq!(back.steps, tr.steps);
        assert_eq!(back.records, tr.records);
        assert_eq!(back.graph.edges, tr.graph.edges);
        for (a, b) in back.graph.nodes.iter().zip(&tr.graph.nodes) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.weight, b.weight);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = trace_to_bytes(&small_trace()).unwrap();
        bytes[0] = b'X';
        let err = read_trace(bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("not a trace file"), "{err}");
    }

    #[test]
    fn truncation_rejected() {
        let bytes = trace_to_bytes(&small_trace()).unwrap();
        let err = read_trace(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::TraceFormat(_)), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = trace_to_bytes(&small_trace()).unwrap();
        bytes[4] = 99;
        assert!(read_trace(bytes.as_slice()).is_err());
    }

    #[test]
    fn bytes_stable_for_fixed_seed() {
        let a = trace_to_bytes(&small_trace()).unwrap();
        let b = trace_to_bytes(&small_trace()).unwrap();
        assert_eq!(a, b);
    }
}
