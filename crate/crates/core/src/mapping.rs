//! Mapping a relational graph onto network layers as channel masks.
//!
//! Each layer's channels are split into `N` contiguous groups, one per graph
//! node. A weight connecting an input channel of node `j` to an output
//! channel of node `i` survives iff `i == j` or nodes `i` and `j` are
//! adjacent. Masks work at channel granularity: every spatial tap of a kept
//! channel pair is kept.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{GraphError, RelationalGraph};
use crate::net::{LayerGeometry, ModelSpec, SpecError};

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("{layer}: {channels} channels cannot host {nodes} graph nodes")]
    TooFewChannels {
        layer: String,
        channels: usize,
        nodes: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask plan invalid: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Channel → node ownership for one side of a layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelAssignment {
    pub node_count: usize,
    pub node_of_channel: Vec<usize>,
}

impl ChannelAssignment {
    pub fn channel_count(&self) -> usize {
        self.node_of_channel.len()
    }

    pub fn channels_of(&self, node: usize) -> usize {
        self.node_of_channel.iter().filter(|&&n| n == node).count()
    }
}

/// Splits `channels` into `nodes` contiguous groups in node order; the first
/// `channels % nodes` nodes own one extra channel.
pub fn assign_channels(channels: usize, nodes: usize) -> Result<ChannelAssignment, MappingError> {
    if nodes == 0 || channels < nodes {
        return Err(MappingError::TooFewChannels {
            layer: "layer".into(),
            channels,
            nodes,
        });
    }
    let base = channels / nodes;
    let extra = channels % nodes;
    let node_of_channel = (0..nodes)
        .flat_map(|node| std::iter::repeat_n(node, base + usize::from(node < extra)))
        .collect();
    Ok(ChannelAssignment {
        node_count: nodes,
        node_of_channel,
    })
}

/// Binary mask over a weight tensor laid out as `[out][in][taps]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub out_channels: usize,
    pub in_channels: usize,
    pub taps: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn block(&self, out: usize, inp: usize) -> bool {
        self.bits[(out * self.in_channels + inp) * self.taps]
    }

    pub fn density(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }

    /// Run lengths of alternating values, starting with a run of zeros
    /// (possibly empty).
    pub fn to_runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut value = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b == value {
                len += 1;
            } else {
                runs.push(len);
                value = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(
        out_channels: usize,
        in_channels: usize,
        taps: usize,
        runs: &[u32],
    ) -> Result<Self, MappingError> {
        let total = out_channels * in_channels * taps;
        let mut bits = Vec::with_capacity(total);
        let mut value = false;
        for &r in runs {
            bits.extend(std::iter::repeat_n(value, r as usize));
            value = !value;
        }
        if bits.len() != total {
            return Err(MappingError::InvalidPlan(format!(
                "run lengths cover {} entries, expected {total}",
                bits.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            taps,
            bits,
        })
    }
}

/// Builds the mask for a `[out][in][taps]` weight tensor.
pub fn build_mask(
    shape: [usize; 3],
    in_assign: &ChannelAssignment,
    out_assign: &ChannelAssignment,
    g: &RelationalGraph,
) -> Result<Mask, MappingError> {
    let [out_channels, in_channels, taps] = shape;
    if out_assign.channel_count() != out_channels || in_assign.channel_count() != in_channels {
        return Err(MappingError::ShapeMismatch(format!(
            "weights {out_channels}x{in_channels} vs assignments {}x{}",
            out_assign.channel_count(),
            in_assign.channel_count()
        )));
    }
    let n = g.node_count();
    if in_assign.node_count != n || out_assign.node_count != n {
        return Err(MappingError::ShapeMismatch(format!(
            "assignments target {}/{} nodes, graph has {n}",
            in_assign.node_count, out_assign.node_count
        )));
    }
    let mut bits = Vec::with_capacity(out_channels * in_channels * taps);
    for &node_out in &out_assign.node_of_channel {
        for &node_in in &in_assign.node_of_channel {
            let keep = node_out == node_in || g.has_edge(node_out, node_in);
            bits.extend(std::iter::repeat_n(keep, taps));
        }
    }
    Ok(Mask {
        out_channels,
        in_channels,
        taps,
        bits,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    pub layer: usize,
    pub input: ChannelAssignment,
    pub output: ChannelAssignment,
    pub mask: Mask,
}

/// Masks for every maskable layer of one model, all derived from one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub graph: RelationalGraph,
    pub graph_name: String,
    pub graph_hash: String,
    pub layers: Vec<LayerMask>,
}

impl MaskPlan {
    pub fn mask_for(&self, layer: usize) -> Option<&Mask> {
        self.layers.iter().find(|l| l.layer == layer).map(|l| &l.mask)
    }

    /// Fraction of masked-out weights over all maskable layers.
    pub fn sparsity(&self) -> f64 {
        let (zeros, total) = self.layers.iter().fold((0usize, 0usize), |(z, t), l| {
            let kept = l.mask.bits.iter().filter(|&&b| b).count();
            (z + l.mask.len() - kept, t + l.mask.len())
        });
        if total == 0 {
            0.0
        } else {
            zeros as f64 / total as f64
        }
    }

    /// SHA-256 of the serialized plan, hex encoded.
    pub fn content_hash(&self) -> Result<String, MappingError> {
        let json = serde_json::to_vec(&self.to_file())?;
        Ok(hex::encode(Sha256::digest(&json)))
    }

    pub fn to_file(&self) -> PlanFile {
        PlanFile {
            graph: GraphRef {
                name: self.graph_name.clone(),
                sha256: self.graph_hash.clone(),
            },
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    layer: l.layer,
                    shape: [l.mask.out_channels, l.mask.in_channels, l.mask.taps],
                    input_nodes: l.input.node_of_channel.clone(),
                    output_nodes: l.output.node_of_channel.clone(),
                    runs: l.mask.to_runs(),
                })
                .collect(),
        }
    }

    /// Rebuilds a plan from its file record and the referenced graph. The
    /// graph hash must match and the stored masks must agree with the ones
    /// the graph implies.
    pub fn from_file(file: &PlanFile, graph: RelationalGraph) -> Result<Self, MappingError> {
        let hash = graph.content_hash()?;
        if hash != file.graph.sha256 {
            return Err(MappingError::InvalidPlan(format!(
                "graph hash {hash} does not match plan reference {}",
                file.graph.sha256
            )));
        }
        let n = graph.node_count();
        let mut layers = Vec::with_capacity(file.layers.len());
        for rec in &file.layers {
            let [o, i, t] = rec.shape;
            let input = ChannelAssignment {
                node_count: n,
                node_of_channel: rec.input_nodes.clone(),
            };
            let output = ChannelAssignment {
                node_count: n,
                node_of_channel: rec.output_nodes.clone(),
            };
            let mask = Mask::from_runs(o, i, t, &rec.runs)?;
            if mask != build_mask(rec.shape, &input, &output, &graph)? {
                return Err(MappingError::InvalidPlan(format!(
                    "layer {} mask disagrees with the referenced graph",
                    rec.layer
                )));
            }
            layers.push(LayerMask {
                layer: rec.layer,
                input,
                output,
                mask,
            });
        }
        Ok(Self {
            graph,
            graph_name: file.graph.name.clone(),
            graph_hash: hash,
            layers,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRef {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub shape: [usize; 3],
    pub input_nodes: Vec<usize>,
    pub output_nodes: Vec<usize>,
    pub runs: Vec<u32>,
}

/// On-disk mask plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub graph: GraphRef,
    pub layers: Vec<LayerRecord>,
}

/// Assigns channels and builds masks for every maskable layer of `spec`.
pub fn plan_for_model(
    spec: &ModelSpec,
    g: &RelationalGraph,
    graph_name: &str,
) -> Result<MaskPlan, MappingError> {
    let geometry = spec.geometry()?;
    let n = g.node_count();
    let mut layers = Vec::new();
    for (index, geom) in geometry.iter().enumerate() {
        if !spec.layers[index].is_maskable() {
            continue;
        }
        let Some([out_ch, in_ch, taps]) = geom.weight_shape() else {
            continue;
        };
        let name = format!("layer {index} ({})", spec.layers[index].kind_name());
        for channels in [in_ch, out_ch] {
            if channels < n {
                return Err(MappingError::TooFewChannels {
                    layer: name,
                    channels,
                    nodes: n,
                });
            }
        }
        let input = assign_channels(in_ch, n)?;
        let output = assign_channels(out_ch, n)?;
        let mask = build_mask([out_ch, in_ch, taps], &input, &output, g)?;
        layers.push(LayerMask {
            layer: index,
            input,
            output,
            mask,
        });
    }
    Ok(MaskPlan {
        graph: g.clone(),
        graph_name: graph_name.to_owned(),
        graph_hash: g.content_hash()?,
        layers,
    })
}

/// Retained and total multiply-accumulates of one layer per input sample.
pub fn layer_macs(geom: &LayerGeometry, mask: Option<&Mask>) -> (u64, u64) {
    let Some([_, _, taps]) = geom.weight_shape() else {
        return (0, 0);
    };
    let positions = geom.output_positions() as u64;
    let weights = geom.weight_len() as u64;
    let total = weights * positions;
    let kept = match mask {
        Some(m) => m.bits.iter().filter(|&&b| b).count() as u64 * positions,
        None => total,
    };
    debug_assert!(taps > 0);
    (kept, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generate_regular_graph;

    #[test]
    fn even_split() {
        let a = assign_channels(64, 64).unwrap();
        assert!((0..64).all(|n| a.channels_of(n) == 1));
    }

    #[test]
    fn uneven_split_gives_extra_to_first_nodes() {
        let a = assign_channels(70, 64).unwrap();
        assert!((0..6).all(|n| a.channels_of(n) == 2));
        assert!((6..64).all(|n| a.channels_of(n) == 1));
        assert_eq!(&a.node_of_channel[..4], &[0, 0, 1, 1]);
    }

    #[test]
    fn too_few_channels() {
        assert!(matches!(
            assign_channels(32, 64),
            Err(MappingError::TooFewChannels {
                channels: 32,
                nodes: 64,
                ..
            })
        ));
    }

    #[test]
    fn complete_graph_keeps_everything() {
        let g = RelationalGraph::complete(8).unwrap();
        let a = assign_channels(16, 8).unwrap();
        let m = build_mask([16, 16, 9], &a, &a, &g).unwrap();
        assert!(m.bits().iter().all(|&b| b));
    }

    #[test]
    fn k4_minus_edge() {
        let g = RelationalGraph::from_edges(4, &[(0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], 0)
            .unwrap();
        let a = assign_channels(4, 4).unwrap();
        let m = build_mask([4, 4, 1], &a, &a, &g).unwrap();
        for o in 0..4 {
            for i in 0..4 {
                let dropped = (o, i) == (0, 1) || (o, i) == (1, 0);
                assert_eq!(m.block(o, i), !dropped, "block ({o},{i})");
            }
        }
    }

    #[test]
    fn regular_graph_density() {
        let g = generate_regular_graph(64, 3, 2, 1_000_000).unwrap();
        let a = assign_channels(64, 64).unwrap();
        let m = build_mask([64, 64, 1], &a, &a, &g).unwrap();
        assert_eq!(m.density(), 4.0 / 64.0);
        // Every output group reads from its k neighbors plus itself.
        for o in 0..64 {
            assert_eq!((0..64).filter(|&i| m.block(o, i)).count(), 4);
            for i in 0..64 {
                assert_eq!(m.block(o, i), m.block(i, o));
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let g = RelationalGraph::complete(4).unwrap();
        let a = assign_channels(4, 4).unwrap();
        let b = assign_channels(8, 4).unwrap();
        assert!(matches!(
            build_mask([4, 4, 1], &a, &b, &g),
            Err(MappingError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn runs_round_trip() {
        let g = generate_regular_graph(8, 3, 1, 10_000).unwrap();
        let a = assign_channels(10, 8).unwrap();
        let m = build_mask([10, 10, 3], &a, &a, &g).unwrap();
        let back = Mask::from_runs(10, 10, 3, &m.to_runs()).unwrap();
        assert_eq!(back, m);
        assert!(Mask::from_runs(10, 10, 2, &m.to_runs()).is_err());
    }
}
