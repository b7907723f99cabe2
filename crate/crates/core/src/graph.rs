//! Interaction graph: a complete, unidirectional bipartite graph from instrument
//! instances (sources) to target-class embeddings (destinations), message
//! passing into the destinations, and per-edge score and verb heads.

use candle_core::{Tensor, D};
use candle_nn::{Init, Linear, Module, VarBuilder};

use crate::backbone::InstrumentFeatures;
use crate::config::{MessagePassing, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{canonical_rows, linear, softmax_last, Mlp};

/// Projected node features. Edge `(i, j)` has flat index `i * N + j`.
#[derive(Clone, Debug)]
pub struct BipartiteGraph {
    /// `(O, d')`.
    pub source_nodes: Tensor,
    /// `(N, d')`.
    pub dest_nodes: Tensor,
}

impl BipartiteGraph {
    pub fn num_sources(&self) -> usize {
        self.source_nodes.dims()[0]
    }

    pub fn num_dests(&self) -> usize {
        self.dest_nodes.dims()[0]
    }

    pub fn num_edges(&self) -> usize {
        self.num_sources() * self.num_dests()
    }

    pub fn edge_index(&self, i: usize, j: usize) -> usize {
        i * self.num_dests() + j
    }

    /// All `(source, dest)` pairs in flat-index order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> {
        let n = self.num_dests();
        (0..self.num_sources()).flat_map(move |i| (0..n).map(move |j| (i, j)))
    }
}

#[derive(Clone, Debug)]
pub struct EdgeSet {
    /// `(O*N, 2d')`.
    pub edge_features: Tensor,
    /// `(O*N,)` raw logits.
    pub edge_scores: Tensor,
    /// `(O*N, V+1)`, background verb last.
    pub verb_logits: Tensor,
    pub num_instruments: usize,
    pub num_targets: usize,
}

/// Host copy of the edge logits, the decoder's input.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeLogits {
    pub num_instruments: usize,
    pub num_targets: usize,
    /// Verb classes including background.
    pub num_verb_classes: usize,
    /// Row-major `(O, N)`.
    pub scores: Vec<f64>,
    /// Row-major `(O*N, V+1)`.
    pub verbs: Vec<f64>,
}

impl EdgeLogits {
    pub fn instrument_scores(&self, i: usize) -> &[f64] {
        &self.scores[i * self.num_targets..(i + 1) * self.num_targets]
    }

    pub fn verb_row(&self, i: usize, j: usize) -> &[f64] {
        let e = i * self.num_targets + j;
        &self.verbs[e * self.num_verb_classes..(e + 1) * self.num_verb_classes]
    }
}

impl EdgeSet {
    pub fn logits(&self) -> Result<EdgeLogits> {
        let v1 = self.verb_logits.dim(1)?;
        let host = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1()?)
        };
        Ok(EdgeLogits {
            num_instruments: self.num_instruments,
            num_targets: self.num_targets,
            num_verb_classes: v1,
            scores: host(&self.edge_scores)?,
            verbs: host(&self.verb_logits)?,
        })
    }
}

/// One message-passing layer. Every variant adds a learned self-transform of
/// the destination so destinations with no in-neighbors stay well defined.
#[derive(Clone, Debug)]
enum MpLayer {
    Gat {
        heads: usize,
        transform: Linear,
        attn_src: Tensor,
        attn_dst: Tensor,
        combine: Linear,
        self_path: Linear,
    },
    Gcn {
        neighbor: Linear,
        self_path: Linear,
    },
    Sage {
        neighbor: Linear,
        self_path: Linear,
    },
}

const GAT_NEGATIVE_SLOPE: f64 = 0.2;

impl MpLayer {
    fn new(variant: MessagePassing, d: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        let self_path = linear(d, d, vb.pp("self_path"))?;
        Ok(match variant {
            MessagePassing::Gat => {
                if heads == 0 || d % heads != 0 {
                    return Err(Error::Config(format!("d' = {d} is not divisible by {heads} GAT heads")));
                }
                let dh = d / heads;
                let init = Init::Randn {
                    mean: 0.0,
                    stdev: (1.0 / dh as f64).sqrt(),
                };
                MpLayer::Gat {
                    heads,
                    transform: candle_nn::linear_no_bias(d, d, vb.pp("transform"))?,
                    attn_src: vb.get_with_hints((heads, dh), "attn_src", init)?,
                    attn_dst: vb.get_with_hints((heads, dh), "attn_dst", init)?,
                    combine: linear(d, d, vb.pp("combine"))?,
                    self_path,
                }
            }
            MessagePassing::Gcn => MpLayer::Gcn {
                neighbor: linear(d, d, vb.pp("neighbor"))?,
                self_path,
            },
            MessagePassing::Sage => MpLayer::Sage {
                neighbor: linear(d, d, vb.pp("neighbor"))?,
                self_path,
            },
        })
    }

    /// New destination features, and for GAT the attention weights `(heads, N, O)`.
    fn forward(&self, src: &Tensor, dst: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let (o, d) = src.dims2()?;
        let n = dst.dim(0)?;
        match self {
            MpLayer::Gat {
                heads,
                transform,
                attn_src,
                attn_dst,
                combine,
                self_path,
            } => {
                let own = self_path.forward(dst)?;
                if o == 0 {
                    return Ok((own, None));
                }
                let h = *heads;
                let dh = d / h;
                let per_head = |x: &Tensor, rows: usize| -> Result<Tensor> {
                    Ok(transform
                        .forward(x)?
                        .reshape((rows, h, dh))?
                        .transpose(0, 1)?
                        .contiguous()?)
                };
                let zs = per_head(src, o)?;
                let zd = per_head(dst, n)?;
                let s_src = zs.broadcast_mul(&attn_src.unsqueeze(1)?)?.sum(D::Minus1)?;
                let s_dst = zd.broadcast_mul(&attn_dst.unsqueeze(1)?)?.sum(D::Minus1)?;
                let logits = s_dst.unsqueeze(2)?.broadcast_add(&s_src.unsqueeze(1)?)?;
                let logits = candle_nn::ops::leaky_relu(&logits, GAT_NEGATIVE_SLOPE)?;
                let alpha = softmax_last(&logits)?;
                let messages = alpha
                    .matmul(&zs)?
                    .transpose(0, 1)?
                    .contiguous()?
                    .reshape((n, d))?;
                Ok(((combine.forward(&messages)? + own)?, Some(alpha)))
            }
            MpLayer::Gcn { neighbor, self_path } => {
                let own = self_path.forward(dst)?;
                if o == 0 {
                    return Ok((own, None));
                }
                // symmetric normalization on the complete bipartite graph: 1/sqrt(deg_u deg_v)
                let agg = (src.sum_keepdim(0)? / ((o * n) as f64).sqrt())?;
                Ok((neighbor.forward(&agg)?.broadcast_add(&own)?, None))
            }
            MpLayer::Sage { neighbor, self_path } => {
                let own = self_path.forward(dst)?;
                if o == 0 {
                    return Ok((own, None));
                }
                let agg = src.mean_keepdim(0)?;
                Ok((neighbor.forward(&agg)?.broadcast_add(&own)?, None))
            }
        }
    }
}

/// Result of message passing: the updated graph and per-layer GAT attention.
#[derive(Clone, Debug)]
pub struct MessagePassingOutput {
    pub graph: BipartiteGraph,
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct InteractionGraph {
    projection: Linear,
    layers: Vec<MpLayer>,
    edge_score: Mlp,
    verb_head: Mlp,
    d: usize,
    d_prime: usize,
    variant: MessagePassing,
}

impl InteractionGraph {
    pub fn new(cfg: &ModelConfig, num_verbs: usize, vb: VarBuilder) -> Result<Self> {
        let dp = cfg.d_prime;
        let head_dims = |out: usize| {
            if cfg.edge_hidden == 0 {
                vec![2 * dp, out]
            } else {
                vec![2 * dp, cfg.edge_hidden, out]
            }
        };
        let layers = (0..cfg.mp_layers)
            .map(|k| MpLayer::new(cfg.mp_variant, dp, cfg.mp_heads, vb.pp(format!("mp{k}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            projection: linear(cfg.d, dp, vb.pp("projection"))?,
            layers,
            edge_score: Mlp::new(&head_dims(1), vb.pp("edge_score"))?,
            verb_head: Mlp::new(&head_dims(num_verbs + 1), vb.pp("verb_head"))?,
            d: cfg.d,
            d_prime: dp,
            variant: cfg.mp_variant,
        })
    }

    pub fn variant(&self) -> MessagePassing {
        self.variant
    }

    /// Shared linear projection of both node sets to `d'`.
    pub fn project_nodes(&self, instruments: &InstrumentFeatures, targets: &Tensor) -> Result<BipartiteGraph> {
        let (_, d) = targets.dims2()?;
        if d != self.d || instruments.0.dim(1)? != self.d {
            return Err(Error::Validation(format!(
                "graph nodes must have width {}, got {d}",
                self.d
            )));
        }
        Ok(BipartiteGraph {
            source_nodes: self.projection.forward(&instruments.0)?,
            dest_nodes: self.projection.forward(targets)?,
        })
    }

    /// Updates destination nodes; sources are passed through untouched.
    /// Aggregation visits sources in canonical row order, so the result does not
    /// depend on the order of the instrument instances. GAT attention columns
    /// follow that canonical order.
    pub fn message_pass(&self, graph: BipartiteGraph) -> Result<MessagePassingOutput> {
        let mut dst = graph.dest_nodes;
        let mut attention = Vec::new();
        let sources = canonical_rows(&graph.source_nodes)?;
        for (k, layer) in self.layers.iter().enumerate() {
            let (next, alpha) = layer.forward(&sources, &dst)?;
            dst = if k + 1 < self.layers.len() { next.relu()? } else { next };
            attention.extend(alpha);
        }
        Ok(MessagePassingOutput {
            graph: BipartiteGraph {
                source_nodes: graph.source_nodes,
                dest_nodes: dst,
            },
            attention,
        })
    }

    pub fn edge_heads(&self, graph: &BipartiteGraph) -> Result<EdgeSet> {
        let (o, n) = (graph.num_sources(), graph.num_dests());
        let dp = self.d_prime;
        let src = &graph.source_nodes;
        let features = if o == 0 {
            Tensor::zeros((0, 2 * dp), src.dtype(), src.device())?
        } else {
            let s = src.unsqueeze(1)?.broadcast_as((o, n, dp))?.reshape((o * n, dp))?;
            let t = graph
                .dest_nodes
                .unsqueeze(0)?
                .broadcast_as((o, n, dp))?
                .reshape((o * n, dp))?;
            Tensor::cat(&[&s, &t], 1)?
        };
        let edge_scores = self.edge_score.forward(&features)?.squeeze(1)?;
        let verb_logits = self.verb_head.forward(&features)?;
        Ok(EdgeSet {
            edge_features: features,
            edge_scores,
            verb_logits,
            num_instruments: o,
            num_targets: n,
        })
    }

    pub fn forward(&self, instruments: &InstrumentFeatures, targets: &Tensor) -> Result<EdgeSet> {
        let graph = self.project_nodes(instruments, targets)?;
        let out = self.message_pass(graph)?;
        self.edge_heads(&out.graph)
    }
}
