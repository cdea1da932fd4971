//! Frozen message-passing encoders with per-layer prompt injection.

mod pretrain;

pub use pretrain::{edge_pair_loss, pretrain_edgepred, PretrainConfig, PretrainOutcome};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autodiff::{ReduceMode, Tape, Var};
use crate::checkpoint::{self, CheckpointError, BACKBONE_MAGIC};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::prompt::{BoundPrompt, LayerTrace};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Gcn,
    Gin,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Gcn => "gcn",
            Arch::Gin => "gin",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Arch::Gcn),
            "gin" => Ok(Arch::Gin),
            other => Err(format!("unknown architecture {other:?} (expected gcn or gin)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<S> {
    Gcn {
        weight: Tensor<S>,
        bias: Tensor<S>,
    },
    /// Two-layer perceptron applied to `(1 + eps) h_i + sum_j h_j`.
    Gin {
        w1: Tensor<S>,
        b1: Tensor<S>,
        w2: Tensor<S>,
        b2: Tensor<S>,
        eps: Tensor<S>,
    },
}

impl<S: Scalar> LayerParams<S> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<S>)> {
        match self {
            LayerParams::Gcn { weight, bias } => vec![("weight", weight), ("bias", bias)],
            LayerParams::Gin { w1, b1, w2, b2, eps } => {
                vec![("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2), ("eps", eps)]
            }
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            LayerParams::Gcn { weight, bias } => vec![weight, bias],
            LayerParams::Gin { w1, b1, w2, b2, eps } => vec![w1, b1, w2, b2, eps],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub objective: String,
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneCheckpoint<S> {
    pub arch: Arch,
    pub dims: Vec<usize>,
    pub layers: Vec<LayerParams<S>>,
    pub meta: CheckpointMeta,
}

impl<S: Scalar> BackboneCheckpoint<S> {
    /// Glorot-initialized weights, zero biases and `eps = 0`.
    pub fn init(arch: Arch, dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "backbone needs at least one layer and positive widths, got dims {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| match arch {
                Arch::Gcn => LayerParams::Gcn {
                    weight: Tensor::glorot(w[0], w[1], &mut rng),
                    bias: Tensor::zeros(1, w[1]),
                },
                Arch::Gin => LayerParams::Gin {
                    w1: Tensor::glorot(w[0], w[1], &mut rng),
                    b1: Tensor::zeros(1, w[1]),
                    w2: Tensor::glorot(w[1], w[1], &mut rng),
                    b2: Tensor::zeros(1, w[1]),
                    eps: Tensor::zeros(1, 1),
                },
            })
            .collect();
        Ok(Self {
            arch,
            dims: dims.to_vec(),
            layers,
            meta: CheckpointMeta {
                seed,
                objective: "none".into(),
                epochs: 0,
                final_loss: None,
            },
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims non-empty")
    }

    /// Width of the per-edge messages at `layer`: the layer output for GCN,
    /// the layer input for GIN (whose messages are raw neighbor states).
    pub fn message_dim(&self, layer: usize) -> usize {
        match self.arch {
            Arch::Gcn => self.dims[layer + 1],
            Arch::Gin => self.dims[layer],
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, p)| p.tensors().into_iter().map(move |(n, t)| (format!("layer{l}.{n}"), t)))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers.iter_mut().flat_map(LayerParams::tensors_mut).collect()
    }

    /// Loads the parameters onto `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<S>, trainable: bool) -> BoundBackbone<'t, S> {
        let put = |t: &Tensor<S>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|p| match p {
                LayerParams::Gcn { weight, bias } => BoundLayer::Gcn {
                    weight: put(weight),
                    bias: put(bias),
                },
                LayerParams::Gin { w1, b1, w2, b2, eps } => BoundLayer::Gin {
                    w1: put(w1),
                    b1: put(b1),
                    w2: put(w2),
                    b2: put(b2),
                    eps: put(eps),
                },
            })
            .collect();
        BoundBackbone {
            arch: self.arch,
            dims: self.dims.clone(),
            layers,
        }
    }

    /// Checks that `g` suits this encoder: feature width and self-loop state.
    pub fn check_graph(&self, g: &Graph<S>) -> Result<()> {
        if g.feature_dim() != self.input_dim() {
            return Err(Error::DimMismatch {
                what: "graph feature dim".into(),
                expected: self.input_dim(),
                found: g.feature_dim(),
            });
        }
        check_loops(self.arch, g)
    }

    /// Drops raw `(i, i)` edges, then adds exactly one self-loop per node for GCN.
    pub fn prepare_graph(&self, g: &Graph<S>) -> Result<Graph<S>> {
        let bare = g.without_self_loops();
        match self.arch {
            Arch::Gcn => Ok(bare.add_self_loops()?),
            Arch::Gin => Ok(bare),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut header = Map::new();
        header.insert("arch".into(), Value::String(self.arch.name().into()));
        header.insert("num_layers".into(), self.num_layers().into());
        header.insert("dims".into(), serde_json::to_value(&self.dims).expect("dims"));
        header.insert("metadata".into(), serde_json::to_value(&self.meta).expect("meta"));
        checkpoint::write_container(path, BACKBONE_MAGIC, header, &self.named_tensors())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let mut c = checkpoint::read_container::<S>(path, BACKBONE_MAGIC)?;
        let arch: Arch = c.header_field("arch")?;
        let dims: Vec<usize> = c.header_field("dims")?;
        let num_layers: usize = c.header_field("num_layers")?;
        let meta: CheckpointMeta = c.header_field("metadata")?;
        if dims.len() != num_layers + 1 || num_layers == 0 {
            return Err(CheckpointError::Manifest(format!(
                "{num_layers} layers inconsistent with dims {dims:?}"
            )));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let mut take = |n: &str, shape: [usize; 2]| -> Result<Tensor<S>, CheckpointError> {
                let t = c.take(&format!("layer{l}.{n}"))?;
                if t.shape() != shape {
                    return Err(CheckpointError::Manifest(format!(
                        "layer{l}.{n} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                Ok(t)
            };
            let (i, o) = (dims[l], dims[l + 1]);
            layers.push(match arch {
                Arch::Gcn => LayerParams::Gcn {
                    weight: take("weight", [i, o])?,
                    bias: take("bias", [1, o])?,
                },
                Arch::Gin => LayerParams::Gin {
                    w1: take("w1", [i, o])?,
                    b1: take("b1", [1, o])?,
                    w2: take("w2", [o, o])?,
                    b2: take("b2", [1, o])?,
                    eps: take("eps", [1, 1])?,
                },
            });
        }
        Ok(Self {
            arch,
            dims,
            layers,
            meta,
        })
    }
}

fn check_loops<S: Scalar>(arch: Arch, g: &Graph<S>) -> Result<()> {
    match arch {
        Arch::Gcn if !g.has_self_loops() => {
            Err(Error::Precondition("GCN layers require a graph with self-loops".into()))
        }
        Arch::Gin if g.has_self_loops() => Err(Error::Precondition(
            "GIN layers require a graph without added self-loops".into(),
        )),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BoundLayer<'t, S: Scalar> {
    Gcn {
        weight: Var<'t, S>,
        bias: Var<'t, S>,
    },
    Gin {
        w1: Var<'t, S>,
        b1: Var<'t, S>,
        w2: Var<'t, S>,
        b2: Var<'t, S>,
        eps: Var<'t, S>,
    },
}

#[derive(Debug, Clone)]
pub struct BoundBackbone<'t, S: Scalar> {
    pub arch: Arch,
    pub dims: Vec<usize>,
    pub layers: Vec<BoundLayer<'t, S>>,
}

impl<'t, S: Scalar> BoundBackbone<'t, S> {
    /// Vars in the same order as [`BackboneCheckpoint::tensors_mut`].
    pub fn vars(&self) -> Vec<Var<'t, S>> {
        self.layers
            .iter()
            .flat_map(|l| match *l {
                BoundLayer::Gcn { weight, bias } => vec![weight, bias],
                BoundLayer::Gin { w1, b1, w2, b2, eps } => vec![w1, b1, w2, b2, eps],
            })
            .collect()
    }
}

/// `1/sqrt(deg(dst) deg(src))` per edge, in-degrees counted on `g` as stored.
pub fn gcn_edge_coefficients<S: Scalar>(g: &Graph<S>) -> Tensor<S> {
    let deg = g.in_degrees();
    let coef = g
        .edges()
        .map(|(s, d)| S::one() / S::from_usize_lossy(deg[s] * deg[d]).sqrt())
        .collect::<Vec<_>>();
    Tensor::column(&coef)
}

/// Normalized GCN messages `c_ij (h_j W)`, one row per edge.
pub fn gcn_messages<'t, S: Scalar>(g: &Graph<S>, h: Var<'t, S>, weight: Var<'t, S>) -> Result<Var<'t, S>> {
    if !g.has_self_loops() {
        return Err(Error::Precondition("GCN layers require a graph with self-loops".into()));
    }
    check_rows("hidden state", h, g.num_nodes())?;
    let hw = h.matmul(weight)?;
    let coef = h.tape().constant(gcn_edge_coefficients(g));
    Ok(hw.gather_rows(g.sources())?.scale_rows(coef)?)
}

pub fn gcn_update<'t, S: Scalar>(aggregated: Var<'t, S>, bias: Var<'t, S>, last: bool) -> Result<Var<'t, S>> {
    let z = aggregated.add(bias)?;
    Ok(if last { z } else { z.relu() })
}

/// GIN messages are the raw source states.
pub fn gin_messages<'t, S: Scalar>(g: &Graph<S>, h: Var<'t, S>) -> Result<Var<'t, S>> {
    check_rows("hidden state", h, g.num_nodes())?;
    Ok(h.gather_rows(g.sources())?)
}

/// The perceptron half of GIN's update, without the inter-layer nonlinearity.
pub type GinMlp<'a, 't, S> = &'a dyn Fn(Var<'t, S>) -> Result<Var<'t, S>>;

/// `mlp((1 + eps) h_i + m_i)`; `eps` is a `1 × 1` var.
pub fn gin_update<'t, S: Scalar>(
    h_prev: Var<'t, S>,
    aggregated: Var<'t, S>,
    eps: Var<'t, S>,
    mlp: GinMlp<'_, 't, S>,
) -> Result<Var<'t, S>> {
    let n = h_prev.shape()[0];
    let ones = h_prev.tape().constant(Tensor::ones(n, 1));
    let self_weight = ones.matmul(eps)?.offset(S::one());
    let z = h_prev.scale_rows(self_weight)?.add(aggregated)?;
    mlp(z)
}

fn check_rows<S: Scalar>(what: &str, v: Var<'_, S>, rows: usize) -> Result<()> {
    let found = v.shape()[0];
    if found != rows {
        return Err(Error::DimMismatch {
            what: format!("{what} rows"),
            expected: rows,
            found,
        });
    }
    Ok(())
}

/// Output of an encoder pass.
#[derive(Debug, Clone)]
pub struct Encoding<'t, S: Scalar> {
    pub embeddings: Var<'t, S>,
    /// One entry per layer when a prompt is attached.
    pub traces: Vec<LayerTrace<'t, S>>,
}

/// Runs every layer on `g`, passing messages through `prompt` before aggregation.
///
/// `g` must already be prepared for the architecture (see
/// [`BackboneCheckpoint::prepare_graph`]).
pub fn encode<'t, S: Scalar>(
    g: &Graph<S>,
    backbone: &BoundBackbone<'t, S>,
    features: Var<'t, S>,
    prompt: Option<&BoundPrompt<'t, S>>,
) -> Result<Encoding<'t, S>> {
    if features.shape()[1] != backbone.dims[0] {
        return Err(Error::DimMismatch {
            what: "graph feature dim".into(),
            expected: backbone.dims[0],
            found: features.shape()[1],
        });
    }
    check_loops(backbone.arch, g)?;
    if let Some(p) = prompt {
        if p.num_layers() != backbone.layers.len() {
            return Err(Error::DimMismatch {
                what: "prompt layer count".into(),
                expected: backbone.layers.len(),
                found: p.num_layers(),
            });
        }
    }
    let n = g.num_nodes();
    let last = backbone.layers.len() - 1;
    let mut h = features;
    let mut traces = Vec::new();
    for (l, layer) in backbone.layers.iter().enumerate() {
        let messages = match *layer {
            BoundLayer::Gcn { weight, .. } => gcn_messages(g, h, weight)?,
            BoundLayer::Gin { .. } => gin_messages(g, h)?,
        };
        let messages = match prompt {
            Some(p) => {
                let (m, trace) = p.apply_layer(l, g, h, messages)?;
                traces.push(trace);
                m
            }
            None => messages,
        };
        let agg = messages.segment_reduce(g.destinations(), n, ReduceMode::Sum)?;
        h = match *layer {
            BoundLayer::Gcn { bias, .. } => gcn_update(agg, bias, l == last)?,
            BoundLayer::Gin { w1, b1, w2, b2, eps } => {
                let mlp = |z: Var<'t, S>| -> Result<Var<'t, S>> { Ok(z.affine(w1, b1)?.relu().affine(w2, b2)?) };
                let out = gin_update(h, agg, eps, &mlp)?;
                if l == last {
                    out
                } else {
                    out.relu()
                }
            }
        };
    }
    Ok(Encoding { embeddings: h, traces })
}

/// Convenience forward pass on a fresh tape, returning plain embeddings.
pub fn forward<S: Scalar>(
    g: &Graph<S>,
    ckpt: &BackboneCheckpoint<S>,
    prompt: Option<&crate::prompt::PromptState<S>>,
) -> Result<Tensor<S>> {
    ckpt.check_graph(g)?;
    let tape = Tape::new();
    let bb = ckpt.bind(&tape, false);
    let x = tape.constant(g.features().clone());
    let bound = prompt.map(|p| p.bind(&tape, Default::default()));
    Ok(encode(g, &bb, x, bound.as_ref())?.embeddings.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Mean,
    Sum,
}

impl From<Readout> for ReduceMode {
    fn from(r: Readout) -> Self {
        match r {
            Readout::Mean => ReduceMode::Mean,
            Readout::Sum => ReduceMode::Sum,
        }
    }
}

/// Pools node rows into one row per graph id in `membership`.
pub fn batched_readout<'t, S: Scalar>(
    h: Var<'t, S>,
    membership: &[usize],
    num_graphs: usize,
    mode: Readout,
) -> Result<Var<'t, S>> {
    let mut seen = vec![false; num_graphs];
    for &m in membership {
        if let Some(s) = seen.get_mut(m) {
            *s = true;
        }
    }
    if let Some(empty) = seen.iter().position(|s| !s) {
        return Err(Error::Precondition(format!("graph {empty} has no nodes to read out")));
    }
    Ok(h.segment_reduce(membership, num_graphs, mode.into())?)
}

pub fn graph_readout<'t, S: Scalar>(h: Var<'t, S>, mode: Readout) -> Result<Var<'t, S>> {
    let n = h.shape()[0];
    if n == 0 {
        return Err(Error::Precondition("cannot read out an empty graph".into()));
    }
    batched_readout(h, &vec![0; n], 1, mode)
}

#[cfg(test)]
mod tests;
