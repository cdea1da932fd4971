//! Immutable attributed graphs in destination-grouped compressed form.
//!
//! Edge `e` points from `sources()[e]` into `destinations()[e]`; the edges
//! entering node `i` occupy the contiguous range `offsets[i]..offsets[i+1]`
//! and are ordered by source index. Every per-neighborhood operation in the
//! encoders is therefore a scan over that range.

mod dataset;
mod permutation;
mod sbm;
mod split;

use thiserror::Error;

pub use dataset::{load_dataset, save_dataset, Dataset, DatasetError, DatasetMeta, Task};
pub use permutation::Permutation;
pub use sbm::{sbm_synthesize, SbmSpec};
pub use split::{sample_few_shot, FewShotSplit, SplitError};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("edge #{index} ({src} -> {dst}) out of range for {num_nodes} nodes")]
    EdgeOutOfRange {
        index: usize,
        src: usize,
        dst: usize,
        num_nodes: usize,
    },
    #[error("feature matrix has {rows} rows but graph has {num_nodes} nodes")]
    FeatureRows { rows: usize, num_nodes: usize },
    #[error("{found} node labels for {num_nodes} nodes")]
    LabelCount { found: usize, num_nodes: usize },
    #[error("graph already contains self-loops")]
    AlreadyLooped,
    #[error("permutation of length {found} applied to graph with {expected} nodes")]
    PermutationLength { expected: usize, found: usize },
    #[error("mapping is not a bijection on 0..{0}")]
    NotAPermutation(usize),
    #[error("invalid block-model probabilities p_in={p_in}, p_out={p_out}")]
    InvalidProbabilities { p_in: f64, p_out: f64 },
    #[error("cannot combine graphs: {0}")]
    Incompatible(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Labels {
    None,
    Node(Vec<usize>),
    Graph(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph<S> {
    num_nodes: usize,
    offsets: Vec<usize>,
    sources: Vec<usize>,
    destinations: Vec<usize>,
    features: Tensor<S>,
    labels: Labels,
    has_self_loops: bool,
}

impl<S: Scalar> Graph<S> {
    /// Builds the compressed adjacency from `(src, dst)` pairs.
    pub fn build(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Tensor<S>,
        labels: Labels,
    ) -> Result<Self, GraphError> {
        if features.rows() != num_nodes {
            return Err(GraphError::FeatureRows {
                rows: features.rows(),
                num_nodes,
            });
        }
        if let Labels::Node(l) = &labels {
            if l.len() != num_nodes {
                return Err(GraphError::LabelCount {
                    found: l.len(),
                    num_nodes,
                });
            }
        }
        if let Some((index, &(src, dst))) = edges
            .iter()
            .enumerate()
            .find(|(_, &(s, d))| s >= num_nodes || d >= num_nodes)
        {
            return Err(GraphError::EdgeOutOfRange {
                index,
                src,
                dst,
                num_nodes,
            });
        }

        let mut offsets = vec![0usize; num_nodes + 1];
        for &(_, d) in edges {
            offsets[d + 1] += 1;
        }
        for i in 0..num_nodes {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut sources = vec![0usize; edges.len()];
        for &(s, d) in edges {
            sources[cursor[d]] = s;
            cursor[d] += 1;
        }
        let mut destinations = Vec::with_capacity(edges.len());
        for i in 0..num_nodes {
            sources[offsets[i]..offsets[i + 1]].sort_unstable();
            destinations.extend(std::iter::repeat_n(i, offsets[i + 1] - offsets[i]));
        }

        Ok(Self {
            num_nodes,
            offsets,
            sources,
            destinations,
            features,
            labels,
            has_self_loops: false,
        })
    }

    /// Appends exactly one `(i, i)` edge per node.
    pub fn add_self_loops(&self) -> Result<Self, GraphError> {
        if self.has_self_loops || self.edges().any(|(s, d)| s == d) {
            return Err(GraphError::AlreadyLooped);
        }
        let mut edges = self.edge_list();
        edges.extend((0..self.num_nodes).map(|i| (i, i)));
        let mut g = Self::build(self.num_nodes, &edges, self.features.clone(), self.labels.clone())?;
        g.has_self_loops = true;
        Ok(g)
    }

    /// Copy with every `(i, i)` edge removed and the loop flag cleared.
    pub fn without_self_loops(&self) -> Self {
        let edges: Vec<_> = self.edges().filter(|(s, d)| s != d).collect();
        Self::build(self.num_nodes, &edges, self.features.clone(), self.labels.clone()).expect("subset of valid edges")
    }

    /// Relabels node `i` as `p(i)`: `X^π = P X`, `A^π = P A Pᵀ`.
    pub fn permute(&self, p: &Permutation) -> Result<Self, GraphError> {
        if p.len() != self.num_nodes {
            return Err(GraphError::PermutationLength {
                expected: self.num_nodes,
                found: p.len(),
            });
        }
        let edges: Vec<_> = self.edges().map(|(s, d)| (p.apply(s), p.apply(d))).collect();
        let labels = match &self.labels {
            Labels::Node(l) => Labels::Node(p.permute_slice(l)),
            other => other.clone(),
        };
        let mut g = Self::build(self.num_nodes, &edges, p.permute_rows(&self.features), labels)?;
        g.has_self_loops = self.has_self_loops;
        Ok(g)
    }

    /// Disjoint union; returns the combined graph and each node's graph index.
    pub fn disjoint_union(graphs: &[&Graph<S>]) -> Result<(Self, Vec<usize>), GraphError> {
        let first = graphs
            .first()
            .ok_or_else(|| GraphError::Incompatible("empty graph list".into()))?;
        let dim = first.feature_dim();
        let looped = first.has_self_loops;
        let total: usize = graphs.iter().map(|g| g.num_nodes).sum();
        let mut data = Vec::with_capacity(total * dim);
        let mut edges = Vec::new();
        let mut membership = Vec::with_capacity(total);
        let mut base = 0;
        for (gi, g) in graphs.iter().enumerate() {
            if g.feature_dim() != dim || g.has_self_loops != looped {
                return Err(GraphError::Incompatible(format!(
                    "graph {gi} differs in feature dim or self-loop state"
                )));
            }
            data.extend_from_slice(g.features.data());
            edges.extend(g.edges().map(|(s, d)| (s + base, d + base)));
            membership.extend(std::iter::repeat_n(gi, g.num_nodes));
            base += g.num_nodes;
        }
        let features = Tensor::new(total, dim, data).expect("row-major concat");
        let mut union = Self::build(total, &edges, features, Labels::None)?;
        union.has_self_loops = looped;
        Ok((union, membership))
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    /// Segment id (destination node) of every edge.
    pub fn destinations(&self) -> &[usize] {
        &self.destinations
    }

    pub fn features(&self) -> &Tensor<S> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn node_labels(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Node(l) => Some(l),
            _ => None,
        }
    }

    pub fn graph_label(&self) -> Option<usize> {
        match self.labels {
            Labels::Graph(y) => Some(y),
            _ => None,
        }
    }

    pub fn has_self_loops(&self) -> bool {
        self.has_self_loops
    }

    /// Edges entering `i`, as source indices in ascending order.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.sources[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        (0..self.num_nodes).map(|i| self.in_degree(i)).collect()
    }

    /// `(src, dst)` pairs in storage order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sources.iter().copied().zip(self.destinations.iter().copied())
    }

    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        self.edges().collect()
    }

    /// Storage index of the first `src -> dst` edge.
    pub fn find_edge(&self, src: usize, dst: usize) -> Option<usize> {
        let start = self.offsets[dst];
        let nbrs = self.neighbors(dst);
        let pos = nbrs.partition_point(|&s| s < src);
        (nbrs.get(pos) == Some(&src)).then_some(start + pos)
    }

    /// Dense `A` with `A[dst][src] = multiplicity`.
    pub fn dense_adjacency(&self) -> Tensor<S> {
        let mut a = Tensor::zeros(self.num_nodes, self.num_nodes);
        for (s, d) in self.edges() {
            a.set(d, s, a.get(d, s) + S::one());
        }
        a
    }

    pub fn with_graph_label(mut self, label: usize) -> Self {
        self.labels = Labels::Graph(label);
        self
    }
}
