use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Graph, GraphError, Labels};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stochastic block model parameters. Node `i` belongs to block
/// `i / per_block`, which is also its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub blocks: usize,
    pub per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Standard deviation of the Gaussian noise added to every feature.
    pub noise: f64,
    /// Feature width; the first `blocks` columns carry the one-hot block signal.
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        Self {
            blocks: 2,
            per_block: 50,
            p_in: 0.5,
            p_out: 0.05,
            noise: 1.0,
            feature_dim: 8,
            seed: 0,
        }
    }
}

/// Samples an undirected block-model graph stored as symmetric directed pairs.
pub fn sbm_synthesize<S: Scalar>(spec: &SbmSpec) -> Result<Graph<S>, GraphError> {
    let (p_in, p_out) = (spec.p_in, spec.p_out);
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) || p_out > p_in {
        return Err(GraphError::InvalidProbabilities { p_in, p_out });
    }
    let n = spec.blocks * spec.per_block;
    let block = |i: usize| i / spec.per_block.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if block(i) == block(j) { p_in } else { p_out };
            // draw for every pair so the stream does not depend on p
            let u: f64 = rng.random();
            if u < p {
                edges.push((i, j));
                edges.push((j, i));
            }
        }
    }

    let dim = spec.feature_dim.max(spec.blocks);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Tensor::zeros(n, dim);
    for i in 0..n {
        for k in 0..dim {
            let signal = if k == block(i) { 1.0 } else { 0.0 };
            let v = signal + spec.noise * normal.sample(&mut rng);
            features.set(i, k, S::lit(v));
        }
    }
    let labels = Labels::Node((0..n).map(block).collect());
    Graph::build(n, &edges, features, labels)
}
