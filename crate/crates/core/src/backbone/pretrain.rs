use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{encode, Arch, BackboneCheckpoint};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub arch: Arch,
    /// Layer widths `d_0..d_L`; `d_0` must match the feature dim.
    pub dims: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub neg_ratio: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<S> {
    pub checkpoint: BackboneCheckpoint<S>,
    /// Loss before each epoch's update.
    pub losses: Vec<f64>,
}

/// Logistic loss of a single scored pair: `-ln sigma(s)` or `-ln(1 - sigma(s))`.
pub fn edge_pair_loss(score: f64, positive: bool) -> f64 {
    let z = if positive { -score } else { score };
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Trains an encoder to score existing edges above sampled non-edges.
pub fn pretrain_edgepred<S: Scalar>(graphs: &[Graph<S>], cfg: &PretrainConfig) -> Result<PretrainOutcome<S>> {
    let mut ckpt = BackboneCheckpoint::<S>::init(cfg.arch, &cfg.dims, cfg.seed)?;
    let refs: Vec<&Graph<S>> = graphs.iter().collect();
    if refs.is_empty() {
        return Err(Error::Precondition("edge prediction needs at least one graph".into()));
    }
    let (union, membership) = Graph::disjoint_union(&refs)?;
    if union.feature_dim() != ckpt.input_dim() {
        return Err(Error::DimMismatch {
            what: "graph feature dim".into(),
            expected: ckpt.input_dim(),
            found: union.feature_dim(),
        });
    }
    let positives: Vec<(usize, usize)> = union.edges().filter(|(s, d)| s != d).collect();
    if positives.is_empty() {
        return Err(Error::Precondition(
            "edge prediction needs a graph with at least one edge".into(),
        ));
    }
    let existing: HashSet<(usize, usize)> = positives.iter().copied().collect();
    let mut ranges = vec![(0usize, 0usize); refs.len()];
    for (i, g) in refs.iter().enumerate() {
        let start = if i == 0 { 0 } else { ranges[i - 1].1 };
        ranges[i] = (start, start + g.num_nodes());
    }
    let prepared = ckpt.prepare_graph(&union)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let shapes: Vec<[usize; 2]> = ckpt.named_tensors().iter().map(|(_, t)| t.shape()).collect();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &shapes);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let n = union.num_nodes();

    for epoch in 0..cfg.epochs {
        let mut negatives = Vec::with_capacity(positives.len() * cfg.neg_ratio);
        for _ in 0..positives.len() * cfg.neg_ratio {
            for _attempt in 0..64 {
                let u = rng.random_range(0..n);
                let (lo, hi) = ranges[membership[u]];
                let v = rng.random_range(lo..hi);
                if u != v && !existing.contains(&(u, v)) {
                    negatives.push((u, v));
                    break;
                }
            }
        }

        let tape = Tape::new();
        let bb = ckpt.bind(&tape, true);
        let x = tape.constant(prepared.features().clone());
        let h = encode(&prepared, &bb, x, None)?.embeddings;
        let score = |pairs: &[(usize, usize)]| -> Result<_> {
            let us: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let vs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            Ok(h.gather_rows(&us)?.mul(h.gather_rows(&vs)?)?.sum_over_columns())
        };
        let mut loss = score(&positives)?.scale(-S::one()).softplus().sum_all();
        if !negatives.is_empty() {
            loss = loss.add(score(&negatives)?.softplus().sum_all())?;
        }
        let loss = loss.scale(S::one() / S::from_usize_lossy(positives.len() + negatives.len()));
        let value = loss.item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Diverged {
                epoch,
                quantity: "edge prediction loss".into(),
            });
        }
        losses.push(value);
        loss.backward()?;
        let grads: Vec<_> = bb
            .vars()
            .into_iter()
            .map(|v| tape.grad(v).expect("trainable leaf"))
            .collect();
        adam.step(&mut ckpt.tensors_mut(), &grads);
    }

    ckpt.meta.objective = "edge_prediction".into();
    ckpt.meta.epochs = cfg.epochs;
    ckpt.meta.final_loss = losses.last().copied();
    Ok(PretrainOutcome {
        checkpoint: ckpt,
        losses,
    })
}
