//! Seeded property suite behind the `verify` command.
//!
//! Each check compares the library against a naive reference written here
//! with plain loops, and reports the largest residual it saw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_check, ReduceMode, Tape};
use crate::backbone::{forward, graph_readout, Arch, BackboneCheckpoint, Readout};
use crate::error::{Error, Result};
use crate::graph::{Graph, Labels, Permutation};
use crate::prompt::{
    compute_gate, count_params_for, count_prompt_params, pc_loss, total_loss, usage_vector, PromptConfig, PromptKind,
    PromptState, PromptSwitches, PromptVariant,
};
use crate::tensor::Tensor;
use crate::trainer::{cross_entropy, Head};

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl PropertyResult {
    fn new(name: &'static str, max_error: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            max_error,
            tolerance,
            // NaN residuals fail.
            passed: max_error <= tolerance,
            detail,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }

    pub fn get(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }
}

pub fn run_all(seed: u64) -> Result<VerifyReport> {
    let properties = vec![
        equivariance(seed)?,
        readout_invariance(seed)?,
        gate_contract(seed)?,
        segment_oracles(seed)?,
        gcn_dense_oracle(seed)?,
        neutral_prompt(seed)?,
        single_basis_equivalence(seed)?,
        collapse_loss(seed)?,
        gradient_check(seed)?,
        parameter_counts()?,
    ];
    Ok(VerifyReport { seed, properties })
}

pub(crate) fn random_graph(n: usize, e: usize, d: usize, rng: &mut ChaCha8Rng) -> Graph<f64> {
    let mut edges = Vec::with_capacity(2 * e);
    for _ in 0..e {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            edges.push((a, b));
            edges.push((b, a));
        }
    }
    Graph::build(n, &edges, Tensor::uniform(n, d, 1.0, rng), Labels::None).expect("valid random graph")
}

fn fill(tensors: Vec<&mut Tensor<f64>>, scale: f64, rng: &mut ChaCha8Rng) {
    for t in tensors {
        for x in t.data_mut() {
            *x = rng.random_range(-scale..scale);
        }
    }
}

type Setup = (Graph<f64>, BackboneCheckpoint<f64>, Option<PromptState<f64>>);

fn random_setup(arch: Arch, variant: Option<PromptVariant>, rng: &mut ChaCha8Rng) -> Result<Setup> {
    let n = rng.random_range(2..=30);
    let raw = random_graph(n, n + rng.random_range(0..2 * n), 4, rng);
    let mut ckpt = BackboneCheckpoint::init(arch, &[4, 8, 5], rng.random())?;
    fill(ckpt.tensors_mut(), 0.7, rng);
    let prompt = match variant {
        Some(v) => {
            let cfg = PromptConfig {
                gate_dim: 4,
                num_basis: 3,
                ..PromptConfig::new(v)
            };
            let mut p = PromptState::init(&ckpt, &cfg, rng.random())?;
            fill(p.tensors_mut(), 0.7, rng);
            Some(p)
        }
        None => None,
    };
    Ok((raw, ckpt, prompt))
}

const VARIANTS: [Option<PromptVariant>; 3] = [None, Some(PromptVariant::Mag), Some(PromptVariant::MagPlus)];

fn equivariance(seed: u64) -> Result<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for _ in 0..20 {
        for arch in [Arch::Gcn, Arch::Gin] {
            for variant in VARIANTS {
                let (raw, ckpt, prompt) = random_setup(arch, variant, &mut rng)?;
                let perm = Permutation::random(raw.num_nodes(), &mut rng);
                let g = ckpt.prepare_graph(&raw)?;
                let gp = ckpt.prepare_graph(&raw.permute(&perm)?)?;
                let h = forward(&g, &ckpt, prompt.as_ref())?;
                let hp = forward(&gp, &ckpt, prompt.as_ref())?;
                for i in 0..raw.num_nodes() {
                    for (a, b) in h.row_slice(i).iter().zip(hp.row_slice(perm.apply(i))) {
                        worst = worst.max((a - b).abs());
                    }
                }
                cases += 1;
            }
        }
    }
    Ok(PropertyResult::new(
        "equivariance",
        worst,
        1e-9,
        format!("{cases} graph/permutation pairs, GCN and GIN, with and without prompts"),
    ))
}

fn readout_invariance(seed: u64) -> Result<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        for arch in [Arch::Gcn, Arch::Gin] {
            let (raw, ckpt, prompt) = random_setup(arch, Some(PromptVariant::MagPlus), &mut rng)?;
            let perm = Permutation::random(raw.num_nodes(), &mut rng);
            let pool = |g: &Graph<f64>| -> Result<Tensor<f64>> {
                let h = forward(&ckpt.prepare_graph(g)?, &ckpt, prompt.as_ref())?;
                let tape = Tape::new();
                Ok(graph_readout(tape.constant(h), Readout::Sum)?.value())
            };
            worst = worst.max(pool(&raw)?.max_abs_diff(&pool(&raw.permute(&perm)?)?));
        }
    }
    Ok(PropertyResult::new(
        "readout_invariance",
        worst,
        1e-9,
        "40 prompted graphs".into(),
    ))
}

fn gate_contract(seed: u64) -> Result<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let mut edges_seen = 0usize;
    let mut violations = 0usize;
    let mut singleton_miss = 0usize;
    let mut worst_sum = 0.0f64;
    while edges_seen < 100_000 {
        let n = rng.random_range(1..60);
        let e = rng.random_range(0..400);
        let edges: Vec<(usize, usize)> = (0..e)
            .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
            .collect();
        let g = Graph::<f64>::build(n, &edges, Tensor::zeros(n, 1), Labels::None)?;
        let heads = rng.random_range(1..5);
        let beta = rng.random_range(0.0..=1.0);
        let tape = Tape::new();
        let logits = tape.constant(Tensor::uniform(e, heads, 30.0, &mut rng));
        let out = compute_gate(logits, &g, beta)?;
        let (a, alpha) = (out.gate.value(), out.alpha.value());
        let deg = g.in_degrees();
        let mut sums = vec![0.0; n * heads];
        for (k, (_, dst)) in g.edges().enumerate() {
            let v = a.get(k, 0);
            if !(v >= beta && v <= 1.0) {
                violations += 1;
            }
            if deg[dst] == 1 && v != 1.0 {
                singleton_miss += 1;
            }
            for h in 0..heads {
                sums[dst * heads + h] += alpha.get(k, h);
            }
        }
        for i in (0..n).filter(|&i| deg[i] > 0) {
            for h in 0..heads {
                worst_sum = worst_sum.max((sums[i * heads + h] - 1.0).abs());
            }
        }
        edges_seen += e;
    }
    let bad = (violations + singleton_miss) as f64;
    Ok(PropertyResult::new(
        "gate_contract",
        bad.max(worst_sum),
        1e-9,
        format!(
            "{edges_seen} edges: {violations} bound violations, {singleton_miss} singleton gates != 1, max softmax sum error {worst_sum:.3e}"
        ),
    ))
}

fn segment_oracles(seed: u64) -> Result<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let segs = rng.random_range(1..12);
        let rows = rng.random_range(0..40);
        let cols = rng.random_range(1..4);
        let ids: Vec<usize> = (0..rows).map(|_| rng.random_range(0..segs)).collect();
        let x = Tensor::<f64>::uniform(rows, cols, 5.0, &mut rng);
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let soft = v.segment_softmax(&ids, segs)?.value();
        let sum = v.segment_reduce(&ids, segs, ReduceMode::Sum)?.value();
        let mean = v.segment_reduce(&ids, segs, ReduceMode::Mean)?.value();
        let max = v.segment_reduce(&ids, segs, ReduceMode::Max)?.value();
        for s in 0..segs {
            let members: Vec<usize> = (0..rows).filter(|&r| ids[r] == s).collect();
            for c in 0..cols {
                let vals: Vec<f64> = members.iter().map(|&r| x.get(r, c)).collect();
                let (ref_sum, ref_mean, ref_max) = if vals.is_empty() {
                    (0.0, 0.0, 0.0)
                } else {
                    let total: f64 = vals.iter().sum();
                    (
                        total,
                        total / vals.len() as f64,
                        vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    )
                };
                worst = worst
                    .max((sum.get(s, c) - ref_sum).abs())
                    .max((mean.get(s, c) - ref_mean).abs())
                    .max((max.get(s, c) - ref_max).abs());
                let top = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = vals.iter().map(|v| (v - top).exp()).sum();
                for (&r, &val) in members.iter().zip(&vals) {
                    worst = worst.max((soft.get(r, c) - (val - top).exp() / z).abs());
                }
            }
        }
    }
    Ok(PropertyResult::new(
        "segment_oracles",
        worst,
        1e-10,
        "segment softmax/sum/mean/max against per-segment loops, 50 instances".into(),
    ))
}

fn gcn_dense_oracle(seed: u64) -> Result<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..25);
        let raw = random_graph(n, rng.random_range(0..3 * n + 1), 3, &mut rng);
        let mut ckpt = BackboneCheckpoint::<f64>::init(Arch::Gcn, &[3, 4], rng.random())?;
        fill(ckpt.tensors_mut(), 1.0, &mut rng);
        let g = ckpt.prepare_graph(&raw)?;
        let got = forward(&g, &ckpt, None)?;
        let crate::backbone::LayerParams::Gcn { weight, bias } = &ckpt.layers[0] else {
            unreachable!("GCN checkpoint")
        };
        let mut adj = vec![vec![0.0f64; n]; n];
        for (s, d) in raw.edges() {
            adj[d][s] += 1.0;
        }
        for (i, row) in adj.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let deg: Vec<f64> = adj.iter().map(|r| r.iter().sum()).collect();
        let x = g.features();
        for i in 0..n {
            for o in 0..4 {
                let mut acc = bias.get(0, o);
                for j in 0..n {
                    if adj[i][j] == 0.0 {
                        continue;
                    }
                    let xw: f64 = (0..3).map(|k| x.get(j, k) * weight.get(k, o)).sum();
                    acc += adj[i][j] / (deg[i] * deg[j]).sqrt() * xw;
                }
                worst = worst.max((got.get(i, o) - acc).abs());
            }
        }
    }
    Ok(PropertyResult::new(
        "gcn_dense_oracle",
        worst,
        1e-10,
        "one GCN layer against D^-1/2 (A+I) D^-1/2 X W + b, 50 instances".into(),
    ))
}

fn neutral_prompt(seed: u64) -> Result<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
    let mut worst = 0.0f64;
    for k in 0..10 {
        let arch = if k % 2 == 0 { Arch::Gcn } else { Arch::Gin };
        let variant = if k % 4 < 2 {
            PromptVariant::Mag
        } else {
            PromptVariant::MagPlus
        };
        let (raw, ckpt, prompt) = random_setup(arch, Some(variant), &mut rng)?;
        let mut prompt = prompt.expect("prompted setup");
        prompt.beta = 1.0;
        for layer in &mut prompt.layers {
            match &mut layer.kind {
                PromptKind::Mag { prompt } => *prompt = Tensor::zeros(1, prompt.cols()),
                PromptKind::MagPlus { basis, .. } => *basis = Tensor::zeros(basis.rows(), basis.cols()),
            }
        }
        let g = ckpt.prepare_graph(&raw)?;
        worst = worst.max(forward(&g, &ckpt, None)?.max_abs_diff(&forward(&g, &ckpt, Some(&prompt))?));
    }
    Ok(PropertyResult::new(
        "neutral_prompt",
        worst,
        1e-12,
        "beta = 1 and zero prompts against the plain encoder, 10 graphs".into(),
    ))
}

fn single_basis_equivalence(seed: u64) -> Result<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 6);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (raw, ckpt, mag) = random_setup(Arch::Gcn, Some(PromptVariant::Mag), &mut rng)?;
        let mag = mag.expect("prompted setup");
        let mut plus = mag.clone();
        plus.variant = PromptVariant::MagPlus;
        for layer in &mut plus.layers {
            let PromptKind::Mag { prompt } = &layer.kind else {
                unreachable!()
            };
            let da = layer.gate_weight.cols();
            layer.kind = PromptKind::MagPlus {
                basis: prompt.clone(),
                mix_weight: Tensor::uniform(da, 1, 1.0, &mut rng),
                mix_bias: Tensor::uniform(1, 1, 1.0, &mut rng),
            };
        }
        let g = ckpt.prepare_graph(&raw)?;
        worst = worst.max(forward(&g, &ckpt, Some(&mag))?.max_abs_diff(&forward(&g, &ckpt, Some(&plus))?));
    }
    Ok(PropertyResult::new(
        "single_basis_equivalence",
        worst,
        1e-12,
        "MAG_PLUS with one basis vector against MAG, 10 graphs".into(),
    ))
}

fn collapse_loss(seed: u64) -> Result<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
    let eps = 1e-8;
    let tape = Tape::new();
    let pc = |s: Tensor<f64>| -> Result<f64> { Ok(pc_loss(tape.constant(s), eps)?.item()) };
    let mut worst = 0.0f64;
    let mut notes = Vec::new();
    for _ in 0..20 {
        let m = rng.random_range(1..25);
        let v = rng.random_range(0.1..500.0);
        let uniform = pc(Tensor::full(1, m, v))?;
        worst = worst.max(uniform);
    }
    notes.push(format!("uniform max {worst:.1e}"));
    let two = (pc(Tensor::row(&[2.0, 0.0]))? - 1.0 / (1.0 + eps)).abs();
    worst = worst.max(two);
    let mut pair_gap = 0.0f64;
    for _ in 0..20 {
        let e = rng.random_range(1..30);
        let m = rng.random_range(2..8);
        let a = tape.constant(Tensor::uniform(e, m, 3.0, &mut rng)).softmax_rows();
        // Reordering rows keeps the column sums.
        let mut order: Vec<usize> = (0..e).collect();
        order.reverse();
        let b = a.gather_rows(&order)?;
        let la = pc_loss(usage_vector(a)?, eps)?.item();
        let lb = pc_loss(usage_vector(b)?, eps)?.item();
        pair_gap = pair_gap.max((la - lb).abs());
    }
    worst = worst.max(pair_gap);
    notes.push(format!("[2,0] error {two:.1e}, equal-usage gap {pair_gap:.1e}"));
    Ok(PropertyResult::new("collapse_loss", worst, 1e-12, notes.join("; ")))
}

fn gradient_check(seed: u64) -> Result<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 8);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for variant in [PromptVariant::Mag, PromptVariant::MagPlus] {
        let raw = random_graph(10, 18, 3, &mut rng);
        let mut ckpt = BackboneCheckpoint::<f64>::init(Arch::Gcn, &[3, 4, 4], rng.random())?;
        fill(ckpt.tensors_mut(), 0.8, &mut rng);
        let g = ckpt.prepare_graph(&raw)?;
        let cfg = PromptConfig {
            gate_dim: 3,
            num_basis: 3,
            ..PromptConfig::new(variant)
        };
        let mut prompt = PromptState::init(&ckpt, &cfg, rng.random())?;
        fill(prompt.tensors_mut(), 0.8, &mut rng);
        let mut head = Head::<f64>::init(4, 3, rng.random());
        fill(head.tensors_mut(), 0.8, &mut rng);
        let labels: Vec<usize> = (0..10).map(|_| rng.random_range(0..3)).collect();
        let mut params: Vec<Tensor<f64>> = prompt.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let np = params.len();
        params.extend([head.weight.clone(), head.bias.clone()]);
        let report = finite_diff_check::<f64, Error, _>(
            |tape, p| {
                let bb = ckpt.bind(tape, false);
                let bound = prompt.bind_from(&p[..np], PromptSwitches::default())?;
                let x = tape.constant(g.features().clone());
                let enc = crate::backbone::encode(&g, &bb, x, Some(&bound))?;
                let logits = enc.embeddings.affine(p[np], p[np + 1])?;
                let task = cross_entropy(logits, &labels)?;
                let pcs = enc
                    .traces
                    .iter()
                    .filter_map(|t| t.mixture)
                    .map(|pi| pc_loss(usage_vector(pi)?, 1e-8))
                    .collect::<Result<Vec<_>>>()?;
                let layers = pcs.len();
                total_loss(task, &pcs, 0.5, layers)
            },
            &params,
            1e-6,
        )?;
        worst = worst.max(report.max_rel_error);
        coords += report.coordinates;
    }
    Ok(PropertyResult::new(
        "gradient_check",
        worst,
        1e-5,
        format!("full objective, {coords} prompt and head coordinates, central differences h = 1e-6"),
    ))
}

fn parameter_counts() -> Result<PropertyResult> {
    let mut mismatches = 0usize;
    let mut cases = 0usize;
    for d in [32, 128] {
        for da in [8, 16, 32] {
            for m in [1, 10, 20] {
                for variant in [PromptVariant::Mag, PromptVariant::MagPlus] {
                    let ckpt = BackboneCheckpoint::<f64>::init(Arch::Gcn, &[d, d, d], 0)?;
                    let cfg = PromptConfig {
                        gate_dim: da,
                        num_basis: m,
                        ..PromptConfig::new(variant)
                    };
                    let state = PromptState::init(&ckpt, &cfg, 0)?;
                    let counted = count_prompt_params(&state);
                    let enumerated: usize = state.named_tensors().iter().map(|(_, t)| t.rows() * t.cols()).sum();
                    let closed = count_params_for(&[(d, d), (d, d)], da, variant, m);
                    if counted.total != enumerated || closed != counted {
                        mismatches += 1;
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(PropertyResult::new(
        "parameter_counts",
        mismatches as f64,
        0.0,
        format!("{cases} configurations, {mismatches} mismatches"),
    ))
}
