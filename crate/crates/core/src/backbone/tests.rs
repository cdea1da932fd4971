use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graph::{Labels, Permutation};
use crate::prompt::{PromptConfig, PromptState, PromptVariant};

fn graph(n: usize, edges: &[(usize, usize)], features: Tensor<f64>) -> Graph<f64> {
    Graph::build(n, edges, features, Labels::None).unwrap()
}

fn random_graph(n: usize, e: usize, d: usize, rng: &mut ChaCha8Rng) -> Graph<f64> {
    let mut edges = Vec::new();
    for _ in 0..e {
        let (s, t) = (rng.random_range(0..n), rng.random_range(0..n));
        if s != t {
            edges.push((s, t));
            edges.push((t, s));
        }
    }
    graph(n, &edges, Tensor::uniform(n, d, 1.0, rng))
}

fn dense(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn dense_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = b.len();
    let m = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| (0..m).map(|j| (0..k).map(|t| row[t] * b[t][j]).sum()).collect())
        .collect()
}

fn randomize<S: Scalar>(tensors: Vec<&mut Tensor<S>>, rng: &mut ChaCha8Rng) {
    for t in tensors {
        for x in t.data_mut() {
            *x = S::lit(rng.random_range(-0.8..0.8));
        }
    }
}

fn scalar_gcn(weight: f64) -> BackboneCheckpoint<f64> {
    let mut c = BackboneCheckpoint::init(Arch::Gcn, &[1, 1], 0).unwrap();
    c.layers[0] = LayerParams::Gcn {
        weight: Tensor::scalar(weight),
        bias: Tensor::zeros(1, 1),
    };
    c
}

#[test]
fn gcn_coefficients_on_two_nodes_and_isolated_node() {
    let g = graph(3, &[(0, 1), (1, 0)], Tensor::zeros(3, 1))
        .add_self_loops()
        .unwrap();
    let c = gcn_edge_coefficients(&g);
    let cross = g.find_edge(1, 0).unwrap();
    assert_eq!(c.get(cross, 0), 0.5);
    assert_eq!(c.get(g.find_edge(0, 0).unwrap(), 0), 0.5);
    assert_eq!(c.get(g.find_edge(2, 2).unwrap(), 0), 1.0);
}

#[test]
fn gcn_messages_scale_by_coefficient() {
    let g = graph(2, &[(0, 1), (1, 0)], Tensor::column(&[1.0, 1.0]))
        .add_self_loops()
        .unwrap();
    let tape = Tape::new();
    let h = tape.constant(g.features().clone());
    let w = tape.constant(Tensor::scalar(1.0));
    let m = gcn_messages(&g, h, w).unwrap().value();
    assert_eq!(m.get(g.find_edge(0, 1).unwrap(), 0), 0.5);
    let plain = graph(2, &[(0, 1)], Tensor::zeros(2, 1));
    assert!(gcn_messages(&plain, tape.constant(Tensor::zeros(2, 1)), w).is_err());
    assert!(gcn_messages(&g, tape.constant(Tensor::zeros(3, 1)), w).is_err());
}

#[test]
fn one_layer_gcn_two_node_forward_by_hand() {
    // h' = 0.5 w (x_0 + x_1) on both nodes.
    let g = graph(2, &[(0, 1), (1, 0)], Tensor::column(&[2.0, 4.0]))
        .add_self_loops()
        .unwrap();
    let out = forward(&g, &scalar_gcn(3.0), None).unwrap();
    assert!((out.get(0, 0) - 9.0).abs() < 1e-12);
    assert!((out.get(1, 0) - 9.0).abs() < 1e-12);
}

#[test]
fn gcn_matches_dense_normalized_adjacency() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..5 {
        let raw = random_graph(15, 20, 4, &mut rng);
        let g = raw.add_self_loops().unwrap();
        let mut ckpt = BackboneCheckpoint::<f64>::init(Arch::Gcn, &[4, 6, 3], trial).unwrap();
        randomize(ckpt.tensors_mut(), &mut rng);
        let a = dense(&g.dense_adjacency());
        let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        let norm: Vec<Vec<f64>> = (0..15)
            .map(|i| (0..15).map(|j| a[i][j] / (deg[i] * deg[j]).sqrt()).collect())
            .collect();
        let mut h = dense(g.features());
        for (l, layer) in ckpt.layers.iter().enumerate() {
            let LayerParams::Gcn { weight, bias } = layer else {
                unreachable!()
            };
            let mut z = dense_matmul(&norm, &dense_matmul(&h, &dense(weight)));
            for row in &mut z {
                for (k, x) in row.iter_mut().enumerate() {
                    *x += bias.get(0, k);
                    if l == 0 {
                        *x = x.max(0.0);
                    }
                }
            }
            h = z;
        }
        let got = forward(&g, &ckpt, None).unwrap();
        for (i, row) in h.iter().enumerate() {
            for (k, &x) in row.iter().enumerate() {
                assert!((got.get(i, k) - x).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn gcn_update_examples() {
    let tape = Tape::new();
    let zero = tape.constant(Tensor::<f64>::zeros(2, 3));
    let zb = tape.constant(Tensor::zeros(1, 3));
    assert_eq!(gcn_update(zero, zb, false).unwrap().value().sum(), 0.0);
    let agg = tape.constant(Tensor::from_rows(&[&[-1.0, 2.0]]));
    let b = tape.constant(Tensor::row(&[0.5, 0.5]));
    assert_eq!(gcn_update(agg, b, false).unwrap().value().data(), &[0.0, 2.5]);
    assert_eq!(gcn_update(agg, b, true).unwrap().value().data(), &[-0.5, 2.5]);
}

fn identity_mlp<'t>(z: Var<'t, f64>) -> Result<Var<'t, f64>> {
    Ok(z)
}

fn gin_identity(g: &Graph<f64>, eps: f64) -> Tensor<f64> {
    let tape = Tape::new();
    let h = tape.constant(g.features().clone());
    let m = gin_messages(g, h).unwrap();
    let agg = m
        .segment_reduce(g.destinations(), g.num_nodes(), ReduceMode::Sum)
        .unwrap();
    gin_update(h, agg, tape.constant(Tensor::scalar(eps)), &identity_mlp)
        .unwrap()
        .value()
}

#[test]
fn gin_examples() {
    let tri = [(0, 1), (1, 0), (1, 2), (2, 1), (0, 2), (2, 0)];
    let g = graph(3, &tri, Tensor::ones(3, 1));
    assert_eq!(gin_identity(&g, 0.0).data(), &[3.0, 3.0, 3.0]);
    assert_eq!(gin_identity(&g, -1.0).data(), &[2.0, 2.0, 2.0]);
    let lonely = graph(3, &[], Tensor::column(&[1.0, -2.0, 5.0]));
    assert_eq!(gin_identity(&lonely, 0.0).data(), &[1.0, -2.0, 5.0]);
    let path = graph(
        3,
        &[(0, 1), (1, 0), (1, 2), (2, 1)],
        Tensor::column(&[1.0, 10.0, 100.0]),
    );
    assert_eq!(gin_identity(&path, -1.0).data(), &[10.0, 101.0, 10.0]);
}

#[test]
fn loop_preconditions_enforced() {
    let raw = graph(2, &[(0, 1)], Tensor::zeros(2, 2));
    let gcn = BackboneCheckpoint::<f64>::init(Arch::Gcn, &[2, 2], 0).unwrap();
    let gin = BackboneCheckpoint::<f64>::init(Arch::Gin, &[2, 2], 0).unwrap();
    assert!(forward(&raw, &gcn, None).is_err());
    assert!(forward(&raw, &gin, None).is_ok());
    assert!(forward(&raw.add_self_loops().unwrap(), &gin, None).is_err());
    assert!(forward(&gcn.prepare_graph(&raw).unwrap(), &gcn, None).is_ok());
}

#[test]
fn feature_dim_mismatch_names_both_dims() {
    let g = graph(2, &[], Tensor::zeros(2, 5)).add_self_loops().unwrap();
    let ckpt = BackboneCheckpoint::<f64>::init(Arch::Gcn, &[3, 4], 0).unwrap();
    let msg = forward(&g, &ckpt, None).unwrap_err().to_string();
    assert!(msg.contains('5') && msg.contains('3'), "{msg}");
}

#[test]
fn neutral_prompt_reproduces_plain_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for arch in [Arch::Gcn, Arch::Gin] {
        for variant in [PromptVariant::Mag, PromptVariant::MagPlus] {
            let raw = random_graph(12, 18, 3, &mut rng);
            let ckpt = BackboneCheckpoint::<f64>::init(arch, &[3, 8, 5], 1).unwrap();
            let g = ckpt.prepare_graph(&raw).unwrap();
            let cfg = PromptConfig {
                beta: 1.0,
                ..PromptConfig::new(variant)
            };
            let mut prompt = PromptState::init(&ckpt, &cfg, 2).unwrap();
            for layer in &mut prompt.layers {
                randomize(
                    vec![&mut layer.gate_weight, &mut layer.att_src, &mut layer.att_dst],
                    &mut rng,
                );
            }
            let plain = forward(&g, &ckpt, None).unwrap();
            let prompted = forward(&g, &ckpt, Some(&prompt)).unwrap();
            assert!(plain.max_abs_diff(&prompted) <= 1e-12);
        }
    }
}

#[test]
fn readout_examples() {
    let tape = Tape::new();
    let single = tape.constant(Tensor::<f64>::row(&[4.0, -1.0]));
    assert_eq!(
        graph_readout(single, Readout::Mean).unwrap().value().data(),
        &[4.0, -1.0]
    );
    let two = tape.constant(Tensor::column(&[1.0, 3.0]));
    assert_eq!(graph_readout(two, Readout::Mean).unwrap().item(), 2.0);
    assert_eq!(graph_readout(two, Readout::Sum).unwrap().item(), 4.0);
    let empty = tape.constant(Tensor::<f64>::zeros(0, 2));
    assert!(graph_readout(empty, Readout::Mean).is_err());
    let h = tape.constant(Tensor::column(&[1.0, 2.0, 3.0]));
    assert_eq!(
        batched_readout(h, &[0, 1, 0], 2, Readout::Sum).unwrap().value().data(),
        &[4.0, 2.0]
    );
    assert!(batched_readout(h, &[0, 0, 0], 2, Readout::Sum).is_err());
}

#[test]
fn pair_loss_at_zero_score() {
    assert!((edge_pair_loss(0.0, true) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((edge_pair_loss(0.0, false) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(edge_pair_loss(40.0, true) < 1e-15);
    assert!((edge_pair_loss(-800.0, true) - 800.0).abs() < 1e-9);
}

#[test]
fn pretrain_rejects_edgeless_graph() {
    let g = graph(4, &[], Tensor::ones(4, 2));
    let cfg = PretrainConfig {
        arch: Arch::Gcn,
        dims: vec![2, 4],
        epochs: 3,
        lr: 0.01,
        neg_ratio: 1,
        seed: 0,
    };
    assert!(pretrain_edgepred(&[g], &cfg).is_err());
}

#[test]
fn frozen_binding_receives_no_gradient() {
    let raw = graph(3, &[(0, 1), (1, 2)], Tensor::ones(3, 2));
    let ckpt = BackboneCheckpoint::<f64>::init(Arch::Gcn, &[2, 3], 0).unwrap();
    let g = ckpt.prepare_graph(&raw).unwrap();
    let tape = Tape::new();
    let bb = ckpt.bind(&tape, false);
    let x = tape.constant(g.features().clone());
    let prompt = PromptState::init(&ckpt, &PromptConfig::new(PromptVariant::Mag), 0).unwrap();
    let bp = prompt.bind(&tape, Default::default());
    let h = encode(&g, &bb, x, Some(&bp)).unwrap().embeddings;
    h.sum_all().backward().unwrap();
    assert!(bb.vars().iter().all(|&v| tape.grad(v).is_none()));
    assert!(bp.vars().iter().all(|&v| tape.grad(v).is_some()));
}

#[test]
fn checkpoint_round_trip_and_magic() {
    let dir = tempfile::tempdir().unwrap();
    for arch in [Arch::Gcn, Arch::Gin] {
        let mut ckpt = BackboneCheckpoint::<f64>::init(arch, &[3, 7, 2], 11).unwrap();
        ckpt.meta.final_loss = Some(0.123_456_789_012_345_68);
        let path = dir.path().join(format!("{}.ckpt", arch.name()));
        ckpt.save(&path).unwrap();
        let back = BackboneCheckpoint::<f64>::load(&path).unwrap();
        assert_eq!(back.arch, arch);
        assert_eq!(back.meta, ckpt.meta);
        for ((n0, a), (n1, b)) in ckpt.named_tensors().iter().zip(back.named_tensors()) {
            assert_eq!(n0, &n1);
            let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let prompt_state = PromptState::init(&ckpt, &PromptConfig::new(PromptVariant::Mag), 0).unwrap();
        let ppath = dir.path().join("p.prompt");
        prompt_state.save(&ppath, &[]).unwrap();
        assert!(matches!(
            BackboneCheckpoint::<f64>::load(&ppath),
            Err(CheckpointError::BadMagic { .. })
        ));
    }
}

fn equivariance_case(seed: u64, n: usize, arch: Arch, variant: Option<PromptVariant>) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = random_graph(n, n + 5, 3, &mut rng);
    let mut ckpt = BackboneCheckpoint::<f64>::init(arch, &[3, 6, 4], seed).unwrap();
    randomize(ckpt.tensors_mut(), &mut rng);
    let prompt = variant.map(|v| {
        let mut p = PromptState::init(
            &ckpt,
            &PromptConfig {
                num_basis: 3,
                gate_dim: 4,
                ..PromptConfig::new(v)
            },
            seed,
        )
        .unwrap();
        randomize(p.tensors_mut(), &mut rng);
        p
    });
    let perm = Permutation::random(n, &mut rng);
    let g = ckpt.prepare_graph(&raw).unwrap();
    let gp = ckpt.prepare_graph(&raw.permute(&perm).unwrap()).unwrap();
    let h = forward(&g, &ckpt, prompt.as_ref()).unwrap();
    let hp = forward(&gp, &ckpt, prompt.as_ref()).unwrap();
    let node_err = perm.permute_rows(&h).max_abs_diff(&hp);
    let readout = |t: &Tensor<f64>| {
        let tape = Tape::new();
        graph_readout(tape.constant(t.clone()), Readout::Mean).unwrap().value()
    };
    (node_err, readout(&h).max_abs_diff(&readout(&hp)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..=30, arch_gin in any::<bool>(), v in 0usize..3) {
        let arch = if arch_gin { Arch::Gin } else { Arch::Gcn };
        let variant = [None, Some(PromptVariant::Mag), Some(PromptVariant::MagPlus)][v];
        let (node, graph_level) = equivariance_case(seed, n, arch, variant);
        prop_assert!(node <= 1e-9, "node error {node}");
        prop_assert!(graph_level <= 1e-9, "readout error {graph_level}");
    }

    #[test]
    fn readout_invariant_to_row_order(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Tensor::<f64>::uniform(n, 3, 2.0, &mut rng);
        let p = Permutation::random(n, &mut rng);
        let tape = Tape::new();
        for mode in [Readout::Mean, Readout::Sum] {
            let a = graph_readout(tape.constant(h.clone()), mode).unwrap().value();
            let b = graph_readout(tape.constant(p.permute_rows(&h)), mode).unwrap().value();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }
}
