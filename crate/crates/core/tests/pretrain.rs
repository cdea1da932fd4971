use std::path::PathBuf;

use magprompt::autodiff::Tape;
use magprompt::backbone::{encode, pretrain_edgepred, Arch, BackboneCheckpoint, PretrainConfig};
use magprompt::graph::{load_dataset, Dataset};

fn toy() -> Dataset<f64> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy_node");
    load_dataset(dir).unwrap()
}

fn config(arch: Arch, seed: u64) -> PretrainConfig {
    PretrainConfig {
        arch,
        dims: vec![3, 16, 16],
        epochs: 51,
        lr: 0.01,
        neg_ratio: 1,
        seed,
    }
}

#[test]
fn loss_decreases_on_most_seeds() {
    let ds = toy();
    for arch in [Arch::Gcn, Arch::Gin] {
        let improved = (0..5)
            .filter(|&seed| {
                let out = pretrain_edgepred(&ds.graphs, &config(arch, seed)).unwrap();
                out.losses[50] < out.losses[0]
            })
            .count();
        assert!(improved >= 4, "{arch:?}: only {improved}/5 seeds improved");
    }
}

#[test]
fn pretraining_is_deterministic_and_recorded() {
    let ds = toy();
    let a = pretrain_edgepred(&ds.graphs, &config(Arch::Gcn, 3)).unwrap();
    let b = pretrain_edgepred(&ds.graphs, &config(Arch::Gcn, 3)).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.checkpoint.meta.objective, "edge_prediction");
    assert_eq!(a.checkpoint.meta.epochs, 51);
    assert_ne!(
        a.checkpoint,
        BackboneCheckpoint::init(Arch::Gcn, &[3, 16, 16], 3).unwrap()
    );
}

#[test]
fn checkpoint_is_frozen_downstream() {
    let ds = toy();
    let ckpt = pretrain_edgepred(&ds.graphs, &config(Arch::Gcn, 0)).unwrap().checkpoint;
    let g = ckpt.prepare_graph(&ds.graphs[0]).unwrap();
    let tape = Tape::new();
    let bound = ckpt.bind(&tape, false);
    let x = tape.constant(g.features().clone());
    let h = encode(&g, &bound, x, None).unwrap().embeddings;
    h.sum_all().backward().unwrap();
    assert!(bound.vars().iter().all(|&v| tape.grad(v).is_none()));
}

#[test]
fn dims_mismatch_rejected() {
    let ds = toy();
    let cfg = PretrainConfig {
        dims: vec![5, 4],
        ..config(Arch::Gcn, 0)
    };
    assert!(pretrain_edgepred(&ds.graphs, &cfg).is_err());
}
