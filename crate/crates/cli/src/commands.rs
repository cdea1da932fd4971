use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use magprompt::backbone::{pretrain_edgepred, Arch};
use magprompt::checkpoint::write_container;
use magprompt::graph::{load_dataset, save_dataset, sbm_synthesize, Dataset, Task};
use magprompt::trainer::{ablation_grid, tune_seeds, AblationRow, MeanStd, Metric, Mode, SeedResult};
use magprompt::{Checkpoint64, Dataset64};

use crate::config::RunConfig;
use crate::CliError;

pub const HEAD_MAGIC: &str = "MAGP-HEAD-1";

/// Sole writer for one output directory.
struct Output {
    dir: PathBuf,
}

impl Output {
    fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn text(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).expect("output serializes");
        s.push('\n');
        self.text(name, &s)
    }
}

fn load_data(cfg: &RunConfig) -> Result<Dataset64, CliError> {
    Ok(match &cfg.dataset {
        Some(dir) => load_dataset(dir).map_err(magprompt::Error::from)?,
        None => {
            let g = sbm_synthesize(&cfg.sbm_spec()).map_err(magprompt::Error::from)?;
            Dataset::node_task(g, cfg.sbm_blocks)
        }
    })
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint64, CliError> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    Ok(Checkpoint64::load(path).map_err(magprompt::Error::from)?)
}

fn metric_for(data: &Dataset64) -> Metric {
    if data.task() == Task::Graph && data.meta.num_classes == 2 {
        Metric::RocAuc
    } else {
        Metric::Accuracy
    }
}

#[derive(Serialize)]
struct PretrainSummary {
    command: &'static str,
    arch: Arch,
    dims: Vec<usize>,
    seed: u64,
    epochs: usize,
    initial_loss: f64,
    final_loss: f64,
}

pub fn pretrain(mut cfg: RunConfig) -> Result<(), CliError> {
    let data = load_data(&cfg)?;
    if cfg.dims.is_empty() {
        cfg.dims = vec![data.meta.feature_dim, 128, 128];
    }
    let seed = cfg.seeds[0];
    let out = Output::create(&cfg.out)?;
    out.json("config.json", &cfg)?;
    let outcome = pretrain_edgepred(&data.graphs, &cfg.pretrain_config(seed))?;
    let ckpt_path = out.path("backbone.ckpt");
    outcome.checkpoint.save(&ckpt_path).map_err(magprompt::Error::from)?;
    let mut curve = String::from("epoch,loss\n");
    for (e, l) in outcome.losses.iter().enumerate() {
        writeln!(curve, "{e},{l}").expect("string write");
    }
    out.text("pretrain_loss.csv", &curve)?;
    let summary = PretrainSummary {
        command: "pretrain",
        arch: cfg.arch,
        dims: cfg.dims.clone(),
        seed,
        epochs: outcome.losses.len(),
        initial_loss: outcome.losses[0],
        final_loss: *outcome.losses.last().expect("at least one epoch"),
    };
    out.json("summary.json", &summary)?;
    println!(
        "pretrained {} {:?}: loss {:.4} -> {:.4}, wrote {}",
        cfg.arch.name(),
        cfg.dims,
        summary.initial_loss,
        summary.final_loss,
        ckpt_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TuneSummary<'a> {
    command: &'static str,
    variant: Mode,
    metric: Metric,
    seeds: &'a [u64],
    train: MeanStd,
    val: MeanStd,
    test: MeanStd,
    usage_cv: Option<MeanStd>,
    per_seed: Vec<&'a SeedResult>,
}

pub fn tune(mut cfg: RunConfig) -> Result<(), CliError> {
    let data = load_data(&cfg)?;
    let ckpt = load_checkpoint(&cfg)?;
    if cfg.dims.is_empty() {
        cfg.dims = ckpt.dims.clone();
    }
    let out = Output::create(&cfg.out)?;
    out.json("config.json", &cfg)?;
    let tc = cfg.tune_config(cfg.variant);
    let outcomes = tune_seeds(&data, &ckpt, &tc, &cfg.seeds)?;

    let mut metrics = String::new();
    for e in outcomes.iter().flat_map(|o| &o.epochs) {
        metrics.push_str(&serde_json::to_string(e).expect("metrics serialize"));
        metrics.push('\n');
    }
    out.text("metrics.jsonl", &metrics)?;

    if cfg.variant == Mode::MagPlus {
        let mut usage = String::from("seed,epoch,layer,component,usage\n");
        for o in &outcomes {
            for u in &o.usage {
                writeln!(
                    usage,
                    "{},{},{},{},{}",
                    o.result.seed, u.epoch, u.layer, u.component, u.usage
                )
                .expect("string write");
            }
        }
        out.text("usage.csv", &usage)?;
    }

    for o in &outcomes {
        let seed = o.result.seed;
        let head = o.model.head.named_tensors();
        let head: Vec<(String, &magprompt::Tensor64)> = head.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        let save_err = |e| CliError::Core(magprompt::Error::from(e));
        match &o.model.prompt {
            Some(p) => p
                .save(out.path(&format!("prompt_seed{seed}.ckpt")), &head)
                .map_err(save_err)?,
            None => write_container(
                out.path(&format!("head_seed{seed}.ckpt")),
                HEAD_MAGIC,
                serde_json::Map::new(),
                &head,
            )
            .map_err(save_err)?,
        }
        if let Some(b) = &o.model.backbone {
            b.save(out.path(&format!("backbone_seed{seed}.ckpt")))
                .map_err(save_err)?;
        }
    }

    let results: Vec<&SeedResult> = outcomes.iter().map(|o| &o.result).collect();
    let stat = |f: fn(&SeedResult) -> f64| MeanStd::of(&results.iter().map(|r| f(r)).collect::<Vec<_>>());
    let cvs: Option<Vec<f64>> = results.iter().map(|r| r.final_usage_cv).collect();
    let summary = TuneSummary {
        command: "tune",
        variant: cfg.variant,
        metric: metric_for(&data),
        seeds: &cfg.seeds,
        train: stat(|r| r.train),
        val: stat(|r| r.val),
        test: stat(|r| r.test),
        usage_cv: cvs.map(|c| MeanStd::of(&c)),
        per_seed: results,
    };
    out.json("summary.json", &summary)?;
    println!(
        "{} test {}: {:.4} ± {:.4} over {} seeds",
        cfg.variant.name(),
        summary.metric.name(),
        summary.test.mean,
        summary.test.std,
        cfg.seeds.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct AblateSummary<'a> {
    command: &'static str,
    metric: Metric,
    seeds: &'a [u64],
    rows: &'a [AblationRow],
}

pub fn ablate(mut cfg: RunConfig) -> Result<(), CliError> {
    let data = load_data(&cfg)?;
    let ckpt = load_checkpoint(&cfg)?;
    if cfg.dims.is_empty() {
        cfg.dims = ckpt.dims.clone();
    }
    let out = Output::create(&cfg.out)?;
    out.json("config.json", &cfg)?;
    let rows = ablation_grid(&data, &ckpt, &cfg.tune_config(Mode::MagPlus), &cfg.seeds)?;
    let mut csv = String::from("rw,ep,seeds,mean,std\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{}", r.rw, r.ep, r.seeds, r.mean, r.std).expect("string write");
    }
    out.text("ablation.csv", &csv)?;
    out.json(
        "summary.json",
        &AblateSummary {
            command: "ablate",
            metric: metric_for(&data),
            seeds: &cfg.seeds,
            rows: &rows,
        },
    )?;
    for r in &rows {
        println!("rw={:<5} ep={:<5} {:.4} ± {:.4}", r.rw, r.ep, r.mean, r.std);
    }
    Ok(())
}

pub fn verify(cfg: RunConfig, corrupt: bool) -> Result<(), CliError> {
    magprompt::autodiff::set_corrupt_segment_softmax(corrupt);
    let report = magprompt::verify::run_all(cfg.seeds[0]);
    magprompt::autodiff::set_corrupt_segment_softmax(false);
    let report = report?;
    let out = Output::create(&cfg.out)?;
    out.json("config.json", &cfg)?;
    out.json("summary.json", &report)?;
    for p in &report.properties {
        println!(
            "{} {:<26} max_error {:.3e} (tolerance {:.0e})  {}",
            if p.passed { "PASS" } else { "FAIL" },
            p.name,
            p.max_error,
            p.tolerance,
            p.detail
        );
    }
    let failed: Vec<String> = report
        .properties
        .iter()
        .filter(|p| !p.passed)
        .map(|p| p.name.to_string())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::PropertiesFailed(failed))
    }
}

#[derive(Serialize)]
struct SynthSummary {
    command: &'static str,
    num_nodes: usize,
    num_edges: usize,
    num_classes: usize,
    feature_dim: usize,
}

pub fn synth(cfg: RunConfig) -> Result<(), CliError> {
    let g = sbm_synthesize::<f64>(&cfg.sbm_spec()).map_err(magprompt::Error::from)?;
    let data = Dataset::node_task(g, cfg.sbm_blocks);
    let out = Output::create(&cfg.out)?;
    save_dataset(&data, &cfg.out).map_err(magprompt::Error::from)?;
    out.json("config.json", &cfg)?;
    let g = &data.graphs[0];
    let summary = SynthSummary {
        command: "synth",
        num_nodes: g.num_nodes(),
        num_edges: g.num_edges(),
        num_classes: data.meta.num_classes,
        feature_dim: data.meta.feature_dim,
    };
    out.json("summary.json", &summary)?;
    println!(
        "wrote {} nodes, {} directed edges to {}",
        summary.num_nodes,
        summary.num_edges,
        cfg.out.display()
    );
    Ok(())
}
