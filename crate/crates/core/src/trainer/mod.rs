//! Downstream adaptation: linear probing, prompt tuning and fine-tuning.

mod ablation;
mod head;
mod metrics;

pub use ablation::{ablation_grid, AblationRow};
pub use head::{cross_entropy, BoundHead, Head};
pub use metrics::{evaluate, roc_auc, usage_cv, EpochMetrics, MeanStd, Metric, SeedResult, UsageRow};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{batched_readout, encode, BackboneCheckpoint, BoundBackbone, Readout};
use crate::error::{Error, Result};
use crate::graph::{sample_few_shot, Dataset, FewShotSplit, Graph, Task};
use crate::optim::{Adam, AdamConfig};
use crate::prompt::{
    pc_loss, total_loss, usage_vector, BoundPrompt, PromptConfig, PromptState, PromptSwitches, PromptVariant,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    LinearProbe,
    Mag,
    MagPlus,
    FineTune,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::LinearProbe => "linear_probe",
            Mode::Mag => "mag",
            Mode::MagPlus => "mag_plus",
            Mode::FineTune => "fine_tune",
        }
    }

    pub fn prompt_variant(self) -> Option<PromptVariant> {
        match self {
            Mode::Mag => Some(PromptVariant::Mag),
            Mode::MagPlus => Some(PromptVariant::MagPlus),
            _ => None,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "linear_probe" => Ok(Mode::LinearProbe),
            "mag" => Ok(Mode::Mag),
            "mag_plus" => Ok(Mode::MagPlus),
            "fine_tune" => Ok(Mode::FineTune),
            other => Err(format!(
                "unknown variant {other:?} (expected linear_probe, mag, mag_plus or fine_tune)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    BestVal,
    LastEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub k_shots: usize,
    pub beta: f64,
    pub gate_dim: usize,
    pub num_basis: usize,
    pub lambda_pc: f64,
    pub slope: f64,
    pub pc_eps: f64,
    pub readout: Readout,
    pub selection: Selection,
    /// Epochs without validation improvement before stopping; `None` disables.
    pub patience: Option<usize>,
    pub switches: PromptSwitches,
}

impl TuneConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            epochs: 200,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 32,
            k_shots: 5,
            beta: 0.5,
            gate_dim: 16,
            num_basis: 10,
            lambda_pc: if mode == Mode::MagPlus { 0.1 } else { 0.0 },
            slope: crate::prompt::DEFAULT_SLOPE,
            pc_eps: crate::prompt::DEFAULT_PC_EPS,
            readout: Readout::Mean,
            selection: Selection::BestVal,
            patience: Some(50),
            switches: PromptSwitches::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lambda_pc != 0.0 && self.mode != Mode::MagPlus {
            return bad(format!(
                "lambda_pc = {} only applies to mag_plus, not {}",
                self.lambda_pc,
                self.mode.name()
            ));
        }
        if !(self.lambda_pc >= 0.0 && self.lambda_pc.is_finite()) {
            return bad(format!(
                "lambda_pc must be finite and non-negative, got {}",
                self.lambda_pc
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.k_shots == 0 {
            return bad("epochs, batch_size and k_shots must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.pc_eps <= 0.0 || !self.pc_eps.is_finite() {
            return bad(format!("pc_eps must be positive, got {}", self.pc_eps));
        }
        if self.mode.prompt_variant().is_some() {
            PromptState::<f64>::with_dims(&[(1, 1)], &self.prompt_config().expect("prompt mode"), 0)?;
        }
        Ok(())
    }

    pub fn prompt_config(&self) -> Option<PromptConfig> {
        Some(PromptConfig {
            variant: self.mode.prompt_variant()?,
            gate_dim: self.gate_dim,
            num_basis: self.num_basis,
            beta: self.beta,
            slope: self.slope,
        })
    }
}

/// Seed streams derived from the run seed.
fn derived_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Trainable state of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub prompt: Option<PromptState<S>>,
    pub head: Head<S>,
    /// Present only when fine-tuning.
    pub backbone: Option<BackboneCheckpoint<S>>,
}

impl<S: Scalar> Model<S> {
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = Vec::new();
        if let Some(p) = &mut self.prompt {
            v.extend(p.tensors_mut());
        }
        v.extend(self.head.tensors_mut());
        if let Some(b) = &mut self.backbone {
            v.extend(b.tensors_mut());
        }
        v
    }

    fn shapes(&mut self) -> Vec<[usize; 2]> {
        self.tensors_mut().iter().map(|t| t.shape()).collect()
    }
}

struct Bound<'t, S: Scalar> {
    backbone: BoundBackbone<'t, S>,
    prompt: Option<BoundPrompt<'t, S>>,
    head: BoundHead<'t, S>,
    fine_tune: bool,
}

impl<'t, S: Scalar> Bound<'t, S> {
    fn new(tape: &'t Tape<S>, model: &Model<S>, frozen: &BackboneCheckpoint<S>, switches: PromptSwitches) -> Self {
        let fine_tune = model.backbone.is_some();
        let backbone = model.backbone.as_ref().unwrap_or(frozen).bind(tape, fine_tune);
        Self {
            backbone,
            prompt: model.prompt.as_ref().map(|p| p.bind(tape, switches)),
            head: model.head.bind(tape),
            fine_tune,
        }
    }

    fn vars(&self) -> Vec<Var<'t, S>> {
        let mut v = self.prompt.as_ref().map(BoundPrompt::vars).unwrap_or_default();
        v.extend(self.head.vars());
        if self.fine_tune {
            v.extend(self.backbone.vars());
        }
        v
    }
}

struct Pass<'t, S: Scalar> {
    logits: Var<'t, S>,
    pcs: Vec<Var<'t, S>>,
    usage: Vec<Vec<f64>>,
    magnitude: Vec<f64>,
}

fn run_pass<'t, S: Scalar>(
    tape: &'t Tape<S>,
    g: &Graph<S>,
    bound: &Bound<'t, S>,
    pool: Option<(&[usize], usize, Readout)>,
    pc_eps: S,
) -> Result<Pass<'t, S>> {
    let x = tape.constant(g.features().clone());
    let enc = encode(g, &bound.backbone, x, bound.prompt.as_ref())?;
    let h = match pool {
        Some((membership, n, mode)) => batched_readout(enc.embeddings, membership, n, mode)?,
        None => enc.embeddings,
    };
    let logits = bound.head.logits(h)?;
    let mut pcs = Vec::new();
    let mut usage = Vec::new();
    for pi in enc.traces.iter().filter_map(|t| t.mixture) {
        let s = usage_vector(pi)?;
        usage.push(s.value().data().iter().map(|x| x.to_f64_lossy()).collect());
        pcs.push(pc_loss(s, pc_eps)?);
    }
    Ok(Pass {
        logits,
        pcs,
        usage,
        magnitude: enc.traces.iter().map(|t| t.prompt_magnitude).collect(),
    })
}

/// Everything produced by one seed.
#[derive(Debug, Clone)]
pub struct TuneOutcome<S> {
    /// Parameters at the selected epoch.
    pub model: Model<S>,
    pub split: FewShotSplit,
    pub epochs: Vec<EpochMetrics>,
    pub usage: Vec<UsageRow>,
    pub result: SeedResult,
}

/// Runs one seed of downstream training.
pub fn tune<S: Scalar>(
    dataset: &Dataset<S>,
    ckpt: &BackboneCheckpoint<S>,
    cfg: &TuneConfig,
    seed: u64,
) -> Result<TuneOutcome<S>> {
    cfg.validate()?;
    if dataset.meta.feature_dim != ckpt.input_dim() {
        return Err(Error::DimMismatch {
            what: "dataset feature dim (checkpoint input dim)".into(),
            expected: ckpt.input_dim(),
            found: dataset.meta.feature_dim,
        });
    }
    let labels = dataset.labels();
    let split = sample_few_shot(&labels, cfg.k_shots, derived_seed(seed, 1))?;
    let mut model = Model {
        prompt: match cfg.prompt_config() {
            Some(pc) => Some(PromptState::init(ckpt, &pc, derived_seed(seed, 2))?),
            None => None,
        },
        head: Head::init(ckpt.output_dim(), dataset.meta.num_classes, derived_seed(seed, 3)),
        backbone: (cfg.mode == Mode::FineTune).then(|| ckpt.clone()),
    };
    let metric = match dataset.task() {
        Task::Graph if dataset.meta.num_classes == 2 => Metric::RocAuc,
        _ => Metric::Accuracy,
    };
    let prepared: Vec<Graph<S>> = dataset
        .graphs
        .iter()
        .map(|g| ckpt.prepare_graph(g))
        .collect::<Result<_>>()?;
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, &model.shapes());
    let mut run = Run {
        cfg,
        seed,
        metric,
        frozen: ckpt,
        labels: &labels,
        split: &split,
        epochs: Vec::new(),
        usage: Vec::new(),
        best: None,
    };
    match dataset.task() {
        Task::Node => run.node_loop(&prepared[0], &mut model, &mut adam)?,
        Task::Graph => run.graph_loop(&prepared, &mut model, &mut adam)?,
    }
    let Run {
        epochs, usage, best, ..
    } = run;
    let last = epochs.last().expect("at least one epoch");
    let (best_epoch, best_model) = match (cfg.selection, best) {
        (Selection::BestVal, Some((e, m))) => (e, m),
        _ => (last.epoch, model),
    };
    let chosen = &epochs[best_epoch];
    let result = SeedResult {
        seed,
        metric,
        best_epoch,
        epochs_run: epochs.len(),
        train: chosen.train,
        val: chosen.val,
        test: chosen.test,
        final_usage_cv: last.usage_cv,
        split_warnings: split.warnings.clone(),
    };
    Ok(TuneOutcome {
        model: best_model,
        split,
        epochs,
        usage,
        result,
    })
}

struct Run<'a, S: Scalar> {
    cfg: &'a TuneConfig,
    seed: u64,
    metric: Metric,
    frozen: &'a BackboneCheckpoint<S>,
    labels: &'a [usize],
    split: &'a FewShotSplit,
    epochs: Vec<EpochMetrics>,
    usage: Vec<UsageRow>,
    best: Option<(usize, Model<S>)>,
}

struct StepLoss {
    task: f64,
    pcs: Vec<f64>,
    total: f64,
}

impl<S: Scalar> Run<'_, S> {
    fn lambda(&self) -> S {
        S::lit(self.cfg.lambda_pc)
    }

    /// Builds the objective, backpropagates and applies one optimizer step.
    #[allow(clippy::too_many_arguments)]
    fn step<'t>(
        &self,
        tape: &'t Tape<S>,
        bound: &Bound<'t, S>,
        pass: &Pass<'t, S>,
        targets: &[usize],
        rows: Option<&[usize]>,
        model: &mut Model<S>,
        adam: &mut Adam<S>,
        epoch: usize,
    ) -> Result<StepLoss> {
        let logits = match rows {
            Some(r) => pass.logits.gather_rows(r)?,
            None => pass.logits,
        };
        let task = cross_entropy(logits, targets)?;
        let total = total_loss(task, &pass.pcs, self.lambda(), pass.pcs.len())?;
        let loss = StepLoss {
            task: task.item().to_f64_lossy(),
            pcs: pass.pcs.iter().map(|p| p.item().to_f64_lossy()).collect(),
            total: total.item().to_f64_lossy(),
        };
        if !loss.total.is_finite() || !loss.task.is_finite() {
            return Err(Error::Diverged {
                epoch,
                quantity: "training loss".into(),
            });
        }
        total.backward()?;
        let grads: Vec<Tensor<S>> = bound
            .vars()
            .into_iter()
            .map(|v| tape.grad(v).expect("trainable leaf has a gradient"))
            .collect();
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Diverged {
                epoch,
                quantity: "gradient".into(),
            });
        }
        adam.step(&mut model.tensors_mut(), &grads);
        Ok(loss)
    }

    fn labels_at(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    fn score(&self, logits: &Tensor<S>, idx: &[usize]) -> Result<f64> {
        if idx.is_empty() {
            return Ok(f64::NAN);
        }
        let picked = logits.select_rows(idx);
        let labels = self.labels_at(idx);
        match evaluate(&picked, &labels, self.metric) {
            Err(Error::Precondition(_)) if self.metric == Metric::RocAuc => Ok(f64::NAN),
            other => other,
        }
    }

    fn loss_on(&self, logits: &Tensor<S>, idx: &[usize]) -> Result<f64> {
        if idx.is_empty() {
            return Ok(f64::NAN);
        }
        let tape = Tape::new();
        let picked = tape.constant(logits.select_rows(idx));
        Ok(cross_entropy(picked, &self.labels_at(idx))?.item().to_f64_lossy())
    }

    /// Records metrics and updates best-val tracking. Returns true to stop.
    fn record(&mut self, m: EpochMetrics, usage: &[Vec<f64>], snapshot: &Model<S>) -> bool {
        let epoch = m.epoch;
        for (layer, s) in usage.iter().enumerate() {
            for (component, &u) in s.iter().enumerate() {
                self.usage.push(UsageRow {
                    epoch,
                    layer,
                    component,
                    usage: u,
                });
            }
        }
        let improved = match &self.best {
            None => true,
            Some((b, _)) => {
                let best = &self.epochs[*b];
                m.val > best.val || (m.val == best.val && m.val_loss < best.val_loss)
            }
        };
        self.epochs.push(m);
        if improved {
            self.best = Some((epoch, snapshot.clone()));
        }
        match (self.cfg.patience, &self.best) {
            (Some(p), Some((b, _))) => epoch - b >= p,
            _ => false,
        }
    }

    fn node_loop(&mut self, g: &Graph<S>, model: &mut Model<S>, adam: &mut Adam<S>) -> Result<()> {
        let train = self.split.train.clone();
        let targets = self.labels_at(&train);
        let eps = S::lit(self.cfg.pc_eps);
        for epoch in 0..self.cfg.epochs {
            let tape = Tape::new();
            let bound = Bound::new(&tape, model, self.frozen, self.cfg.switches);
            let pass = run_pass(&tape, g, &bound, None, eps)?;
            let logits = pass.logits.value();
            let (tr, va, te) = (
                self.score(&logits, &train)?,
                self.score(&logits, &self.split.val)?,
                self.score(&logits, &self.split.test)?,
            );
            let snapshot = model.clone();
            let loss = self.step(&tape, &bound, &pass, &targets, Some(&train), model, adam, epoch)?;
            let m = EpochMetrics {
                seed: self.seed,
                epoch,
                task_loss: loss.task,
                pc_loss: loss.pcs,
                total_loss: loss.total,
                train: tr,
                val: va,
                test: te,
                val_loss: self.loss_on(&logits, &self.split.val)?,
                usage_cv: usage_cv(&pass.usage),
                prompt_magnitude: pass.magnitude.clone(),
            };
            if self.record(m, &pass.usage, &snapshot) {
                break;
            }
        }
        Ok(())
    }

    fn graph_loop(&mut self, graphs: &[Graph<S>], model: &mut Model<S>, adam: &mut Adam<S>) -> Result<()> {
        let eps = S::lit(self.cfg.pc_eps);
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(self.seed, 4));
        let mut order = self.split.train.clone();
        let all: Vec<usize> = (0..graphs.len()).collect();
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            let mut sums = StepLoss {
                task: 0.0,
                pcs: Vec::new(),
                total: 0.0,
            };
            let mut usage: Vec<Vec<f64>> = Vec::new();
            let mut magnitude: Vec<f64> = Vec::new();
            let batches: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
            for batch in &batches {
                let refs: Vec<&Graph<S>> = batch.iter().map(|&i| &graphs[i]).collect();
                let (union, membership) = Graph::disjoint_union(&refs)?;
                let tape = Tape::new();
                let bound = Bound::new(&tape, model, self.frozen, self.cfg.switches);
                let pass = run_pass(
                    &tape,
                    &union,
                    &bound,
                    Some((&membership, batch.len(), self.cfg.readout)),
                    eps,
                )?;
                let targets = self.labels_at(batch);
                let loss = self.step(&tape, &bound, &pass, &targets, None, model, adam, epoch)?;
                sums.task += loss.task;
                sums.total += loss.total;
                accumulate(&mut sums.pcs, &loss.pcs);
                if usage.is_empty() {
                    usage = pass.usage.clone();
                } else {
                    for (acc, s) in usage.iter_mut().zip(&pass.usage) {
                        accumulate(acc, s);
                    }
                }
                accumulate(&mut magnitude, &pass.magnitude);
            }
            let nb = batches.len() as f64;
            let logits = self.predict_graphs(graphs, &all, model)?;
            let m = EpochMetrics {
                seed: self.seed,
                epoch,
                task_loss: sums.task / nb,
                pc_loss: sums.pcs.iter().map(|x| x / nb).collect(),
                total_loss: sums.total / nb,
                train: self.score(&logits, &self.split.train)?,
                val: self.score(&logits, &self.split.val)?,
                test: self.score(&logits, &self.split.test)?,
                val_loss: self.loss_on(&logits, &self.split.val)?,
                usage_cv: usage_cv(&usage),
                prompt_magnitude: magnitude.iter().map(|x| x / nb).collect(),
            };
            let snapshot = model.clone();
            if self.record(m, &usage, &snapshot) {
                break;
            }
        }
        Ok(())
    }

    fn predict_graphs(&self, graphs: &[Graph<S>], idx: &[usize], model: &Model<S>) -> Result<Tensor<S>> {
        let k = model.head.num_classes();
        let mut data = Vec::with_capacity(idx.len() * k);
        for chunk in idx.chunks(self.cfg.batch_size.max(1)) {
            let refs: Vec<&Graph<S>> = chunk.iter().map(|&i| &graphs[i]).collect();
            let (union, membership) = Graph::disjoint_union(&refs)?;
            let tape = Tape::new();
            let bound = Bound::new(&tape, model, self.frozen, self.cfg.switches);
            let pass = run_pass(
                &tape,
                &union,
                &bound,
                Some((&membership, chunk.len(), self.cfg.readout)),
                S::lit(self.cfg.pc_eps),
            )?;
            data.extend_from_slice(pass.logits.value().data());
        }
        Ok(Tensor::new(idx.len(), k, data)?)
    }
}

fn accumulate(acc: &mut Vec<f64>, xs: &[f64]) {
    if acc.is_empty() {
        acc.extend_from_slice(xs);
    } else {
        for (a, x) in acc.iter_mut().zip(xs) {
            *a += x;
        }
    }
}

/// Runs `seeds` concurrently, returning outcomes in seed order.
pub fn tune_seeds<S: Scalar>(
    dataset: &Dataset<S>,
    ckpt: &BackboneCheckpoint<S>,
    cfg: &TuneConfig,
    seeds: &[u64],
) -> Result<Vec<TuneOutcome<S>>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| scope.spawn(move || tune(dataset, ckpt, cfg, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}
