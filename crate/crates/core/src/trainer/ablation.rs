use serde::{Deserialize, Serialize};

use super::{tune_seeds, MeanStd, Mode, TuneConfig};
use crate::backbone::BackboneCheckpoint;
use crate::error::Result;
use crate::graph::Dataset;
use crate::prompt::PromptSwitches;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub rw: bool,
    pub ep: bool,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

/// The reweighting × edge-prompt grid. The all-off cell is a linear probe,
/// the others are MAG_PLUS runs with the corresponding parts switched off.
pub fn ablation_grid<S: Scalar>(
    dataset: &Dataset<S>,
    ckpt: &BackboneCheckpoint<S>,
    base: &TuneConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(4);
    for (rw, ep) in [(false, false), (true, false), (false, true), (true, true)] {
        let cfg = if !rw && !ep {
            TuneConfig {
                mode: Mode::LinearProbe,
                lambda_pc: 0.0,
                switches: PromptSwitches::default(),
                ..base.clone()
            }
        } else {
            TuneConfig {
                mode: Mode::MagPlus,
                switches: PromptSwitches {
                    reweight: rw,
                    edge_prompt: ep,
                },
                ..base.clone()
            }
        };
        let outcomes = tune_seeds(dataset, ckpt, &cfg, seeds)?;
        let per_seed: Vec<f64> = outcomes.iter().map(|o| o.result.test).collect();
        let stats = MeanStd::of(&per_seed);
        rows.push(AblationRow {
            rw,
            ep,
            seeds: seeds.len(),
            mean: stats.mean,
            std: stats.std,
            per_seed,
        });
    }
    Ok(rows)
}
