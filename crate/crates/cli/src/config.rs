//! Run configuration: one flat JSON object.
//!
//! Resolution order is defaults, then the `--config` file, then individual
//! command-line flags. The resolved object is what gets written to
//! `config.json`, so feeding that file back reproduces the run.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use magprompt::backbone::{Arch, PretrainConfig, Readout};
use magprompt::graph::SbmSpec;
use magprompt::prompt::{PromptSwitches, DEFAULT_PC_EPS, DEFAULT_SLOPE};
use magprompt::trainer::{Mode, Selection, TuneConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory; when absent the SBM fields below define the data.
    pub dataset: Option<PathBuf>,
    pub sbm_blocks: usize,
    pub sbm_per_block: usize,
    pub sbm_p_in: f64,
    pub sbm_p_out: f64,
    pub sbm_noise: f64,
    pub sbm_feature_dim: usize,
    pub sbm_seed: u64,

    pub arch: Arch,
    /// Encoder widths `d_0..d_L`. Empty means `[feature_dim, 128, 128]`.
    pub dims: Vec<usize>,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub neg_ratio: usize,

    /// Backbone checkpoint consumed by `tune` and `ablate`.
    pub checkpoint: Option<PathBuf>,
    pub variant: Mode,
    pub k_shots: usize,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub gate_dim: usize,
    pub num_basis: usize,
    /// Unset resolves to 0.1 for mag_plus and 0 otherwise.
    pub lambda_pc: Option<f64>,
    pub slope: f64,
    pub pc_eps: f64,
    pub readout: Readout,
    pub selection: Selection,
    /// 0 disables early stopping.
    pub patience: usize,
    pub reweight: bool,
    pub edge_prompt: bool,

    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sbm = SbmSpec::default();
        Self {
            dataset: None,
            sbm_blocks: sbm.blocks,
            sbm_per_block: sbm.per_block,
            sbm_p_in: sbm.p_in,
            sbm_p_out: sbm.p_out,
            sbm_noise: sbm.noise,
            sbm_feature_dim: sbm.feature_dim,
            sbm_seed: sbm.seed,
            arch: Arch::Gcn,
            dims: Vec::new(),
            pretrain_epochs: 100,
            pretrain_lr: 0.01,
            neg_ratio: 1,
            checkpoint: None,
            variant: Mode::MagPlus,
            k_shots: 5,
            seeds: vec![0, 1, 2, 3, 4],
            epochs: 200,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 32,
            beta: 0.5,
            gate_dim: 16,
            num_basis: 10,
            lambda_pc: None,
            slope: DEFAULT_SLOPE,
            pc_eps: DEFAULT_PC_EPS,
            readout: Readout::Mean,
            selection: Selection::BestVal,
            patience: 50,
            reweight: true,
            edge_prompt: true,
            out: PathBuf::from("runs"),
        }
    }
}

/// Command-line mirror of [`RunConfig`]; every flag is optional and only
/// set flags override the file.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Overrides {
    /// Flat JSON config file.
    #[arg(long = "config", value_name = "FILE")]
    #[serde(skip)]
    pub config_file: Option<PathBuf>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sbm_blocks: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sbm_per_block: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sbm_p_in: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sbm_p_out: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sbm_noise: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sbm_feature_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sbm_seed: Option<u64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<Arch>,
    /// Comma-separated layer widths.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neg_ratio: Option<usize>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Mode>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_shots: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_basis: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_pc: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pc_eps: Option<f64>,
    #[arg(long, value_parser = parse_readout)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub readout: Option<Readout>,
    #[arg(long, value_parser = parse_selection)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<Selection>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reweight: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_prompt: Option<bool>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn parse_readout(s: &str) -> Result<Readout, String> {
    serde_json::from_value(Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown readout {s:?} (mean or sum)"))
}

fn parse_selection(s: &str) -> Result<Selection, String> {
    serde_json::from_value(Value::String(s.to_ascii_lowercase().replace('-', "_")))
        .map_err(|_| format!("unknown selection {s:?} (best_val or last_epoch)"))
}

fn overlay(base: &mut Map<String, Value>, layer: Map<String, Value>) {
    for (k, v) in layer {
        base.insert(k, v);
    }
}

fn read_file(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Usage(format!(
            "{}: config must be a JSON object",
            path.display()
        ))),
        Err(e) => Err(CliError::Usage(format!("{}: {e}", path.display()))),
    }
}

impl RunConfig {
    pub fn resolve(overrides: &Overrides) -> Result<Self, CliError> {
        let Value::Object(mut merged) = serde_json::to_value(RunConfig::default()).expect("config serializes") else {
            unreachable!("struct serializes to an object")
        };
        if let Some(path) = &overrides.config_file {
            overlay(&mut merged, read_file(path)?);
        }
        let Value::Object(cli) = serde_json::to_value(overrides).expect("overrides serialize") else {
            unreachable!("struct serializes to an object")
        };
        overlay(&mut merged, cli);
        serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn sbm_spec(&self) -> SbmSpec {
        SbmSpec {
            blocks: self.sbm_blocks,
            per_block: self.sbm_per_block,
            p_in: self.sbm_p_in,
            p_out: self.sbm_p_out,
            noise: self.sbm_noise,
            feature_dim: self.sbm_feature_dim,
            seed: self.sbm_seed,
        }
    }

    pub fn lambda_for(&self, mode: Mode) -> f64 {
        self.lambda_pc.unwrap_or(if mode == Mode::MagPlus { 0.1 } else { 0.0 })
    }

    pub fn tune_config(&self, mode: Mode) -> TuneConfig {
        TuneConfig {
            mode,
            epochs: self.epochs,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            k_shots: self.k_shots,
            beta: self.beta,
            gate_dim: self.gate_dim,
            num_basis: self.num_basis,
            lambda_pc: self.lambda_for(mode),
            slope: self.slope,
            pc_eps: self.pc_eps,
            readout: self.readout,
            selection: self.selection,
            patience: (self.patience > 0).then_some(self.patience),
            switches: PromptSwitches {
                reweight: self.reweight,
                edge_prompt: self.edge_prompt,
            },
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            arch: self.arch,
            dims: self.dims.clone(),
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            neg_ratio: self.neg_ratio,
            seed,
        }
    }

    /// Checks every field that can be checked without touching data.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.dataset.is_none() {
            if self.sbm_blocks < 2 || self.sbm_per_block == 0 {
                return bad("sbm needs at least 2 blocks of at least one node".into());
            }
            for (name, p) in [("sbm_p_in", self.sbm_p_in), ("sbm_p_out", self.sbm_p_out)] {
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("{name} must lie in [0, 1], got {p}"));
                }
            }
            if !(self.sbm_noise >= 0.0 && self.sbm_noise.is_finite()) {
                return bad(format!(
                    "sbm_noise must be finite and non-negative, got {}",
                    self.sbm_noise
                ));
            }
            if self.sbm_feature_dim < self.sbm_blocks {
                return bad(format!(
                    "sbm_feature_dim {} must be at least sbm_blocks {}",
                    self.sbm_feature_dim, self.sbm_blocks
                ));
            }
        }
        if !self.dims.is_empty() && (self.dims.len() < 2 || self.dims.contains(&0)) {
            return bad(format!(
                "dims must list at least two positive widths, got {:?}",
                self.dims
            ));
        }
        if self.pretrain_epochs == 0 || self.neg_ratio == 0 {
            return bad("pretrain_epochs and neg_ratio must be positive".into());
        }
        if !(self.pretrain_lr > 0.0 && self.pretrain_lr.is_finite()) {
            return bad(format!("pretrain_lr must be positive, got {}", self.pretrain_lr));
        }
        self.tune_config(self.variant).validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, json: &str) -> PathBuf {
        let p = dir.join("c.json");
        std::fs::write(&p, json).unwrap();
        p
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn cli_beats_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), r#"{"epochs": 7, "lr": 0.5, "variant": "mag"}"#);
        let o = Overrides {
            config_file: Some(path),
            lr: Some(0.25),
            ..Default::default()
        };
        let c = RunConfig::resolve(&o).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.lr, 0.25);
        assert_eq!(c.variant, Mode::Mag);
        assert_eq!(c.batch_size, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let o = Overrides {
            config_file: Some(write(dir.path(), r#"{"epohcs": 7}"#)),
            ..Default::default()
        };
        assert!(matches!(RunConfig::resolve(&o), Err(CliError::Usage(_))));
    }

    #[test]
    fn lambda_resolves_by_variant() {
        let mut c = RunConfig::default();
        assert_eq!(c.tune_config(Mode::MagPlus).lambda_pc, 0.1);
        assert_eq!(c.tune_config(Mode::Mag).lambda_pc, 0.0);
        c.variant = Mode::Mag;
        assert!(c.validate().is_ok());
        c.lambda_pc = Some(0.1);
        assert!(c.validate().is_err());
        c.lambda_pc = Some(0.0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn resolved_file_reproduces_itself() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig {
            seeds: vec![3, 9],
            lambda_pc: Some(0.3),
            ..RunConfig::default()
        };
        let path = write(dir.path(), &serde_json::to_string_pretty(&c).unwrap());
        let o = Overrides {
            config_file: Some(path),
            ..Default::default()
        };
        assert_eq!(RunConfig::resolve(&o).unwrap(), c);
    }

    #[test]
    fn bad_values_fail_validation() {
        let cases: [fn(&mut RunConfig); 8] = [
            |c| c.seeds.clear(),
            |c| c.seeds = vec![1, 1],
            |c| c.sbm_p_in = 1.5,
            |c| c.dims = vec![8],
            |c| c.beta = 2.0,
            |c| c.gate_dim = 0,
            |c| c.epochs = 0,
            |c| c.sbm_feature_dim = 1,
        ];
        for f in cases {
            let mut c = RunConfig::default();
            f(&mut c);
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
