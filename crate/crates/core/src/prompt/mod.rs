//! Message-adaptive gates, compositional edge prompts and the collapse regularizer.

mod ops;

pub use ops::{
    attention_logits, compose_prompt, compute_gate, mag_plus_transform, mag_transform, mixture_weights, pc_loss,
    project_gate, total_loss, usage_vector, GateOutput,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autodiff::{Tape, Var};
use crate::backbone::BackboneCheckpoint;
use crate::checkpoint::{self, CheckpointError, PROMPT_MAGIC};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_SLOPE: f64 = 0.2;
pub const DEFAULT_PC_EPS: f64 = 1e-8;

/// Extra tensors stored alongside a prompt checkpoint.
pub type NamedTensors<S> = Vec<(String, Tensor<S>)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Mag,
    MagPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub variant: PromptVariant,
    pub gate_dim: usize,
    pub num_basis: usize,
    pub beta: f64,
    pub slope: f64,
}

impl PromptConfig {
    pub fn new(variant: PromptVariant) -> Self {
        Self {
            variant,
            gate_dim: 16,
            num_basis: 10,
            beta: 0.5,
            slope: DEFAULT_SLOPE,
        }
    }
}

/// Which parts of the prompt are active; used by the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSwitches {
    pub reweight: bool,
    pub edge_prompt: bool,
}

impl Default for PromptSwitches {
    fn default() -> Self {
        Self {
            reweight: true,
            edge_prompt: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PromptKind<S> {
    Mag {
        prompt: Tensor<S>,
    },
    MagPlus {
        basis: Tensor<S>,
        mix_weight: Tensor<S>,
        mix_bias: Tensor<S>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptLayer<S> {
    pub gate_weight: Tensor<S>,
    pub gate_bias: Tensor<S>,
    pub att_src: Tensor<S>,
    pub att_dst: Tensor<S>,
    pub kind: PromptKind<S>,
}

impl<S: Scalar> PromptLayer<S> {
    pub fn input_dim(&self) -> usize {
        self.gate_weight.rows()
    }

    pub fn message_dim(&self) -> usize {
        match &self.kind {
            PromptKind::Mag { prompt } => prompt.cols(),
            PromptKind::MagPlus { basis, .. } => basis.cols(),
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor<S>)> {
        let mut v = vec![
            ("gate_weight", &self.gate_weight),
            ("gate_bias", &self.gate_bias),
            ("att_src", &self.att_src),
            ("att_dst", &self.att_dst),
        ];
        match &self.kind {
            PromptKind::Mag { prompt } => v.push(("prompt", prompt)),
            PromptKind::MagPlus {
                basis,
                mix_weight,
                mix_bias,
            } => v.extend([("basis", basis), ("mix_weight", mix_weight), ("mix_bias", mix_bias)]),
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = vec![
            &mut self.gate_weight,
            &mut self.gate_bias,
            &mut self.att_src,
            &mut self.att_dst,
        ];
        match &mut self.kind {
            PromptKind::Mag { prompt } => v.push(prompt),
            PromptKind::MagPlus {
                basis,
                mix_weight,
                mix_bias,
            } => v.extend([basis, mix_weight, mix_bias]),
        }
        v
    }
}

/// Trainable prompt parameters for every encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState<S> {
    pub variant: PromptVariant,
    pub beta: S,
    pub slope: S,
    pub layers: Vec<PromptLayer<S>>,
}

impl<S: Scalar> PromptState<S> {
    /// Zero prompts and attention vectors, Glorot gate and mixture projections.
    pub fn init(ckpt: &BackboneCheckpoint<S>, cfg: &PromptConfig, seed: u64) -> Result<Self> {
        let layer_dims: Vec<(usize, usize)> = (0..ckpt.num_layers())
            .map(|l| (ckpt.dims[l], ckpt.message_dim(l)))
            .collect();
        Self::with_dims(&layer_dims, cfg, seed)
    }

    /// `layer_dims[l] = (input width, message width)`.
    pub fn with_dims(layer_dims: &[(usize, usize)], cfg: &PromptConfig, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", cfg.beta)));
        }
        if cfg.gate_dim == 0 {
            return Err(Error::Config("gate dimension must be positive".into()));
        }
        if cfg.variant == PromptVariant::MagPlus && cfg.num_basis == 0 {
            return Err(Error::Config(
                "number of prompt basis vectors must be at least 1".into(),
            ));
        }
        if cfg.slope < 0.0 {
            return Err(Error::Config(format!(
                "leaky slope must be non-negative, got {}",
                cfg.slope
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let da = cfg.gate_dim;
        let layers = layer_dims
            .iter()
            .map(|&(din, dm)| {
                let gate_weight = Tensor::glorot(din, da, &mut rng);
                let kind = match cfg.variant {
                    PromptVariant::Mag => PromptKind::Mag {
                        prompt: Tensor::zeros(1, dm),
                    },
                    PromptVariant::MagPlus => PromptKind::MagPlus {
                        basis: Tensor::zeros(cfg.num_basis, dm),
                        mix_weight: Tensor::glorot(da, cfg.num_basis, &mut rng),
                        mix_bias: Tensor::zeros(1, cfg.num_basis),
                    },
                };
                PromptLayer {
                    gate_weight,
                    gate_bias: Tensor::zeros(1, da),
                    att_src: Tensor::zeros(1, da),
                    att_dst: Tensor::zeros(1, da),
                    kind,
                }
            })
            .collect();
        Ok(Self {
            variant: cfg.variant,
            beta: S::lit(cfg.beta),
            slope: S::lit(cfg.slope),
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn gate_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.gate_weight.cols())
    }

    pub fn num_basis(&self) -> Option<usize> {
        match &self.layers.first()?.kind {
            PromptKind::Mag { .. } => None,
            PromptKind::MagPlus { basis, .. } => Some(basis.rows()),
        }
    }

    /// Verifies that the layer widths line up with `ckpt`.
    pub fn check_compatible(&self, ckpt: &BackboneCheckpoint<S>) -> Result<()> {
        if self.num_layers() != ckpt.num_layers() {
            return Err(Error::DimMismatch {
                what: "prompt layer count".into(),
                expected: ckpt.num_layers(),
                found: self.num_layers(),
            });
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.input_dim() != ckpt.dims[l] {
                return Err(Error::DimMismatch {
                    what: format!("prompt layer {l} input dim"),
                    expected: ckpt.dims[l],
                    found: layer.input_dim(),
                });
            }
            if layer.message_dim() != ckpt.message_dim(l) {
                return Err(Error::DimMismatch {
                    what: format!("prompt layer {l} message dim"),
                    expected: ckpt.message_dim(l),
                    found: layer.message_dim(),
                });
            }
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, p)| p.named().into_iter().map(move |(n, t)| (format!("layer{l}.{n}"), t)))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers.iter_mut().flat_map(PromptLayer::tensors_mut).collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<S>, switches: PromptSwitches) -> BoundPrompt<'t, S> {
        let vars: Vec<Var<'t, S>> = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect();
        self.bind_from(&vars, switches).expect("one var per tensor")
    }

    /// Assembles a bound prompt from vars listed in [`PromptState::tensors_mut`] order.
    pub fn bind_from<'t>(&self, vars: &[Var<'t, S>], switches: PromptSwitches) -> Result<BoundPrompt<'t, S>> {
        let expected = self.named_tensors().len();
        if vars.len() != expected {
            return Err(Error::DimMismatch {
                what: "prompt var count".into(),
                expected,
                found: vars.len(),
            });
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("count checked");
        let layers = self
            .layers
            .iter()
            .map(|p| BoundPromptLayer {
                gate_weight: next(),
                gate_bias: next(),
                att_src: next(),
                att_dst: next(),
                kind: match p.kind {
                    PromptKind::Mag { .. } => BoundKind::Mag { prompt: next() },
                    PromptKind::MagPlus { .. } => BoundKind::MagPlus {
                        basis: next(),
                        mix_weight: next(),
                        mix_bias: next(),
                    },
                },
            })
            .collect();
        Ok(BoundPrompt {
            beta: self.beta,
            slope: self.slope,
            switches,
            layers,
        })
    }

    /// Writes the prompt plus optional extra tensors (for example a task head).
    pub fn save(&self, path: impl AsRef<Path>, extra: &[(String, &Tensor<S>)]) -> Result<(), CheckpointError> {
        let mut header = Map::new();
        header.insert("variant".into(), serde_json::to_value(self.variant).expect("variant"));
        header.insert("num_layers".into(), self.num_layers().into());
        header.insert("beta".into(), self.beta.to_f64_lossy().into());
        header.insert("slope".into(), self.slope.to_f64_lossy().into());
        let dims: Vec<[usize; 2]> = self.layers.iter().map(|l| [l.input_dim(), l.message_dim()]).collect();
        header.insert("layer_dims".into(), serde_json::to_value(dims).expect("dims"));
        header.insert("gate_dim".into(), self.gate_dim().into());
        header.insert("num_basis".into(), self.num_basis().map_or(Value::Null, Value::from));
        let extra_names: Vec<&str> = extra.iter().map(|(n, _)| n.as_str()).collect();
        header.insert("extra".into(), serde_json::to_value(extra_names).expect("names"));
        let mut tensors = self.named_tensors();
        tensors.extend(extra.iter().map(|(n, t)| (format!("extra.{n}"), *t)));
        checkpoint::write_container(path, PROMPT_MAGIC, header, &tensors)
    }

    /// Reads a prompt checkpoint; the second element holds the extra tensors.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, NamedTensors<S>), CheckpointError> {
        let mut c = checkpoint::read_container::<S>(path, PROMPT_MAGIC)?;
        let variant: PromptVariant = c.header_field("variant")?;
        let num_layers: usize = c.header_field("num_layers")?;
        let beta: f64 = c.header_field("beta")?;
        let slope: f64 = c.header_field("slope")?;
        let extra_names: Vec<String> = c.header_field("extra")?;
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let mut take = |n: &str| c.take(&format!("layer{l}.{n}"));
            let gate_weight = take("gate_weight")?;
            let gate_bias = take("gate_bias")?;
            let att_src = take("att_src")?;
            let att_dst = take("att_dst")?;
            let kind = match variant {
                PromptVariant::Mag => PromptKind::Mag {
                    prompt: take("prompt")?,
                },
                PromptVariant::MagPlus => PromptKind::MagPlus {
                    basis: take("basis")?,
                    mix_weight: take("mix_weight")?,
                    mix_bias: take("mix_bias")?,
                },
            };
            layers.push(PromptLayer {
                gate_weight,
                gate_bias,
                att_src,
                att_dst,
                kind,
            });
        }
        let mut extra = Vec::new();
        for n in extra_names {
            let t = c.take(&format!("extra.{n}"))?;
            extra.push((n, t));
        }
        Ok((
            Self {
                variant,
                beta: S::lit(beta),
                slope: S::lit(slope),
                layers,
            },
            extra,
        ))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BoundKind<'t, S: Scalar> {
    Mag {
        prompt: Var<'t, S>,
    },
    MagPlus {
        basis: Var<'t, S>,
        mix_weight: Var<'t, S>,
        mix_bias: Var<'t, S>,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct BoundPromptLayer<'t, S: Scalar> {
    pub gate_weight: Var<'t, S>,
    pub gate_bias: Var<'t, S>,
    pub att_src: Var<'t, S>,
    pub att_dst: Var<'t, S>,
    pub kind: BoundKind<'t, S>,
}

/// Intermediate values of one prompted layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace<'t, S: Scalar> {
    pub gate: Option<GateOutput<'t, S>>,
    /// Per-edge mixture weights (MAG_PLUS only).
    pub mixture: Option<Var<'t, S>>,
    /// Mean L2 norm of the additive prompt term over edges.
    pub prompt_magnitude: f64,
}

#[derive(Debug, Clone)]
pub struct BoundPrompt<'t, S: Scalar> {
    pub beta: S,
    pub slope: S,
    pub switches: PromptSwitches,
    pub layers: Vec<BoundPromptLayer<'t, S>>,
}

impl<'t, S: Scalar> BoundPrompt<'t, S> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Vars in the same order as [`PromptState::tensors_mut`].
    pub fn vars(&self) -> Vec<Var<'t, S>> {
        self.layers
            .iter()
            .flat_map(|l| {
                let mut v = vec![l.gate_weight, l.gate_bias, l.att_src, l.att_dst];
                match l.kind {
                    BoundKind::Mag { prompt } => v.push(prompt),
                    BoundKind::MagPlus {
                        basis,
                        mix_weight,
                        mix_bias,
                    } => v.extend([basis, mix_weight, mix_bias]),
                }
                v
            })
            .collect()
    }

    /// Transforms the messages of `layer` computed from node states `h_prev`.
    pub fn apply_layer(
        &self,
        layer: usize,
        g: &Graph<S>,
        h_prev: Var<'t, S>,
        messages: Var<'t, S>,
    ) -> Result<(Var<'t, S>, LayerTrace<'t, S>)> {
        let p = self.layers.get(layer).ok_or_else(|| Error::DimMismatch {
            what: "prompt layer index".into(),
            expected: self.layers.len(),
            found: layer,
        })?;
        let b = project_gate(h_prev, p.gate_weight, p.gate_bias)?;
        let gate = if self.switches.reweight {
            let logits = attention_logits(b, g, p.att_src, p.att_dst, self.slope)?;
            Some(compute_gate(logits, g, self.beta)?)
        } else {
            None
        };
        let mut mixture = None;
        let mut out = match gate {
            Some(gt) => messages.scale_rows(gt.gate)?,
            None => messages,
        };
        let mut magnitude = 0.0;
        match p.kind {
            BoundKind::Mag { prompt } => {
                if self.switches.edge_prompt {
                    check_width(prompt, out)?;
                    out = out.add(prompt)?;
                    magnitude = row_norm_mean(&prompt.value());
                }
            }
            BoundKind::MagPlus {
                basis,
                mix_weight,
                mix_bias,
            } => {
                if self.switches.edge_prompt {
                    let pi = mixture_weights(b, g, mix_weight, mix_bias, self.slope)?;
                    mixture = Some(pi);
                    let pij = compose_prompt(pi, basis)?;
                    check_width(pij, out)?;
                    out = out.add(pij)?;
                    magnitude = row_norm_mean(&pij.value());
                }
            }
        }
        Ok((
            out,
            LayerTrace {
                gate,
                mixture,
                prompt_magnitude: magnitude,
            },
        ))
    }
}

fn check_width<S: Scalar>(prompt: Var<'_, S>, messages: Var<'_, S>) -> Result<()> {
    if prompt.shape()[1] != messages.shape()[1] {
        return Err(Error::DimMismatch {
            what: "prompt width".into(),
            expected: messages.shape()[1],
            found: prompt.shape()[1],
        });
    }
    Ok(())
}

fn row_norm_mean<S: Scalar>(t: &Tensor<S>) -> f64 {
    if t.rows() == 0 {
        return 0.0;
    }
    let total: f64 = (0..t.rows())
        .map(|r| {
            t.row_slice(r)
                .iter()
                .map(|x| x.to_f64_lossy().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / t.rows() as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub per_layer: Vec<usize>,
    pub total: usize,
}

/// Closed-form count of trainable prompt scalars per layer.
pub fn count_params_for(
    layer_dims: &[(usize, usize)],
    gate_dim: usize,
    variant: PromptVariant,
    num_basis: usize,
) -> ParamCount {
    let da = gate_dim;
    let per_layer: Vec<usize> = layer_dims
        .iter()
        .map(|&(din, dm)| {
            let shared = din * da + da + 2 * da;
            match variant {
                PromptVariant::Mag => shared + dm,
                PromptVariant::MagPlus => shared + num_basis * dm + da * num_basis + num_basis,
            }
        })
        .collect();
    let total = per_layer.iter().sum();
    ParamCount { per_layer, total }
}

pub fn count_prompt_params<S: Scalar>(state: &PromptState<S>) -> ParamCount {
    let dims: Vec<(usize, usize)> = state.layers.iter().map(|l| (l.input_dim(), l.message_dim())).collect();
    count_params_for(&dims, state.gate_dim(), state.variant, state.num_basis().unwrap_or(0))
}
