use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear classifier on top of the encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Head<S> {
    pub fn init(input_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weight: Tensor::glorot(input_dim, num_classes, &mut rng),
            bias: Tensor::zeros(1, num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        vec![("head.weight".into(), &self.weight), ("head.bias".into(), &self.bias)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> BoundHead<'t, S> {
        BoundHead {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead<'t, S: Scalar> {
    pub weight: Var<'t, S>,
    pub bias: Var<'t, S>,
}

impl<'t, S: Scalar> BoundHead<'t, S> {
    pub fn logits(&self, h: Var<'t, S>) -> Result<Var<'t, S>> {
        Ok(h.affine(self.weight, self.bias)?)
    }

    pub fn vars(&self) -> [Var<'t, S>; 2] {
        [self.weight, self.bias]
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn cross_entropy<'t, S: Scalar>(logits: Var<'t, S>, labels: &[usize]) -> Result<Var<'t, S>> {
    let [b, k] = logits.shape();
    if labels.len() != b {
        return Err(Error::DimMismatch {
            what: "label count".into(),
            expected: b,
            found: labels.len(),
        });
    }
    if b == 0 {
        return Err(Error::Precondition("cross entropy over an empty batch".into()));
    }
    let mut onehot = Tensor::zeros(b, k);
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Precondition(format!("label {y} outside [0, {k})")));
        }
        onehot.set(r, y, S::one());
    }
    let picked = logits.log_softmax_rows().mul(logits.tape().constant(onehot))?.sum_all();
    Ok(picked.scale(-S::one() / S::from_usize_lossy(b)))
}
