use rand::seq::SliceRandom;
use rand::Rng;

use super::GraphError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bijection on `0..n`; node `i` is relabeled `mapping[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self, GraphError> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || std::mem::replace(&mut seen[m], true) {
                return Err(GraphError::NotAPermutation(n));
            }
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(rng);
        Self { mapping }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn apply(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Self { mapping: inv }
    }

    /// `P X`: row `i` of the input lands at row `p(i)`.
    pub fn permute_rows<S: Scalar>(&self, t: &Tensor<S>) -> Tensor<S> {
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for (i, &m) in self.mapping.iter().enumerate() {
            out.row_slice_mut(m).copy_from_slice(t.row_slice(i));
        }
        out
    }

    pub fn permute_slice<T: Clone>(&self, xs: &[T]) -> Vec<T> {
        let mut out = xs.to_vec();
        for (i, &m) in self.mapping.iter().enumerate() {
            out[m] = xs[i].clone();
        }
        out
    }

    /// Dense permutation matrix with `P[p(i)][i] = 1`.
    pub fn matrix<S: Scalar>(&self) -> Tensor<S> {
        let n = self.len();
        let mut p = Tensor::zeros(n, n);
        for (i, &m) in self.mapping.iter().enumerate() {
            p.set(m, i, S::one());
        }
        p
    }
}
