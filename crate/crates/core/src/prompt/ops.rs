use crate::autodiff::{ReduceMode, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gate column and the per-head neighborhood weights it was averaged from.
#[derive(Debug, Clone, Copy)]
pub struct GateOutput<'t, S: Scalar> {
    /// `E × 1`, entries in `[beta, 1]`.
    pub gate: Var<'t, S>,
    /// `E × d_a`, each (destination, head) group sums to 1.
    pub alpha: Var<'t, S>,
}

/// `b = h W_g + c`.
pub fn project_gate<'t, S: Scalar>(h: Var<'t, S>, weight: Var<'t, S>, bias: Var<'t, S>) -> Result<Var<'t, S>> {
    Ok(h.affine(weight, bias)?)
}

/// Per-edge, per-head logits `leaky(b_src * w_s + b_dst * w_d)`.
pub fn attention_logits<'t, S: Scalar>(
    b: Var<'t, S>,
    g: &Graph<S>,
    att_src: Var<'t, S>,
    att_dst: Var<'t, S>,
    slope: S,
) -> Result<Var<'t, S>> {
    expect_rows(b, g.num_nodes())?;
    let from_src = b.gather_rows(g.sources())?.mul(att_src)?;
    let from_dst = b.gather_rows(g.destinations())?.mul(att_dst)?;
    Ok(from_src.add(from_dst)?.leaky_relu(slope)?)
}

/// Softmax over each destination's in-edges per head, then `a = (1 - beta) mean + beta`.
pub fn compute_gate<'t, S: Scalar>(logits: Var<'t, S>, g: &Graph<S>, beta: S) -> Result<GateOutput<'t, S>> {
    let alpha = logits.segment_softmax(g.destinations(), g.num_nodes())?;
    let gate = alpha.mean_over_columns().scale(S::one() - beta).offset(beta);
    Ok(GateOutput { gate, alpha })
}

/// `a m + p` with a single prompt row broadcast to every edge.
pub fn mag_transform<'t, S: Scalar>(m: Var<'t, S>, gate: Var<'t, S>, prompt: Var<'t, S>) -> Result<Var<'t, S>> {
    if prompt.shape()[0] != 1 {
        return Err(Error::DimMismatch {
            what: "prompt rows".into(),
            expected: 1,
            found: prompt.shape()[0],
        });
    }
    Ok(m.scale_rows(gate)?.add(prompt)?)
}

/// Per-edge softmax of `leaky((b_dst + b_src) W_b + d)` over the basis axis.
pub fn mixture_weights<'t, S: Scalar>(
    b: Var<'t, S>,
    g: &Graph<S>,
    mix_weight: Var<'t, S>,
    mix_bias: Var<'t, S>,
    slope: S,
) -> Result<Var<'t, S>> {
    expect_rows(b, g.num_nodes())?;
    let pair = b.gather_rows(g.destinations())?.add(b.gather_rows(g.sources())?)?;
    Ok(pair.affine(mix_weight, mix_bias)?.leaky_relu(slope)?.softmax_rows())
}

/// `p_ij = pi basis`.
pub fn compose_prompt<'t, S: Scalar>(pi: Var<'t, S>, basis: Var<'t, S>) -> Result<Var<'t, S>> {
    Ok(pi.matmul(basis)?)
}

/// `a m + p_ij` with one prompt row per edge.
pub fn mag_plus_transform<'t, S: Scalar>(m: Var<'t, S>, gate: Var<'t, S>, pij: Var<'t, S>) -> Result<Var<'t, S>> {
    if pij.shape() != m.shape() {
        return Err(Error::DimMismatch {
            what: "edge prompt rows".into(),
            expected: m.shape()[0],
            found: pij.shape()[0],
        });
    }
    Ok(m.scale_rows(gate)?.add(pij)?)
}

/// Column sums of the mixture weights, as a `1 × M` row.
pub fn usage_vector<'t, S: Scalar>(pi: Var<'t, S>) -> Result<Var<'t, S>> {
    let e = pi.shape()[0];
    Ok(pi.segment_reduce(&vec![0; e], 1, ReduceMode::Sum)?)
}

/// Squared coefficient of variation of the usage row `s`.
pub fn pc_loss<'t, S: Scalar>(s: Var<'t, S>, eps: S) -> Result<Var<'t, S>> {
    if eps <= S::zero() {
        return Err(Error::Config("collapse regularizer epsilon must be positive".into()));
    }
    let [rows, m] = s.shape();
    if rows != 1 || m == 0 {
        return Err(Error::DimMismatch {
            what: "usage vector rows".into(),
            expected: 1,
            found: rows,
        });
    }
    let inv_m = S::one() / S::from_usize_lossy(m);
    let mut centering = Tensor::<S>::full(m, m, -inv_m);
    for k in 0..m {
        centering.set(k, k, S::one() - inv_m);
    }
    let centered = s.matmul(s.tape().constant(centering))?;
    let spread = centered.mul(centered)?.sum_all().scale(inv_m);
    let mean = s.sum_all().scale(inv_m);
    Ok(spread.div(mean.mul(mean)?.offset(eps))?)
}

/// `task + (lambda / L) sum_l pc_l`; `pc` must hold one entry per layer.
pub fn total_loss<'t, S: Scalar>(
    task: Var<'t, S>,
    pc: &[Var<'t, S>],
    lambda: S,
    num_layers: usize,
) -> Result<Var<'t, S>> {
    if pc.len() != num_layers {
        return Err(Error::DimMismatch {
            what: "collapse terms".into(),
            expected: num_layers,
            found: pc.len(),
        });
    }
    if lambda == S::zero() || pc.is_empty() {
        return Ok(task);
    }
    let mut sum = pc[0];
    for &t in &pc[1..] {
        sum = sum.add(t)?;
    }
    Ok(task.add(sum.scale(lambda / S::from_usize_lossy(num_layers)))?)
}

fn expect_rows<S: Scalar>(v: Var<'_, S>, rows: usize) -> Result<()> {
    if v.shape()[0] != rows {
        return Err(Error::DimMismatch {
            what: "gate projection rows".into(),
            expected: rows,
            found: v.shape()[0],
        });
    }
    Ok(())
}
