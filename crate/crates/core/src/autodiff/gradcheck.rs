use super::{AutodiffError, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport<S> {
    /// max over coordinates of `|g − ĝ| / max(1, |g|, |ĝ|)`
    pub max_rel_error: S,
    /// (parameter index, flat coordinate) of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compares tape gradients of `f` against central finite differences
/// `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` over every coordinate of every tensor
/// in `params`.
pub fn finite_diff_check<S, E, F>(f: F, params: &[Tensor<S>], h: S) -> Result<GradCheckReport<S>, E>
where
    S: Scalar,
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape<S>, &[Var<'t, S>]) -> Result<Var<'t, S>, E>,
{
    if h <= S::zero() || !h.is_finite() {
        return Err(AutodiffError::BadStep.into());
    }

    let analytic: Vec<Tensor<S>> = {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        if !loss.item().is_finite() {
            return Err(AutodiffError::NonFinite.into());
        }
        loss.backward()?;
        vars.iter().map(|&v| tape.grad(v).expect("leaf gradient")).collect()
    };

    let eval = |point: &[Tensor<S>]| -> Result<S, E> {
        let tape = Tape::new();
        let vars: Vec<_> = point.iter().map(|p| tape.constant(p.clone())).collect();
        let value = f(&tape, &vars)?.item();
        if value.is_finite() {
            Ok(value)
        } else {
            Err(AutodiffError::NonFinite.into())
        }
    };

    let mut point: Vec<Tensor<S>> = params.to_vec();
    let two_h = h + h;
    let mut report = GradCheckReport {
        max_rel_error: S::zero(),
        worst: None,
        coordinates: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..point[pi].len() {
            let orig = point[pi].data()[k];
            point[pi].data_mut()[k] = orig + h;
            let up = eval(&point)?;
            point[pi].data_mut()[k] = orig - h;
            let down = eval(&point)?;
            point[pi].data_mut()[k] = orig;

            let numeric = (up - down) / two_h;
            let g = grad.data()[k];
            let denom = S::one().max(g.abs()).max(numeric.abs());
            let rel = (g - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, k));
            }
        }
    }
    Ok(report)
}
