use crate::error::{Error, Result};

use super::{DiffGraph, Tensor, Var};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat entry) of the worst entry, if any was checked.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
    pub loss: f64,
}

fn evaluate<F>(forward: &mut F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut DiffGraph, &[Var]) -> Result<Var>,
{
    let mut g = DiffGraph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = forward(&mut g, &vars)?;
    let value = g
        .value(loss)
        .item()
        .ok_or_else(|| Error::Usage("grad_check forward must return a scalar".into()))?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("forward value is {value}")));
    }
    Ok(value)
}

/// Compares reverse-mode gradients of `forward` against central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every entry of every parameter.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
/// Parameters not passed in `params` are not checked; the closure captures
/// them as constants.
pub fn grad_check<F>(params: &[Tensor], eps: f64, mut forward: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut DiffGraph, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Input(format!(
            "grad_check eps must be positive, got {eps}"
        )));
    }
    let (loss, analytic) = {
        let mut g = DiffGraph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss_var = forward(&mut g, &vars)?;
        let loss = g
            .value(loss_var)
            .item()
            .ok_or_else(|| Error::Usage("grad_check forward must return a scalar".into()))?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("forward value is {loss}")));
        }
        let grads = g.backward(loss_var)?;
        let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
        (loss, analytic)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
        loss,
    };
    let mut probe = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for e in 0..params[pi].len() {
            let original = params[pi].data()[e];
            probe[pi].data_mut()[e] = original + eps;
            let plus = evaluate(&mut forward, &probe)?;
            probe[pi].data_mut()[e] = original - eps;
            let minus = evaluate(&mut forward, &probe)?;
            probe[pi].data_mut()[e] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, e));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::vector(vec![0.7]);
        let report = grad_check(&[x], 1e-5, |g, p| {
            let y = g.scale(p[0], 3.0)?;
            g.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-10, "{report:?}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor::vector(vec![0.0]);
        let report = grad_check(&[x], 1e-5, |g, p| {
            let y = g.sigmoid(p[0])?;
            g.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
    }

    #[test]
    fn frozen_parameter_is_not_checked() {
        let x = Tensor::vector(vec![1.5, -0.5]);
        let frozen = Tensor::vector(vec![2.0, 3.0]);
        let report = grad_check(&[x], 1e-5, |g, p| {
            let c = g.constant(frozen.clone());
            let y = g.mul(p[0], c)?;
            g.sum(y)
        })
        .unwrap();
        assert_eq!(report.entries_checked, 2);
        assert!(report.max_rel_error <= 1e-9);
    }

    #[test]
    fn non_finite_forward_is_numeric_error() {
        let x = Tensor::vector(vec![1.0]);
        let err = grad_check(&[x], 1e-5, |g, p| {
            let y = g.scale(p[0], f64::INFINITY)?;
            g.sum(y)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn non_positive_eps_rejected() {
        let err = grad_check(&[Tensor::scalar(1.0)], 0.0, |g, p| g.sum(p[0])).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }
}
