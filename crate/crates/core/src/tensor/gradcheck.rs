//! Central-difference gradient oracle.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat coordinate)` of the worst discrepancy.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    Ok((tape, vars, out))
}

fn scalar_at<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, params)?;
    Ok(tape.value(out).item())
}

/// Compares `backward` against `(f(θ+eps) − f(θ−eps)) / (2·eps)` at every
/// coordinate of every parameter and returns the worst relative error,
/// `|analytic − numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_strided(f, params, eps, 1)
}

/// Same as [`grad_check`] but probes only every `stride`-th coordinate of each
/// parameter (always including coordinate 0).
pub fn grad_check_strided<F>(f: F, params: &[Tensor], eps: f64, stride: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    let stride = stride.max(1);
    let (tape, vars, out) = evaluate(&f, params)?;
    let first = tape.value(out).item();
    let second = scalar_at(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let grads = tape.backward(out)?;
    drop(tape);

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .ok_or_else(|| Error::Contract("missing gradient for parameter".into()))?
            .values()
            .to_vec();
        for c in (0..params[p].len()).step_by(stride) {
            let orig = params[p].values()[c];
            probe[p].values_mut()[c] = orig + eps;
            let plus = scalar_at(&f, &probe)?;
            probe[p].values_mut()[c] = orig - eps;
            let minus = scalar_at(&f, &probe)?;
            probe[p].values_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((p, c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn quadratic_form_is_exact() {
        let a = Tensor::matrix(2, 2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let x = Tensor::matrix(2, 1, vec![0.3, -0.7]).unwrap();
        let report = grad_check(
            |tape, v| {
                let a = tape.constant(a.clone());
                let ax = tape.matmul(a, v[0])?;
                let xax = tape.mul(v[0], ax)?;
                tape.sum(xax)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::scalar(1.0);
        let f = |tape: &mut Tape, v: &[Var]| tape.mul(v[0], v[0]);
        assert!(grad_check(f, std::slice::from_ref(&x), 0.0).is_err());
        assert!(grad_check(f, &[x], 0.1).is_err());
    }

    #[test]
    fn detects_non_determinism() {
        let counter = Cell::new(0.0);
        let x = Tensor::scalar(1.0);
        let err = grad_check(
            |tape, v| {
                counter.set(counter.get() + 1.0);
                let c = tape.constant(Tensor::scalar(counter.get()));
                tape.mul(v[0], c)
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
