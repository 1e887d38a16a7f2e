//! Finite-difference validation of [`Tape::backward`].

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so components whose true
/// gradient is ~0 are judged by absolute error instead. Scaled by
/// `max(1, |f|)`: central differences of a function of size `|f|` carry
/// round-off of order `ε·|f|/h`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat component) of the worst component.
    pub worst: Option<(usize, usize)>,
    /// (analytic, numeric) at the worst component.
    pub worst_values: Option<(f64, f64)>,
    pub components: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_FLOOR)
}

fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares backward() against central differences for every component of `params`.
pub fn gradient_check<F>(params: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradient_check_with(params, f, DEFAULT_STEP)
}

pub fn gradient_check_with<F>(params: &[Tensor], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let floor = REL_FLOOR * tape.value(out).item()?.abs().max(1.0);
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    drop(tape);

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        components: 0,
    };
    for (pi, ga) in analytic.iter().enumerate() {
        for ci in 0..ga.len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let plus = eval(&work, &f)?;
            work[pi].data_mut()[ci] = orig - h;
            let minus = eval(&work, &f)?;
            work[pi].data_mut()[ci] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("function value at perturbed parameter {pi}[{ci}]"),
                });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error_floored(ga.data()[ci], numeric, floor);
            report.components += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, ci));
                report.worst_values = Some((ga.data()[ci], numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn sum_of_squares() {
        let mut rng = stream(11, Stream::Init);
        let x = Tensor::randn(&[10], &mut rng);
        let r = gradient_check(&[x], |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert_eq!(r.components, 10);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn cross_entropy_random_logits() {
        let mut rng = stream(12, Stream::Init);
        let x = Tensor::randn(&[4, 6], &mut rng);
        let r = gradient_check(&[x], |tape, v| tape.cross_entropy(v[0], &[0, 5, 2, 3], &[1.0; 4])).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn non_finite_perturbation_is_reported() {
        let r = gradient_check(&[Tensor::scalar(1.0)], |tape, v| {
            let big = tape.scale(v[0], 1e308);
            let sq = tape.mul(big, big)?;
            Ok(tape.sum(sq))
        });
        assert!(r.is_err());
    }
}
