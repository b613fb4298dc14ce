//! Central finite-difference check of tape gradients.

use super::tape::{Tape, Var};
use super::{Real, Tensor};
use crate::error::Result;

/// Default base step; the step at coordinate `i` is `h · (1 + |x_i|)`.
pub const DEFAULT_STEP: Real = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |analytic − numeric| / (|analytic| + |numeric| + 1e−12)`.
    pub max_rel_error: Real,
    pub worst_index: usize,
    pub analytic: Real,
    pub numeric: Real,
    pub coordinates: usize,
}

/// Compares the tape gradient of scalar `f` at `x` against central differences.
///
/// `f` receives a fresh tape and the registered input for every evaluation.
pub fn grad_check<F>(f: F, x: &Tensor, h: Real) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<Real> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let y = f(&mut t, v)?;
        t.value(y).item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: x.numel(),
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let x0 = x.data()[i];
        let step = h * (1.0 + x0.abs());
        probe.data_mut()[i] = x0 + step;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = x0 - step;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn exact_for_linear_functional() {
        let x = Rng::seed(1).tensor_uniform(&[3, 4], -1.0, 1.0);
        let r = grad_check(|t, v| t.sum(v), &x, DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
    }

    #[test]
    fn detects_wrong_derivative() {
        fn cube(x: Real) -> Real {
            x * x * x
        }
        fn wrong(x: Real) -> Real {
            2.0 * x * x
        }
        let x = Rng::seed(2).tensor_uniform(&[5], 0.5, 1.5);
        let r = grad_check(
            |t, v| {
                let y = t.map(v, cube, wrong)?;
                t.sum(y)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-2);
    }
}
