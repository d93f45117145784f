use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor in the relative-error metric, so coordinates whose true
/// gradient is near zero are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(x+h) − f(x−h)) / 2h` on every coordinate of every parameter.
///
/// `f` receives a fresh tape with `params` registered as leaves (in order)
/// and must return a scalar.
pub fn gradient_check<F>(mut f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidArgument("gradient check on non-finite parameters".into()));
    }

    let mut eval = |params: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = params
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "gradient_check objective".into(),
            });
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        tolerance: tol,
        passed: true,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..grad.numel() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let (t, _, o) = eval(&work)?;
            let plus = t.value(o).item()?;
            work[pi].data_mut()[ci] = orig - h;
            let (t, _, o) = eval(&work)?;
            let minus = t.value(o).item()?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, ci));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let report = gradient_check(
            |t, p| t.mul(p[0], p[0]),
            &[Tensor::scalar(3.0)],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!((report.analytic - 6.0).abs() < 1e-12);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_sum_has_zero_gradient() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone()).unwrap();
        let s = tape.softmax(v, 0).unwrap();
        let total = tape.sum(s).unwrap();
        let g = tape.backward(total).unwrap().get_or_zeros(v);
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));

        let report = gradient_check(
            |t, p| {
                let s = t.softmax(p[0], 0)?;
                t.sum(s)
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = gradient_check(
            |t, p| {
                let s = t.scale(p[0], 1e300)?;
                t.scale(s, 1e300)
            },
            &[Tensor::scalar(1.0)],
            1e-5,
            1e-4,
        );
        assert!(r.is_err());
    }
}
