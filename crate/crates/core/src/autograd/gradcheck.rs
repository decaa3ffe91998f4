use super::{AutogradError, Tape, Var};
use crate::tensor::Tensor4;

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    /// Largest `max(0, |a − f| − r) / max(|a|, |f|, 1e-8)` over every
    /// checked coordinate, where `r` bounds the rounding error of the
    /// central difference itself (see [`grad_check`]).
    pub max_rel_error: f64,
    /// Largest raw `|a − f|`, before any allowance for rounding.
    pub max_abs_error: f64,
    /// (parameter index, flat coordinate) where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Rounding error of a central difference, in ulps of the larger endpoint.
const ROUNDING_ULPS: f64 = 16.0;

fn relative_error(analytic: f64, numeric: f64, rounding: f64) -> f64 {
    ((analytic - numeric).abs() - rounding).max(0.0) / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Check `forward`'s tape gradients against central differences, perturbing
/// every coordinate of every tensor in `params` by `±epsilon`.
///
/// A central difference cannot resolve derivatives finer than about
/// `u·|f| / ε` (`u` the unit roundoff), so disagreement up to
/// `16·u·max(|f(x+ε)|, |f(x−ε)|) / ε` is not counted as error.
///
/// `forward` receives a fresh tape with one gradient-requiring leaf per
/// parameter and must return a `1×1×1×1` output.
pub fn grad_check<F>(
    op: &str,
    forward: F,
    params: &[Tensor4<f64>],
    epsilon: f64,
) -> Result<GradCheckReport, AutogradError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutogradError>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(AutogradError::Epsilon(epsilon));
    }
    let eval = |values: &[Tensor4<f64>]| -> Result<f64, AutogradError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let y = forward(&mut tape, &vars)?;
        let out = tape.value(y);
        if out.shape().numel() != 1 {
            return Err(AutogradError::NonScalar(out.shape()));
        }
        Ok(out.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|v| tape.leaf(v.clone())).collect();
    let y = forward(&mut tape, &vars)?;
    let grads = tape.backward(y)?;

    let mut report = GradCheckReport {
        op: op.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).expect("leaf gradient");
        for j in 0..params[pi].data().len() {
            let orig = params[pi].data()[j];
            probe[pi].data_mut()[j] = orig + epsilon;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[j] = orig - epsilon;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let rounding = ROUNDING_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * epsilon);
            let err = relative_error(analytic.data()[j], numeric, rounding);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((analytic.data()[j] - numeric).abs());
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, j);
            }
        }
    }
    Ok(report)
}
