use super::{AutodiffError, Graph, Tensor, Var};

/// Smallest denominator used when forming relative errors, so coordinates
/// whose true gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    /// Coordinates whose relative error exceeded the tolerance.
    pub flagged: Vec<usize>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the reverse-mode gradient of a scalar function with central
/// finite differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
///
/// `f` receives a fresh graph and the input as a trainable leaf and must
/// return a one-element node.
pub fn grad_check<F>(
    f: F,
    point: &Tensor,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&Graph, Var) -> Result<Var, AutodiffError>,
{
    grad_check_with(f, point, step, tolerance)
}

/// [`grad_check`] for functions with their own error type.
pub fn grad_check_with<F, E>(
    f: F,
    point: &Tensor,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&Graph, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let eval = |x: &Tensor, coordinate: usize| -> Result<f64, E> {
        let g = Graph::new();
        let v = g.param(x.clone());
        let out = f(&g, v)?;
        let y = g.item(out);
        if !y.is_finite() {
            return Err(AutodiffError::NonFinite { coordinate }.into());
        }
        Ok(y)
    };

    let g = Graph::new();
    let v = g.param(point.clone());
    let out = f(&g, v)?;
    if !g.item(out).is_finite() {
        return Err(AutodiffError::NonFinite { coordinate: 0 }.into());
    }
    let analytic = g.backward(out)?.get_or_zeros(v).into_data();
    if let Some(i) = analytic.iter().position(|a| !a.is_finite()) {
        return Err(AutodiffError::NonFinite { coordinate: i }.into());
    }

    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + step;
        let plus = eval(&probe, i)?;
        probe.data_mut()[i] = x0 - step;
        let minus = eval(&probe, i)?;
        probe.data_mut()[i] = x0;
        numeric.push((plus - minus) / (2.0 * step));
    }

    let mut max_rel_error: f64 = 0.0;
    let mut flagged = Vec::new();
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, n);
        max_rel_error = max_rel_error.max(e);
        if e > tolerance {
            flagged.push(i);
        }
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        flagged,
        tolerance,
    })
}
