//! Central-difference gradient checking.

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Below this magnitude a coordinate is compared by absolute error.
const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    /// Largest error over coordinates compared relatively.
    pub max_rel_error: f64,
    /// Largest error over coordinates whose gradients are both below the
    /// absolute floor.
    pub max_abs_error: f64,
    pub worst_coord: Option<usize>,
    pub tol: f64,
    pub passed: bool,
    pub failure: Option<String>,
}

/// Checks the tape gradient of scalar `f` at `x` against central differences
/// on every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, &coords, h, tol)
}

/// Same as [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, coords: &[usize], h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_coord: None,
        tol,
        passed: false,
        failure: None,
    };
    let analytic = match analytic_grad(&f, x) {
        Ok(g) => g,
        Err(msg) => {
            report.failure = Some(msg);
            return report;
        }
    };
    let eval = |t: &Tensor| -> std::result::Result<f64, String> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let y = f(&mut tape, v).map_err(|e| e.to_string())?;
        let val = tape.value(y).data()[0];
        if val.is_finite() {
            Ok(val)
        } else {
            Err(format!("non-finite f(x) = {val}"))
        }
    };
    let mut probe = x.clone();
    let mut worst = -1.0;
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe);
        probe.data_mut()[i] = orig;
        let (fp, fm) = match (fp, fm) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                report.failure = Some(format!("coordinate {i}: {e}"));
                return report;
            }
        };
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        let err = (a - numeric).abs();
        let normalized = if scale < ABS_FLOOR {
            report.max_abs_error = report.max_abs_error.max(err);
            err
        } else {
            let rel = err / scale;
            report.max_rel_error = report.max_rel_error.max(rel);
            rel
        };
        if normalized > worst {
            worst = normalized;
            report.worst_coord = Some(i);
        }
        report.coords_checked += 1;
    }
    report.passed = report.max_rel_error < tol && report.max_abs_error < tol;
    report
}

fn analytic_grad<F>(f: &F, x: &Tensor) -> std::result::Result<Vec<f64>, String>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let y = f(&mut tape, v).map_err(|e| e.to_string())?;
    let val = tape.value(y).data()[0];
    if !val.is_finite() {
        return Err(format!("non-finite f(x) = {val}"));
    }
    tape.backward(y).map_err(|e| e.to_string())?;
    Ok(tape.grad_tensor(v).into_data())
}
