//! Central finite differences against the reverse pass.

use crate::error::Result;
use crate::params::{ParamId, ParameterSet};
use crate::tape::{Tape, Var};

/// Step used for the central differences.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Gradients with magnitude below this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter and flat element index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the reverse-mode gradient of `loss_fn` with central differences
/// over every element of every parameter.
///
/// The error for one element is `|analytic - numeric| / max(|analytic|,
/// |numeric|, RELATIVE_FLOOR)`; the report holds the maximum.
pub fn finite_diff_check<F>(params: &ParameterSet, step: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let ids: Vec<_> = params.ids().collect();
    finite_diff_check_params(params, &ids, step, loss_fn)
}

/// [`finite_diff_check`] restricted to the parameters in `ids`.
pub fn finite_diff_check_params<F>(
    params: &ParameterSet,
    ids: &[ParamId],
    step: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::with_params(params);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?.into_params()
    };
    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut tape = Tape::with_params(p);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.value(loss).item().expect("scalar loss"))
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &id in ids {
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(id).data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((params.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
