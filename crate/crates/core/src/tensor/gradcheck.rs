use super::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Option<(ParamId, usize)>,
}

/// Compares analytic gradients against central differences for the given
/// `(parameter, flat index)` entries.
///
/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`;
/// `floor` keeps near-zero gradients from dominating through f32 round-off.
pub fn grad_check<F>(
    store: &ParamStore,
    loss_fn: F,
    entries: &[(ParamId, usize)],
    step: f32,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    let mut probe = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference(s);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.value(loss).data()[0] as f64)
    };

    let mut report = GradCheckReport::default();
    for &(id, idx) in entries {
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[idx] as f64);
        let original = probe.get(id).data()[idx];
        probe.get_mut(id).data_mut()[idx] = original + step;
        let up = eval(&probe)?;
        probe.get_mut(id).data_mut()[idx] = original - step;
        let down = eval(&probe)?;
        probe.get_mut(id).data_mut()[idx] = original;
        // the realised step differs from `step` after f32 rounding
        let h = ((original + step) as f64) - ((original - step) as f64);
        let numeric = (up - down) / h;

        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((id, idx));
        }
    }
    Ok(report)
}
