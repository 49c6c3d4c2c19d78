//! Central finite-difference comparison against [`loss_gradients`].

use super::{loss_gradients, loss_value, Batch, ConditionalUnet1d, ParameterStore};
use crate::ddpm::NoiseSchedule;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Checks every parameter element with step `h`.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    net: &ConditionalUnet1d,
    params: &ParameterStore<f64>,
    sched: &NoiseSchedule,
    batch: &Batch<f64>,
    steps: &[usize],
    noise: &[f64],
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let (_, grads) = loss_gradients(net, params, sched, batch, steps, noise)?;
    let mut p = params.clone();
    let mut out = GradCheck { max_rel_error: 0.0, worst_param: String::new(), worst_index: 0, checked: 0 };
    for id in params.ids() {
        let spec = params.spec(id).clone();
        for i in 0..spec.len() {
            let orig = p.get(id)[i];
            p.get_mut(id)[i] = orig + h;
            let up = loss_value(net, &p, sched, batch, steps, noise)?;
            p.get_mut(id)[i] = orig - h;
            let down = loss_value(net, &p, sched, batch, steps, noise)?;
            p.get_mut(id)[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id)[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst_param = spec.name.clone();
                out.worst_index = i;
            }
            out.checked += 1;
        }
    }
    Ok(out)
}
