//! Finite-difference check of the contrastive-loss gradients.

use serde::{Deserialize, Serialize};

use super::model::GenRetModel;
use super::tensor::Scalar;
use super::train::{batch_grads, batch_loss, Example};
use super::GenretError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    /// ||analytic - numeric|| / max(||numeric||, ||analytic||); 0 when both vanish.
    pub rel_err: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_err).fold(0.0, f64::max)
    }
}

/// Compares the analytic gradient of `model` (at its own precision) with
/// central differences of step `h` taken on an f64 copy.
pub fn gradient_check<T: Scalar>(model: &GenRetModel<T>, batch: &[Example], h: f64) -> Result<GradCheckReport, GenretError> {
    let refs: Vec<&Example> = batch.iter().collect();
    let (_, analytic) = batch_grads(model, &refs)?;
    let mut probe = model.cast::<f64>();
    let mut groups = Vec::with_capacity(analytic.len());
    for (pi, g) in analytic.iter().enumerate() {
        let (mut diff, mut num_n, mut an_n) = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..g.data.len() {
            let orig = probe.net.params[pi].data[k];
            probe.net.params[pi].data[k] = orig + h;
            let plus = batch_loss(&probe, &refs)?;
            probe.net.params[pi].data[k] = orig - h;
            let minus = batch_loss(&probe, &refs)?;
            probe.net.params[pi].data[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = g.data[k].f64();
            diff += (fd - an) * (fd - an);
            num_n += fd * fd;
            an_n += an * an;
        }
        let scale = num_n.sqrt().max(an_n.sqrt());
        let rel_err = if scale < 1e-12 { 0.0 } else { diff.sqrt() / scale };
        groups.push(GroupError { name: model.net.names[pi].clone(), rel_err, grad_norm: an_n.sqrt() });
    }
    Ok(GradCheckReport { groups })
}
