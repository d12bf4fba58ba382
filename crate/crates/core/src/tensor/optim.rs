//! SGD with momentum and the step-decay learning-rate schedule.

use super::network::ParamStore;
use super::tape::Gradients;
use crate::error::{CoreError, CoreResult};

/// One SGD step: v <- momentum*v + g, p <- p - lr*v.
///
/// With momentum 0 this is plain p <- p - lr*g. A non-finite gradient
/// rejects the whole step so a diverging run aborts loudly instead of
/// poisoning the parameters.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, lr: f32, momentum: f32) -> CoreResult<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(CoreError::Config(format!("learning rate {lr} must be finite and >= 0")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(CoreError::Config(format!("momentum {momentum} must be in [0, 1)")));
    }
    store.apply_sgd(grads, lr, momentum)
}

/// Step decay: multiply by 0.3 every 4 epochs, restarting the pattern
/// (back at `base`) every 20 epochs.
pub fn lr_schedule(epoch: usize, base: f32) -> f32 {
    let phase = (epoch % 20) / 4;
    base * 0.3f32.powi(phase as i32)
}
