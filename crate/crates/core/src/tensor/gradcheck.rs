//! Central finite-difference verification for tape-built functions.
//!
//! `check` rebuilds the graph from scratch at perturbed inputs, so it
//! validates the analytic backward pass of whatever the builder records.
//! Probe losses should keep values O(1) (mean-style reductions): the
//! difference quotient runs on the f32 forward, whose rounding sets a
//! noise floor of about eps * |f| / (2h).

use super::tape::{NodeId, Tape};
use super::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f32,
    /// Relative tolerance; the comparison denominator is
    /// max(|analytic|, |fd|, 1).
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-3, tolerance: 1e-3 }
    }
}

fn eval<F>(inputs: &[Tensor], builder: &F) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input(t)).collect();
    let loss = builder(&mut tape, &ids);
    tape.scalar_value(loss) as f64
}

/// Compares analytic gradients against central differences for every
/// component of every input with `diff_mask[i]` set. Returns the first
/// offending component as an error string.
pub fn check<F>(
    what: &str,
    inputs: &[Tensor],
    diff_mask: &[bool],
    opts: GradCheckOptions,
    builder: F,
) -> Result<(), String>
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    assert_eq!(inputs.len(), diff_mask.len(), "{what}: mask length mismatch");
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(&format!("in{i}"), t))
        .collect();
    let loss = builder(&mut tape, &ids);
    tape.backward(loss).map_err(|e| format!("{what}: backward failed: {e}"))?;
    let grads = tape.param_grads();

    for (i, t) in inputs.iter().enumerate() {
        if !diff_mask[i] {
            continue;
        }
        let g = grads.get(&format!("in{i}")).expect("registered parameter");
        if g.shape() != t.shape() {
            return Err(format!("{what}: gradient shape {:?} vs input {:?}", g.shape(), t.shape()));
        }
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += opts.step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= opts.step;
            let fd = (eval(&plus, &builder) - eval(&minus, &builder)) / (2.0 * opts.step as f64);
            let a = g.data()[j] as f64;
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if rel >= opts.tolerance {
                return Err(format!(
                    "{what}: input {i} component {j}: analytic {a} vs fd {fd} (rel {rel:.2e})"
                ));
            }
        }
    }
    Ok(())
}

/// Nudges values away from a non-differentiable point so the central
/// difference stays on one side of the kink.
pub fn nudge_away(t: &mut Tensor, kink: f32, margin: f32) {
    for v in t.data_mut() {
        if (*v - kink).abs() < margin {
            *v = kink + margin * if *v >= kink { 1.0 } else { -1.0 };
        }
    }
}
