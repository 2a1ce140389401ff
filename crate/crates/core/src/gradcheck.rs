//! Central finite-difference gradient checking.
//!
//! The checked function is rebuilt from scratch for every probe. Perturbed
//! evaluations replay the baseline tape's rounding offsets
//! ([`Tape::with_frozen_rounding`]), so a graph containing straight-through
//! rounding is differentiated as the smooth surrogate the STE backward
//! defines. Graphs without rounding nodes are checked against the plain
//! function. Probes that land on a clamp boundary are the caller's problem:
//! pick inputs away from quantizer grid edges.

use crate::error::Result;
use crate::tape::{Tape, TensorId};
use crate::tensor::{Real, Tensor};

pub struct GradCheckReport {
    pub max_rel_err: Real,
    pub checked_elements: usize,
}

/// Relative error between an analytic and a finite-difference derivative,
/// with a floor so that near-zero pairs compare as equal.
fn rel_err(analytic: Real, fd: Real) -> Real {
    let scale = analytic.abs().max(fd.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (analytic - fd).abs() / scale
    }
}

/// Compare [`Tape::backward`] gradients of `build` against central finite
/// differences at `inputs`. At most `max_probes_per_input` elements of each
/// input are probed (evenly strided), keeping large-parameter checks cheap.
pub fn check_gradients<F>(
    build: F,
    inputs: &[Tensor],
    step: Real,
    max_probes_per_input: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut base = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| base.param(t.clone())).collect();
    let loss = build(&mut base, &ids)?;
    let grads = base.backward(loss)?;
    let offsets = base.rounding_offsets();

    let eval = |probe_input: usize, element: usize, value: Real| -> Result<Real> {
        let mut tape = Tape::with_frozen_rounding(offsets.clone());
        let mut perturbed: Vec<Tensor> = inputs.to_vec();
        perturbed[probe_input].data_mut()[element] = value;
        let ids: Vec<TensorId> = perturbed.into_iter().map(|t| tape.param(t)).collect();
        let loss = build(&mut tape, &ids)?;
        assert!(
            tape.frozen_rounding_exhausted(),
            "gradient check rebuilt a different graph structure"
        );
        Ok(tape.value(loss).item())
    };

    let mut max_rel: Real = 0.0;
    let mut checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        let numel = input.numel();
        let stride = numel.div_ceil(max_probes_per_input).max(1);
        for e in (0..numel).step_by(stride) {
            let x = input.data()[e];
            let h = step * (1.0 + x.abs());
            let lp = eval(i, e, x + h)?;
            let lm = eval(i, e, x - h)?;
            let fd = (lp - lm) / (2.0 * h);
            let analytic = grads.get(ids[i]).map_or(0.0, |g| g.data()[e]);
            max_rel = max_rel.max(rel_err(analytic, fd));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked_elements: checked,
    })
}
