//! Camera selection weights from projected distance scores.
//!
//! For scene pixel `(i, j)` with projected scores `M_k` and validity masks,
//! the nearest-camera score is `M^ = min_k M_k` over valid views, the raw
//! weight is `exp(-(M_k - M^)^2)` (exactly 1 for the nearest camera) and
//! the weights are normalized over valid views. Masked views and pixels
//! covered by no view get weight 0.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Raw and normalized weights as recorded on a tape.
pub struct CameraWeights {
    pub min: Var,
    /// Pixels valid in at least one view.
    pub covered: Tensor,
    pub raw: Vec<Var>,
    pub normalized: Vec<Var>,
}

/// Differentiable selection weights for score maps already on `tape`.
pub fn camera_weights_on(
    tape: &mut Tape,
    scores: &[Var],
    masks: &[Tensor],
) -> Result<CameraWeights> {
    let (min, covered) = tape.masked_min(scores, masks)?;
    let mut raw = Vec::with_capacity(scores.len());
    for (&m, mask) in scores.iter().zip(masks) {
        let d = tape.sub(m, min)?;
        let d2 = tape.square(d);
        let neg = tape.scale(d2, -1.0);
        let e = tape.exp(neg);
        let mask = tape.constant(mask.clone());
        raw.push(tape.mul(e, mask)?);
    }
    let mut total = raw[0];
    for &w in &raw[1..] {
        total = tape.add(total, w)?;
    }
    let normalized = raw
        .iter()
        .map(|&w| tape.div(w, total))
        .collect::<Result<Vec<_>>>()?;
    Ok(CameraWeights {
        min,
        covered,
        raw,
        normalized,
    })
}

fn check_inputs(scores: &[Tensor], masks: &[Tensor]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid("at least one view is required"));
    }
    if scores.len() != masks.len() {
        return Err(Error::shape(format!(
            "{} score maps but {} masks",
            scores.len(),
            masks.len()
        )));
    }
    Ok(())
}

/// Per-pixel minimum over valid views, plus the coverage mask (1 where at
/// least one view is valid). Uncovered pixels hold 0.
pub fn min_distance_map(scores: &[Tensor], masks: &[Tensor]) -> Result<(Tensor, Tensor)> {
    check_inputs(scores, masks)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = scores.iter().map(|s| tape.constant(s.clone())).collect();
    let (m, covered) = tape.masked_min(&vars, masks)?;
    Ok((tape.value(m).clone(), covered))
}

/// Normalized camera weight maps, one per input view, same shapes as the
/// inputs.
pub fn camera_weight_maps(scores: &[Tensor], masks: &[Tensor]) -> Result<Vec<Tensor>> {
    check_inputs(scores, masks)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = scores.iter().map(|s| tape.constant(s.clone())).collect();
    let w = camera_weights_on(&mut tape, &vars, masks)?;
    Ok(w.normalized
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect())
}
