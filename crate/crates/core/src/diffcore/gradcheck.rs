//! Central-difference gradient oracle.
//!
//! Stop-gradient nodes are frozen at their base-point values while the
//! perturbed losses are evaluated. The numeric derivative is then taken of
//! the surrogate whose exact gradient is the stop-gradient (and
//! straight-through) gradient, so losses containing `sg[·]` stay checkable.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{MadiError, Result};

/// `|a - c| / max(|a|, |c|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_outputs<F>(f: &F, store: &ParamStore, stops: Option<&[Tensor]>) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Vec<Var>>,
{
    let mut tape = match stops {
        Some(s) => Tape::with_frozen_stops(s.to_vec()),
        None => Tape::new(),
    };
    let outs = f(&mut tape, store)?;
    Ok(outs.iter().map(|v| tape.value(*v).item()).collect())
}

/// Max relative error for a single scalar loss over every coordinate of the
/// listed parameters.
pub fn finite_diff_check<F>(f: F, store: &mut ParamStore, ids: &[ParamId], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let multi = |t: &mut Tape, s: &ParamStore| f(t, s).map(|v| vec![v]);
    Ok(finite_diff_check_many(multi, store, ids, eps)?[0])
}

/// Like [`finite_diff_check`] for several scalar losses recorded on one tape;
/// returns one max relative error per loss.
pub fn finite_diff_check_many<F>(
    f: F,
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Vec<Var>>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(MadiError::contract(format!("epsilon must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let outs = f(&mut tape, store)?;
    let base: Vec<f64> = outs.iter().map(|v| tape.value(*v).item()).collect();
    let again = eval_outputs(&f, store, None)?;
    if base.iter().zip(&again).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(MadiError::contract(
            "function is not deterministic: repeated evaluation differs",
        ));
    }
    let stops = tape.stop_gradient_values();
    let grads = outs
        .iter()
        .map(|v| tape.backward(*v))
        .collect::<Result<Vec<_>>>()?;

    let mut worst = vec![0.0f64; outs.len()];
    for &id in ids {
        let n = store.get(id).numel();
        for k in 0..n {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval_outputs(&f, store, Some(&stops));
            store.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval_outputs(&f, store, Some(&stops));
            store.get_mut(id).data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            for (o, g) in grads.iter().enumerate() {
                let analytic = g.param(id).map_or(0.0, |t| t.data()[k]);
                let numeric = (plus[o] - minus[o]) / (2.0 * eps);
                worst[o] = worst[o].max(relative_error(analytic, numeric));
            }
        }
    }
    Ok(worst)
}
