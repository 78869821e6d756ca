//! Central finite-difference oracles.
//!
//! These only ever call the forward path (`Tape::forward` or a plain closure),
//! so they stay independent of the backward pass they are used to check.

use super::params::{ParamId, ParamStore};
use super::tape::{Mat, Tape, TapeError, Var};

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// [`relative_error`] over two equally shaped matrices, in logical order.
pub fn relative_error_mat(a: &Mat, b: &Mat) -> f64 {
    let a: Vec<f64> = a.iter().copied().collect();
    let b: Vec<f64> = b.iter().copied().collect();
    relative_error(&a, &b)
}

/// Central differences of a scalar function of a flat vector.
pub fn gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Finite-difference gradient of the scalar `root` w.r.t. parameter `id`,
/// by replaying `tape`. The tape is left evaluated at the original values.
pub fn param_gradient(
    tape: &mut Tape,
    store: &mut ParamStore,
    root: Var,
    id: ParamId,
    h: f64,
) -> Result<Mat, TapeError> {
    let original = store.value(id).clone();
    let mut out = Mat::zeros(original.dim());
    for (idx, g) in out.indexed_iter_mut() {
        store.value_mut(id)[idx] = original[idx] + h;
        tape.forward(store)?;
        let up = tape.scalar(root);
        store.value_mut(id)[idx] = original[idx] - h;
        tape.forward(store)?;
        let down = tape.scalar(root);
        store.value_mut(id)[idx] = original[idx];
        *g = (up - down) / (2.0 * h);
    }
    tape.forward(store)?;
    Ok(out)
}

/// Finite-difference gradient of `root` w.r.t. the input leaf `input`.
pub fn input_gradient(
    tape: &mut Tape,
    store: &ParamStore,
    root: Var,
    input: Var,
    h: f64,
) -> Result<Mat, TapeError> {
    let original = tape.value(input).clone();
    let mut out = Mat::zeros(original.dim());
    for idx in 0..original.len() {
        let (r, c) = (idx / original.ncols(), idx % original.ncols());
        let mut probe = original.clone();
        probe[[r, c]] += h;
        tape.set_input(input, probe.clone())?;
        tape.forward(store)?;
        let up = tape.scalar(root);
        probe[[r, c]] -= 2.0 * h;
        tape.set_input(input, probe)?;
        tape.forward(store)?;
        let down = tape.scalar(root);
        out[[r, c]] = (up - down) / (2.0 * h);
    }
    tape.set_input(input, original)?;
    tape.forward(store)?;
    Ok(out)
}

/// Compare backward-pass parameter gradients against central differences.
/// Returns the worst norm-wise relative error over `ids`.
pub fn check_params(
    tape: &mut Tape,
    store: &mut ParamStore,
    root: Var,
    ids: &[ParamId],
    h: f64,
) -> Result<f64, TapeError> {
    store.zero_grad();
    tape.backward(root, &Mat::from_elem((1, 1), 1.0), store)?;
    let analytic: Vec<Mat> = ids.iter().map(|&id| store.grad(id).clone()).collect();
    let mut worst = 0.0f64;
    for (&id, a) in ids.iter().zip(&analytic) {
        let n = param_gradient(tape, store, root, id, h)?;
        let err = relative_error_mat(a, &n);
        worst = worst.max(err);
    }
    store.zero_grad();
    Ok(worst)
}

/// Relative error of all parameters in `ids` taken together as one vector.
pub fn check_params_joint(
    tape: &mut Tape,
    store: &mut ParamStore,
    root: Var,
    ids: &[ParamId],
    h: f64,
) -> Result<f64, TapeError> {
    store.zero_grad();
    tape.backward(root, &Mat::from_elem((1, 1), 1.0), store)?;
    let mut analytic = Vec::new();
    for &id in ids {
        analytic.extend(store.grad(id).iter().copied());
    }
    let mut numeric = Vec::new();
    for &id in ids {
        numeric.extend(param_gradient(tape, store, root, id, h)?.iter().copied());
    }
    store.zero_grad();
    Ok(relative_error(&analytic, &numeric))
}
