//! Central finite-difference gradient checking.

use super::ParamStore;

/// Default step for the central difference.
pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the worst relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / (max(|a|, |n|) + 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-8)
}

/// Central-difference gradient of `f` at `point`, one coordinate at a time.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst coordinate of `relative_error` between two gradients.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
        checked: analytic.len(),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = relative_error(a, n);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = n;
        }
    }
    report
}

/// Compares `analytic` against central differences of `f` at `point`.
pub fn grad_check(
    f: impl Fn(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    h: f64,
) -> GradCheckReport {
    assert_eq!(
        analytic.len(),
        point.len(),
        "gradient and point lengths differ"
    );
    compare(analytic, &numeric_gradient(f, point, h))
}

/// All parameter values of `store`, flattened in name order.
pub fn flatten_params(store: &ParamStore) -> Vec<f64> {
    store
        .names()
        .flat_map(|n| store.get(n).expect("listed").data().to_vec())
        .collect()
}

/// Runs `grads` on a zeroed copy of `store` and flattens the result in name order.
pub fn analytic_param_gradient(store: &ParamStore, grads: impl Fn(&mut ParamStore)) -> Vec<f64> {
    let mut work = store.clone();
    work.zero_grad();
    grads(&mut work);
    store
        .names()
        .flat_map(|n| work.grad(n).expect("listed").data().to_vec())
        .collect()
}

/// Central differences of `loss` over every parameter scalar, in name order.
pub fn numeric_param_gradient(
    store: &ParamStore,
    loss: impl Fn(&ParamStore) -> f64,
    h: f64,
) -> Vec<f64> {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let f = |flat: &[f64]| {
        let mut probe = store.clone();
        let mut offset = 0;
        for n in &names {
            let t = probe.get_mut(n).expect("listed");
            let len = t.data().len();
            t.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        loss(&probe)
    };
    numeric_gradient(f, &flatten_params(store), h)
}

/// Gradient check over every scalar of every parameter in `store`.
///
/// `loss` runs a forward pass and returns the scalar loss. `grads` runs the
/// matching forward and backward pass on a store whose gradients start at
/// zero and leaves them in that store.
pub fn grad_check_params(
    store: &ParamStore,
    loss: impl Fn(&ParamStore) -> f64,
    grads: impl Fn(&mut ParamStore),
    h: f64,
) -> GradCheckReport {
    let analytic = analytic_param_gradient(store, grads);
    compare(&analytic, &numeric_param_gradient(store, loss, h))
}
