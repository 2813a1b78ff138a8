//! Central finite differences for checking analytic gradients.

use std::collections::BTreeMap;

use crate::autodiff::{Mat, ParamStore};

/// Default step for 64-bit central differences.
pub const STEP: f64 = 1e-5;

/// Default denominator floor for [`relative_error`]. Entries whose true
/// gradient is exactly zero still pick up roundoff of order `eps * |f| / STEP`
/// in the numeric estimate, about 1e-10 for losses of order ten.
pub const FLOOR: f64 = 1e-5;

/// `∂f/∂x` by central differences, one entry at a time.
pub fn central_difference(mut f: impl FnMut(&Mat) -> f64, x: &Mat, h: f64) -> Mat {
    let mut probe = x.clone();
    let mut out = Mat::zeros(x.dim());
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let plus = f(&probe);
        probe[idx] = orig - h;
        let minus = f(&probe);
        probe[idx] = orig;
        out[idx] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Central differences for every trainable tensor of `store`.
pub fn store_central_difference(
    store: &ParamStore,
    mut f: impl FnMut(&ParamStore) -> f64,
    h: f64,
) -> BTreeMap<String, Mat> {
    let mut probe = store.clone();
    let names: Vec<String> = store.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let base = store.value(&name).expect("listed above").clone();
        let grad = central_difference(
            |x| {
                probe.get_mut(&name).expect("listed above").value = x.clone();
                f(&probe)
            },
            &base,
            h,
        );
        probe.get_mut(&name).expect("listed above").value = base;
        out.insert(name, grad);
    }
    out
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest entry-wise [`relative_error`]; shapes must agree.
pub fn max_relative_error(analytic: &Mat, numeric: &Mat, floor: f64) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim(), "gradient shapes differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

/// Worst error over named gradients; a tensor missing from `analytic` is
/// compared against zeros.
pub fn max_relative_error_by_name(
    analytic: &BTreeMap<String, Mat>,
    numeric: &BTreeMap<String, Mat>,
    floor: f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (name, n) in numeric {
        let a = analytic.get(name).cloned().unwrap_or_else(|| Mat::zeros(n.dim()));
        let err = max_relative_error(&a, n, floor);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    worst
}
