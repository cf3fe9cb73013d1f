//! Central finite-difference gradient checking. Lives in the library (not
//! behind `cfg(test)`) because the acceptance suite drives it from an
//! integration-test binary.

use super::Param;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-8 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Compare analytic parameter gradients against central finite differences
/// of a scalar loss at the listed `(param_index, flat_index)` coordinates.
///
/// `backward` must zero gradients, run forward + backward and leave the
/// gradients accumulated; `loss` must run the forward pass only. Both see
/// the same model, so the loss must be deterministic in the parameters.
pub fn check_params<M>(
    model: &mut M,
    coords: &[(usize, usize)],
    mut backward: impl FnMut(&mut M),
    mut params_of: impl FnMut(&mut M) -> Vec<&mut Param>,
    mut loss: impl FnMut(&mut M) -> f64,
) -> GradCheckReport {
    backward(model);
    let analytic: Vec<f64> = {
        let params = params_of(model);
        coords
            .iter()
            .map(|&(pi, fi)| *params[pi].grad.as_slice().unwrap().get(fi).expect("coord"))
            .collect()
    };
    let mut max_rel = 0.0f64;
    for (k, &(pi, fi)) in coords.iter().enumerate() {
        let orig = {
            let params = params_of(model);
            params[pi].value.as_slice().unwrap()[fi]
        };
        let h = 1e-5 * orig.abs().max(1.0);
        let set = |m: &mut M, v: f64, params_of: &mut dyn FnMut(&mut M) -> Vec<&mut Param>| {
            let mut params = params_of(m);
            params[pi].value.as_slice_mut().unwrap()[fi] = v;
        };
        set(model, orig + h, &mut params_of);
        let lp = loss(model);
        set(model, orig - h, &mut params_of);
        let lm = loss(model);
        set(model, orig, &mut params_of);
        let fd = (lp - lm) / (2.0 * h);
        max_rel = max_rel.max(relative_error(analytic[k], fd));
    }
    GradCheckReport { max_rel_err: max_rel, checked: coords.len() }
}

/// Deterministically spread `n` coordinates over a parameter list.
pub fn spread_coords(params: &[&Param], n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut coords = Vec::with_capacity(n);
    let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(0xD1B54A32D192ED03);
    let mut next = move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        s
    };
    if params.is_empty() {
        return coords;
    }
    for _ in 0..n {
        let pi = (next() as usize) % params.len();
        if params[pi].len() == 0 {
            continue;
        }
        let fi = (next() as usize) % params[pi].len();
        coords.push((pi, fi));
    }
    coords
}
