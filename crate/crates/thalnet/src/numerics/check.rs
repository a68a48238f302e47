//! Finite-difference gradient checking utilities.

use crate::error::Result;
use crate::numerics::Tensor;
use crate::params::ParamSet;

/// Relative error between an analytic and a numeric derivative, floored so
/// that near-zero pairs compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central-difference gradient (step `h`) of a scalar function of the
/// parameter set, one tensor per parameter in registration order. Each
/// scalar is perturbed in place and restored before moving on.
pub fn central_difference<F>(params: &mut ParamSet, mut eval: F, h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut out = Vec::with_capacity(params.len());
    for pid in 0..params.len() {
        let numel = params.value(pid).numel();
        let shape = params.value(pid).shape().to_vec();
        let mut grad = vec![0.0; numel];
        for (ei, g) in grad.iter_mut().enumerate() {
            let orig = params.value(pid).data()[ei];
            params.value_mut(pid).data_mut()[ei] = orig + h;
            let fp = eval(params)?;
            params.value_mut(pid).data_mut()[ei] = orig - h;
            let fm = eval(params)?;
            params.value_mut(pid).data_mut()[ei] = orig;
            *g = (fp - fm) / (2.0 * h);
        }
        out.push(Tensor::from_vec(&shape, grad)?);
    }
    Ok(out)
}

/// Largest relative error across corresponding elements of two gradient
/// lists, together with the flat position where it occurs.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> (f64, usize, usize) {
    let mut worst = (0.0, 0, 0);
    for (ti, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (ei, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let err = relative_error(av, nv);
            if err > worst.0 {
                worst = (err, ti, ei);
            }
        }
    }
    worst
}
