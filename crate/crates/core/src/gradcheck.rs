//! Central finite differences, the independent oracle for every backward pass.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every element of `p`.
pub fn finite_diff_gradient<F>(mut f: F, p: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = p.clone();
    let mut grad = vec![0.0; p.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation(format!("non-finite objective at element {i}")));
        }
        *g = (up - down) / (2.0 * h);
    }
    Ok(Tensor::from_parts(p.shape().to_vec(), grad))
}

/// Same oracle applied in place to one parameter of a store; the parameter is
/// restored bit-exactly afterwards.
pub fn finite_diff_param<F>(store: &mut ParamStore, id: ParamId, mut f: F, h: f64) -> Result<Tensor>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let n = store.value(id).len();
    let mut grad = vec![0.0; n];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + h;
        let up = f(store);
        store.value_mut(id).data_mut()[i] = orig - h;
        let down = f(store);
        store.value_mut(id).data_mut()[i] = orig;
        let (up, down) = (up?, down?);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite objective perturbing `{}`[{i}]",
                store.param(id).name
            )));
        }
        *g = (up - down) / (2.0 * h);
    }
    Ok(Tensor::from_parts(store.value(id).shape().to_vec(), grad))
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)` over whole tensors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    const FLOOR: f64 = 1e-7;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / norm(analytic).max(norm(numeric)).max(FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::relu;

    #[test]
    fn square_sum_derivative() {
        let p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &p, DEFAULT_STEP)
            .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn relu_sum_derivative() {
        let p = Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap();
        let g = finite_diff_gradient(|t| Ok(relu(t).sum()), &p, DEFAULT_STEP).unwrap();
        assert!(g.data()[0].abs() < 1e-10);
        assert!((g.data()[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_finite_and_bad_step() {
        let p = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(finite_diff_gradient(|_| Ok(f64::NAN), &p, 1e-5).is_err());
        assert!(finite_diff_gradient(|_| Ok(0.0), &p, 0.0).is_err());
    }

    #[test]
    fn relative_error_scale() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-12);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
