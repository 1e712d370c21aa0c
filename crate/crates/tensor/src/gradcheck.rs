//! Central-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::param::{GradStore, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_output(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "gradient check needs a scalar-valued function, output has shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Contract(format!("finite-difference step must be positive, got {h}")))
    }
}

/// Compares the reverse-mode gradient of `f` at `x` with central differences
/// and returns the largest relative error over all coordinates of `x`.
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_step(h)?;
    let mut g = Graph::new();
    let xv = g.input(x.clone().with_requires_grad(true));
    let out = f(&mut g, xv)?;
    scalar_output(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = grads.wrt(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t);
        let o = f(&mut g, v)?;
        scalar_output(&g, o)
    };
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// Same check with respect to selected parameter coordinates of a model.
///
/// `f` builds the scalar loss from the parameters in the store it is given.
pub fn gradient_check_params<F>(store: &ParamStore, f: F, h: f64, coords: &[(ParamId, usize)]) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_step(h)?;
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_output(&g, out)?;
    let grads = g.backward(out)?;
    let mut analytic = GradStore::zeros_like(store);
    grads.accumulate_params(&g, &mut analytic);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let o = f(&mut g, s)?;
        scalar_output(&g, o)
    };
    let mut worst: f64 = 0.0;
    for &(id, i) in coords {
        let mut plus = store.clone();
        plus.tensor_mut(id).data_mut()[i] += h;
        let mut minus = store.clone();
        minus.tensor_mut(id).data_mut()[i] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.get(id)[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_checked_exactly() {
        let x = Tensor::vector(vec![0.3, -1.2, 5.0, 2.0]);
        let err = gradient_check(|g, x| g.sum(x), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::vector(vec![0.3, -1.2]);
        let r = gradient_check(|g, x| g.tanh(x), &x, 1e-5);
        assert!(matches!(r, Err(TensorError::Contract(_))));
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let x = Tensor::vector(vec![0.3]);
        assert!(gradient_check(|g, x| g.sum(x), &x, 0.0).is_err());
    }
}
