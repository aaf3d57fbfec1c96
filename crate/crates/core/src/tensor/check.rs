//! Central finite-difference validation of analytic gradients.

use super::graph::GradStore;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::rng::DetRng;

/// Compare analytic gradients of a scalar-valued function against central
/// differences on sampled coordinates of every parameter.
///
/// `f` evaluates the function over the current parameters; it must return the
/// gradient store when the flag is set. Returns the maximum over sampled
/// coordinates of |analytic − central| / (|analytic| + |central| + 1e-12).
pub fn finite_difference_check<F>(
    params: &mut ParamSet<f64>,
    step: f64,
    samples_per_param: usize,
    rng: &mut DetRng,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&ParamSet<f64>, bool) -> Result<(f64, Option<GradStore<f64>>)>,
{
    if step <= 0.0 {
        return Err(Error::domain("finite_difference_check", "step must be > 0"));
    }
    let (loss, grads) = f(params, true)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "finite_difference_check",
        });
    }
    let grads = grads.ok_or_else(|| {
        Error::domain("finite_difference_check", "function did not return gradients")
    })?;

    let mut worst = 0.0f64;
    for idx in 0..params.len() {
        let id = ParamId(idx);
        let n = params.get(id).numel();
        let samples = samples_per_param.min(n);
        for s in 0..samples {
            // spread sampled coordinates across the tensor
            let coord = if samples == n {
                s
            } else {
                rng.next_index(n)
            };
            let analytic = grads.get(id).map(|g| g[coord]).unwrap_or(0.0);
            if !analytic.is_finite() {
                return Err(Error::NonFinite {
                    op: "finite_difference_check",
                });
            }
            let orig = params.get(id).data()[coord];
            params.get_mut(id).data_mut()[coord] = orig + step;
            let (plus, _) = f(params, false)?;
            params.get_mut(id).data_mut()[coord] = orig - step;
            let (minus, _) = f(params, false)?;
            params.get_mut(id).data_mut()[coord] = orig;
            let central = (plus - minus) / (2.0 * step);
            let rel = (analytic - central).abs() / (analytic.abs() + central.abs() + 1e-12);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::super::exec::Exec;
    use super::super::graph::Graph;
    use super::super::Tensor;
    use super::*;

    fn quadratic_loss(ps: &ParamSet<f64>, want_grad: bool) -> Result<(f64, Option<GradStore<f64>>)> {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(ps, ParamId(0));
        let sq = g.mul(&x, &x)?;
        let loss = g.sum_all(&sq)?;
        let value = g.value(&loss).item();
        if want_grad {
            let mut store = GradStore::new(ps.len());
            g.backward(loss, &mut store)?;
            Ok((value, Some(store)))
        } else {
            Ok((value, None))
        }
    }

    #[test]
    fn quadratic_gradient_matches() {
        let mut ps = ParamSet::new();
        ps.register("x", Tensor::from_f64s(vec![3], &[1.0, 2.0, 3.0]).unwrap());
        let (_, grads) = quadratic_loss(&ps, true).unwrap();
        let grads = grads.unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap(), &[2.0, 4.0, 6.0]);
        let mut rng = DetRng::new(0);
        let err =
            finite_difference_check(&mut ps, 1e-5, usize::MAX, &mut rng, quadratic_loss).unwrap();
        assert!(err <= 1e-8, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut ps = ParamSet::new();
        ps.register("x", Tensor::from_f64s(vec![2], &[0.3, -0.7]).unwrap());
        let f = |ps: &ParamSet<f64>, want: bool| {
            let _ = ps;
            Ok((4.0, want.then(|| GradStore::new(1))))
        };
        let mut rng = DetRng::new(0);
        let err = finite_difference_check(&mut ps, 1e-5, usize::MAX, &mut rng, f).unwrap();
        assert!(err <= 1e-8);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let mut ps = ParamSet::<f64>::new();
        ps.register("x", Tensor::zeros(vec![1]));
        let f = |_: &ParamSet<f64>, _: bool| Ok((0.0, Some(GradStore::new(1))));
        let mut rng = DetRng::new(0);
        assert!(finite_difference_check(&mut ps, 0.0, 1, &mut rng, f).is_err());
    }
}
