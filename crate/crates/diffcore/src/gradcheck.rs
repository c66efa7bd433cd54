//! Central finite-difference oracle for analytic gradients.

use crate::error::{DiffError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamGrads, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over checked scalars of |analytic - fd| / max(1, |fd|)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub n_checked: usize,
    /// Every frozen parameter's analytic gradient is exactly zero.
    pub frozen_grads_zero: bool,
    pub analytic: ParamGrads<f64>,
}

/// Checks every trainable scalar of `store` against central differences
/// with step `eps`. The closure must build the same scalar loss on a fresh
/// graph each time it is called. Outputs of `detach` are held at their
/// base-point values during the perturbed evaluations.
pub fn grad_check<F>(store: &mut ParamStore<f64>, eps: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(DiffError::Invalid { op: "grad_check", msg: format!("eps must be positive, got {eps}") });
    }
    let (analytic, pinned) = {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        if !g.value(l).item().is_finite() {
            return Err(DiffError::NonFinite { param: "<base point>".into() });
        }
        (g.backward(l)?.params(&g, store), g.detached_values())
    };
    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_pinned_detaches(pinned.clone());
        let l = loss_fn(&mut g, store)?;
        Ok(g.value(l).item())
    };
    let frozen_grads_zero = store.ids().filter(|&id| store.is_frozen(id)).all(|id| analytic.is_all_zero(id));
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut n = 0;
    let ids: Vec<_> = store.trainable().collect();
    for id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let lp = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let lm = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(DiffError::NonFinite { param: format!("{}[{i}]", store.entry(id).name) });
            }
            let fd = (lp - lm) / (2.0 * eps);
            let a = analytic.get(id).data()[i];
            let rel = (a - fd).abs() / fd.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{i}]", store.entry(id).name);
            }
            n += 1;
        }
    }
    Ok(GradCheckReport { max_rel_error: max_rel, worst_param: worst, n_checked: n, frozen_grads_zero, analytic })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, Tensor};

    #[test]
    fn exact_quadratic() {
        let mut s = ParamStore::<f64>::new(0);
        let w = s.add("w", &[1], Init::Zeros).unwrap();
        s.get_mut(w).data_mut()[0] = 3.0;
        let r = grad_check(&mut s, 1e-5, |g, st| {
            let x = g.param(st, w);
            let y = g.mul(x, x)?;
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-8, "{}", r.max_rel_error);
        assert_eq!(r.analytic.get(w).data()[0], 6.0);
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let mut s = ParamStore::<f64>::new(0);
        let w = s.add("weight", &[1], Init::Zeros).unwrap();
        s.get_mut(w).data_mut()[0] = 1e-6;
        let err = grad_check(&mut s, 1e-5, |g, st| {
            let x = g.param(st, w);
            let y = g.ln(x);
            Ok(g.sum_all(y))
        })
        .unwrap_err();
        assert!(err.to_string().contains("weight[0]"), "{err}");
    }

    #[test]
    fn frozen_parameter_gradient_is_exactly_zero() {
        let mut s = ParamStore::<f64>::new(1);
        let a = s.add("a", &[3], Init::NormalScaled).unwrap();
        let b = s.add("b", &[3], Init::NormalScaled).unwrap();
        s.set_frozen(b, true);
        let r = grad_check(&mut s, 1e-6, |g, st| {
            let x = g.param(st, a);
            let y = g.param(st, b);
            let z = g.mul(x, y)?;
            let c = g.input(Tensor::full(&[3], 2.0));
            let z = g.mul(z, c)?;
            Ok(g.sum_all(z))
        })
        .unwrap();
        assert!(r.frozen_grads_zero);
        assert!(r.analytic.is_all_zero(b));
        assert_eq!(r.n_checked, 3);
    }

    #[test]
    fn stop_gradient_is_held_constant() {
        // loss = w * stop(w): the tape gives stop(w) = 3, not 2w = 6.
        let mut s = ParamStore::<f64>::new(0);
        let w = s.add("w", &[1], Init::Zeros).unwrap();
        s.get_mut(w).data_mut()[0] = 3.0;
        let r = grad_check(&mut s, 1e-5, |g, st| {
            let x = g.param(st, w);
            let d = g.detach(x);
            let y = g.mul(x, d)?;
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert_eq!(r.analytic.get(w).data()[0], 3.0);
        assert!(r.max_rel_error <= 1e-8, "{}", r.max_rel_error);
    }
}
