use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing autodiff gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    /// `(tensor, element)` where the maximum was attained.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the reverse-mode gradient of `f` at `params` with the central
/// difference `(f(p + h) - f(p - h)) / 2h`, element by element.
///
/// The error for one element is `|ad - cd| / (|cd| + 1e-12)`.
pub fn finite_diff_check<S, F>(f: F, params: &[Tensor<S>], step: S) -> Result<FiniteDiffReport>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, &[Var<'g, S>]) -> Result<Var<'g, S>>,
{
    if !(step > S::zero()) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let analytic: Vec<Tensor<S>> = {
        let g = Graph::new();
        let vars: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&g, &vars)?;
        let grads = g.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let eval = |probe: &[Tensor<S>], ti: usize, ei: usize| -> Result<S> {
        let g = Graph::new().with_screening(false);
        let vars: Vec<_> = probe.iter().map(|p| g.constant(p.clone())).collect();
        let v = f(&g, &vars).and_then(|o| o.item());
        match v {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::FiniteDiffNonFinite { tensor: ti, index: ei }),
        }
    };

    let mut probe: Vec<Tensor<S>> = params.to_vec();
    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for ti in 0..params.len() {
        for ei in 0..params[ti].len() {
            let orig = params[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + step;
            let plus = eval(&probe, ti, ei)?;
            probe[ti].data_mut()[ei] = orig - step;
            let minus = eval(&probe, ti, ei)?;
            probe[ti].data_mut()[ei] = orig;

            let central = ((plus - minus) / (step + step)).as_f64();
            let ad = analytic[ti].data()[ei].as_f64();
            let err = (ad - central).abs() / (central.abs() + 1e-12);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = err;
                report.worst = (ti, ei);
            }
        }
    }
    Ok(report)
}
