use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::params::{grad_map, Bound, GradMap, ParamStore};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

/// Central finite differences of a scalar function of a parameter store.
pub fn finite_difference<T, F>(params: &ParamStore<T>, step: T, f: F) -> Result<GradMap<T>>
where
    T: Scalar,
    F: Fn(&ParamStore<T>) -> Result<T>,
{
    let mut out = GradMap::new();
    let mut work = params.clone();
    for (name, value) in params.iter() {
        let mut grad = Tensor::zeros(value.shape());
        for i in 0..value.len() {
            let mut plus = value.clone();
            plus.data_mut()[i] += step;
            work.set(name, plus)?;
            let fp = f(&work)?;
            let mut minus = value.clone();
            minus.data_mut()[i] -= step;
            work.set(name, minus)?;
            let fm = f(&work)?;
            grad.data_mut()[i] = (fp - fm) / (step + step);
        }
        work.set(name, value.clone())?;
        out.insert(name.to_string(), grad);
    }
    Ok(out)
}

/// `max |a − n| / max(|a|, |n|, 1e-6)` over all entries present in `numeric`.
/// The floor keeps exact zeros, where central differences return rounding
/// noise, from dominating the report.
pub fn compare<T: Scalar>(analytic: &GradMap<T>, numeric: &GradMap<T>) -> GradCheck {
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
    };
    for (name, n) in numeric {
        let zeros;
        let a = match analytic.get(name) {
            Some(a) => a,
            None => {
                zeros = Tensor::zeros(n.shape());
                &zeros
            }
        };
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let (av, nv) = (av.as_f64(), nv.as_f64());
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(1e-6);
            report.entries += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    report
}

/// Checks the tape gradient of `loss_fn` against central differences with
/// the given step.
pub fn grad_check<T, F>(params: &ParamStore<T>, step: T, loss_fn: F) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&Graph<T>, &Bound) -> Result<Var>,
{
    let g = Graph::new();
    let bound = params.bind(&g);
    let out = loss_fn(&g, &bound)?;
    let analytic = grad_map(&g, out, &bound)?;
    let numeric = finite_difference(params, step, |p| {
        let g = Graph::new();
        let b = p.bind_const(&g);
        let out = loss_fn(&g, &b)?;
        Ok(g.item(out))
    })?;
    Ok(compare(&analytic, &numeric))
}
