use serde::{Deserialize, Serialize};

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::params::{grad_map, Bound, GradMap, ParamStore};
use crate::autodiff::tensor::Tensor;
use crate::error::{contract, dim_err, Error, Result};
use crate::scalar::Scalar;

/// SGD with momentum and coupled weight decay:
/// `g' = g + wd·θ; v ← μ·v + g'; θ ← θ − lr·v` (no dampening, no Nesterov).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
}

impl<T: Scalar> SgdConfig<T> {
    pub fn plain(lr: T) -> Self {
        Self {
            lr,
            momentum: T::zero(),
            weight_decay: T::zero(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so that frozen-rate runs still report losses.
        if !(self.lr >= T::zero()) {
            return Err(contract(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(self.momentum >= T::zero() && self.momentum < T::one()) {
            return Err(contract(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= T::zero()) {
            return Err(contract(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One in-place SGD step. Parameters missing from `grads` are treated as
/// having zero gradient; gradients for unknown names are an error.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &GradMap<T>,
    cfg: &SgdConfig<T>,
) -> Result<()> {
    cfg.validate()?;
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| dim_err("sgd_step", format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(dim_err(
                "sgd_step",
                format!("`{name}`: param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let theta = params.get(&name).expect("listed").clone();
        let v = params.momentum(&name).expect("listed").clone();
        let zero;
        let g = match grads.get(&name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(theta.shape());
                &zero
            }
        };
        let mut new_v = v;
        let mut new_theta = theta.clone();
        for ((nv, nt), (&gi, &ti)) in new_v
            .data_mut()
            .iter_mut()
            .zip(new_theta.data_mut().iter_mut())
            .zip(g.data().iter().zip(theta.data()))
        {
            let gp = gi + cfg.weight_decay * ti;
            *nv = cfg.momentum * *nv + gp;
            *nt = ti - cfg.lr * *nv;
        }
        params.set(&name, new_theta)?;
        params.set_momentum(&name, new_v)?;
    }
    Ok(())
}

/// The same update as [`sgd_step`], expressed on a graph so that the new
/// parameters remain differentiable functions of whatever produced `grads`.
/// Returns `(new_params, new_velocity)`.
pub fn sgd_step_graph<T: Scalar>(
    g: &Graph<T>,
    params: &Bound,
    grads: &[Var],
    velocity: &Bound,
    cfg: &SgdConfig<T>,
) -> Result<(Bound, Bound)> {
    cfg.validate()?;
    if grads.len() != params.len() {
        return Err(dim_err(
            "sgd_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    let mut new_p = std::collections::BTreeMap::new();
    let mut new_v = std::collections::BTreeMap::new();
    for ((name, theta), &grad) in params.iter().zip(grads) {
        let v = velocity.get(name)?;
        let decayed = g.scale(theta, cfg.weight_decay);
        let gp = g.add(grad, decayed)?;
        let mv = g.scale(v, cfg.momentum);
        let v2 = g.add(mv, gp)?;
        let step = g.scale(v2, cfg.lr);
        let t2 = g.sub(theta, step)?;
        new_p.insert(name.to_string(), t2);
        new_v.insert(name.to_string(), v2);
    }
    Ok((Bound::from_map(new_p), Bound::from_map(new_v)))
}

/// Adam with bias correction. Moment buffers live in [`AdamState`] rather
/// than in the store, which keeps its momentum slots for SGD.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn new(lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= T::zero()) {
            return Err(contract(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        let unit = |b: T| b >= T::zero() && b < T::one();
        if !(unit(self.beta1) && unit(self.beta2)) {
            return Err(contract("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > T::zero()) {
            return Err(contract(format!("Adam eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub t: u32,
    pub m: GradMap<T>,
    pub v: GradMap<T>,
}

/// One in-place Adam step that descends `grads`; pass negated gradients to
/// ascend. Parameters without a gradient are left alone.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &GradMap<T>,
    cfg: &AdamConfig<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    cfg.validate()?;
    state.t += 1;
    let c1 = T::one() - cfg.beta1.powi(state.t as i32);
    let c2 = T::one() - cfg.beta2.powi(state.t as i32);
    for (name, g) in grads {
        let theta = params
            .get(name)
            .ok_or_else(|| dim_err("adam_step", format!("gradient for unknown parameter `{name}`")))?;
        if theta.shape() != g.shape() {
            return Err(dim_err(
                "adam_step",
                format!("`{name}`: param {:?} vs grad {:?}", theta.shape(), g.shape()),
            ));
        }
        let mut next = theta.clone();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((t, mi), vi), &gi) in next
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
            .zip(g.data())
        {
            *mi = cfg.beta1 * *mi + (T::one() - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (T::one() - cfg.beta2) * gi * gi;
            *t = *t - cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
        }
        params.set(name, next)?;
    }
    Ok(())
}

/// How gradients of an outer loss treat parameters produced by inner updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradMode {
    /// Differentiate through every inner update.
    Unrolled,
    /// Inner-updated parameters are constants.
    FirstOrder,
}

/// Gradient of `outer_loss(meta, inner_K)` with respect to `meta`, where
/// `inner_K` results from `steps` SGD updates of `inner` on `inner_loss`.
///
/// `inner_loss` receives the step index. Requests deeper than `max_depth`
/// are rejected up front.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_grad<T, I, O>(
    meta: &ParamStore<T>,
    inner: &ParamStore<T>,
    steps: usize,
    sgd: &SgdConfig<T>,
    mode: MetaGradMode,
    max_depth: usize,
    mut inner_loss: I,
    outer_loss: O,
) -> Result<GradMap<T>>
where
    T: Scalar,
    I: FnMut(&Graph<T>, &Bound, &Bound, usize) -> Result<Var>,
    O: FnOnce(&Graph<T>, &Bound, &Bound) -> Result<Var>,
{
    if steps > max_depth {
        return Err(Error::UnrollDepth {
            requested: steps,
            max: max_depth,
        });
    }
    let g = Graph::new();
    let m = meta.bind(&g);
    let mut cur = inner.bind(&g);
    let mut vel = inner.bind_momentum(&g);
    for step in 0..steps {
        let loss = inner_loss(&g, &m, &cur, step)?;
        let grads = g.grad(loss, &cur.vars())?;
        let (p2, v2) = sgd_step_graph(&g, &cur, &grads, &vel, sgd)?;
        match mode {
            MetaGradMode::Unrolled => {
                cur = p2;
                vel = v2;
            }
            MetaGradMode::FirstOrder => {
                cur = p2.values(&g).bind(&g);
                vel = v2.values(&g).bind_const(&g);
            }
        }
    }
    let out = outer_loss(&g, &m, &cur)?;
    grad_map(&g, out, &m)
}
