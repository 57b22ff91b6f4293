use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{contract, dim_err, Result};
use crate::scalar::Scalar;

/// Gradient (or any per-parameter tensor) keyed by parameter name.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

/// Named parameters plus one momentum buffer per parameter.
///
/// Iteration order is the lexicographic order of names, which keeps every
/// consumer (binding, hashing, checkpoints) deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    momentum: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            momentum: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(contract(format!("duplicate parameter name `{name}`")));
        }
        self.momentum
            .insert(name.clone(), Tensor::zeros(value.shape()));
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn momentum(&self, name: &str) -> Option<&Tensor<T>> {
        self.momentum.get(name)
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| contract(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(dim_err(
                "set",
                format!("`{name}`: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn set_momentum(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .momentum
            .get_mut(name)
            .ok_or_else(|| contract(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(dim_err("set_momentum", name.to_string()));
        }
        *slot = value;
        Ok(())
    }

    pub fn reset_momentum(&mut self) {
        for (name, p) in &self.params {
            self.momentum.insert(name.clone(), Tensor::zeros(p.shape()));
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Keeps only parameters whose name satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        let mut out = Self::new();
        for (k, v) in &self.params {
            if keep(k) {
                out.params.insert(k.clone(), v.clone());
                out.momentum.insert(k.clone(), self.momentum[k].clone());
            }
        }
        out
    }

    /// Overwrites values (and momentum) of every parameter present in `other`.
    pub fn update_from(&mut self, other: &Self) -> Result<()> {
        for (k, v) in &other.params {
            self.set(k, v.clone())?;
            self.set_momentum(k, other.momentum[k].clone())?;
        }
        Ok(())
    }

    /// Binds every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &Graph<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), g.param(v.clone())))
                .collect(),
        }
    }

    /// Binds every parameter as a constant of `g`.
    pub fn bind_const(&self, g: &Graph<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.clone())))
                .collect(),
        }
    }

    /// Momentum buffers as constants, for differentiable SGD on a graph.
    pub fn bind_momentum(&self, g: &Graph<T>) -> Bound {
        Bound {
            vars: self
                .momentum
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.clone())))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.params {
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}

/// Parameter names mapped to nodes of one graph. Produced by binding a
/// [`ParamStore`], or by a differentiable update of an earlier binding.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_map(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| contract(format!("parameter `{name}` not bound")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Union of two bindings; names must not collide.
    pub fn merged(&self, other: &Bound) -> Result<Bound> {
        let mut vars = self.vars.clone();
        for (k, v) in &other.vars {
            if vars.insert(k.clone(), *v).is_some() {
                return Err(contract(format!("parameter `{k}` bound twice")));
            }
        }
        Ok(Bound { vars })
    }

    /// Current values of the bound nodes as a store (momentum zeroed).
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), g.value(*v)).expect("names unique");
        }
        out
    }
}

/// Gradient of the scalar `out` with respect to every node in `wrt`,
/// returned as plain tensors.
pub fn grad_map<T: Scalar>(g: &Graph<T>, out: Var, wrt: &Bound) -> Result<GradMap<T>> {
    let vars = wrt.vars();
    let grads = g.grad(out, &vars)?;
    Ok(wrt
        .names()
        .zip(grads)
        .map(|(k, gv)| (k.to_string(), g.value(gv)))
        .collect())
}
