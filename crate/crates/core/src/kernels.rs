//! Gaussian kernels and the safeguarded self-adaptive deep kernel
//!
//! `δ(x, y) = [(1 − ε)·K_ρ(F(x), F(y)) + ε] · K_γ(F(x), F(y))`
//!
//! where `F` is a softplus feature net and `K_ρ`, `K_γ` are Gaussian kernels
//! with lengthscales `σ_ρ`, `σ_γ`. `ε` is stored unconstrained and squashed
//! through a sigmoid; both lengthscales are stored as logarithms.

use std::cell::{Cell, RefCell};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{contract, dim_err, Result};
use crate::nn::{init_mlp, mlp_forward, Activation};
use crate::scalar::Scalar;

pub const EPS_RAW: &str = "eps_raw";
pub const LOG_SIGMA_RHO: &str = "log_sigma_rho";
pub const LOG_SIGMA_GAMMA: &str = "log_sigma_gamma";
const NET_PREFIX: &str = "net.";

/// Anything that can produce a differentiable Gram matrix between two
/// batches recorded on a graph.
pub trait GramKernel<T: Scalar> {
    fn gram(&self, g: &Graph<T>, x: Var, y: Var) -> Result<Var>;
}

/// `exp(−‖x − y‖² / (2σ²))` with a fixed lengthscale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianKernel<T> {
    pub sigma: T,
}

impl<T: Scalar> GaussianKernel<T> {
    pub fn new(sigma: T) -> Result<Self> {
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return Err(contract(format!("lengthscale must be > 0, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    /// Lengthscale from the median pairwise distance of a batch.
    pub fn median_heuristic(x: &Tensor<T>) -> Self {
        Self {
            sigma: median_pairwise_distance(x),
        }
    }
}

impl<T: Scalar> GramKernel<T> for GaussianKernel<T> {
    fn gram(&self, g: &Graph<T>, x: Var, y: Var) -> Result<Var> {
        let d = g.sqdist(x, y)?;
        let c = -T::one() / (T::lit(2.0) * self.sigma * self.sigma);
        Ok(g.exp(g.scale(d, c)))
    }
}

/// Shape of the deep kernel as configured by users.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    /// Widths of the five feature-net layers after the input.
    pub hidden_widths: Vec<usize>,
    pub eps_init: f64,
    pub safeguard_on_raw_inputs: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![32; 5],
            eps_init: 0.05,
            safeguard_on_raw_inputs: false,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            errs.push(format!("kernel.hidden_widths must be non-empty and positive, got {:?}", self.hidden_widths));
        }
        if !(self.eps_init > 0.0 && self.eps_init < 1.0) {
            errs.push(format!("kernel.eps_init must lie in (0, 1), got {}", self.eps_init));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(crate::error::Error::Config(errs))
        }
    }

    /// Fresh parameters for inputs of width `dim`, unit lengthscales.
    pub fn build<R: Rng>(&self, dim: usize, rng: &mut R) -> Result<KernelParams<f64>> {
        self.validate()?;
        let mut widths = vec![dim];
        widths.extend(&self.hidden_widths);
        Ok(KernelParams::new(&widths, self.eps_init, 1.0, 1.0, rng)?.with_safeguard_on_raw_inputs(self.safeguard_on_raw_inputs))
    }
}

/// Median-heuristic lengthscales in the order they were computed. A log
/// recorded on one pass can be replayed on another, which holds these
/// non-differentiated values fixed (finite-difference checks need that).
#[derive(Debug, Default)]
pub struct BandwidthLog {
    values: RefCell<Vec<f64>>,
    replay: Option<Vec<f64>>,
    cursor: Cell<usize>,
}

impl BandwidthLog {
    pub fn recording() -> Self {
        Self::default()
    }

    pub fn replaying(values: Vec<f64>) -> Self {
        Self {
            replay: Some(values),
            ..Self::default()
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.values.borrow().clone()
    }

    /// Median-heuristic kernel on `pooled`, or the next replayed lengthscale.
    pub fn median<T: Scalar>(&self, pooled: &Tensor<T>) -> Result<GaussianKernel<T>> {
        let sigma = match &self.replay {
            None => median_pairwise_distance(pooled).as_f64(),
            Some(v) => {
                let i = self.cursor.get();
                self.cursor.set(i + 1);
                *v.get(i).ok_or_else(|| contract("bandwidth log replay ran past its end"))?
            }
        };
        self.values.borrow_mut().push(sigma);
        GaussianKernel::new(T::lit(sigma))
    }
}

/// Median of `‖x_i − x_j‖` over `i < j`; falls back to 1 for degenerate batches.
pub fn median_pairwise_distance<T: Scalar>(x: &Tensor<T>) -> T {
    let n = x.rows();
    let mut d: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(&a, &b)| (a - b).as_f64().powi(2))
                .sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return T::one();
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let m = if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2])
    };
    if m > 0.0 && m.is_finite() {
        T::lit(m)
    } else {
        T::one()
    }
}

/// Scalar Gaussian kernel between two feature vectors.
pub fn gaussian_kernel<T: Scalar>(x: &[T], y: &[T], sigma: T) -> Result<T> {
    if x.len() != y.len() {
        return Err(dim_err(
            "gaussian_kernel",
            format!("{} vs {}", x.len(), y.len()),
        ));
    }
    let k = GaussianKernel::new(sigma)?;
    let d: T = x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok((-d / (T::lit(2.0) * k.sigma * k.sigma)).exp())
}

/// State of the self-adaptive kernel: feature net `F`, the safeguard `ε`
/// and both lengthscales.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams<T> {
    store: ParamStore<T>,
    widths: Vec<usize>,
    safeguard_on_raw_inputs: bool,
}

/// Inverse of the sigmoid squash used for `ε`.
pub fn eps_to_raw(eps: f64) -> f64 {
    (eps / (1.0 - eps)).ln()
}

impl<T: Scalar> KernelParams<T> {
    /// Feature net with the given widths (`widths[0]` is the input
    /// dimension), softplus between layers and a linear last layer.
    pub fn new<R: Rng>(
        widths: &[usize],
        eps: f64,
        sigma_rho: f64,
        sigma_gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(contract("kernel net needs at least an input width"));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(contract(format!("safeguard must lie in (0, 1), got {eps}")));
        }
        if !(sigma_rho > 0.0 && sigma_gamma > 0.0) {
            return Err(contract("lengthscales must be positive"));
        }
        let mut store = ParamStore::new();
        init_mlp(&mut store, NET_PREFIX, widths, rng)?;
        store.insert(EPS_RAW, Tensor::scalar(T::lit(eps_to_raw(eps))))?;
        store.insert(LOG_SIGMA_RHO, Tensor::scalar(T::lit(sigma_rho.ln())))?;
        store.insert(LOG_SIGMA_GAMMA, Tensor::scalar(T::lit(sigma_gamma.ln())))?;
        Ok(Self {
            store,
            widths: widths.to_vec(),
            safeguard_on_raw_inputs: false,
        })
    }

    /// Kernel whose feature net is the identity map on `dim` inputs.
    pub fn identity(dim: usize, eps: f64, sigma_rho: f64, sigma_gamma: f64) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Self::new(&[dim], eps, sigma_rho, sigma_gamma, &mut rng)
    }

    pub fn with_safeguard_on_raw_inputs(mut self, on: bool) -> Self {
        self.safeguard_on_raw_inputs = on;
        self
    }

    pub fn safeguard_on_raw_inputs(&self) -> bool {
        self.safeguard_on_raw_inputs
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Squashed safeguard, strictly inside (0, 1) for finite raw values.
    pub fn eps(&self) -> T {
        let r = self.store.get(EPS_RAW).expect("eps").item();
        T::one() / (T::one() + (-r).exp())
    }

    pub fn sigma_rho(&self) -> T {
        self.store.get(LOG_SIGMA_RHO).expect("sigma").item().exp()
    }

    pub fn sigma_gamma(&self) -> T {
        self.store.get(LOG_SIGMA_GAMMA).expect("sigma").item().exp()
    }

    pub fn set_eps(&mut self, eps: f64) -> Result<()> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(contract(format!("safeguard must lie in (0, 1), got {eps}")));
        }
        self.store
            .set(EPS_RAW, Tensor::scalar(T::lit(eps_to_raw(eps))))
    }

    pub fn set_lengthscales(&mut self, sigma_rho: T, sigma_gamma: T) -> Result<()> {
        if !(sigma_rho > T::zero() && sigma_gamma > T::zero()) {
            return Err(contract("lengthscales must be positive"));
        }
        self.store.set(LOG_SIGMA_RHO, Tensor::scalar(sigma_rho.ln()))?;
        self.store.set(LOG_SIGMA_GAMMA, Tensor::scalar(sigma_gamma.ln()))
    }

    /// Sets both lengthscales by the median heuristic on a warm-up batch:
    /// `σ_ρ` from distances between `F` features, `σ_γ` from the inputs it
    /// acts on (features, or raw inputs with the raw safeguard switch).
    pub fn init_lengthscales_median(&mut self, warmup: &Tensor<T>) -> Result<()> {
        let feats = self.features(warmup)?;
        let rho = median_pairwise_distance(&feats);
        let gamma = if self.safeguard_on_raw_inputs {
            median_pairwise_distance(warmup)
        } else {
            rho
        };
        self.set_lengthscales(rho, gamma)
    }

    /// Names of the feature-net parameters.
    pub fn is_net_param(name: &str) -> bool {
        name.starts_with(NET_PREFIX)
    }

    /// `F(x)` for a batch, evaluated without recording gradients.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let b = self.bind_const(&g);
        let xv = g.constant(x.clone());
        let f = b.features(&g, xv)?;
        Ok(g.value(f))
    }

    /// Binds all kernel parameters as differentiable leaves.
    pub fn bind(&self, g: &Graph<T>) -> BoundKernel {
        BoundKernel {
            vars: self.store.bind(g),
            layers: self.layers(),
            input_dim: self.input_dim(),
            raw_safeguard: self.safeguard_on_raw_inputs,
        }
    }

    /// Binds all kernel parameters as constants.
    pub fn bind_const(&self, g: &Graph<T>) -> BoundKernel {
        BoundKernel {
            vars: self.store.bind_const(g),
            layers: self.layers(),
            input_dim: self.input_dim(),
            raw_safeguard: self.safeguard_on_raw_inputs,
        }
    }
}

impl<T: Scalar> GramKernel<T> for KernelParams<T> {
    fn gram(&self, g: &Graph<T>, x: Var, y: Var) -> Result<Var> {
        self.bind_const(g).gram(g, x, y)
    }
}

/// Kernel parameters attached to a particular graph.
#[derive(Clone, Debug)]
pub struct BoundKernel {
    vars: Bound,
    layers: usize,
    input_dim: usize,
    raw_safeguard: bool,
}

impl BoundKernel {
    pub fn vars(&self) -> &Bound {
        &self.vars
    }

    pub fn features<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(dim_err(
                "deep_kernel",
                format!("input {s:?}, feature net expects width {}", self.input_dim),
            ));
        }
        if self.layers == 0 {
            return Ok(x);
        }
        let outs = mlp_forward(
            g,
            &self.vars,
            NET_PREFIX,
            self.layers,
            x,
            Activation::Softplus,
            Activation::Identity,
        )?;
        Ok(*outs.last().expect("at least one layer"))
    }

    /// `exp(−d / (2σ²))` with `σ = exp(log_sigma)`.
    fn gaussian_of<T: Scalar>(&self, g: &Graph<T>, d: Var, log_sigma: Var) -> Result<Var> {
        let inv_var = g.exp(g.scale(log_sigma, T::lit(-2.0)));
        let c = g.scale(inv_var, T::lit(-0.5));
        Ok(g.exp(g.mul_scalar(d, c)?))
    }
}

impl<T: Scalar> GramKernel<T> for BoundKernel {
    fn gram(&self, g: &Graph<T>, x: Var, y: Var) -> Result<Var> {
        let fx = self.features(g, x)?;
        let fy = self.features(g, y)?;
        let d_feat = g.sqdist(fx, fy)?;
        let k_rho = self.gaussian_of(g, d_feat, self.vars.get(LOG_SIGMA_RHO)?)?;
        let d_gamma = if self.raw_safeguard {
            g.sqdist(x, y)?
        } else {
            d_feat
        };
        let k_gamma = self.gaussian_of(g, d_gamma, self.vars.get(LOG_SIGMA_GAMMA)?)?;
        let eps = g.sigmoid(self.vars.get(EPS_RAW)?);
        let one_minus = g.shift(g.neg(eps), T::one());
        let scaled = g.mul_scalar(k_rho, one_minus)?;
        let floor = g.add_scalar(scaled, eps)?;
        g.mul(floor, k_gamma)
    }
}

/// Scalar deep kernel between two input vectors.
pub fn deep_kernel<T: Scalar>(x: &[T], y: &[T], kp: &KernelParams<T>) -> Result<T> {
    if x.len() != kp.input_dim() || y.len() != kp.input_dim() {
        return Err(dim_err(
            "deep_kernel",
            format!(
                "inputs of width {} and {}, feature net expects {}",
                x.len(),
                y.len(),
                kp.input_dim()
            ),
        ));
    }
    let gm = gram(
        &Tensor::matrix(1, x.len(), x.to_vec())?,
        &Tensor::matrix(1, y.len(), y.to_vec())?,
        kp,
    )?;
    Ok(gm.item())
}

/// Numeric Gram matrix `G[i][j] = k(X[i], Y[j])`.
pub fn gram<T: Scalar, K: GramKernel<T> + ?Sized>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    kernel: &K,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols() {
        return Err(dim_err("gram", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let k = kernel.gram(&g, xv, yv)?;
    Ok(g.value(k))
}
