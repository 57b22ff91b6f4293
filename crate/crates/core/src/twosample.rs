//! MMD estimators, the regularised variance, the test-power criterion
//! `Ĵ_λ`, kernel training and permutation tests.
//!
//! With paired samples `u_i = (x_i^s, x_i^t)` the pair statistic is
//! `M(u_i, u_j) = δ(s_i, s_j) + δ(t_i, t_j) − δ(s_i, t_j) − δ(t_i, s_j)`.
//! Numeric estimators take precomputed Gram matrices; the `*_graph`
//! variants record the same arithmetic on a tape.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, GradMap, Graph, Tensor, Var};
use crate::error::{contract, dim_err, Error, Result};
use crate::kernels::{gram, BoundKernel, GramKernel, KernelParams};
use crate::scalar::Scalar;

/// Equal-size source and target batches, paired row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample<T> {
    source: Tensor<T>,
    target: Tensor<T>,
}

impl<T: Scalar> PairedSample<T> {
    pub fn new(source: Tensor<T>, target: Tensor<T>) -> Result<Self> {
        if source.rank() != 2 || target.rank() != 2 || source.cols() != target.cols() {
            return Err(dim_err(
                "paired_sample",
                format!("{:?} vs {:?}", source.shape(), target.shape()),
            ));
        }
        if source.rows() != target.rows() {
            return Err(contract(format!(
                "paired sample needs equal counts, got {} and {}",
                source.rows(),
                target.rows()
            )));
        }
        if source.rows() < 2 {
            return Err(contract(format!("paired sample needs n >= 2, got {}", source.rows())));
        }
        Ok(Self { source, target })
    }

    pub fn n(&self) -> usize {
        self.source.rows()
    }

    pub fn source(&self) -> &Tensor<T> {
        &self.source
    }

    pub fn target(&self) -> &Tensor<T> {
        &self.target
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoSampleConfig {
    /// Variance regulariser; `None` means `n^(-1/3)`.
    pub lambda_var: Option<f64>,
    pub alpha_sig: f64,
    pub n_permutations: usize,
    pub eta_ker: f64,
    /// Ascend `ε` and both lengthscales as well as the feature net.
    pub train_all_kernel_params: bool,
    pub kernel_optimizer: KernelOptimizer,
}

/// Update rule of [`train_kernel`]; both use `eta_ker` as the step size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelOptimizer {
    /// `Θ ← Θ + η·∇Ĵ_λ`.
    #[default]
    Ascent,
    Adam,
}

impl Default for TwoSampleConfig {
    fn default() -> Self {
        Self {
            lambda_var: None,
            alpha_sig: 0.05,
            n_permutations: 200,
            eta_ker: 0.05,
            train_all_kernel_params: true,
            kernel_optimizer: KernelOptimizer::Ascent,
        }
    }
}

impl TwoSampleConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Some(l) = self.lambda_var {
            if !(l > 0.0 && l.is_finite()) {
                errs.push(format!("lambda_var must be > 0, got {l}"));
            }
        }
        if !(self.alpha_sig > 0.0 && self.alpha_sig < 1.0) {
            errs.push(format!("alpha_sig must lie in (0, 1), got {}", self.alpha_sig));
        }
        if self.n_permutations < 100 {
            errs.push(format!("n_permutations must be >= 100, got {}", self.n_permutations));
        }
        if !(self.eta_ker > 0.0 && self.eta_ker.is_finite()) {
            errs.push(format!("eta_ker must be > 0, got {}", self.eta_ker));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn lambda_for(&self, n: usize) -> f64 {
        self.lambda_var.unwrap_or_else(|| default_lambda(n))
    }
}

/// `n^(-1/3)`.
pub fn default_lambda(n: usize) -> f64 {
    (n as f64).powf(-1.0 / 3.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub zeta1: f64,
    pub zeta2: f64,
    /// `4·ζ₁`
    pub sigma2_h1: f64,
    /// Population `E[M(u₁, u₂)]`, the squared MMD.
    pub d2: f64,
}

// ---- numeric estimators on Gram matrices -----------------------------------

fn check_square(op: &'static str, k: &Tensor<impl Scalar>, n: usize) -> Result<()> {
    if k.rank() != 2 || k.rows() != n || k.cols() != n {
        return Err(dim_err(op, format!("expected [{n}, {n}], got {:?}", k.shape())));
    }
    Ok(())
}

/// `M` from the three Gram blocks of a paired sample.
pub fn pair_matrix<T: Scalar>(kss: &Tensor<T>, ktt: &Tensor<T>, kst: &Tensor<T>) -> Result<Tensor<T>> {
    let n = kss.rows();
    check_square("pair_matrix", kss, n)?;
    check_square("pair_matrix", ktt, n)?;
    check_square("pair_matrix", kst, n)?;
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, kss.at(i, j) + ktt.at(i, j) - kst.at(i, j) - kst.at(j, i));
        }
    }
    Ok(m)
}

/// Paired U-statistic from `M`.
pub fn paired_from_matrix<T: Scalar>(m: &Tensor<T>) -> Result<T> {
    let n = m.rows();
    check_square("mmd_u_paired", m, n)?;
    if n < 2 {
        return Err(contract(format!("mmd_u_paired needs n >= 2, got {n}")));
    }
    let mut s = T::zero();
    for i in 0..n {
        for (j, &v) in m.row(i).iter().enumerate() {
            if i != j {
                s += v;
            }
        }
    }
    Ok(s / T::from_usize_lossy(n * (n - 1)))
}

/// Regularised V-statistic variance from `M`, diagonal included.
/// Rounding can push the unregularised part a hair below zero; it is clamped.
pub fn variance_from_matrix<T: Scalar>(m: &Tensor<T>, lambda: T) -> Result<T> {
    let n = m.rows();
    check_square("variance_reg", m, n)?;
    if !(lambda >= T::zero()) {
        return Err(contract(format!("lambda_var must be >= 0, got {lambda}")));
    }
    if n < 2 {
        return Err(contract(format!("variance_reg needs n >= 2, got {n}")));
    }
    let nf = T::from_usize_lossy(n);
    let rows: Vec<T> = (0..n).map(|i| m.row(i).iter().copied().sum()).collect();
    let sq: T = rows.iter().map(|&r| r * r).sum();
    let tot: T = rows.iter().copied().sum();
    let four = T::lit(4.0);
    let v = four * sq / (nf * nf * nf) - four * tot * tot / (nf * nf * nf * nf);
    Ok(v.max(T::zero()) + lambda)
}

/// Three-term estimator from the Gram blocks of samples of sizes `N^s`, `N^t`.
pub fn complete_from_grams<T: Scalar>(kss: &Tensor<T>, ktt: &Tensor<T>, kst: &Tensor<T>) -> Result<T> {
    let (ns, nt) = (kss.rows(), ktt.rows());
    check_square("mmd_u_complete", kss, ns)?;
    check_square("mmd_u_complete", ktt, nt)?;
    if kst.rank() != 2 || kst.rows() != ns || kst.cols() != nt {
        return Err(dim_err("mmd_u_complete", format!("cross block {:?}", kst.shape())));
    }
    if ns < 2 || nt < 2 {
        return Err(contract(format!("mmd_u_complete needs both sizes >= 2, got {ns} and {nt}")));
    }
    let off = |k: &Tensor<T>| -> T {
        let mut s = T::zero();
        for i in 0..k.rows() {
            for (j, &v) in k.row(i).iter().enumerate() {
                if i != j {
                    s += v;
                }
            }
        }
        s
    };
    let a = off(kss) / T::from_usize_lossy(ns * (ns - 1));
    let b = off(ktt) / T::from_usize_lossy(nt * (nt - 1));
    let c = T::lit(2.0) * kst.sum() / T::from_usize_lossy(ns * nt);
    Ok(a + b - c)
}

fn grams<T: Scalar, K: GramKernel<T> + ?Sized>(
    xs: &Tensor<T>,
    xt: &Tensor<T>,
    k: &K,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    Ok((gram(xs, xs, k)?, gram(xt, xt, k)?, gram(xs, xt, k)?))
}

// ---- numeric estimators on data ---------------------------------------------

/// `M(u_i, u_j)` for two pairs.
pub fn pair_statistic<T: Scalar, K: GramKernel<T> + ?Sized>(
    ui: (&[T], &[T]),
    uj: (&[T], &[T]),
    k: &K,
) -> Result<T> {
    let xs = Tensor::from_rows(&[ui.0, uj.0])?;
    let xt = Tensor::from_rows(&[ui.1, uj.1])?;
    let m = pair_matrix_of(&xs, &xt, k)?;
    Ok(m.at(0, 1))
}

fn pair_matrix_of<T: Scalar, K: GramKernel<T> + ?Sized>(
    xs: &Tensor<T>,
    xt: &Tensor<T>,
    k: &K,
) -> Result<Tensor<T>> {
    let (kss, ktt, kst) = grams(xs, xt, k)?;
    pair_matrix(&kss, &ktt, &kst)
}

pub fn mmd_u_paired<T: Scalar, K: GramKernel<T> + ?Sized>(p: &PairedSample<T>, k: &K) -> Result<T> {
    paired_from_matrix(&pair_matrix_of(p.source(), p.target(), k)?)
}

pub fn mmd_u_complete<T: Scalar, K: GramKernel<T> + ?Sized>(
    xs: &Tensor<T>,
    xt: &Tensor<T>,
    k: &K,
) -> Result<T> {
    if xs.rank() != 2 || xt.rank() != 2 || xs.cols() != xt.cols() {
        return Err(dim_err("mmd_u_complete", format!("{:?} vs {:?}", xs.shape(), xt.shape())));
    }
    if xs.rows() < 2 || xt.rows() < 2 {
        return Err(contract(format!(
            "mmd_u_complete needs both sizes >= 2, got {} and {}",
            xs.rows(),
            xt.rows()
        )));
    }
    let (kss, ktt, kst) = grams(xs, xt, k)?;
    complete_from_grams(&kss, &ktt, &kst)
}

pub fn variance_reg<T: Scalar, K: GramKernel<T> + ?Sized>(
    p: &PairedSample<T>,
    k: &K,
    lambda: T,
) -> Result<T> {
    variance_from_matrix(&pair_matrix_of(p.source(), p.target(), k)?, lambda)
}

pub fn j_lambda<T: Scalar, K: GramKernel<T> + ?Sized>(
    p: &PairedSample<T>,
    k: &K,
    lambda: T,
) -> Result<T> {
    if !(lambda > T::zero()) {
        return Err(contract(format!("Ĵ_λ needs lambda_var > 0, got {lambda}")));
    }
    let m = pair_matrix_of(p.source(), p.target(), k)?;
    Ok(paired_from_matrix(&m)? / variance_from_matrix(&m, lambda)?.sqrt())
}

// ---- graph versions ---------------------------------------------------------

fn offdiag_mask<T: Scalar>(g: &Graph<T>, n: usize) -> Var {
    let mut t = Tensor::full(&[n, n], T::one());
    for i in 0..n {
        t.set(i, i, T::zero());
    }
    g.constant(t)
}

/// `M` recorded on the graph for batches `xs`, `xt` of equal size.
pub fn pair_matrix_graph<T: Scalar, K: GramKernel<T> + ?Sized>(
    g: &Graph<T>,
    k: &K,
    xs: Var,
    xt: Var,
) -> Result<Var> {
    let (ss, st) = (g.shape(xs), g.shape(xt));
    if ss != st || ss.len() != 2 {
        return Err(contract(format!("paired batches must match, got {ss:?} and {st:?}")));
    }
    let kss = k.gram(g, xs, xs)?;
    let ktt = k.gram(g, xt, xt)?;
    let kst = k.gram(g, xs, xt)?;
    let kts = g.transpose(kst)?;
    let a = g.add(kss, ktt)?;
    let b = g.add(kst, kts)?;
    g.sub(a, b)
}

pub fn paired_graph<T: Scalar>(g: &Graph<T>, m: Var) -> Result<Var> {
    let n = g.shape(m)[0];
    if n < 2 {
        return Err(contract(format!("mmd_u_paired needs n >= 2, got {n}")));
    }
    let off = g.mul(m, offdiag_mask(g, n))?;
    Ok(g.scale(g.sum(off), T::one() / T::from_usize_lossy(n * (n - 1))))
}

pub fn variance_graph<T: Scalar>(g: &Graph<T>, m: Var, lambda: T) -> Result<Var> {
    let n = g.shape(m)[0];
    if !(lambda >= T::zero()) {
        return Err(contract(format!("lambda_var must be >= 0, got {lambda}")));
    }
    let nf = T::from_usize_lossy(n);
    let r = g.sum_rows(m)?;
    let sq = g.sum(g.mul(r, r)?);
    let tot = g.sum(r);
    let a = g.scale(sq, T::lit(4.0) / (nf * nf * nf));
    let b = g.scale(g.mul(tot, tot)?, T::lit(4.0) / (nf * nf * nf * nf));
    let v = g.sub(a, b)?;
    let v = g.maximum(v, g.scalar_const(T::zero()))?;
    Ok(g.shift(v, lambda))
}

pub fn j_lambda_graph<T: Scalar, K: GramKernel<T> + ?Sized>(
    g: &Graph<T>,
    k: &K,
    xs: Var,
    xt: Var,
    lambda: T,
) -> Result<Var> {
    if !(lambda > T::zero()) {
        return Err(contract(format!("Ĵ_λ needs lambda_var > 0, got {lambda}")));
    }
    let m = pair_matrix_graph(g, k, xs, xt)?;
    let num = paired_graph(g, m)?;
    let den = g.sqrt(variance_graph(g, m, lambda)?);
    g.div(num, den)
}

/// Three-term estimator on the graph; sizes may differ.
pub fn complete_graph<T: Scalar, K: GramKernel<T> + ?Sized>(
    g: &Graph<T>,
    k: &K,
    xs: Var,
    xt: Var,
) -> Result<Var> {
    let (ns, nt) = (g.shape(xs)[0], g.shape(xt)[0]);
    if ns < 2 || nt < 2 {
        return Err(contract(format!("mmd_u_complete needs both sizes >= 2, got {ns} and {nt}")));
    }
    let kss = g.mul(k.gram(g, xs, xs)?, offdiag_mask(g, ns))?;
    let ktt = g.mul(k.gram(g, xt, xt)?, offdiag_mask(g, nt))?;
    let kst = k.gram(g, xs, xt)?;
    let a = g.scale(g.sum(kss), T::one() / T::from_usize_lossy(ns * (ns - 1)));
    let b = g.scale(g.sum(ktt), T::one() / T::from_usize_lossy(nt * (nt - 1)));
    let c = g.scale(g.sum(kst), T::lit(2.0) / T::from_usize_lossy(ns * nt));
    g.sub(g.add(a, b)?, c)
}

// ---- population quantities by enumeration -----------------------------------

/// A finite distribution: `atoms` is `[k, d]`, `probs` sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDist {
    pub atoms: Tensor<f64>,
    pub probs: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(atoms: Tensor<f64>, probs: Vec<f64>) -> Result<Self> {
        if atoms.rank() != 2 || atoms.rows() != probs.len() || probs.is_empty() {
            return Err(dim_err(
                "discrete_dist",
                format!("{} probabilities for atoms {:?}", probs.len(), atoms.shape()),
            ));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(contract("probabilities must be nonnegative and sum to 1"));
        }
        Ok(Self { atoms, probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Largest atom count per side accepted by [`variance_components_oracle`].
pub const MAX_ATOMS: usize = 6;

/// `ζ₁`, `ζ₂` and `d²` by exhaustive enumeration over triples of pairs
/// `u = (x^s, x^t)` with `x^s ~ p`, `x^t ~ q` independent.
pub fn variance_components_oracle<K: GramKernel<f64> + ?Sized>(
    p: &DiscreteDist,
    q: &DiscreteDist,
    k: &K,
) -> Result<VarianceComponents> {
    if p.len() > MAX_ATOMS || q.len() > MAX_ATOMS {
        return Err(Error::Complexity(p.len().max(q.len())));
    }
    let kpp = gram(&p.atoms, &p.atoms, k)?;
    let kqq = gram(&q.atoms, &q.atoms, k)?;
    let kpq = gram(&p.atoms, &q.atoms, k)?;
    let us: Vec<(usize, usize, f64)> = (0..p.len())
        .flat_map(|a| (0..q.len()).map(move |b| (a, b)))
        .map(|(a, b)| (a, b, p.probs[a] * q.probs[b]))
        .collect();
    let m = |u: &(usize, usize, f64), v: &(usize, usize, f64)| -> f64 {
        kpp.at(u.0, v.0) + kqq.at(u.1, v.1) - kpq.at(u.0, v.1) - kpq.at(v.0, u.1)
    };
    let mut e1 = 0.0;
    let mut e2 = 0.0;
    let mut e12 = 0.0;
    for u in &us {
        // h1(u) = E_v M(u, v)
        let mut h1 = 0.0;
        for v in &us {
            let x = m(u, v);
            e1 += u.2 * v.2 * x;
            e2 += u.2 * v.2 * x * x;
            h1 += v.2 * x;
        }
        e12 += u.2 * h1 * h1;
    }
    let zeta1 = (e12 - e1 * e1).max(0.0);
    let zeta2 = (e2 - e1 * e1).max(0.0);
    Ok(VarianceComponents {
        zeta1,
        zeta2,
        sigma2_h1: 4.0 * zeta1,
        d2: e1,
    })
}

/// `Var[d̂²ᵤ]` with `n(n−2)` under the `ζ₂` term:
/// `4(n−2)/(n(n−1))·ζ₁ + 2/(n(n−2))·ζ₂`.
pub fn u_variance_nn2(c: &VarianceComponents, n: usize) -> f64 {
    let n = n as f64;
    4.0 * (n - 2.0) / (n * (n - 1.0)) * c.zeta1 + 2.0 / (n * (n - 2.0)) * c.zeta2
}

/// Standard order-two U-statistic variance, equal to
/// `4ζ₁/n + (2ζ₂ − 4ζ₁)/(n(n−1))`.
pub fn u_variance_standard(c: &VarianceComponents, n: usize) -> f64 {
    let n = n as f64;
    (4.0 * (n - 2.0) * c.zeta1 + 2.0 * c.zeta2) / (n * (n - 1.0))
}

/// `Φ(√n·d²/σ − c_α/(√n·σ))`.
pub fn asymptotic_power(d2: f64, sigma_h1: f64, c_alpha: f64, n: usize) -> Result<f64> {
    if !(sigma_h1 > 0.0) {
        return Err(contract(format!("sigma_h1 must be > 0, got {sigma_h1}")));
    }
    if n == 0 {
        return Err(contract("asymptotic_power needs n >= 1"));
    }
    let rn = (n as f64).sqrt();
    let z = rn * d2 / sigma_h1 - c_alpha / (rn * sigma_h1);
    Ok(std_normal_cdf(z))
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(z / std::f64::consts::SQRT_2))
}

// ---- kernel training --------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct KernelTrace {
    pub j_values: Vec<f64>,
}

/// Gradient ascent on `Ĵ_λ`. Step `i` uses `source[i % len]` and
/// `target[i % len]`, which must be equal-size pairs.
pub fn train_kernel(
    source: &[Tensor<f64>],
    target: &[Tensor<f64>],
    kp: &KernelParams<f64>,
    cfg: &TwoSampleConfig,
    n_steps: usize,
) -> Result<(KernelParams<f64>, KernelTrace)> {
    cfg.validate()?;
    if n_steps > 0 && (source.is_empty() || source.len() != target.len()) {
        return Err(contract(format!(
            "train_kernel needs matching non-empty batch lists, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    let mut kp = kp.clone();
    let mut trace = Vec::with_capacity(n_steps);
    let adam = AdamConfig::new(cfg.eta_ker);
    let mut adam_state = AdamState::default();
    for step in 0..n_steps {
        let (xs, xt) = (&source[step % source.len()], &target[step % target.len()]);
        let p = PairedSample::new(xs.clone(), xt.clone())?;
        let (j, grads) = j_lambda_and_grad(&kp, &p, cfg.lambda_for(p.n()))?;
        if !j.is_finite() || grads.values().any(|t| !t.all_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite Ĵ_λ or gradient at kernel step {step} (Ĵ_λ = {j})"
            )));
        }
        trace.push(j);
        let grads: GradMap<f64> = grads
            .into_iter()
            .filter(|(name, _)| cfg.train_all_kernel_params || KernelParams::<f64>::is_net_param(name))
            .collect();
        match cfg.kernel_optimizer {
            KernelOptimizer::Ascent => {
                for (name, gr) in grads {
                    let cur = kp.store().get(&name).expect("bound from store");
                    let next = cur.zip_map(&gr, "kernel_ascent", |a, b| a + cfg.eta_ker * b)?;
                    kp.store_mut().set(&name, next)?;
                }
            }
            KernelOptimizer::Adam => {
                let neg = grads.into_iter().map(|(n, t)| (n, t.map(|v| -v))).collect();
                adam_step(kp.store_mut(), &neg, &adam, &mut adam_state)?;
            }
        }
    }
    Ok((kp, KernelTrace { j_values: trace }))
}

/// `Ĵ_λ` and its gradient with respect to every kernel parameter.
pub fn j_lambda_and_grad(
    kp: &KernelParams<f64>,
    p: &PairedSample<f64>,
    lambda: f64,
) -> Result<(f64, crate::autodiff::GradMap<f64>)> {
    let g = Graph::new();
    let bk: BoundKernel = kp.bind(&g);
    let xs = g.constant(p.source().clone());
    let xt = g.constant(p.target().clone());
    let j = j_lambda_graph(&g, &bk, xs, xt, lambda)?;
    let grads = crate::autodiff::grad_map(&g, j, bk.vars())?;
    Ok((g.item(j), grads))
}

// ---- blob benchmark ---------------------------------------------------------

/// Grid of Gaussian blobs. Under the null both samples use unit covariance;
/// under the alternative blob `i` of the second sample has correlation
/// `rho · (−1)^i`, so the two differ only in per-blob shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobConfig {
    pub grid: usize,
    pub spacing: f64,
    pub rho: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            grid: 3,
            spacing: 10.0,
            rho: 0.7,
        }
    }
}

impl BlobConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.grid == 0 {
            errs.push("blob.grid must be >= 1".to_string());
        }
        if !(self.spacing > 0.0) {
            errs.push(format!("blob.spacing must be > 0, got {}", self.spacing));
        }
        if !(self.rho.abs() < 1.0) {
            errs.push(format!("blob.rho must lie in (-1, 1), got {}", self.rho));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn draw<R: rand::Rng>(&self, n: usize, rho: f64, rng: &mut R) -> Tensor<f64> {
        let cells = self.grid * self.grid;
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let c = rng.gen_range(0..cells);
            let r = if c % 2 == 0 { rho } else { -rho };
            let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            // Cholesky factor of [[1, r], [r, 1]]
            data.push((c / self.grid) as f64 * self.spacing + a);
            data.push((c % self.grid) as f64 * self.spacing + r * a + (1.0 - r * r).sqrt() * b);
        }
        Tensor::new(vec![n, 2], data).expect("shape matches data")
    }

    /// `n` points from each side; `alternative = false` draws both from P.
    pub fn sample<R: rand::Rng>(&self, n: usize, alternative: bool, rng: &mut R) -> (Tensor<f64>, Tensor<f64>) {
        let p = self.draw(n, 0.0, rng);
        let q = self.draw(n, if alternative { self.rho } else { 0.0 }, rng);
        (p, q)
    }
}

// ---- permutation test -------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    /// `n·d̂²` with `n = min(N^s, N^t)`.
    pub statistic: f64,
    pub threshold: f64,
    pub reject: bool,
    pub p_value: f64,
}

/// Statistic of a split of the pooled Gram `k`: paired estimator when the
/// two sides have equal size, three-term estimator otherwise.
fn split_statistic(k: &Tensor<f64>, s: &[usize], t: &[usize]) -> f64 {
    let (ns, nt) = (s.len(), t.len());
    let scale = ns.min(nt) as f64;
    if ns == nt {
        let mut acc = 0.0;
        for i in 0..ns {
            let (si, ti) = (s[i], t[i]);
            for j in 0..ns {
                if i != j {
                    let (sj, tj) = (s[j], t[j]);
                    acc += k.at(si, sj) + k.at(ti, tj) - k.at(si, tj) - k.at(ti, sj);
                }
            }
        }
        scale * acc / (ns * (ns - 1)) as f64
    } else {
        let off = |idx: &[usize]| -> f64 {
            let mut a = 0.0;
            for (i, &p) in idx.iter().enumerate() {
                for (j, &q) in idx.iter().enumerate() {
                    if i != j {
                        a += k.at(p, q);
                    }
                }
            }
            a
        };
        let mut cross = 0.0;
        for &p in s {
            for &q in t {
                cross += k.at(p, q);
            }
        }
        let d2 = off(s) / (ns * (ns - 1)) as f64 + off(t) / (nt * (nt - 1)) as f64
            - 2.0 * cross / (ns * nt) as f64;
        scale * d2
    }
}

/// Permutation test of `H₀: P = Q`. The pooled Gram is computed once; the
/// permutation list is derived from `seed` before replicas run in parallel,
/// so the result does not depend on scheduling.
pub fn permutation_test<K: GramKernel<f64> + ?Sized>(
    xs: &Tensor<f64>,
    xt: &Tensor<f64>,
    k: &K,
    cfg: &TwoSampleConfig,
    seed: u64,
) -> Result<TestOutcome> {
    cfg.validate()?;
    if xs.rank() != 2 || xt.rank() != 2 || xs.cols() != xt.cols() {
        return Err(dim_err("permutation_test", format!("{:?} vs {:?}", xs.shape(), xt.shape())));
    }
    let (ns, nt) = (xs.rows(), xt.rows());
    if ns < 2 || nt < 2 {
        return Err(contract(format!("permutation_test needs both sizes >= 2, got {ns} and {nt}")));
    }
    let pooled = xs.vstack(xt)?;
    let kz = gram(&pooled, &pooled, k)?;
    let ident: Vec<usize> = (0..ns + nt).collect();
    let statistic = split_statistic(&kz, &ident[..ns], &ident[ns..]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<usize>> = (0..cfg.n_permutations)
        .map(|_| {
            let mut p = ident.clone();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let mut null: Vec<f64> = perms
        .par_iter()
        .map(|p| split_statistic(&kz, &p[..ns], &p[ns..]))
        .collect();
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    let p_value = (1 + exceed) as f64 / (cfg.n_permutations + 1) as f64;
    null.sort_by(|a, b| a.total_cmp(b));
    let threshold = empirical_quantile(&null, 1.0 - cfg.alpha_sig);
    Ok(TestOutcome {
        statistic,
        threshold,
        reject: statistic > threshold,
        p_value,
    })
}

/// Order statistic at rank `ceil(q·B)` of sorted values (1-based).
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let b = sorted.len();
    let rank = ((q * b as f64).ceil() as usize).clamp(1, b);
    sorted[rank - 1]
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::GaussianKernel;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, mean: f64) -> Tensor<f64> {
        let v = (0..n * d)
            .map(|_| { let z: f64 = StandardNormal.sample(rng); mean + z })
            .collect();
        Tensor::matrix(n, d, v).unwrap()
    }

    fn deep(seed: u64, d: usize) -> KernelParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KernelParams::new(&[d, 6, 6, 4], 0.1, 1.0, 1.2, &mut rng).unwrap()
    }

    fn naive_paired(xs: &Tensor<f64>, xt: &Tensor<f64>, k: &KernelParams<f64>) -> f64 {
        let n = xs.rows();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += pair_statistic((xs.row(i), xt.row(i)), (xs.row(j), xt.row(j)), k).unwrap();
                }
            }
        }
        s / (n * (n - 1)) as f64
    }

    #[test]
    fn pair_statistic_identical_pairs_is_zero() {
        let k = deep(1, 2);
        let v = pair_statistic((&[0.1, 0.2], &[0.1, 0.2]), (&[1.0, -1.0], &[1.0, -1.0]), &k).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn pair_statistic_is_symmetric() {
        let k = deep(2, 2);
        let a = (&[0.1, 0.2][..], &[0.5, -0.3][..]);
        let b = (&[1.0, -1.0][..], &[2.0, 0.4][..]);
        let x = pair_statistic(a, b, &k).unwrap();
        let y = pair_statistic(b, a, &k).unwrap();
        assert!((x - y).abs() < 1e-15);
    }

    #[test]
    fn pair_statistic_four_term_oracle() {
        // s = (0, 1), t = (3, 4) in one dimension, unit Gaussian
        let k = GaussianKernel::new(1.0).unwrap();
        let e = |d: f64| (-d * d / 2.0).exp();
        let expected = e(1.0) + e(1.0) - e(4.0) - e(2.0);
        let v = pair_statistic((&[0.0], &[3.0]), (&[1.0], &[4.0]), &k).unwrap();
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn paired_matches_nested_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = deep(4, 2);
        let xs = normal_batch(&mut rng, 3, 2, 0.0);
        let xt = normal_batch(&mut rng, 3, 2, 0.5);
        let p = PairedSample::new(xs.clone(), xt.clone()).unwrap();
        let v = mmd_u_paired(&p, &k).unwrap();
        assert!((v - naive_paired(&xs, &xt, &k)).abs() < 1e-12);
    }

    #[test]
    fn paired_is_zero_on_identical_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs = normal_batch(&mut rng, 7, 3, 0.0);
        let p = PairedSample::new(xs.clone(), xs).unwrap();
        assert_eq!(mmd_u_paired(&p, &deep(6, 3)).unwrap(), 0.0);
    }

    #[test]
    fn paired_sample_contract() {
        let a = Tensor::<f64>::zeros(&[1, 2]);
        assert!(PairedSample::new(a.clone(), a).is_err());
        let b = Tensor::<f64>::zeros(&[3, 2]);
        let c = Tensor::<f64>::zeros(&[4, 2]);
        assert!(PairedSample::new(b, c).is_err());
    }

    #[test]
    fn complete_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = deep(8, 2);
        let xs = normal_batch(&mut rng, 4, 2, 0.0);
        let xt = normal_batch(&mut rng, 3, 2, 1.0);
        let kv = |a: &[f64], b: &[f64]| crate::kernels::deep_kernel(a, b, &k).unwrap();
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    a += kv(xs.row(i), xs.row(j));
                }
            }
            for j in 0..3 {
                c += kv(xs.row(i), xt.row(j));
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    b += kv(xt.row(i), xt.row(j));
                }
            }
        }
        let expected = a / 12.0 + b / 6.0 - 2.0 * c / 12.0;
        assert!((mmd_u_complete(&xs, &xt, &k).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn complete_differs_from_paired_by_cross_diagonal() {
        // The three-term estimator averages the cross block over all i, j;
        // the paired estimator skips i = j.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = GaussianKernel::new(1.0).unwrap();
        let xs = normal_batch(&mut rng, 6, 2, 0.0);
        let xt = normal_batch(&mut rng, 6, 2, 0.3);
        let kst = gram(&xs, &xt, &k).unwrap();
        let n = 6.0;
        let tr: f64 = (0..6).map(|i| kst.at(i, i)).sum();
        let s = kst.sum();
        let p = PairedSample::new(xs.clone(), xt.clone()).unwrap();
        let paired = mmd_u_paired(&p, &k).unwrap();
        let complete = mmd_u_complete(&xs, &xt, &k).unwrap();
        let gap = 2.0 * (s - tr) / (n * (n - 1.0)) - 2.0 * s / (n * n);
        assert!((complete - paired - gap).abs() < 1e-12);
    }

    #[test]
    fn complete_on_identical_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let k = GaussianKernel::new(1.0).unwrap();
        let x = normal_batch(&mut rng, 5, 2, 0.0);
        let s = gram(&x, &x, &k).unwrap().sum();
        let n = 5.0;
        let expected = 2.0 * (s - n * n) / (n * n * (n - 1.0));
        assert!((mmd_u_complete(&x, &x, &k).unwrap() - expected).abs() < 1e-12);
        assert!(expected < 0.0);
    }

    #[test]
    fn estimators_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = deep(12, 2);
        let xs = normal_batch(&mut rng, 6, 2, 0.0);
        let xt = normal_batch(&mut rng, 5, 2, 0.4);
        let perm_s = [3, 0, 5, 1, 4, 2];
        let perm_t = [4, 2, 0, 3, 1];
        let c0 = mmd_u_complete(&xs, &xt, &k).unwrap();
        let c1 = mmd_u_complete(&xs.select_rows(&perm_s), &xt, &k).unwrap();
        let c2 = mmd_u_complete(&xs, &xt.select_rows(&perm_t), &k).unwrap();
        assert!((c0 - c1).abs() < 1e-12 && (c0 - c2).abs() < 1e-12);
        let xt6 = normal_batch(&mut rng, 6, 2, 0.4);
        let p0 = mmd_u_paired(&PairedSample::new(xs.clone(), xt6.clone()).unwrap(), &k).unwrap();
        let p1 = mmd_u_paired(
            &PairedSample::new(xs.select_rows(&perm_s), xt6.select_rows(&perm_s)).unwrap(),
            &k,
        )
        .unwrap();
        assert!((p0 - p1).abs() < 1e-12);
    }

    #[test]
    fn variance_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = deep(14, 2);
        let xs = normal_batch(&mut rng, 3, 2, 0.0);
        let xt = normal_batch(&mut rng, 3, 2, 0.7);
        let p = PairedSample::new(xs.clone(), xt.clone()).unwrap();
        let lambda = 0.01;
        let mut rows = [0.0; 3];
        let mut tot = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let m = pair_statistic((xs.row(i), xt.row(i)), (xs.row(j), xt.row(j)), &k).unwrap();
                rows[i] += m;
                tot += m;
            }
        }
        let expected = 4.0 / 27.0 * rows.iter().map(|r| r * r).sum::<f64>() - 4.0 / 81.0 * tot * tot + lambda;
        assert!((variance_reg(&p, &k, lambda).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn variance_floor_and_degenerate_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let k = deep(16, 2);
        let x = normal_batch(&mut rng, 5, 2, 0.0);
        let p = PairedSample::new(x.clone(), x).unwrap();
        assert_eq!(variance_reg(&p, &k, 0.3).unwrap(), 0.3);
        for s in 0..20 {
            let xs = normal_batch(&mut rng, 4 + s % 5, 2, 0.0);
            let xt = normal_batch(&mut rng, 4 + s % 5, 2, 1.0);
            let p = PairedSample::new(xs, xt).unwrap();
            assert!(variance_reg(&p, &k, 0.05).unwrap() >= 0.05);
        }
        let p = PairedSample::new(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2])).unwrap();
        assert!(variance_reg(&p, &k, -1.0).is_err());
    }

    #[test]
    fn j_lambda_zero_on_identical_and_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let k = GaussianKernel::new(1.0).unwrap();
        let x = normal_batch(&mut rng, 8, 2, 0.0);
        let p = PairedSample::new(x.clone(), x).unwrap();
        assert_eq!(j_lambda(&p, &k, 0.5).unwrap(), 0.0);

        let xs = normal_batch(&mut rng, 8, 2, 0.0);
        let xt = normal_batch(&mut rng, 8, 2, 2.0);
        let p = PairedSample::new(xs, xt).unwrap();
        let lambda = default_lambda(8);
        let expected = mmd_u_paired(&p, &k).unwrap() / variance_reg(&p, &k, lambda).unwrap().sqrt();
        assert!((j_lambda(&p, &k, lambda).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn j_lambda_is_scale_free_without_regulariser() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let k = GaussianKernel::new(1.0).unwrap();
        let xs = normal_batch(&mut rng, 8, 2, 0.0);
        let xt = normal_batch(&mut rng, 8, 2, 1.0);
        let (kss, ktt, kst) = grams(&xs, &xt, &k).unwrap();
        let m = pair_matrix(&kss, &ktt, &kst).unwrap();
        let j = |m: &Tensor<f64>| paired_from_matrix(m).unwrap() / variance_from_matrix(m, 1e-12).unwrap().sqrt();
        let m3 = m.map(|v| 3.0 * v);
        assert!((j(&m) - j(&m3)).abs() < 1e-6 * j(&m).abs());
    }

    #[test]
    fn graph_estimators_match_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let kp = deep(20, 2);
        let xs = normal_batch(&mut rng, 6, 2, 0.0);
        let xt = normal_batch(&mut rng, 6, 2, 0.5);
        let xu = normal_batch(&mut rng, 4, 2, 0.5);
        let g = Graph::new();
        let bk = kp.bind(&g);
        let (a, b, c) = (g.constant(xs.clone()), g.constant(xt.clone()), g.constant(xu.clone()));
        let m = pair_matrix_graph(&g, &bk, a, b).unwrap();
        let p = PairedSample::new(xs.clone(), xt).unwrap();
        assert!((g.item(paired_graph(&g, m).unwrap()) - mmd_u_paired(&p, &kp).unwrap()).abs() < 1e-12);
        assert!(
            (g.item(variance_graph(&g, m, 0.1).unwrap()) - variance_reg(&p, &kp, 0.1).unwrap()).abs()
                < 1e-12
        );
        assert!(
            (g.item(complete_graph(&g, &bk, a, c).unwrap()) - mmd_u_complete(&xs, &xu, &kp).unwrap())
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn j_lambda_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let kp = deep(22, 2);
        let xs = normal_batch(&mut rng, 8, 2, 0.0);
        let xt = normal_batch(&mut rng, 8, 2, 0.8);
        let p = PairedSample::new(xs, xt).unwrap();
        let lambda = default_lambda(8);
        let (_, analytic) = j_lambda_and_grad(&kp, &p, lambda).unwrap();
        let numeric = crate::autodiff::finite_difference(kp.store(), 1e-6, |s| {
            let mut k2 = kp.clone();
            k2.store_mut().update_from(s)?;
            j_lambda(&p, &k2, lambda)
        })
        .unwrap();
        let rep = crate::autodiff::compare(&analytic, &numeric);
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn zero_training_steps_leave_kernel_unchanged() {
        let kp = deep(23, 2);
        let (out, trace) = train_kernel(&[], &[], &kp, &TwoSampleConfig::default(), 0).unwrap();
        assert_eq!(out, kp);
        assert!(trace.j_values.is_empty());
    }

    #[test]
    fn net_only_mode_freezes_other_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let kp = deep(25, 2);
        let xs = vec![normal_batch(&mut rng, 8, 2, 0.0)];
        let xt = vec![normal_batch(&mut rng, 8, 2, 1.0)];
        let cfg = TwoSampleConfig {
            train_all_kernel_params: false,
            ..Default::default()
        };
        let (out, _) = train_kernel(&xs, &xt, &kp, &cfg, 3).unwrap();
        assert_eq!(out.eps(), kp.eps());
        assert_eq!(out.sigma_rho(), kp.sigma_rho());
        assert_ne!(out.store().get("net.0.w"), kp.store().get("net.0.w"));
    }

    #[test]
    fn permutation_test_identical_never_rejects() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let x = normal_batch(&mut rng, 20, 2, 0.0);
        let k = GaussianKernel::median_heuristic(&x);
        let out = permutation_test(&x, &x, &k, &TwoSampleConfig::default(), 1).unwrap();
        assert_eq!(out.statistic, 0.0);
        assert!(!out.reject);
        assert!(out.p_value >= 1.0 / 201.0 && out.p_value <= 1.0);
    }

    #[test]
    fn permutation_test_detects_shift_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let xs = normal_batch(&mut rng, 30, 1, 0.0);
        let xt = normal_batch(&mut rng, 30, 1, 5.0);
        let k = GaussianKernel::new(1.0).unwrap();
        let cfg = TwoSampleConfig::default();
        let a = permutation_test(&xs, &xt, &k, &cfg, 3).unwrap();
        let b = permutation_test(&xs, &xt, &k, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.reject);
        assert!((a.p_value - 1.0 / 201.0).abs() < 1e-15);
        let xu = normal_batch(&mut rng, 25, 1, 5.0);
        assert!(permutation_test(&xs, &xu, &k, &cfg, 3).unwrap().reject);
    }

    #[test]
    fn permutation_count_is_validated() {
        let x = Tensor::<f64>::zeros(&[4, 1]);
        let k = GaussianKernel::new(1.0).unwrap();
        let cfg = TwoSampleConfig {
            n_permutations: 10,
            ..Default::default()
        };
        assert!(matches!(permutation_test(&x, &x, &k, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn asymptotic_power_values() {
        assert_eq!(asymptotic_power(0.0, 1.0, 0.0, 10).unwrap(), 0.5);
        assert!(asymptotic_power(100.0, 1.0, 2.0, 100).unwrap() > 0.9999);
        let v = asymptotic_power(0.1, 1.0, 2.0, 100).unwrap();
        assert!((v - 0.788145).abs() < 1e-6);
        assert!(asymptotic_power(0.1, 0.0, 2.0, 100).is_err());
    }

    fn atoms(v: &[f64], p: &[f64]) -> DiscreteDist {
        DiscreteDist::new(Tensor::matrix(v.len(), 1, v.to_vec()).unwrap(), p.to_vec()).unwrap()
    }

    #[test]
    fn variance_components_degenerate_and_ordering() {
        let k = GaussianKernel::new(1.0).unwrap();
        let c = variance_components_oracle(&atoms(&[0.0], &[1.0]), &atoms(&[2.0], &[1.0]), &k).unwrap();
        assert!(c.zeta1.abs() < 1e-15 && c.zeta2.abs() < 1e-15);
        let c = variance_components_oracle(
            &atoms(&[0.0, 1.0], &[0.5, 0.5]),
            &atoms(&[0.5, 2.0], &[0.5, 0.5]),
            &k,
        )
        .unwrap();
        assert!(c.zeta2 >= c.zeta1 && c.zeta1 >= 0.0);
        assert_eq!(c.sigma2_h1, 4.0 * c.zeta1);
        let seven = atoms(&[0.0; 7], &[1.0 / 7.0; 7]);
        assert!(matches!(
            variance_components_oracle(&seven, &seven, &k),
            Err(Error::Complexity(7))
        ));
    }

    #[test]
    fn population_d2_by_direct_enumeration() {
        let k = GaussianKernel::new(0.8).unwrap();
        let p = atoms(&[0.0, 1.0, 3.0], &[0.2, 0.5, 0.3]);
        let q = atoms(&[0.5, 2.0], &[0.6, 0.4]);
        let kv = |a: f64, b: f64| (-(a - b) * (a - b) / (2.0 * 0.64)).exp();
        let mut pp = 0.0;
        let mut qq = 0.0;
        let mut pq = 0.0;
        for (a, pa) in [(0.0, 0.2), (1.0, 0.5), (3.0, 0.3)] {
            for (b, pb) in [(0.0, 0.2), (1.0, 0.5), (3.0, 0.3)] {
                pp += pa * pb * kv(a, b);
            }
            for (b, pb) in [(0.5, 0.6), (2.0, 0.4)] {
                pq += pa * pb * kv(a, b);
            }
        }
        for (a, pa) in [(0.5, 0.6), (2.0, 0.4)] {
            for (b, pb) in [(0.5, 0.6), (2.0, 0.4)] {
                qq += pa * pb * kv(a, b);
            }
        }
        let c = variance_components_oracle(&p, &q, &k).unwrap();
        assert!((c.d2 - (pp + qq - 2.0 * pq)).abs() < 1e-14);
    }

    #[test]
    fn variance_forms() {
        let c = VarianceComponents {
            zeta1: 0.3,
            zeta2: 1.1,
            sigma2_h1: 1.2,
            d2: 0.0,
        };
        let n = 16;
        let alt = 4.0 * c.zeta1 / n as f64 + (2.0 * c.zeta2 - 4.0 * c.zeta1) / (n * (n - 1)) as f64;
        assert!((u_variance_standard(&c, n) - alt).abs() < 1e-15);
        assert!(u_variance_nn2(&c, n) > u_variance_standard(&c, n));
    }

    #[test]
    fn quantile_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(empirical_quantile(&v, 0.95), 95.0);
        assert_eq!(empirical_quantile(&v, 0.0), 1.0);
    }
}
