//! Reverse-mode differentiation over a recorded computation graph.
//!
//! Every primitive's vector-Jacobian product is itself expressed with graph
//! primitives, so the gradients returned by [`Graph::grad`] are ordinary
//! nodes and can be differentiated again. That is what makes gradients
//! through unrolled SGD updates possible.

use std::cell::RefCell;

use crate::autodiff::tensor::Tensor;
use crate::error::{contract, dim_err, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Shift(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    /// `[k] -> [n, k]`
    BroadcastRows(Var),
    /// `[n] -> [n, k]`
    BroadcastCols(Var),
    /// `[] -> shape`
    Expand(Var),
    SumAll(Var),
    /// `[n, k] -> [n]`
    SumRows(Var),
    /// `[n, k] -> [k]`
    SumCols(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    SqDist(Var, Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> (Option<Var>, Option<Var>) {
        use Op::*;
        match *self {
            Leaf => (None, None),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Maximum(a, b) | MatMul(a, b)
            | SqDist(a, b) => (Some(a), Some(b)),
            Neg(a) | Scale(a, _) | Shift(a, _) | Transpose(a) | BroadcastRows(a)
            | BroadcastCols(a) | Expand(a) | SumAll(a) | SumRows(a) | SumCols(a)
            | Relu(a) | Softplus(a) | Sigmoid(a) | Exp(a) | Log(a) | Sqrt(a) | Abs(a) => {
                (Some(a), None)
            }
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Single-threaded by construction (`RefCell`); independent graphs can live
/// on different threads.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op.inputs() {
            (None, _) => false,
            (Some(a), b) => {
                nodes[a.0].requires_grad || b.map(|b| nodes[b.0].requires_grad).unwrap_or(false)
            }
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(nodes.len() - 1)
    }

    pub fn scalar_const(&self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Value of a rank-0 node.
    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.zip_map(&nodes[b.0].value, name, f)?
        };
        Ok(self.push(value, op))
    }

    fn unary(&self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(f);
        self.push(value, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "maximum", Op::Maximum(a, b), |x, y| if x >= y { x } else { y })
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn shift(&self, a: Var, c: T) -> Var {
        self.unary(a, Op::Shift(a, c), |x| x + c)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.rank() != 2 || y.rank() != 2 || x.cols() != y.rows() {
                return Err(dim_err(
                    "matmul",
                    format!("{:?} x {:?}", x.shape(), y.shape()),
                ));
            }
            let (n, k, m) = (x.rows(), x.cols(), y.cols());
            let (xd, yd) = (x.data(), y.data());
            let mut out = vec![T::zero(); n * m];
            for i in 0..n {
                let orow = &mut out[i * m..(i + 1) * m];
                for p in 0..k {
                    let xv = xd[i * k + p];
                    if xv == T::zero() {
                        continue;
                    }
                    let yrow = &yd[p * m..(p + 1) * m];
                    for (o, &yv) in orow.iter_mut().zip(yrow) {
                        *o += xv * yv;
                    }
                }
            }
            Tensor::matrix(n, m, out)?
        };
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.rank() != 2 {
                return Err(dim_err("transpose", format!("{:?}", x.shape())));
            }
            x.transpose()
        };
        Ok(self.push(value, Op::Transpose(a)))
    }

    /// Repeats a `[k]` vector as every row of an `[n, k]` matrix.
    pub fn broadcast_rows(&self, b: Var, n: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[b.0].value;
            if x.rank() != 1 {
                return Err(dim_err("broadcast_rows", format!("{:?}", x.shape())));
            }
            let k = x.len();
            let mut data = Vec::with_capacity(n * k);
            for _ in 0..n {
                data.extend_from_slice(x.data());
            }
            Tensor::matrix(n, k, data)?
        };
        Ok(self.push(value, Op::BroadcastRows(b)))
    }

    /// Repeats a `[n]` vector as every column of an `[n, k]` matrix.
    pub fn broadcast_cols(&self, v: Var, k: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[v.0].value;
            if x.rank() != 1 {
                return Err(dim_err("broadcast_cols", format!("{:?}", x.shape())));
            }
            let mut data = Vec::with_capacity(x.len() * k);
            for &e in x.data() {
                data.extend(std::iter::repeat(e).take(k));
            }
            Tensor::matrix(x.len(), k, data)?
        };
        Ok(self.push(value, Op::BroadcastCols(v)))
    }

    /// Fills `shape` with a rank-0 value.
    pub fn expand(&self, s: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[s.0].value;
            if x.rank() != 0 {
                return Err(dim_err("expand", format!("{:?}", x.shape())));
            }
            Tensor::full(shape, x.item())
        };
        Ok(self.push(value, Op::Expand(s)))
    }

    pub fn sum(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.0].value.sum();
        self.push(Tensor::scalar(v), Op::SumAll(a))
    }

    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.rank() != 2 {
                return Err(dim_err("sum_rows", format!("{:?}", x.shape())));
            }
            Tensor::vector((0..x.rows()).map(|i| x.row(i).iter().copied().sum()).collect())
        };
        Ok(self.push(value, Op::SumRows(a)))
    }

    pub fn sum_cols(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.rank() != 2 {
                return Err(dim_err("sum_cols", format!("{:?}", x.shape())));
            }
            let mut acc = vec![T::zero(); x.cols()];
            for i in 0..x.rows() {
                for (a, &v) in acc.iter_mut().zip(x.row(i)) {
                    *a += v;
                }
            }
            Tensor::vector(acc)
        };
        Ok(self.push(value, Op::SumCols(a)))
    }

    /// Pairwise squared Euclidean distances between the rows of `a` (`[n, d]`)
    /// and `b` (`[m, d]`), computed as direct sums of squared differences so
    /// that identical rows give exactly zero.
    pub fn sqdist(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols() {
                return Err(dim_err(
                    "sqdist",
                    format!("{:?} vs {:?}", x.shape(), y.shape()),
                ));
            }
            let (n, m) = (x.rows(), y.rows());
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                let xi = x.row(i);
                for j in 0..m {
                    let d: T = xi
                        .iter()
                        .zip(y.row(j))
                        .map(|(&p, &q)| (p - q) * (p - q))
                        .sum();
                    out.push(d);
                }
            }
            Tensor::matrix(n, m, out)?
        };
        Ok(self.push(value, Op::SqDist(a, b)))
    }

    // ---- composites -------------------------------------------------------

    pub fn mean(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    /// `x W + b` for a batch `x` of shape `[n, in]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let n = self.shape(x)[0];
        let bb = self.broadcast_rows(b, n)?;
        self.add(xw, bb)
    }

    /// Multiplies every entry of `a` by the rank-0 node `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Result<Var> {
        let shape = self.shape(a);
        let e = self.expand(s, &shape)?;
        self.mul(a, e)
    }

    pub fn add_scalar(&self, a: Var, s: Var) -> Result<Var> {
        let shape = self.shape(a);
        let e = self.expand(s, &shape)?;
        self.add(a, e)
    }

    /// Row-wise log-softmax of a `[n, k]` matrix. The row maximum is a
    /// constant shift, which leaves both the value and its gradient exact.
    pub fn log_softmax_rows(&self, logits: Var) -> Result<Var> {
        let (maxes, k) = self.with_value(logits, |t| {
            let m: Vec<T> = (0..t.rows())
                .map(|i| t.row(i).iter().fold(T::neg_infinity(), |a, &b| a.max(b)))
                .collect();
            (m, t.cols())
        });
        let c = self.constant(Tensor::vector(maxes));
        let cb = self.broadcast_cols(c, k)?;
        let z = self.sub(logits, cb)?;
        let ez = self.exp(z);
        let s = self.sum_rows(ez)?;
        let lse = self.log(s);
        let lb = self.broadcast_cols(lse, k)?;
        self.sub(z, lb)
    }

    // ---- reverse mode -----------------------------------------------------

    fn mask(&self, a: Var, f: impl Fn(T) -> bool) -> Var {
        let m = self.nodes.borrow()[a.0]
            .value
            .map(|x| if f(x) { T::one() } else { T::zero() });
        self.constant(m)
    }

    fn vjp(&self, out: Var, g: Var, relevant: &[bool]) -> Result<Vec<(Var, Var)>> {
        let op = self.nodes.borrow()[out.0].op.clone();
        let want = |v: Var| relevant[v.0];
        let mut res = Vec::with_capacity(2);
        use Op::*;
        match op {
            Leaf => {}
            Add(a, b) => {
                if want(a) {
                    res.push((a, g));
                }
                if want(b) {
                    res.push((b, g));
                }
            }
            Sub(a, b) => {
                if want(a) {
                    res.push((a, g));
                }
                if want(b) {
                    res.push((b, self.neg(g)));
                }
            }
            Mul(a, b) => {
                if want(a) {
                    res.push((a, self.mul(g, b)?));
                }
                if want(b) {
                    res.push((b, self.mul(g, a)?));
                }
            }
            Div(a, b) => {
                if want(a) {
                    res.push((a, self.div(g, b)?));
                }
                if want(b) {
                    let go = self.mul(g, out)?;
                    let q = self.div(go, b)?;
                    res.push((b, self.neg(q)));
                }
            }
            Maximum(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let sel = va.zip_map(&vb, "maximum", |x, y| {
                    if x >= y {
                        T::one()
                    } else {
                        T::zero()
                    }
                })?;
                if want(a) {
                    let m = self.constant(sel.clone());
                    res.push((a, self.mul(g, m)?));
                }
                if want(b) {
                    let m = self.constant(sel.map(|s| T::one() - s));
                    res.push((b, self.mul(g, m)?));
                }
            }
            Neg(a) => res.push((a, self.neg(g))),
            Scale(a, c) => res.push((a, self.scale(g, c))),
            Shift(a, _) => res.push((a, g)),
            MatMul(a, b) => {
                if want(a) {
                    let bt = self.transpose(b)?;
                    res.push((a, self.matmul(g, bt)?));
                }
                if want(b) {
                    let at = self.transpose(a)?;
                    res.push((b, self.matmul(at, g)?));
                }
            }
            Transpose(a) => res.push((a, self.transpose(g)?)),
            BroadcastRows(a) => res.push((a, self.sum_cols(g)?)),
            BroadcastCols(a) => res.push((a, self.sum_rows(g)?)),
            Expand(a) => res.push((a, self.sum(g))),
            SumAll(a) => {
                let shape = self.shape(a);
                res.push((a, self.expand(g, &shape)?));
            }
            SumRows(a) => {
                let k = self.shape(a)[1];
                res.push((a, self.broadcast_cols(g, k)?));
            }
            SumCols(a) => {
                let n = self.shape(a)[0];
                res.push((a, self.broadcast_rows(g, n)?));
            }
            Relu(a) => {
                let m = self.mask(a, |x| x > T::zero());
                res.push((a, self.mul(g, m)?));
            }
            Softplus(a) => {
                let s = self.sigmoid(a);
                res.push((a, self.mul(g, s)?));
            }
            Sigmoid(a) => {
                let one_minus = self.shift(self.neg(out), T::one());
                let d = self.mul(out, one_minus)?;
                res.push((a, self.mul(g, d)?));
            }
            Exp(a) => res.push((a, self.mul(g, out)?)),
            Log(a) => res.push((a, self.div(g, a)?)),
            Sqrt(a) => {
                let two_out = self.scale(out, T::lit(2.0));
                res.push((a, self.div(g, two_out)?));
            }
            Abs(a) => {
                let s = self.nodes.borrow()[a.0].value.map(|x| {
                    if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                let m = self.constant(s);
                res.push((a, self.mul(g, m)?));
            }
            SqDist(a, b) => {
                let two = T::lit(2.0);
                if want(a) {
                    let d = self.shape(a)[1];
                    let rs = self.sum_rows(g)?;
                    let rsb = self.broadcast_cols(rs, d)?;
                    let t1 = self.mul(a, rsb)?;
                    let t2 = self.matmul(g, b)?;
                    let diff = self.sub(t1, t2)?;
                    res.push((a, self.scale(diff, two)));
                }
                if want(b) {
                    let d = self.shape(b)[1];
                    let cs = self.sum_cols(g)?;
                    let csb = self.broadcast_cols(cs, d)?;
                    let t1 = self.mul(b, csb)?;
                    let gt = self.transpose(g)?;
                    let t2 = self.matmul(gt, a)?;
                    let diff = self.sub(t1, t2)?;
                    res.push((b, self.scale(diff, two)));
                }
            }
        }
        Ok(res)
    }

    /// Gradients of the rank-0 node `out` with respect to `wrt`.
    ///
    /// The returned nodes live on this graph and are themselves
    /// differentiable. Inputs that `out` does not depend on get zeros.
    pub fn grad(&self, out: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if !self.shape(out).is_empty() {
            return Err(contract(format!(
                "grad needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let n = out.0 + 1;
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..n {
                if relevant[id] {
                    continue;
                }
                let (a, b) = nodes[id].op.inputs();
                relevant[id] = a.map(|a| relevant[a.0]).unwrap_or(false)
                    || b.map(|b| relevant[b.0]).unwrap_or(false);
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; n];
        if relevant[out.0] {
            grads[out.0] = Some(self.scalar_const(T::one()));
        }
        for id in (0..n).rev() {
            let Some(g) = grads[id] else { continue };
            if !relevant[id] {
                continue;
            }
            for (inp, contrib) in self.vjp(Var(id), g, &relevant)? {
                grads[inp.0] = Some(match grads[inp.0] {
                    None => contrib,
                    Some(acc) => self.add(acc, contrib)?,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(*w);
                    self.constant(Tensor::zeros(&shape))
                }
            })
            .collect())
    }
}
