//! Training losses: cross-entropy, adaptive-kernel MMD, the weighted
//! bottleneck matching loss and the upper-bound loss used by the outer update.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{contract, dim_err, Result};
use crate::kernels::{BandwidthLog, GramKernel};
use crate::networks::{bottleneck_forward, BottleneckSnapshot, BoundModel, BoundQuantizer, QuantizerInput};
use crate::scalar::Scalar;
use crate::twosample::{complete_graph, pair_matrix_graph, paired_graph};

/// Where the outer-loop discrepancy is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RapDistanceOn {
    Features,
    Logits,
}

/// Named loss components and the weights that form `total`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn new(parts: &[(&str, f64, f64)]) -> Self {
        let mut components = BTreeMap::new();
        let mut weights = BTreeMap::new();
        let mut total = 0.0;
        for &(name, value, weight) in parts {
            components.insert(name.to_string(), value);
            weights.insert(name.to_string(), weight);
            total += weight * value;
        }
        Self {
            total,
            components,
            weights,
        }
    }

    pub fn get(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components.values().all(|v| v.is_finite())
    }
}

/// Checks that every row has a single 1 and zeros elsewhere.
pub fn validate_one_hot<T: Scalar>(y: &Tensor<T>) -> Result<()> {
    if y.rank() != 2 {
        return Err(dim_err("loss_ce", format!("labels {:?}", y.shape())));
    }
    for i in 0..y.rows() {
        let ones = y.row(i).iter().filter(|&&v| v == T::one()).count();
        let zeros = y.row(i).iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != y.cols() {
            return Err(contract(format!("label row {i} is not one-hot")));
        }
    }
    Ok(())
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &k) in labels.iter().enumerate() {
        if k >= classes {
            return Err(contract(format!("label {k} out of range for {classes} classes")));
        }
        t.set(i, k, T::one());
    }
    Ok(t)
}

pub fn loss_ce_graph<T: Scalar>(g: &Graph<T>, logits: Var, y: &Tensor<T>) -> Result<Var> {
    validate_one_hot(y)?;
    if g.shape(logits) != y.shape() {
        return Err(dim_err(
            "loss_ce",
            format!("logits {:?} vs labels {:?}", g.shape(logits), y.shape()),
        ));
    }
    let ls = g.log_softmax_rows(logits)?;
    let picked = g.mul(ls, g.constant(y.clone()))?;
    let n = T::from_usize_lossy(y.rows());
    Ok(g.scale(g.sum(picked), -T::one() / n))
}

pub fn loss_ce<T: Scalar>(logits: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    let g = Graph::new();
    let l = loss_ce_graph(&g, g.constant(logits.clone()), y)?;
    Ok(g.item(l))
}

/// Paired MMD between high-level source and target features under `kernel`.
pub fn loss_ak_graph<T: Scalar, K: GramKernel<T> + ?Sized>(
    g: &Graph<T>,
    kernel: &K,
    gs: Var,
    gt: Var,
) -> Result<Var> {
    if g.shape(gs) != g.shape(gt) {
        return Err(dim_err(
            "loss_ak",
            format!("batches {:?} vs {:?}", g.shape(gs), g.shape(gt)),
        ));
    }
    let m = pair_matrix_graph(g, kernel, gs, gt)?;
    paired_graph(g, m)
}

/// `Σ_l Σ_j ⟨D_{Q_l}(·), |B_l(x_j) − B^p_l(x_j)|⟩`. The snapshot is bound
/// as constants here, so no gradient ever reaches it. `x` is the raw batch.
pub fn loss_w_graph<T: Scalar>(
    g: &Graph<T>,
    bm: &BoundModel,
    bq: &BoundQuantizer,
    quantizer_input: QuantizerInput,
    snap: &BottleneckSnapshot<T>,
    x: Var,
) -> Result<Var> {
    let cur = bm.features(g, x)?;
    let sb = snap.params().bind_const(g);
    let old = bottleneck_forward(g, &sb, bm.b_layers(), cur.mid).map_err(|e| match e {
        crate::Error::Contract(m) => contract(format!("snapshot does not match bottleneck: {m}")),
        other => other,
    })?;
    let inputs: Vec<Var> = match quantizer_input {
        QuantizerInput::LayerInput => cur.layer_inputs.clone(),
        QuantizerInput::RawInput => vec![x; bm.b_layers()],
    };
    let ws = bq.weights(g, &inputs)?;
    let mut total: Option<Var> = None;
    for l in 0..bm.b_layers() {
        let (a, b) = (cur.per_layer[l], old.per_layer[l]);
        if g.shape(a) != g.shape(b) || g.shape(a) != g.shape(ws[l]) {
            return Err(dim_err(
                "loss_w",
                format!("layer {l}: {:?} vs snapshot {:?}", g.shape(a), g.shape(b)),
            ));
        }
        let d = g.abs(g.sub(a, b)?);
        let term = g.sum(g.mul(ws[l], d)?);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("at least one bottleneck layer"))
}

/// MMD under a Gaussian whose lengthscale is the median heuristic on the
/// pooled (constant) values. Paired estimator for equal sizes.
pub fn fixed_mmd_graph<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Result<Var> {
    fixed_mmd_graph_with(g, a, b, &BandwidthLog::recording())
}

/// [`fixed_mmd_graph`] drawing its lengthscale through a log.
pub fn fixed_mmd_graph_with<T: Scalar>(g: &Graph<T>, a: Var, b: Var, bw: &BandwidthLog) -> Result<Var> {
    let pooled = g.value(a).vstack(&g.value(b))?;
    let k = bw.median(&pooled)?;
    if g.shape(a) == g.shape(b) {
        let m = pair_matrix_graph(g, &k, a, b)?;
        paired_graph(g, m)
    } else {
        complete_graph(g, &k, a, b)
    }
}

/// Upper-bound loss parts, each as a graph node.
#[derive(Clone, Copy, Debug)]
pub struct LossUVars {
    pub total: Var,
    pub ce: Var,
    pub source_target: Var,
    pub consecutive: Var,
}

/// `L_ce(source) + (1/M) Σ_m d(source, Q_m) + max_m d(Q_m, Q_{m+1})`.
/// The consecutive term is 0 when `M = 1`.
pub fn loss_u_graph<T: Scalar>(
    g: &Graph<T>,
    bm: &BoundModel,
    xs: Var,
    ys: &Tensor<T>,
    queries: &[Var],
    on: RapDistanceOn,
) -> Result<LossUVars> {
    loss_u_graph_with(g, bm, xs, ys, queries, on, &BandwidthLog::recording())
}

/// [`loss_u_graph`] drawing its lengthscales through a log.
pub fn loss_u_graph_with<T: Scalar>(
    g: &Graph<T>,
    bm: &BoundModel,
    xs: Var,
    ys: &Tensor<T>,
    queries: &[Var],
    on: RapDistanceOn,
    bw: &BandwidthLog,
) -> Result<LossUVars> {
    if queries.is_empty() {
        return Err(contract("loss_u needs at least one query set"));
    }
    if queries.iter().any(|&q| g.shape(q).first().copied().unwrap_or(0) < 2) {
        return Err(contract("loss_u query sets need at least two samples"));
    }
    let repr = |x: Var| -> Result<(Var, Var)> {
        let f = bm.features(g, x)?;
        let logits = bm.classify(g, f.high)?;
        Ok(match on {
            RapDistanceOn::Features => (f.high, logits),
            RapDistanceOn::Logits => (logits, logits),
        })
    };
    let (rs, logits_s) = repr(xs)?;
    let ce = loss_ce_graph(g, logits_s, ys)?;
    let rq: Vec<Var> = queries.iter().map(|&q| repr(q).map(|r| r.0)).collect::<Result<_>>()?;
    let mut st = g.scalar_const(T::zero());
    for &r in &rq {
        st = g.add(st, fixed_mmd_graph_with(g, rs, r, bw)?)?;
    }
    let st = g.scale(st, T::one() / T::from_usize_lossy(rq.len()));
    let mut cons: Option<Var> = None;
    for w in rq.windows(2) {
        let d = fixed_mmd_graph_with(g, w[0], w[1], bw)?;
        cons = Some(match cons {
            None => d,
            Some(c) => g.maximum(c, d)?,
        });
    }
    let consecutive = cons.unwrap_or_else(|| g.scalar_const(T::zero()));
    let total = g.add(g.add(ce, st)?, consecutive)?;
    Ok(LossUVars {
        total,
        ce,
        source_target: st,
        consecutive,
    })
}

impl LossUVars {
    pub fn report<T: Scalar>(&self, g: &Graph<T>) -> LossReport {
        LossReport::new(&[
            ("ce", g.item(self.ce).as_f64(), 1.0),
            ("mmd_source_target", g.item(self.source_target).as_f64(), 1.0),
            ("mmd_consecutive", g.item(self.consecutive).as_f64(), 1.0),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{GaussianKernel, KernelParams};
    use crate::networks::{snapshot, ModelParams, NetworkConfig, QuantizerParams};
    use crate::twosample::{mmd_u_paired, PairedSample};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            e_widths: vec![4],
            b_widths: vec![3, 3],
            quantizer_input: QuantizerInput::LayerInput,
        }
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Tensor<f64> {
        Tensor::matrix(n, d, (0..n * d).map(|_| shift + rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn ce_uniform_logits() {
        let logits = Tensor::<f64>::zeros(&[3, 7]);
        let y = one_hot(&[0, 3, 6], 7).unwrap();
        assert!((loss_ce(&logits, &y).unwrap() - 7f64.ln()).abs() < 1e-12);
        assert!((7f64.ln() - 1.945910).abs() < 1e-6);
    }

    #[test]
    fn ce_saturates_and_hand_value() {
        let logits = Tensor::from_rows(&[[50.0, 0.0]]).unwrap();
        let y = one_hot::<f64>(&[0], 2).unwrap();
        assert!(loss_ce(&logits, &y).unwrap() < 1e-20);
        let logits = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let e = 1f64.exp();
        let expected = -(e / (e + 1.0)).ln();
        let v = loss_ce(&logits, &y).unwrap();
        assert!((v - expected).abs() < 1e-14);
        assert!((v - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn ce_rejects_soft_labels() {
        let logits = Tensor::<f64>::zeros(&[1, 2]);
        let y = Tensor::from_rows(&[[0.5, 0.5]]).unwrap();
        assert!(loss_ce(&logits, &y).is_err());
        let y = Tensor::from_rows(&[[1.0, 1.0]]).unwrap();
        assert!(loss_ce(&logits, &y).is_err());
    }

    #[test]
    fn loss_ak_delegates_to_paired_estimator() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let kp = KernelParams::<f64>::new(&[3, 4, 3], 0.05, 1.0, 1.0, &mut rng).unwrap();
        let a = batch(&mut rng, 6, 3, 0.0);
        let b = batch(&mut rng, 6, 3, 0.4);
        let g = Graph::new();
        let v = g.item(loss_ak_graph(&g, &kp, g.constant(a.clone()), g.constant(b.clone())).unwrap());
        let expected = mmd_u_paired(&PairedSample::new(a.clone(), b).unwrap(), &kp).unwrap();
        assert!((v - expected).abs() < 1e-12);
        let z = g.item(loss_ak_graph(&g, &kp, g.constant(a.clone()), g.constant(a)).unwrap());
        assert_eq!(z, 0.0);
        assert!(v.abs() <= 4.0);
    }

    #[test]
    fn loss_ak_batch_mismatch() {
        let g = Graph::<f64>::new();
        let k = GaussianKernel::new(1.0).unwrap();
        let a = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(loss_ak_graph(&g, &k, a, b), Err(crate::Error::Dimension { .. })));
    }

    fn loss_w_value(mp: &ModelParams<f64>, qp: &QuantizerParams<f64>, snap: &BottleneckSnapshot<f64>, x: &Tensor<f64>) -> f64 {
        let g = Graph::new();
        let bm = mp.bind(&g, false, false, false);
        let bq = qp.bind(&g, false);
        let v = loss_w_graph(&g, &bm, &bq, QuantizerInput::LayerInput, snap, g.constant(x.clone())).unwrap();
        g.item(v)
    }

    #[test]
    fn loss_w_zero_for_fresh_snapshot_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mp = ModelParams::<f64>::new(2, 3, &tiny_cfg(), &mut rng).unwrap();
        let qp = QuantizerParams::new(&mp, QuantizerInput::LayerInput, &mut rng).unwrap();
        let x = batch(&mut rng, 5, 2, 0.0);
        let s = snapshot(&mp, 0);
        assert_eq!(loss_w_value(&mp, &qp, &s, &x), 0.0);
        mp.reinit_heads(&mut rng).unwrap();
        assert!(loss_w_value(&mp, &qp, &s, &x) > 0.0);
    }

    #[test]
    fn loss_w_vanishes_with_saturated_quantizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mp = ModelParams::<f64>::new(2, 3, &tiny_cfg(), &mut rng).unwrap();
        let mut qp = QuantizerParams::new(&mp, QuantizerInput::LayerInput, &mut rng).unwrap();
        for l in 0..2 {
            let name = format!("q{l}.0.b");
            let shape = qp.store().get(&name).unwrap().shape().to_vec();
            qp.store_mut().set(&name, Tensor::full(&shape, -60.0)).unwrap();
        }
        let x = batch(&mut rng, 5, 2, 0.0);
        let s = snapshot(&mp, 0);
        mp.reinit_heads(&mut rng).unwrap();
        assert!(loss_w_value(&mp, &qp, &s, &x) < 1e-20);
    }

    #[test]
    fn loss_w_one_layer_hand_value() {
        // E = identity-like single layer, B one layer of width 1, quantizer
        // on the layer input.
        let cfg = NetworkConfig {
            e_widths: vec![1],
            b_widths: vec![1],
            quantizer_input: QuantizerInput::LayerInput,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mp = ModelParams::<f64>::new(1, 2, &cfg, &mut rng).unwrap();
        mp.e_mut().set("e.0.w", Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        mp.e_mut().set("e.0.b", Tensor::vector(vec![0.0])).unwrap();
        mp.b_mut().set("b.0.w", Tensor::matrix(1, 1, vec![2.0]).unwrap()).unwrap();
        mp.b_mut().set("b.0.b", Tensor::vector(vec![0.5])).unwrap();
        let mut qp = QuantizerParams::new(&mp, QuantizerInput::LayerInput, &mut rng).unwrap();
        qp.store_mut().set("q0.0.w", Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        qp.store_mut().set("q0.0.b", Tensor::vector(vec![0.0])).unwrap();
        let s = snapshot(&mp, 0);
        mp.b_mut().set("b.0.w", Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        let x = Tensor::from_rows(&[[1.0], [2.0]]).unwrap();
        // |B(x) − B^p(x)| = x, weight softplus(x)
        let sp = |v: f64| (1.0 + v.exp()).ln();
        let expected = sp(1.0) * 1.0 + sp(2.0) * 2.0;
        assert!((loss_w_value(&mp, &qp, &s, &x) - expected).abs() < 1e-14);
    }

    #[test]
    fn loss_w_trains_quantizer_and_bottleneck_but_not_snapshot() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mp = ModelParams::<f64>::new(2, 3, &tiny_cfg(), &mut rng).unwrap();
        let qp = QuantizerParams::new(&mp, QuantizerInput::LayerInput, &mut rng).unwrap();
        let x = batch(&mut rng, 5, 2, 0.0);
        let s = snapshot(&mp, 0);
        let before = s.params().fingerprint();
        mp.reinit_heads(&mut rng).unwrap();
        let g = Graph::new();
        let bm = mp.bind(&g, false, true, false);
        let bq = qp.bind(&g, true);
        let l = loss_w_graph(&g, &bm, &bq, QuantizerInput::LayerInput, &s, g.constant(x)).unwrap();
        let gq = crate::autodiff::grad_map(&g, l, &bq.vars).unwrap();
        let gb = crate::autodiff::grad_map(&g, l, &bm.b).unwrap();
        assert!(gq.values().any(|t| t.max_abs() > 0.0));
        assert!(gb.values().any(|t| t.max_abs() > 0.0));
        let mut b = mp.b().clone();
        crate::autodiff::sgd_step(&mut b, &gb, &crate::autodiff::SgdConfig::plain(0.1)).unwrap();
        assert_eq!(s.params().fingerprint(), before);
    }

    #[test]
    fn loss_u_components_and_degenerate_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mp = ModelParams::<f64>::new(2, 3, &tiny_cfg(), &mut rng).unwrap();
        let xs = batch(&mut rng, 6, 2, 0.0);
        let ys = one_hot(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        let g = Graph::new();
        let bm = mp.bind(&g, true, false, false);
        let xv = g.constant(xs.clone());
        let q = g.constant(xs.clone());
        let u = loss_u_graph(&g, &bm, xv, &ys, &[q], RapDistanceOn::Features).unwrap();
        assert_eq!(g.item(u.source_target), 0.0);
        assert_eq!(g.item(u.consecutive), 0.0);
        let ce = loss_ce(&crate::networks::forward_logits(&xs, &mp).unwrap(), &ys).unwrap();
        assert_eq!(g.item(u.total), ce);
        let rep = u.report(&g);
        assert!((rep.total - rep.get("ce")).abs() < 1e-12);

        let qa = g.constant(batch(&mut rng, 6, 2, 0.5));
        let u2 = loss_u_graph(&g, &bm, xv, &ys, &[qa, qa], RapDistanceOn::Features).unwrap();
        assert_eq!(g.item(u2.consecutive), 0.0);
        assert!(loss_u_graph(&g, &bm, xv, &ys, &[], RapDistanceOn::Features).is_err());
    }

    #[test]
    fn loss_u_two_domain_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mp = ModelParams::<f64>::new(2, 3, &tiny_cfg(), &mut rng).unwrap();
        let xs = batch(&mut rng, 6, 2, 0.0);
        let q1 = batch(&mut rng, 6, 2, 0.5);
        let q2 = batch(&mut rng, 6, 2, 1.0);
        let ys = one_hot(&[0, 1, 2, 2, 1, 0], 3).unwrap();
        let g = Graph::new();
        let bm = mp.bind(&g, true, false, false);
        let u = loss_u_graph(
            &g,
            &bm,
            g.constant(xs.clone()),
            &ys,
            &[g.constant(q1.clone()), g.constant(q2.clone())],
            RapDistanceOn::Features,
        )
        .unwrap();
        let f = |x: &Tensor<f64>| crate::networks::forward_features(x, &mp).unwrap().high;
        let d = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let k = GaussianKernel::median_heuristic(&a.vstack(b).unwrap());
            mmd_u_paired(&PairedSample::new(a.clone(), b.clone()).unwrap(), &k).unwrap()
        };
        let ce = loss_ce(&crate::networks::forward_logits(&xs, &mp).unwrap(), &ys).unwrap();
        let expected = ce + 0.5 * (d(&f(&xs), &f(&q1)) + d(&f(&xs), &f(&q2))) + d(&f(&q1), &f(&q2));
        assert!((g.item(u.total) - expected).abs() < 1e-12);
    }

    #[test]
    fn report_total_is_weighted_sum() {
        let r = LossReport::new(&[("ce", 1.5, 1.0), ("ak", 0.25, 1.0), ("w", 2.0, 0.5)]);
        assert!((r.total - 2.75).abs() < 1e-12);
    }
}
