use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{compare, finite_difference, grad_map, GradCheck, Graph, Tensor, Var};
use crate::error::Result;
use crate::kernels::{BandwidthLog, KernelConfig};
use crate::losses::{loss_ak_graph, loss_ce_graph, loss_u_graph_with, loss_w_graph, RapDistanceOn};
use crate::meta::{quantizer_meta_grad, source_batch, Ablation, MetaConfig, SapChain, TrainState};
use crate::networks::{snapshot, BoundModel, ModelParams, NetworkConfig, QuantizerInput};
use crate::stream::{make_target_stream, DomainStream, LabeledData, StreamConfig};
use crate::twosample::{j_lambda_and_grad, PairedSample, TwoSampleConfig};

pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const UNROLLED_TOLERANCE: f64 = 1e-3;
// large enough that rounding noise on exact-zero entries stays far below
// the relative-error floor, small enough for O(h²) truncation to vanish
const STEP: f64 = 1e-5;
// the kernel net is smooth (softplus) and Ĵ_λ carries more cancellation in
// its variance term, so a wider step is both safe and needed there
const SMOOTH_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub entries: usize,
    pub pass: bool,
}

impl GradCheckLine {
    fn new(name: &str, r: GradCheck, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            tolerance,
            entries: r.entries,
            pass: r.max_rel_error < tolerance,
        }
    }
}

struct Fixture {
    stream: DomainStream,
    state: TrainState,
    cfg: MetaConfig,
    src: LabeledData,
    sup: Vec<Tensor<f64>>,
    que: Vec<Tensor<f64>>,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let scfg = StreamConfig {
        n_source: 200,
        n_target: 60,
        n_meta_train: 2,
        n_meta_test: 0,
        n_support: 8,
        n_query: 8,
        drop_class_domain: 0,
        ..Default::default()
    };
    let stream = make_target_stream(&scfg, seed)?;
    let net = NetworkConfig {
        e_widths: vec![5],
        b_widths: vec![4, 3],
        quantizer_input: QuantizerInput::LayerInput,
    };
    let kernel = KernelConfig {
        hidden_widths: vec![4, 4],
        ..Default::default()
    };
    let cfg = MetaConfig {
        ablation: Ablation::FAndD,
        ..Default::default()
    };
    let mut state = TrainState::new(&stream, &net, &kernel, &cfg, &TwoSampleConfig::default(), seed)?;
    let src = source_batch(&mut state.rng, &stream.source, 8)?;
    let rows = |r: std::ops::Range<usize>| r.collect::<Vec<_>>();
    let sup = stream.targets.iter().map(|t| t.pool.x.select_rows(&rows(0..8))).collect();
    let que = stream.targets.iter().map(|t| t.pool.x.select_rows(&rows(8..16))).collect();
    let warm = src.x.vstack(&stream.targets[0].pool.x.select_rows(&rows(0..8)))?;
    let feats = crate::networks::forward_features(&warm, &state.mp)?.high;
    state.kp.init_lengthscales_median(&feats)?;
    Ok(Fixture {
        stream,
        state,
        cfg,
        src,
        sup,
        que,
    })
}

/// Tape gradient of a model loss against central differences over every
/// parameter of `E`, `B` and `C`.
fn model_check(mp: &ModelParams<f64>, f: impl Fn(&Graph<f64>, &BoundModel) -> Result<Var>) -> Result<GradCheck> {
    let g = Graph::new();
    let bm = mp.bind(&g, true, true, true);
    let out = f(&g, &bm)?;
    let analytic = grad_map(&g, out, &bm.e.merged(&bm.b)?.merged(&bm.c)?)?;
    let numeric = finite_difference(&mp.to_store(), STEP, |s| {
        let mut m = mp.clone();
        m.load_store(s)?;
        let g = Graph::new();
        let bm = m.bind(&g, false, false, false);
        let out = f(&g, &bm)?;
        Ok(g.item(out))
    })?;
    Ok(compare(&analytic, &numeric))
}

/// Runs every finite-difference suite on tiny networks.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckLine>> {
    let fx = fixture(seed)?;
    let mut lines = Vec::new();
    let (src, sup, que) = (&fx.src, &fx.sup, &fx.que);
    let y = src.one_hot();

    let r = model_check(&fx.state.mp, |g, bm| {
        let logits = bm.logits(g, g.constant(src.x.clone()))?;
        loss_ce_graph(g, logits, &y)
    })?;
    lines.push(GradCheckLine::new("loss_ce", r, LOSS_TOLERANCE));

    let r = model_check(&fx.state.mp, |g, bm| {
        let k = fx.state.kp.bind_const(g);
        let gs = bm.features(g, g.constant(src.x.clone()))?.high;
        let gt = bm.features(g, g.constant(sup[0].clone()))?.high;
        loss_ak_graph(g, &k, gs, gt)
    })?;
    lines.push(GradCheckLine::new("loss_ak", r, LOSS_TOLERANCE));

    // L_w against a snapshot of differently initialized heads
    let mut other = fx.state.mp.clone();
    other.reinit_heads(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed))?;
    let snap = snapshot(&other, 1);
    let qp = &fx.state.qp;
    let r = model_check(&fx.state.mp, |g, bm| {
        let bq = qp.bind(g, false);
        loss_w_graph(g, bm, &bq, qp.input(), &snap, g.constant(sup[0].clone()))
    })?;
    lines.push(GradCheckLine::new("loss_w/model", r, LOSS_TOLERANCE));
    let r = {
        let g = Graph::new();
        let bm = fx.state.mp.bind(&g, false, false, false);
        let bq = qp.bind(&g, true);
        let out = loss_w_graph(&g, &bm, &bq, qp.input(), &snap, g.constant(sup[0].clone()))?;
        let analytic = grad_map(&g, out, &bq.vars)?;
        let numeric = finite_difference(qp.store(), STEP, |s| {
            let mut q = qp.clone();
            q.store_mut().update_from(s)?;
            let g = Graph::new();
            let bm = fx.state.mp.bind(&g, false, false, false);
            let bq = q.bind(&g, false);
            let out = loss_w_graph(&g, &bm, &bq, q.input(), &snap, g.constant(sup[0].clone()))?;
            Ok(g.item(out))
        })?;
        compare(&analytic, &numeric)
    };
    lines.push(GradCheckLine::new("loss_w/quantizer", r, LOSS_TOLERANCE));

    // median lengthscales are constants of the loss: record once, replay
    let rec = BandwidthLog::recording();
    {
        let g = Graph::new();
        let bm = fx.state.mp.bind(&g, false, false, false);
        let qs: Vec<Var> = que.iter().map(|q| g.constant(q.clone())).collect();
        loss_u_graph_with(&g, &bm, g.constant(src.x.clone()), &y, &qs, RapDistanceOn::Features, &rec)?;
    }
    let bws = rec.values();
    let r = model_check(&fx.state.mp, |g, bm| {
        let qs: Vec<Var> = que.iter().map(|q| g.constant(q.clone())).collect();
        let bw = BandwidthLog::replaying(bws.clone());
        Ok(loss_u_graph_with(g, bm, g.constant(src.x.clone()), &y, &qs, RapDistanceOn::Features, &bw)?.total)
    })?;
    lines.push(GradCheckLine::new("loss_u", r, LOSS_TOLERANCE));

    let kp = &fx.state.kp;
    let gs = crate::networks::forward_features(&src.x, &fx.state.mp)?.high;
    let gt = crate::networks::forward_features(&sup[0], &fx.state.mp)?.high;
    let p = PairedSample::new(gs, gt)?;
    let lambda = TwoSampleConfig::default().lambda_for(p.n());
    let (_, analytic) = j_lambda_and_grad(kp, &p, lambda)?;
    let numeric = finite_difference(kp.store(), SMOOTH_STEP, |s| {
        let mut k = kp.clone();
        k.store_mut().update_from(s)?;
        Ok(crate::twosample::j_lambda(&p, &k, lambda)?)
    })?;
    let rep = compare(&analytic, &numeric);
    lines.push(GradCheckLine::new("j_lambda", rep, LOSS_TOLERANCE));

    lines.push(GradCheckLine::new("unrolled_quantizer", unrolled_quantizer_check(&fx)?, UNROLLED_TOLERANCE));
    debug_assert_eq!(fx.stream.total_label_reads(), 0);
    Ok(lines)
}

/// `∂L_u/∂Θ_DQ` through two inner steps (one per domain), with `L_w`
/// active at both against a snapshot from an earlier head initialization.
fn unrolled_quantizer_check(fx: &Fixture) -> Result<GradCheck> {
    let cfg = &fx.cfg;
    let mut base = fx.state.clone();
    base.snapshots.push(snapshot(&base.mp, 1));
    base.mp.reinit_heads(&mut ChaCha8Rng::seed_from_u64(99))?;
    let run = |state: &TrainState, replay: Option<Vec<f64>>| -> Result<SapChain> {
        let mut c = match replay {
            None => SapChain::begin(state, cfg, true),
            Some(b) => SapChain::begin_replay(state, cfg, true, b),
        };
        c.step(state, &fx.src, &fx.sup[0], cfg)?;
        c.step(state, &fx.src, &fx.sup[1], cfg)?;
        Ok(c)
    };
    let chain = run(&base, None)?;
    let analytic = quantizer_meta_grad(&chain, &fx.src, &fx.que, cfg.rap_distance_on)?;
    let bws = chain.bandwidths();
    let numeric = finite_difference(base.qp.store(), STEP, |s| {
        let mut b = base.clone();
        b.qp.store_mut().update_from(s)?;
        let c = run(&b, Some(bws.clone()))?;
        let (u, _) = c.outer_loss(&fx.src, &fx.que, cfg.rap_distance_on)?;
        Ok(c.graph().item(u))
    })?;
    Ok(compare(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for line in gradcheck_suite(42).unwrap() {
            assert!(line.pass, "{line:?}");
            assert!(line.entries > 0, "{line:?}");
        }
    }
}
