//! Meta-training: the semantic adaptation inner loop over heads `(B, C)`,
//! the representation adaptation outer update of `(E, D_Q)`, snapshots,
//! ablations and the head fine-tune used on newly arriving domains.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_map, sgd_step, sgd_step_graph, Bound, GradMap, Graph, MetaGradMode, ParamStore, SgdConfig, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::kernels::{BandwidthLog, GaussianKernel, GramKernel, KernelConfig, KernelParams};
use crate::losses::{loss_ak_graph, loss_ce_graph, loss_u_graph_with, loss_w_graph, LossReport, RapDistanceOn};
use crate::networks::{
    save_checkpoint, snapshot, BottleneckSnapshot, BoundModel, ModelParams, NetworkConfig, QuantizerParams, B_PREFIX,
    C_PREFIX,
};
use crate::stream::{episode_split, DomainStream, EpisodeSplit, LabeledData};
use crate::twosample::{train_kernel, TwoSampleConfig};

/// Which parts of the method are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Outer update of `E` only; no quantizer, fixed Gaussian kernel.
    Fe,
    /// Quantizer on, `E` frozen at pretraining, fixed kernel.
    Dq,
    /// Quantizer and outer update of `E`, fixed kernel.
    FAndD,
    /// Everything, including the trained deep kernel.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Fe, Ablation::Dq, Ablation::FAndD, Ablation::Full];

    pub fn uses_quantizer(self) -> bool {
        !matches!(self, Ablation::Fe)
    }

    pub fn trains_extractor(self) -> bool {
        !matches!(self, Ablation::Dq)
    }

    pub fn trains_kernel(self) -> bool {
        matches!(self, Ablation::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Fe => "fe",
            Ablation::Dq => "dq",
            Ablation::FAndD => "f_and_d",
            Ablation::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub eta_sap: f64,
    pub eta_rap: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_forget: f64,
    pub max_iter: usize,
    pub inner_steps_per_domain: usize,
    pub ablation: Ablation,
    pub meta_grad_mode: MetaGradMode,
    /// Largest number of inner steps a single outer iteration may unroll.
    pub max_unroll_depth: usize,
    pub finetune_epochs: usize,
    pub finetune_batch: usize,
    pub kernel_steps_per_domain: usize,
    pub persist_heads: bool,
    /// Divide the batch-summed `L_w` by the batch size inside the inner
    /// objective. `false` gives the plain sum.
    pub loss_w_batch_mean: bool,
    /// Global L2 norm bound on the outer gradient of `(E, D_Q)`; 0 disables.
    pub meta_grad_clip: f64,
    pub rap_distance_on: RapDistanceOn,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub eta_pretrain: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            eta_sap: 0.05,
            eta_rap: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda_forget: 0.5,
            max_iter: 50,
            inner_steps_per_domain: 5,
            ablation: Ablation::Full,
            meta_grad_mode: MetaGradMode::Unrolled,
            max_unroll_depth: 64,
            finetune_epochs: 10,
            finetune_batch: 32,
            kernel_steps_per_domain: 5,
            persist_heads: false,
            loss_w_batch_mean: true,
            meta_grad_clip: 1.0,
            rap_distance_on: RapDistanceOn::Features,
            pretrain_steps: 300,
            pretrain_batch: 64,
            eta_pretrain: 0.05,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [("eta_sap", self.eta_sap), ("eta_rap", self.eta_rap), ("eta_pretrain", self.eta_pretrain)] {
            // zero rates are accepted so that frozen runs still report losses
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("meta.{name} must be >= 0, got {v}"));
            }
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            errs.push(format!("meta.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            errs.push(format!("meta.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.meta_grad_clip >= 0.0 && self.meta_grad_clip.is_finite()) {
            errs.push(format!("meta.meta_grad_clip must be >= 0, got {}", self.meta_grad_clip));
        }
        if !(self.lambda_forget >= 0.0 && self.lambda_forget.is_finite()) {
            errs.push(format!("meta.lambda_forget must be >= 0, got {}", self.lambda_forget));
        }
        if self.finetune_batch < 2 {
            errs.push(format!("meta.finetune_batch must be >= 2, got {}", self.finetune_batch));
        }
        if self.pretrain_batch == 0 {
            errs.push("meta.pretrain_batch must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn sap_sgd(&self) -> SgdConfig<f64> {
        SgdConfig {
            lr: self.eta_sap,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn rap_sgd(&self) -> SgdConfig<f64> {
        SgdConfig {
            lr: self.eta_rap,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEvent {
    pub iter: usize,
    pub phase: String,
    pub domain: usize,
    pub loss_ce: Option<f64>,
    pub loss_ak: Option<f64>,
    pub loss_w: Option<f64>,
    pub loss_u: Option<f64>,
    pub acc: Option<f64>,
    pub j_lambda: Option<f64>,
}

impl MetricEvent {
    pub fn new(iter: usize, phase: &str, domain: usize) -> Self {
        Self {
            iter,
            phase: phase.to_string(),
            domain,
            loss_ce: None,
            loss_ak: None,
            loss_w: None,
            loss_u: None,
            acc: None,
            j_lambda: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub mp: ModelParams<f64>,
    pub qp: QuantizerParams<f64>,
    pub kp: KernelParams<f64>,
    pub snapshots: Vec<BottleneckSnapshot<f64>>,
    pub rng: ChaCha8Rng,
    pub iter: usize,
    pub sap_steps: usize,
    pub rap_steps: usize,
    pub two_sample: TwoSampleConfig,
    /// Head values restored at the start of every outer iteration; the
    /// random initialization, replaced by the pretrained heads.
    pub head_init: ParamStore<f64>,
}

impl TrainState {
    /// Fresh networks for a stream, all drawn from `seed`.
    pub fn new(
        stream: &DomainStream,
        net: &NetworkConfig,
        kernel: &KernelConfig,
        cfg: &MetaConfig,
        two_sample: &TwoSampleConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        two_sample.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 << 32);
        let mp = ModelParams::new(stream.source.x.cols(), stream.source.classes, net, &mut rng)?;
        let qp = QuantizerParams::new(&mp, net.quantizer_input, &mut rng)?;
        let g_dim = *mp.b_widths().last().expect("non-empty");
        let kp = kernel.build(g_dim, &mut rng)?;
        let head_init = mp.heads();
        Ok(Self {
            mp,
            qp,
            kp,
            snapshots: Vec::new(),
            rng,
            iter: 0,
            sap_steps: 0,
            rap_steps: 0,
            two_sample: two_sample.clone(),
            head_init,
        })
    }

    /// Restores the heads (and zero momentum) from `head_init`.
    pub fn reset_heads(&mut self) -> Result<()> {
        self.mp.set_heads(&self.head_init)
    }

    pub fn latest_snapshot(&self) -> Option<&BottleneckSnapshot<f64>> {
        self.snapshots.last()
    }

    /// Writes model, quantizer and kernel checkpoints into `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&dir.join("model.json"), &self.mp.to_store())?;
        save_checkpoint(&dir.join("quantizer.json"), self.qp.store())?;
        save_checkpoint(&dir.join("kernel.json"), self.kp.store())
    }
}

/// Uniform sample of `n` source rows without replacement.
pub fn source_batch(rng: &mut ChaCha8Rng, source: &LabeledData, n: usize) -> Result<LabeledData> {
    if n > source.len() {
        return Err(contract(format!("source batch {n} exceeds {} source samples", source.len())));
    }
    let idx = sample(rng, source.len(), n).into_vec();
    Ok(source.subset(&idx))
}

/// Supervised pretraining of `E`, `B` and `C` on the source.
pub fn pretrain(state: &mut TrainState, source: &LabeledData, cfg: &MetaConfig) -> Result<Vec<f64>> {
    let sgd = SgdConfig {
        lr: cfg.eta_pretrain,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut trace = Vec::with_capacity(cfg.pretrain_steps);
    let n = cfg.pretrain_batch.min(source.len());
    for step in 0..cfg.pretrain_steps {
        let batch = source_batch(&mut state.rng, source, n)?;
        let g = Graph::new();
        let bm = state.mp.bind(&g, true, true, true);
        let logits = bm.logits(&g, g.constant(batch.x.clone()))?;
        let loss = loss_ce_graph(&g, logits, &batch.one_hot())?;
        let l = g.item(loss);
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite pretraining loss at step {step}")));
        }
        trace.push(l);
        let all = bm.e.merged(&bm.b)?.merged(&bm.c)?;
        let grads = grad_map(&g, loss, &all)?;
        let split = |p: &str| -> BTreeMap<String, Tensor<f64>> {
            grads.iter().filter(|(k, _)| k.starts_with(p)).map(|(k, v)| (k.clone(), v.clone())).collect()
        };
        sgd_step(state.mp.e_mut(), &split(crate::networks::E_PREFIX), &sgd)?;
        sgd_step(state.mp.b_mut(), &split(B_PREFIX), &sgd)?;
        sgd_step(state.mp.c_mut(), &split(C_PREFIX), &sgd)?;
    }
    let mut heads = state.mp.heads();
    heads.reset_momentum();
    state.head_init = heads;
    Ok(trace)
}

fn filter_bound(b: &Bound, prefix: &str) -> Bound {
    Bound::from_map(b.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.to_string(), v)).collect())
}

/// Kernel used by the adaptation loss of one step.
enum StepKernel {
    Deep(crate::kernels::BoundKernel),
    Fixed(GaussianKernel<f64>),
}

impl GramKernel<f64> for StepKernel {
    fn gram(&self, g: &Graph<f64>, x: Var, y: Var) -> Result<Var> {
        match self {
            StepKernel::Deep(k) => k.gram(g, x, y),
            StepKernel::Fixed(k) => k.gram(g, x, y),
        }
    }
}

/// Inner adaptation steps of the heads recorded on one graph, so that an
/// outer loss can be differentiated through them.
pub struct SapChain {
    g: Graph<f64>,
    /// `E` as leaves when it is trained by the outer update, else constants.
    e: Bound,
    e_is_leaf: bool,
    q: crate::networks::BoundQuantizer,
    q_is_leaf: bool,
    heads: Bound,
    velocity: Bound,
    steps: usize,
    mode: MetaGradMode,
    max_depth: usize,
    b_layers: usize,
    template: BoundModel,
    bw: BandwidthLog,
}

impl SapChain {
    /// Starts a chain from the current state. `outer` marks whether `E` and
    /// `D_Q` should be differentiable for a later outer update.
    pub fn begin(state: &TrainState, cfg: &MetaConfig, outer: bool) -> Self {
        let g = Graph::new();
        let e_is_leaf = outer && cfg.ablation.trains_extractor();
        let q_is_leaf = outer && cfg.ablation.uses_quantizer();
        let template = state.mp.bind(&g, e_is_leaf, true, true);
        let q = state.qp.bind(&g, q_is_leaf);
        let heads = template.b.merged(&template.c).expect("disjoint prefixes");
        let velocity = state.mp.heads().bind_momentum(&g);
        Self {
            e: template.e.clone(),
            e_is_leaf,
            q,
            q_is_leaf,
            heads,
            velocity,
            steps: 0,
            mode: cfg.meta_grad_mode,
            max_depth: cfg.max_unroll_depth,
            b_layers: state.mp.b_layers(),
            g,
            template,
            bw: BandwidthLog::recording(),
        }
    }

    /// Like [`SapChain::begin`] but reusing the median-heuristic lengthscales
    /// of an earlier chain, in order.
    pub fn begin_replay(state: &TrainState, cfg: &MetaConfig, outer: bool, bandwidths: Vec<f64>) -> Self {
        let mut c = Self::begin(state, cfg, outer);
        c.bw = BandwidthLog::replaying(bandwidths);
        c
    }

    /// Lengthscales chosen by the median heuristic so far.
    pub fn bandwidths(&self) -> Vec<f64> {
        self.bw.values()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn graph(&self) -> &Graph<f64> {
        &self.g
    }

    fn model(&self) -> BoundModel {
        self.template.with_heads(filter_bound(&self.heads, B_PREFIX), filter_bound(&self.heads, C_PREFIX))
    }

    /// Current head values and momentum as a store.
    pub fn heads_store(&self) -> ParamStore<f64> {
        let mut s = self.heads.values(&self.g);
        for (name, v) in self.velocity.iter() {
            s.set_momentum(name, self.g.value(v)).expect("same names");
        }
        s
    }

    /// One SGD step of the heads on `L_ce + L_ak + λ·L_w`.
    pub fn step(
        &mut self,
        state: &TrainState,
        source: &LabeledData,
        support: &Tensor<f64>,
        cfg: &MetaConfig,
    ) -> Result<LossReport> {
        if self.steps >= self.max_depth && self.mode == MetaGradMode::Unrolled {
            return Err(Error::UnrollDepth {
                requested: self.steps + 1,
                max: self.max_depth,
            });
        }
        let g = &self.g;
        let bm = self.model();
        let xs = g.constant(source.x.clone());
        let xt = g.constant(support.clone());
        let fs = bm.features(g, xs)?;
        let logits = bm.classify(g, fs.high)?;
        let ce = loss_ce_graph(g, logits, &source.one_hot())?;
        let ft = bm.features(g, xt)?;
        let kernel = if cfg.ablation.trains_kernel() {
            StepKernel::Deep(state.kp.bind_const(g))
        } else {
            let pooled = g.value(fs.high).vstack(&g.value(ft.high))?;
            StepKernel::Fixed(self.bw.median(&pooled)?)
        };
        let ak = loss_ak_graph(g, &kernel, fs.high, ft.high)?;
        let mut total = g.add(ce, ak)?;
        let mut w_val = 0.0;
        let w_weight = match (cfg.ablation.uses_quantizer(), cfg.loss_w_batch_mean) {
            (false, _) => 0.0,
            (true, true) => cfg.lambda_forget / support.rows() as f64,
            (true, false) => cfg.lambda_forget,
        };
        if let (Some(snap), true) = (state.latest_snapshot(), w_weight > 0.0) {
            let w = loss_w_graph(g, &bm, &self.q, state.qp.input(), snap, xt)?;
            w_val = g.item(w);
            total = g.add(total, g.scale(w, w_weight))?;
        }
        let report = LossReport::new(&[("ce", g.item(ce), 1.0), ("ak", g.item(ak), 1.0), ("w", w_val, w_weight)]);
        if !report.is_finite() {
            return Err(Error::Numeric(format!("non-finite inner loss at step {}: {:?}", self.steps, report.components)));
        }
        let grads = g.grad(total, &self.heads.vars())?;
        let (p2, v2) = sgd_step_graph(g, &self.heads, &grads, &self.velocity, &cfg.sap_sgd())?;
        match self.mode {
            MetaGradMode::Unrolled => {
                self.heads = p2;
                self.velocity = v2;
            }
            MetaGradMode::FirstOrder => {
                self.heads = p2.values(g).bind(g);
                self.velocity = v2.values(g).bind_const(g);
            }
        }
        self.steps += 1;
        Ok(report)
    }

    /// Copies the chain's heads back into the state.
    pub fn commit_heads(&self, state: &mut TrainState) -> Result<()> {
        state.mp.set_heads(&self.heads_store())
    }

    /// `(E, D_Q)` as they were bound; exposes the leaves for gradient checks.
    pub fn meta_vars(&self) -> (&Bound, &Bound) {
        (&self.e, &self.q.vars)
    }

    pub fn b_layers(&self) -> usize {
        self.b_layers
    }

    /// `L_u` on the chain's current heads.
    pub fn outer_loss(&self, source: &LabeledData, queries: &[Tensor<f64>], on: RapDistanceOn) -> Result<(Var, LossReport)> {
        let g = &self.g;
        let bm = self.model();
        let xs = g.constant(source.x.clone());
        let qs: Vec<Var> = queries.iter().map(|q| g.constant(q.clone())).collect();
        let u = loss_u_graph_with(g, &bm, xs, &source.one_hot(), &qs, on, &self.bw)?;
        Ok((u.total, u.report(g)))
    }
}

/// One standalone inner step on the state's heads (no outer update).
pub fn sap_step(
    state: &mut TrainState,
    source: &LabeledData,
    support: &Tensor<f64>,
    cfg: &MetaConfig,
) -> Result<LossReport> {
    let mut chain = SapChain::begin(state, cfg, false);
    let r = chain.step(state, source, support, cfg)?;
    chain.commit_heads(state)?;
    state.sap_steps += 1;
    Ok(r)
}

/// One SGD step of `E` and `D_Q` on `L_u`, differentiated through the
/// chain's recorded inner steps. Heads are not modified.
pub fn rap_step(
    state: &mut TrainState,
    chain: &SapChain,
    source: &LabeledData,
    queries: &[Tensor<f64>],
    cfg: &MetaConfig,
) -> Result<LossReport> {
    if chain.mode == MetaGradMode::Unrolled && chain.steps == 0 {
        return Err(contract("unrolled outer update needs a recorded inner chain"));
    }
    let (u, report) = chain.outer_loss(source, queries, cfg.rap_distance_on)?;
    if !report.is_finite() {
        return Err(Error::Numeric(format!("non-finite outer loss: {:?}", report.components)));
    }
    let g = chain.graph();
    let sgd = cfg.rap_sgd();
    let mut ge = if chain.e_is_leaf { grad_map(g, u, &chain.e)? } else { GradMap::new() };
    let mut gq = if chain.q_is_leaf { grad_map(g, u, &chain.q.vars)? } else { GradMap::new() };
    clip_global_norm(&mut [&mut ge, &mut gq], cfg.meta_grad_clip);
    if chain.e_is_leaf {
        sgd_step(state.mp.e_mut(), &ge, &sgd)?;
    }
    if chain.q_is_leaf {
        sgd_step(state.qp.store_mut(), &gq, &sgd)?;
    }
    state.rap_steps += 1;
    Ok(report)
}

/// Rescales the gradients jointly so their global L2 norm is at most
/// `max_norm`; `0` disables. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut GradMap<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|m| m.values())
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let c = max_norm / norm;
        for m in grads.iter_mut() {
            for t in m.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= c);
            }
        }
    }
    norm
}

/// Gradient of `L_u` with respect to `D_Q` through the chain.
pub fn quantizer_meta_grad(chain: &SapChain, source: &LabeledData, queries: &[Tensor<f64>], on: RapDistanceOn) -> Result<GradMap<f64>> {
    let (u, _) = chain.outer_loss(source, queries, on)?;
    grad_map(chain.graph(), u, &chain.q.vars)
}

/// Trains the deep kernel on the current high-level features of a source
/// batch and a target batch. Returns the last `Ĵ_λ`.
pub fn adapt_kernel(state: &mut TrainState, heads: Option<&ParamStore<f64>>, source: &Tensor<f64>, target: &Tensor<f64>, steps: usize) -> Result<Option<f64>> {
    if steps == 0 {
        return Ok(None);
    }
    let mut mp = state.mp.clone();
    if let Some(h) = heads {
        mp.set_heads(h)?;
    }
    let gs = crate::networks::forward_features(source, &mp)?.high;
    let gt = crate::networks::forward_features(target, &mp)?.high;
    let (kp, trace) = train_kernel(&[gs], &[gt], &state.kp, &state.two_sample, steps)?;
    state.kp = kp;
    Ok(trace.j_values.last().copied())
}

/// Sets the kernel lengthscales by the median heuristic on the current
/// high-level features of a source sample.
pub fn init_kernel_lengthscales(state: &mut TrainState, x: &Tensor<f64>) -> Result<()> {
    let gs = crate::networks::forward_features(x, &state.mp)?.high;
    state.kp.init_lengthscales_median(&gs)
}

fn event_from(iter: usize, phase: &str, domain: usize, r: &LossReport) -> MetricEvent {
    let mut e = MetricEvent::new(iter, phase, domain);
    match phase {
        "rap" => {
            e.loss_ce = Some(r.get("ce"));
            e.loss_u = Some(r.total);
        }
        _ => {
            e.loss_ce = Some(r.get("ce"));
            e.loss_ak = Some(r.get("ak"));
            e.loss_w = Some(r.get("w"));
        }
    }
    e
}

/// Outer iterations over the meta-training domains. Each iteration
/// restores the initial heads (unless `persist_heads`), runs the inner steps
/// domain by domain with a snapshot after each, then one outer update.
/// On a numeric failure the state is dumped to `dump` when given.
pub fn meta_train(
    stream: &DomainStream,
    state: &mut TrainState,
    cfg: &MetaConfig,
    dump: Option<&Path>,
    sink: &mut dyn FnMut(&MetricEvent) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let domains = stream.meta_train();
    if domains.is_empty() {
        return Err(contract("meta-training needs at least one target domain"));
    }
    let depth = domains.len() * cfg.inner_steps_per_domain;
    if cfg.meta_grad_mode == MetaGradMode::Unrolled && depth > cfg.max_unroll_depth {
        return Err(Error::UnrollDepth {
            requested: depth,
            max: cfg.max_unroll_depth,
        });
    }
    for _ in 0..cfg.max_iter {
        let r = outer_iteration(stream, state, cfg, sink);
        if let Err(e) = r {
            if let (Error::Numeric(_), Some(dir)) = (&e, dump) {
                state.dump(dir)?;
            }
            return Err(e);
        }
    }
    Ok(())
}

fn outer_iteration(
    stream: &DomainStream,
    state: &mut TrainState,
    cfg: &MetaConfig,
    sink: &mut dyn FnMut(&MetricEvent) -> Result<()>,
) -> Result<()> {
    let t = state.iter;
    if !cfg.persist_heads {
        state.reset_heads()?;
    }
    state.snapshots.clear();
    let n = stream.n_support;
    let src = source_batch(&mut state.rng, &stream.source, n)?;
    let episodes: Vec<EpisodeSplit> = stream
        .meta_train()
        .iter()
        .map(|d| {
            let seed = state.rng.gen();
            episode_split(&d.pool, stream.n_support, stream.n_query, seed)
        })
        .collect::<Result<_>>()?;
    let mut chain = SapChain::begin(state, cfg, true);
    for (m, ep) in episodes.iter().enumerate() {
        let j = if cfg.ablation.trains_kernel() {
            let heads = chain.heads_store();
            adapt_kernel(state, Some(&heads), &src.x, &ep.support.x, cfg.kernel_steps_per_domain)?
        } else {
            None
        };
        let mut last = None;
        for _ in 0..cfg.inner_steps_per_domain {
            last = Some(chain.step(state, &src, &ep.support.x, cfg)?);
            state.sap_steps += 1;
        }
        let mut snap_mp = state.mp.clone();
        snap_mp.set_heads(&chain.heads_store())?;
        state.snapshots.push(snapshot(&snap_mp, m + 1));
        if let Some(r) = last {
            let mut ev = event_from(t, "sap", m + 1, &r);
            ev.j_lambda = j;
            sink(&ev)?;
        }
    }
    let queries: Vec<Tensor<f64>> = episodes.iter().map(|e| e.query.x.clone()).collect();
    let report = if chain.steps() > 0 || cfg.meta_grad_mode == MetaGradMode::FirstOrder {
        Some(rap_step(state, &chain, &src, &queries, cfg)?)
    } else {
        None
    };
    chain.commit_heads(state)?;
    if let Some(r) = report {
        sink(&event_from(t, "rap", 0, &r))?;
    }
    state.iter += 1;
    Ok(())
}

/// Fine-tunes the heads on a newly arriving domain's support set with the
/// inner-loop objective, leaving `E`, `D_Q` untouched. Returns the last
/// step's losses and the kernel criterion, if the kernel was trained.
pub fn meta_test_finetune(
    state: &mut TrainState,
    split: &EpisodeSplit,
    source: &LabeledData,
    cfg: &MetaConfig,
) -> Result<(Option<LossReport>, Option<f64>)> {
    if split.support.is_empty() {
        return Err(contract("fine-tuning needs a non-empty support set"));
    }
    let e_before = state.mp.e().fingerprint();
    let q_before = state.qp.store().fingerprint();
    let support = &split.support.x;
    let j = if cfg.ablation.trains_kernel() && cfg.finetune_epochs > 0 {
        let src = source_batch(&mut state.rng, source, support.rows().min(source.len()))?;
        adapt_kernel(state, None, &src.x, support, cfg.kernel_steps_per_domain)?
    } else {
        None
    };
    let bs = cfg.finetune_batch.min(support.rows());
    let per_epoch = support.rows().div_ceil(bs);
    let mut last = None;
    for _ in 0..cfg.finetune_epochs {
        let order = sample(&mut state.rng, support.rows(), support.rows()).into_vec();
        for b in 0..per_epoch {
            let mut idx: Vec<usize> = order.iter().skip(b * bs).take(bs).copied().collect();
            if idx.len() < 2 {
                continue;
            }
            idx.sort_unstable();
            let tb = support.select_rows(&idx);
            let sb = source_batch(&mut state.rng, source, idx.len())?;
            last = Some(sap_step(state, &sb, &tb, cfg)?);
        }
    }
    if state.mp.e().fingerprint() != e_before || state.qp.store().fingerprint() != q_before {
        return Err(contract("fine-tuning modified the frozen extractor or quantizer"));
    }
    Ok((last, j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference;
    use crate::networks::QuantizerInput;
    use crate::stream::{make_target_stream, StreamConfig};

    fn tiny_stream() -> DomainStream {
        let cfg = StreamConfig {
            n_source: 200,
            n_target: 60,
            n_meta_train: 2,
            n_meta_test: 1,
            n_support: 8,
            n_query: 8,
            drop_class_domain: 0,
            ..Default::default()
        };
        make_target_stream(&cfg, 3).unwrap()
    }

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            e_widths: vec![4],
            b_widths: vec![3, 3],
            quantizer_input: QuantizerInput::LayerInput,
        }
    }

    fn tiny_kernel() -> KernelConfig {
        KernelConfig {
            hidden_widths: vec![4],
            ..Default::default()
        }
    }

    fn tiny_meta() -> MetaConfig {
        MetaConfig {
            max_iter: 2,
            inner_steps_per_domain: 2,
            kernel_steps_per_domain: 1,
            pretrain_steps: 5,
            pretrain_batch: 16,
            finetune_epochs: 1,
            finetune_batch: 4,
            ..Default::default()
        }
    }

    fn state(stream: &DomainStream, cfg: &MetaConfig) -> TrainState {
        TrainState::new(stream, &tiny_net(), &tiny_kernel(), cfg, &TwoSampleConfig::default(), 5).unwrap()
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()), Some(a));
        }
        assert_eq!(Ablation::parse("nope"), None);
    }

    #[test]
    fn zero_iterations_leave_state_untouched() {
        let st = tiny_stream();
        let cfg = MetaConfig {
            max_iter: 0,
            ..tiny_meta()
        };
        let mut s = state(&st, &cfg);
        let before = s.mp.clone();
        let mut events = Vec::new();
        meta_train(&st, &mut s, &cfg, None, &mut |e| {
            events.push(e.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(s.mp, before);
        assert!(events.is_empty());
    }

    #[test]
    fn zero_rate_inner_step_reports_losses_and_changes_nothing() {
        let st = tiny_stream();
        let cfg = MetaConfig {
            eta_sap: 0.0,
            ..tiny_meta()
        };
        let mut s = state(&st, &cfg);
        let before = s.mp.clone();
        let src = source_batch(&mut s.rng, &st.source, 8).unwrap();
        let r = sap_step(&mut s, &src, &st.targets[0].pool.x.select_rows(&(0..8).collect::<Vec<_>>()), &cfg).unwrap();
        assert!(r.get("ce") > 0.0);
        // weight decay still contributes to the momentum buffer, not the values
        assert_eq!(s.mp.b().fingerprint(), before.b().fingerprint());
        assert_eq!(s.mp.c().fingerprint(), before.c().fingerprint());
    }

    #[test]
    fn inner_step_matches_hand_applied_sgd() {
        let st = tiny_stream();
        let cfg = MetaConfig {
            ablation: Ablation::Fe,
            ..tiny_meta()
        };
        let mut s = state(&st, &cfg);
        let src = source_batch(&mut s.rng, &st.source, 8).unwrap();
        let sup = st.targets[0].pool.x.select_rows(&(0..8).collect::<Vec<_>>());
        // oracle: gradient of CE + fixed-kernel MMD on a separate graph
        let g = Graph::new();
        let bm = s.mp.bind(&g, false, true, true);
        let fs = bm.features(&g, g.constant(src.x.clone())).unwrap();
        let ft = bm.features(&g, g.constant(sup.clone())).unwrap();
        let logits = bm.classify(&g, fs.high).unwrap();
        let ce = loss_ce_graph(&g, logits, &src.one_hot()).unwrap();
        let k = GaussianKernel::median_heuristic(&g.value(fs.high).vstack(&g.value(ft.high)).unwrap());
        let ak = loss_ak_graph(&g, &k, fs.high, ft.high).unwrap();
        let total = g.add(ce, ak).unwrap();
        let heads = bm.b.merged(&bm.c).unwrap();
        let grads = grad_map(&g, total, &heads).unwrap();
        let mut expected = s.mp.heads();
        sgd_step(&mut expected, &grads, &cfg.sap_sgd()).unwrap();

        let q_before = s.qp.store().fingerprint();
        let e_before = s.mp.e().fingerprint();
        sap_step(&mut s, &src, &sup, &cfg).unwrap();
        for (name, t) in expected.iter() {
            let got = s.mp.heads().get(name).unwrap().clone();
            for (a, b) in got.data().iter().zip(t.data()) {
                assert!((a - b).abs() < 1e-12, "{name}");
            }
        }
        assert_eq!(s.qp.store().fingerprint(), q_before);
        assert_eq!(s.mp.e().fingerprint(), e_before);
    }

    #[test]
    fn inner_step_needs_no_snapshot_at_first_domain() {
        let st = tiny_stream();
        let cfg = tiny_meta();
        let mut s = state(&st, &cfg);
        let src = source_batch(&mut s.rng, &st.source, 8).unwrap();
        let sup = st.targets[0].pool.x.select_rows(&(0..8).collect::<Vec<_>>());
        let r = sap_step(&mut s, &src, &sup, &cfg).unwrap();
        assert_eq!(r.get("w"), 0.0);
        s.snapshots.push(snapshot(&s.mp, 1));
        s.mp.reinit_heads(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let r = sap_step(&mut s, &src, &sup, &cfg).unwrap();
        assert!(r.get("w") > 0.0);
    }

    fn chain_fixture(mode: MetaGradMode) -> (DomainStream, TrainState, MetaConfig, SapChain, LabeledData, Vec<Tensor<f64>>) {
        let st = tiny_stream();
        let cfg = MetaConfig {
            meta_grad_mode: mode,
            ablation: Ablation::FAndD,
            ..tiny_meta()
        };
        let mut s = state(&st, &cfg);
        let src = source_batch(&mut s.rng, &st.source, 8).unwrap();
        let sup: Vec<Tensor<f64>> = st.targets[..2].iter().map(|t| t.pool.x.select_rows(&(0..8).collect::<Vec<_>>())).collect();
        let que: Vec<Tensor<f64>> = st.targets[..2].iter().map(|t| t.pool.x.select_rows(&(8..16).collect::<Vec<_>>())).collect();
        let mut chain = SapChain::begin(&s, &cfg, true);
        chain.step(&s, &src, &sup[0], &cfg).unwrap();
        let mut snap = s.mp.clone();
        snap.set_heads(&chain.heads_store()).unwrap();
        s.snapshots.push(snapshot(&snap, 1));
        // B equals its snapshot right after it is taken, where |B - B^p| has no slope
        chain.step(&s, &src, &sup[1], &cfg).unwrap();
        chain.step(&s, &src, &sup[1], &cfg).unwrap();
        (st, s, cfg, chain, src, que)
    }

    #[test]
    fn first_order_gives_zero_quantizer_gradient() {
        let (_, mut s, cfg, chain, src, que) = chain_fixture(MetaGradMode::FirstOrder);
        let gq = quantizer_meta_grad(&chain, &src, &que, cfg.rap_distance_on).unwrap();
        assert!(gq.values().all(|t| t.max_abs() == 0.0));
        let before = s.qp.store().fingerprint();
        let cfg0 = MetaConfig {
            weight_decay: 0.0,
            ..cfg
        };
        rap_step(&mut s, &chain, &src, &que, &cfg0).unwrap();
        assert_eq!(s.qp.store().fingerprint(), before);
    }

    #[test]
    fn unrolled_quantizer_gradient_is_nonzero_and_heads_untouched() {
        let (_, mut s, cfg, chain, src, que) = chain_fixture(MetaGradMode::Unrolled);
        let gq = quantizer_meta_grad(&chain, &src, &que, cfg.rap_distance_on).unwrap();
        assert!(gq.values().any(|t| t.max_abs() > 0.0));
        let heads = s.mp.heads().fingerprint();
        let e = s.mp.e().fingerprint();
        rap_step(&mut s, &chain, &src, &que, &cfg).unwrap();
        assert_eq!(s.mp.heads().fingerprint(), heads);
        assert_ne!(s.mp.e().fingerprint(), e);
    }

    #[test]
    fn zero_rate_outer_step_changes_nothing() {
        let (_, mut s, cfg, chain, src, que) = chain_fixture(MetaGradMode::Unrolled);
        let cfg0 = MetaConfig {
            eta_rap: 0.0,
            ..cfg
        };
        let (e, q) = (s.mp.e().fingerprint(), s.qp.store().fingerprint());
        rap_step(&mut s, &chain, &src, &que, &cfg0).unwrap();
        assert_eq!((s.mp.e().fingerprint(), s.qp.store().fingerprint()), (e, q));
    }

    #[test]
    fn unrolled_outer_without_chain_is_rejected() {
        let st = tiny_stream();
        let cfg = tiny_meta();
        let mut s = state(&st, &cfg);
        let chain = SapChain::begin(&s, &cfg, true);
        let src = source_batch(&mut s.rng, &st.source, 8).unwrap();
        let q = vec![st.targets[0].pool.x.select_rows(&(0..8).collect::<Vec<_>>())];
        assert!(matches!(rap_step(&mut s, &chain, &src, &q, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn unrolled_quantizer_gradient_matches_finite_differences() {
        let (_, s, cfg, chain, src, que) = chain_fixture(MetaGradMode::Unrolled);
        let analytic = quantizer_meta_grad(&chain, &src, &que, cfg.rap_distance_on).unwrap();
        let st = tiny_stream();
        let sup: Vec<Tensor<f64>> = st.targets[..2].iter().map(|t| t.pool.x.select_rows(&(0..8).collect::<Vec<_>>())).collect();
        // replay the same two steps with perturbed quantizer values
        let base = state(&st, &cfg);
        let bws = chain.bandwidths();
        let numeric = finite_difference(s.qp.store(), 1e-6, |qs| {
            let mut b = base.clone();
            b.qp.store_mut().update_from(qs)?;
            let mut c = SapChain::begin_replay(&b, &cfg, true, bws.clone());
            c.step(&b, &src, &sup[0], &cfg)?;
            let mut snap = b.mp.clone();
            snap.set_heads(&c.heads_store())?;
            b.snapshots.push(snapshot(&snap, 1));
            c.step(&b, &src, &sup[1], &cfg)?;
            c.step(&b, &src, &sup[1], &cfg)?;
            let (u, _) = c.outer_loss(&src, &que, cfg.rap_distance_on)?;
            Ok(c.graph().item(u))
        })
        .unwrap();
        let rep = crate::autodiff::compare(&analytic, &numeric);
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }

    #[test]
    fn clipping_bounds_the_joint_norm() {
        let mut a = GradMap::new();
        a.insert("x".to_string(), Tensor::vector(vec![3.0, 0.0]));
        let mut b = GradMap::new();
        b.insert("y".to_string(), Tensor::vector(vec![4.0]));
        let n = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!((a["x"].data()[0] - 0.6).abs() < 1e-15);
        assert!((b["y"].data()[0] - 0.8).abs() < 1e-15);
        let n = clip_global_norm(&mut [&mut a, &mut b], 0.0);
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unroll_depth_is_checked_up_front() {
        let st = tiny_stream();
        let cfg = MetaConfig {
            max_unroll_depth: 3,
            ..tiny_meta()
        };
        let mut s = state(&st, &cfg);
        let r = meta_train(&st, &mut s, &cfg, None, &mut |_| Ok(()));
        assert!(matches!(r, Err(Error::UnrollDepth { requested: 4, max: 3 })));
    }

    #[test]
    fn fe_ablation_never_touches_quantizer() {
        let st = tiny_stream();
        let cfg = MetaConfig {
            ablation: Ablation::Fe,
            ..tiny_meta()
        };
        let mut s = state(&st, &cfg);
        let q = s.qp.store().fingerprint();
        let k = s.kp.store().fingerprint();
        meta_train(&st, &mut s, &cfg, None, &mut |_| Ok(())).unwrap();
        assert_eq!(s.qp.store().fingerprint(), q);
        assert_eq!(s.kp.store().fingerprint(), k);
    }

    #[test]
    fn dq_ablation_keeps_extractor_frozen() {
        let st = tiny_stream();
        let cfg = MetaConfig {
            ablation: Ablation::Dq,
            ..tiny_meta()
        };
        let mut s = state(&st, &cfg);
        let e = s.mp.e().fingerprint();
        let q = s.qp.store().fingerprint();
        meta_train(&st, &mut s, &cfg, None, &mut |_| Ok(())).unwrap();
        assert_eq!(s.mp.e().fingerprint(), e);
        assert_ne!(s.qp.store().fingerprint(), q);
    }

    #[test]
    fn snapshots_follow_each_domain() {
        let st = tiny_stream();
        let cfg = tiny_meta();
        let mut s = state(&st, &cfg);
        let mut events = Vec::new();
        meta_train(&st, &mut s, &cfg, None, &mut |e| {
            events.push(e.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(s.snapshots.len(), 2);
        assert_eq!(s.snapshots.iter().map(|x| x.domain()).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(s.iter, 2);
        assert_eq!(events.iter().filter(|e| e.phase == "rap").count(), 2);
        assert!(events.iter().filter(|e| e.phase == "sap").all(|e| e.j_lambda.is_some()));
        assert_eq!(st.total_label_reads(), 0);
    }

    #[test]
    fn meta_train_is_deterministic() {
        let st = tiny_stream();
        let cfg = tiny_meta();
        let run = || {
            let mut s = state(&st, &cfg);
            meta_train(&st, &mut s, &cfg, None, &mut |_| Ok(())).unwrap();
            (s.mp.to_store().fingerprint(), s.qp.store().fingerprint(), s.kp.store().fingerprint())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn finetune_zero_epochs_and_frozen_trunk() {
        let st = tiny_stream();
        let cfg = MetaConfig {
            finetune_epochs: 0,
            ..tiny_meta()
        };
        let mut s = state(&st, &cfg);
        let split = episode_split(&st.targets[2].pool, 8, 8, 1).unwrap();
        let heads = s.mp.heads();
        meta_test_finetune(&mut s, &split, &st.source, &cfg).unwrap();
        assert_eq!(s.mp.heads(), heads);
        let cfg = tiny_meta();
        let e = s.mp.e().fingerprint();
        let (r, _) = meta_test_finetune(&mut s, &split, &st.source, &cfg).unwrap();
        assert!(r.is_some());
        assert_eq!(s.mp.e().fingerprint(), e);
        assert_ne!(s.mp.heads(), heads);
    }

    #[test]
    fn pretraining_reduces_loss() {
        let st = tiny_stream();
        let cfg = MetaConfig {
            pretrain_steps: 60,
            ..tiny_meta()
        };
        let mut s = state(&st, &cfg);
        let trace = pretrain(&mut s, &st.source, &cfg).unwrap();
        let head: f64 = trace[..10].iter().sum();
        let tail: f64 = trace[50..].iter().sum();
        assert!(tail < head);
    }
}
