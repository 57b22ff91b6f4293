//! Feature extractor `E`, bottleneck `B`, classifier `C` and the per-layer
//! domain quantizer `D_Q`, plus bottleneck snapshots and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{contract, dim_err, Error, Result};
use crate::nn::{init_mlp, mlp_forward, Activation};
use crate::scalar::Scalar;

pub const E_PREFIX: &str = "e.";
pub const B_PREFIX: &str = "b.";
pub const C_PREFIX: &str = "c.";

fn q_prefix(l: usize) -> String {
    format!("q{l}.")
}

/// What each quantizer layer consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerInput {
    /// The input of the matching bottleneck layer.
    LayerInput,
    /// The raw model input.
    RawInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Output widths of the extractor layers.
    pub e_widths: Vec<usize>,
    /// Output widths of the bottleneck layers.
    pub b_widths: Vec<usize>,
    pub quantizer_input: QuantizerInput,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            e_widths: vec![32, 32],
            b_widths: vec![16, 16, 16],
            quantizer_input: QuantizerInput::LayerInput,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.e_widths.is_empty() || self.e_widths.contains(&0) {
            errs.push("network.e_widths must be non-empty and positive".to_string());
        }
        if self.b_widths.is_empty() || self.b_widths.contains(&0) {
            errs.push("network.b_widths must be non-empty and positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Parameters of `R = C ∘ B ∘ E`, one store per sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    e: ParamStore<T>,
    b: ParamStore<T>,
    c: ParamStore<T>,
    e_widths: Vec<usize>,
    b_widths: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new<R: Rng>(input_dim: usize, classes: usize, cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 || classes < 2 {
            return Err(contract(format!(
                "model needs input_dim >= 1 and >= 2 classes, got {input_dim} and {classes}"
            )));
        }
        let mut e_widths = vec![input_dim];
        e_widths.extend(&cfg.e_widths);
        let mut b_widths = vec![*e_widths.last().expect("non-empty")];
        b_widths.extend(&cfg.b_widths);
        let mut mp = Self {
            e: ParamStore::new(),
            b: ParamStore::new(),
            c: ParamStore::new(),
            e_widths,
            b_widths,
            classes,
        };
        init_mlp(&mut mp.e, E_PREFIX, &mp.e_widths, rng)?;
        mp.reinit_heads(rng)?;
        Ok(mp)
    }

    /// Fresh `B` and `C` from the initializer; `E` is left alone.
    pub fn reinit_heads<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        self.b = ParamStore::new();
        self.c = ParamStore::new();
        init_mlp(&mut self.b, B_PREFIX, &self.b_widths, rng)?;
        let cw = [*self.b_widths.last().expect("non-empty"), self.classes];
        init_mlp(&mut self.c, C_PREFIX, &cw, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.e_widths[0]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn e_widths(&self) -> &[usize] {
        &self.e_widths
    }

    pub fn b_widths(&self) -> &[usize] {
        &self.b_widths
    }

    pub fn b_layers(&self) -> usize {
        self.b_widths.len() - 1
    }

    pub fn e(&self) -> &ParamStore<T> {
        &self.e
    }

    pub fn b(&self) -> &ParamStore<T> {
        &self.b
    }

    pub fn c(&self) -> &ParamStore<T> {
        &self.c
    }

    pub fn e_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.e
    }

    pub fn b_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.b
    }

    pub fn c_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.c
    }

    /// `B` and `C` merged into one store (names are prefixed, so disjoint).
    pub fn heads(&self) -> ParamStore<T> {
        let mut s = self.b.clone();
        for (n, t) in self.c.iter() {
            s.insert(n, t.clone()).expect("disjoint prefixes");
        }
        s
    }

    /// Writes values from a store holding `B` and/or `C` entries.
    pub fn set_heads(&mut self, heads: &ParamStore<T>) -> Result<()> {
        self.b.update_from(&heads.filtered(|n| n.starts_with(B_PREFIX)))?;
        self.c.update_from(&heads.filtered(|n| n.starts_with(C_PREFIX)))
    }

    /// Binds each sub-network either as leaves (`true`) or constants.
    pub fn bind(&self, g: &Graph<T>, train_e: bool, train_b: bool, train_c: bool) -> BoundModel {
        let pick = |s: &ParamStore<T>, leaf: bool| if leaf { s.bind(g) } else { s.bind_const(g) };
        BoundModel {
            e: pick(&self.e, train_e),
            b: pick(&self.b, train_b),
            c: pick(&self.c, train_c),
            e_layers: self.e_widths.len() - 1,
            b_layers: self.b_layers(),
            input_dim: self.input_dim(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.e.all_finite() && self.b.all_finite() && self.c.all_finite()
    }

    /// All three stores in one flat map.
    pub fn to_store(&self) -> ParamStore<T> {
        let mut s = self.e.clone();
        for (n, t) in self.b.iter().chain(self.c.iter()) {
            s.insert(n, t.clone()).expect("disjoint prefixes");
        }
        s
    }

    /// Loads values from a flat map produced by [`ModelParams::to_store`].
    pub fn load_store(&mut self, s: &ParamStore<T>) -> Result<()> {
        for (name, t) in s.iter() {
            let target = if name.starts_with(E_PREFIX) {
                &mut self.e
            } else if name.starts_with(B_PREFIX) {
                &mut self.b
            } else if name.starts_with(C_PREFIX) {
                &mut self.c
            } else {
                return Err(Error::Format(format!("unexpected model parameter `{name}`")));
            };
            target.set(name, t.clone())?;
        }
        Ok(())
    }
}

/// Model parameters attached to a graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub e: Bound,
    pub b: Bound,
    pub c: Bound,
    e_layers: usize,
    b_layers: usize,
    input_dim: usize,
}

/// Activations of one forward pass, recorded on a graph.
#[derive(Clone, Debug)]
pub struct FeatureVars {
    pub mid: Var,
    /// Input of each bottleneck layer.
    pub layer_inputs: Vec<Var>,
    /// Output of each bottleneck layer; the last one is `high`.
    pub per_layer: Vec<Var>,
    pub high: Var,
}

impl BoundModel {
    pub fn with_heads(&self, b: Bound, c: Bound) -> Self {
        Self {
            b,
            c,
            ..self.clone()
        }
    }

    pub fn b_layers(&self) -> usize {
        self.b_layers
    }

    pub fn encode<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(dim_err(
                "forward_features",
                format!("input {s:?}, extractor expects width {}", self.input_dim),
            ));
        }
        let outs = mlp_forward(g, &self.e, E_PREFIX, self.e_layers, x, Activation::Relu, Activation::Relu)?;
        Ok(*outs.last().expect("at least one layer"))
    }

    pub fn features<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<FeatureVars> {
        let mid = self.encode(g, x)?;
        bottleneck_forward(g, &self.b, self.b_layers, mid)
    }

    pub fn classify<T: Scalar>(&self, g: &Graph<T>, high: Var) -> Result<Var> {
        let outs = mlp_forward(g, &self.c, C_PREFIX, 1, high, Activation::Identity, Activation::Identity)?;
        Ok(outs[0])
    }

    pub fn logits<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let f = self.features(g, x)?;
        self.classify(g, f.high)
    }
}

/// Runs a bottleneck (current or snapshot) on extractor features.
pub fn bottleneck_forward<T: Scalar>(g: &Graph<T>, b: &Bound, layers: usize, mid: Var) -> Result<FeatureVars> {
    let per_layer = mlp_forward(g, b, B_PREFIX, layers, mid, Activation::Relu, Activation::Relu)?;
    let mut layer_inputs = vec![mid];
    layer_inputs.extend(&per_layer[..layers - 1]);
    Ok(FeatureVars {
        mid,
        layer_inputs,
        high: *per_layer.last().expect("at least one layer"),
        per_layer,
    })
}

/// Numeric activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<T> {
    pub mid: Tensor<T>,
    pub high: Tensor<T>,
    pub per_layer: Vec<Tensor<T>>,
}

pub fn forward_features<T: Scalar>(x: &Tensor<T>, mp: &ModelParams<T>) -> Result<FeatureBundle<T>> {
    let g = Graph::new();
    let bm = mp.bind(&g, false, false, false);
    let f = bm.features(&g, g.constant(x.clone()))?;
    Ok(FeatureBundle {
        mid: g.value(f.mid),
        high: g.value(f.high),
        per_layer: f.per_layer.iter().map(|&v| g.value(v)).collect(),
    })
}

pub fn forward_logits<T: Scalar>(x: &Tensor<T>, mp: &ModelParams<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let bm = mp.bind(&g, false, false, false);
    let l = bm.logits(&g, g.constant(x.clone()))?;
    Ok(g.value(l))
}

/// Arg-max class per row.
pub fn predict<T: Scalar>(x: &Tensor<T>, mp: &ModelParams<T>) -> Result<Vec<usize>> {
    let l = forward_logits(x, mp)?;
    Ok((0..l.rows())
        .map(|i| {
            l.row(i)
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect())
}

/// One single-layer softplus net per matched bottleneck layer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerParams<T> {
    store: ParamStore<T>,
    in_widths: Vec<usize>,
    out_widths: Vec<usize>,
    input: QuantizerInput,
}

impl<T: Scalar> QuantizerParams<T> {
    pub fn new<R: Rng>(mp: &ModelParams<T>, input: QuantizerInput, rng: &mut R) -> Result<Self> {
        let layers = mp.b_layers();
        let bw = mp.b_widths();
        let in_widths: Vec<usize> = (0..layers)
            .map(|l| match input {
                QuantizerInput::LayerInput => bw[l],
                QuantizerInput::RawInput => mp.input_dim(),
            })
            .collect();
        let out_widths = bw[1..].to_vec();
        let mut store = ParamStore::new();
        for l in 0..layers {
            init_mlp(&mut store, &q_prefix(l), &[in_widths[l], out_widths[l]], rng)?;
        }
        Ok(Self {
            store,
            in_widths,
            out_widths,
            input,
        })
    }

    pub fn layers(&self) -> usize {
        self.out_widths.len()
    }

    pub fn input(&self) -> QuantizerInput {
        self.input
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn bind(&self, g: &Graph<T>, train: bool) -> BoundQuantizer {
        BoundQuantizer {
            vars: if train { self.store.bind(g) } else { self.store.bind_const(g) },
            in_widths: self.in_widths.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundQuantizer {
    pub vars: Bound,
    in_widths: Vec<usize>,
}

impl BoundQuantizer {
    pub fn with_vars(&self, vars: Bound) -> Self {
        Self {
            vars,
            in_widths: self.in_widths.clone(),
        }
    }

    /// Nonnegative weights `D_{Q_l}(input_l)` for every layer.
    pub fn weights<T: Scalar>(&self, g: &Graph<T>, inputs: &[Var]) -> Result<Vec<Var>> {
        if inputs.len() != self.in_widths.len() {
            return Err(dim_err(
                "quantizer_weights",
                format!("{} inputs for {} layers", inputs.len(), self.in_widths.len()),
            ));
        }
        inputs
            .iter()
            .enumerate()
            .map(|(l, &x)| {
                let s = g.shape(x);
                if s.len() != 2 || s[1] != self.in_widths[l] {
                    return Err(dim_err(
                        "quantizer_weights",
                        format!("layer {l}: input {s:?}, expects width {}", self.in_widths[l]),
                    ));
                }
                let out = mlp_forward(g, &self.vars, &q_prefix(l), 1, x, Activation::Softplus, Activation::Softplus)?;
                Ok(out[0])
            })
            .collect()
    }
}

pub fn quantizer_weights<T: Scalar>(inputs: &[Tensor<T>], qp: &QuantizerParams<T>) -> Result<Vec<Tensor<T>>> {
    let g = Graph::new();
    let bq = qp.bind(&g, false);
    let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    Ok(bq.weights(&g, &vs)?.into_iter().map(|v| g.value(v)).collect())
}

/// Frozen copy of a bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckSnapshot<T> {
    b: ParamStore<T>,
    domain: usize,
}

impl<T: Scalar> BottleneckSnapshot<T> {
    pub fn params(&self) -> &ParamStore<T> {
        &self.b
    }

    pub fn domain(&self) -> usize {
        self.domain
    }
}

pub fn snapshot<T: Scalar>(mp: &ModelParams<T>, domain: usize) -> BottleneckSnapshot<T> {
    BottleneckSnapshot {
        b: mp.b().clone(),
        domain,
    }
}

// ---- checkpoints ------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "clkm-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    tensors: BTreeMap<String, Tensor<f64>>,
}

/// Writes a store as JSON: `{"format", "version", "tensors": {name: {shape, data}}}`.
pub fn save_checkpoint(path: &Path, store: &ParamStore<f64>) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        tensors: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
    };
    let text = serde_json::to_string(&ck).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    let mut store = ParamStore::new();
    for (name, t) in ck.tensors {
        let t = Tensor::new(t.shape().to_vec(), t.into_data())?;
        store.insert(name, t)?;
    }
    Ok(store)
}
