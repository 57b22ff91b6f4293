//! Fully connected layer stacks shared by the model networks and the
//! kernel feature net.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Softplus => g.softplus(x),
            Activation::Identity => x,
        }
    }
}

pub fn weight_name(prefix: &str, layer: usize) -> String {
    format!("{prefix}{layer}.w")
}

pub fn bias_name(prefix: &str, layer: usize) -> String {
    format!("{prefix}{layer}.b")
}

/// Adds `widths.len() - 1` layers to `store`, weights and biases drawn
/// uniformly from `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
pub fn init_mlp<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    widths: &[usize],
    rng: &mut R,
) -> Result<()> {
    for (l, pair) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::lit(rng.gen_range(-bound..=bound)))
                .collect()
        };
        let w = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out))?;
        let b = Tensor::vector(draw(fan_out));
        store.insert(weight_name(prefix, l), w)?;
        store.insert(bias_name(prefix, l), b)?;
    }
    Ok(())
}

/// Runs `x` through `layers` affine layers. `hidden` follows every layer but
/// the last, which is followed by `last`. Returns every layer's activation.
pub fn mlp_forward<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    prefix: &str,
    layers: usize,
    x: Var,
    hidden: Activation,
    last: Activation,
) -> Result<Vec<Var>> {
    let mut h = x;
    let mut outs = Vec::with_capacity(layers);
    for l in 0..layers {
        let w = p.get(&weight_name(prefix, l))?;
        let b = p.get(&bias_name(prefix, l))?;
        let (hs, ws) = (g.shape(h), g.shape(w));
        if hs.len() != 2 || hs[1] != ws[0] {
            return Err(dim_err(
                "linear",
                format!("layer {prefix}{l}: input {hs:?} vs weight {ws:?}"),
            ));
        }
        let z = g.linear(h, w, b)?;
        let act = if l + 1 == layers { last } else { hidden };
        h = act.apply(g, z);
        outs.push(h);
    }
    Ok(outs)
}
