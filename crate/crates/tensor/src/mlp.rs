use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::{Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    None,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::None => x,
        }
    }
}

/// Fully connected layer `y = act(x W + b)` with `W: [in x out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Linear {
    /// Pre-activation `x W + b`.
    pub fn affine(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let z = self.affine(tape, store, x)?;
        Ok(self.activation.apply(tape, z))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    name: String,
    layers: Vec<Linear>,
}

impl Mlp {
    pub const DEFAULT_HIDDEN: usize = 32;

    /// Registers a new MLP in `store`. `widths` lists every layer boundary
    /// (`[in, hidden.., out]`); hidden layers use `hidden`, the last layer has
    /// no activation. Weights and biases start at `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(TensorError::Invalid(format!(
                "mlp `{name}` needs at least two positive widths, got {widths:?}"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, pair) in widths.windows(2).enumerate() {
            let (i, o) = (pair[0], pair[1]);
            let bound = 1.0 / (i as f32).sqrt();
            let weight = store.add(format!("{name}.{l}.weight"), Tensor::uniform(i, o, -bound, bound, rng));
            let bias = store.add(format!("{name}.{l}.bias"), Tensor::uniform(1, o, -bound, bound, rng));
            let activation = if l + 2 == widths.len() { Activation::None } else { hidden };
            layers.push(Linear {
                weight,
                bias,
                in_dim: i,
                out_dim: o,
                activation,
            });
        }
        Ok(Self {
            name: name.to_string(),
            layers,
        })
    }

    /// Rebuilds the layer structure from parameters already in `store`.
    pub fn from_store(store: &ParamStore, name: &str, widths: &[usize], hidden: Activation) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len().saturating_sub(1));
        for (l, pair) in widths.windows(2).enumerate() {
            let lookup = |suffix: &str, shape: [usize; 2]| -> Result<ParamId> {
                let key = format!("{name}.{l}.{suffix}");
                let id = store.find(&key).ok_or_else(|| TensorError::UnknownParam(key.clone()))?;
                if store.get(id).shape() != shape {
                    return Err(TensorError::Shape {
                        op: "Mlp::from_store",
                        expected: format!("{key} {shape:?}"),
                        got: format!("{:?}", store.get(id).shape()),
                    });
                }
                Ok(id)
            };
            layers.push(Linear {
                weight: lookup("weight", [pair[0], pair[1]])?,
                bias: lookup("bias", [1, pair[1]])?,
                in_dim: pair[0],
                out_dim: pair[1],
                activation: if l + 2 == widths.len() { Activation::None } else { hidden },
            });
        }
        Ok(Self {
            name: name.to_string(),
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_dim()];
        w.extend(self.layers.iter().map(|l| l.out_dim));
        w
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Zeroes the output layer so the network initially emits exactly zero.
    pub fn zero_last_layer(&self, store: &mut ParamStore) {
        if let Some(last) = self.layers.last() {
            for id in [last.weight, last.bias] {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        let mut x = input;
        for (l, layer) in self.layers.iter().enumerate() {
            let got = tape.value(x).cols();
            if got != layer.in_dim {
                return Err(TensorError::Layer {
                    mlp: self.name.clone(),
                    layer: l,
                    expected: layer.in_dim,
                    got,
                });
            }
            x = layer.forward(tape, store, x)?;
        }
        Ok(x)
    }
}
