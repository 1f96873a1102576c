use serde::{Deserialize, Serialize};

use super::graph::{Graph, ParamId, ParamStore, Var};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE)
    }

    pub fn apply(self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Fully connected layer `activation(x · Wᵀ + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    /// Registers `{name}.weight` and `{name}.bias`. Weights are drawn from
    /// `U(-sqrt(1/in), sqrt(1/in))`, biases start at zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let bound = (1.0 / in_dim.max(1) as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_parts(vec![out_dim, in_dim], w),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        DenseLayer {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        }
    }

    /// Rebinds a layer to parameters already present in `store`.
    pub fn from_store(store: &ParamStore, name: &str, activation: Activation) -> Result<Self> {
        let weight = store.id(&format!("{name}.weight"))?;
        let bias = store.id(&format!("{name}.bias"))?;
        let ws = store.value(weight).shape().to_vec();
        let bs = store.value(bias).shape().to_vec();
        if ws.len() != 2 || bs != [ws[0]] {
            return Err(Error::Integrity(format!(
                "layer `{name}` has weight {ws:?} and bias {bs:?}"
            )));
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
            in_dim: ws[1],
            out_dim: ws[0],
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != self.in_dim {
            return Err(Error::Dimension {
                op: "dense forward",
                left: xs,
                right: vec![self.out_dim, self.in_dim],
            });
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.linear(x, w, b)?;
        self.activation.apply(g, y)
    }
}

/// Stack of dense layers named `{prefix}.0`, `{prefix}.1`, ...
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut Rng,
    ) -> Self {
        let n = dims.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::new(store, &format!("{prefix}.{i}"), dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn from_store(
        store: &ParamStore,
        prefix: &str,
        hidden: Activation,
        output: Activation,
    ) -> Result<Self> {
        let mut n = 0;
        while store.id(&format!("{prefix}.{n}.weight")).is_ok() {
            n += 1;
        }
        if n == 0 {
            return Err(Error::Integrity(format!("no layers under `{prefix}`")));
        }
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::from_store(store, &format!("{prefix}.{i}"), act)
            })
            .collect::<Result<Vec<_>>>()?;
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Integrity(format!(
                    "`{prefix}` layers do not chain: {} -> {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }

    /// Forward pass outside any training graph.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let xi = g.input(x.clone());
        let y = self.forward(&mut g, xi)?;
        Ok(g.value(y).clone())
    }
}
