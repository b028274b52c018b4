//! Small layer helpers composed from graph ops.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

/// Fully connected layer `x W + b` with `W: in x out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    /// Uniform Glorot initialisation scaled by `gain`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let limit = gain * (6.0 / (inputs + outputs) as f64).sqrt();
        let w: Vec<f64> = (0..inputs * outputs)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        let weight = store.add(
            format!("{name}.w"),
            Tensor::new(inputs, outputs, w).expect("dense weight shape"),
        );
        let bias = store.add(format!("{name}.b"), Tensor::zeros(1, outputs));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    /// Forward pass on plain values, without recording a graph.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor, NumericsError> {
        let mut y = x.matmul(store.get(self.weight))?;
        let b = store.get(self.bias).data();
        let cols = y.cols();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b[i % cols];
        }
        Ok(y)
    }
}

/// Stack of dense layers with a shared hidden activation; the last layer is linear.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden_activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        output_gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "mlp needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { output_gain } else { 1.0 };
                Dense::new(store, &format!("{name}.{i}"), sizes[i], sizes[i + 1], gain, rng)
            })
            .collect();
        Self {
            layers,
            hidden_activation: Activation::Tanh,
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last && self.hidden_activation == Activation::Tanh {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor, NumericsError> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(store, &h)?;
            if i < last && self.hidden_activation == Activation::Tanh {
                h = h.map(f64::tanh);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    #[test]
    fn graph_and_value_paths_agree() {
        let mut rng = seeded_rng(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 5, 2], 1.0, &mut rng);
        let x = Tensor::new(2, 3, vec![0.1, -0.2, 0.3, 0.5, 0.0, -1.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = mlp.forward(&mut g, &store, xv).unwrap();
        let direct = mlp.apply(&store, &x).unwrap();
        for (a, b) in g.value(y).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
