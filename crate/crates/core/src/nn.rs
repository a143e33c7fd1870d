//! Multilayer perceptrons on the autodiff tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One dense layer: `weight: [out, in]`, `bias: [out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn input_size(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_size(&self) -> usize {
        self.weight.rows()
    }
}

/// Dense network with `tanh` on hidden layers and an identity output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let params = Self { layers };
        params.validate()?;
        Ok(params)
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation for `sizes = [in, h1, .., out]`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f64> {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                let weight = Tensor::from_parts(vec![fan_out, fan_in], draw(fan_out * fan_in));
                let bias = Tensor::from_parts(vec![fan_out], draw(fan_out));
                Layer { weight, bias }
            })
            .collect();
        Self { layers }
    }

    /// Checks layer chaining, bias shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Structural("MLP has no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.weight.check()?;
            layer.bias.check()?;
            if layer.weight.shape().len() != 2 {
                return Err(Error::Structural(format!(
                    "layer {i} weight must be a matrix, got shape {:?}",
                    layer.weight.shape()
                )));
            }
            if layer.bias.len() != layer.output_size() {
                return Err(Error::Structural(format!(
                    "layer {i} bias has {} entries for {} outputs",
                    layer.bias.len(),
                    layer.output_size()
                )));
            }
            if i > 0 && self.layers[i - 1].output_size() != layer.input_size() {
                return Err(Error::Structural(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    layer.input_size(),
                    i - 1,
                    self.layers[i - 1].output_size()
                )));
            }
            if !layer.weight.is_finite() || !layer.bias.is_finite() {
                return Err(Error::Numeric(format!("layer {i} parameters")));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().unwrap().output_size()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Parameter tensors in order `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Places every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.param(&l.weight), g.param(&l.bias))
                } else {
                    (g.constant(&l.weight), g.constant(&l.bias))
                }
            })
            .collect();
        MlpVars {
            vars,
            input_size: self.input_size(),
        }
    }

    /// Copies gradients for the variables from [`MlpParams::bind`] into
    /// each tensor's gradient buffer; unreachable parameters get zeros.
    pub fn store_grads(
        &mut self,
        vars: &MlpVars,
        grads: &crate::autodiff::Gradients,
    ) -> Result<()> {
        let handles: Vec<Var> = vars.handles().collect();
        for (t, v) in self.tensors_mut().zip(handles) {
            let n = t.len();
            t.set_grad(grads.get_or_zero(v, n))?;
        }
        Ok(())
    }

    /// Forward pass on a throwaway graph.
    pub fn forward_values(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(input);
        let y = mlp_forward(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }

    /// `self <- (1 - rate) * self + rate * source`, elementwise.
    pub fn blend_from(&mut self, source: &MlpParams, rate: f64) {
        for (dst, src) in self.tensors_mut().zip(source.tensors()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = (1.0 - rate) * *d + rate * s;
            }
        }
    }
}

/// Graph handles for one bound [`MlpParams`].
#[derive(Debug, Clone)]
pub struct MlpVars {
    vars: Vec<(Var, Var)>,
    input_size: usize,
}

impl MlpVars {
    /// Handles in the same order as [`MlpParams::tensors`].
    pub fn handles(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Runs the network on `input: [batch, in]`, recording every step on `g`.
pub fn mlp_forward(g: &mut Graph, params: &MlpVars, input: Var) -> Result<Var> {
    let x = g.value(input);
    if x.cols() != params.input_size {
        return Err(Error::Structural(format!(
            "input width {} does not match network input size {}",
            x.cols(),
            params.input_size
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("mlp_forward input".into()));
    }
    let last = params.vars.len() - 1;
    let mut h = input;
    for (i, &(w, b)) in params.vars.iter().enumerate() {
        let z = g.matmul_t(h, w);
        let z = g.add_row(z, b);
        h = if i < last { g.tanh(z) } else { z };
    }
    Ok(h)
}
