//! A small dense/convolutional network engine with hand-written
//! forward/backward pairs for each layer kind.
//!
//! All arithmetic is `f32`. Tensors are row-major; convolutional tensors are
//! `[channels, height, width]` and there is no batch dimension: mini-batches
//! are loops over samples with accumulated gradients.

mod io;
mod layers;

pub use io::{load_weights, save_weights};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(&'static str),
    #[error("bad weight file header: {0}")]
    BadMagic(String),
    #[error("weight file does not match the network spec: {0}")]
    ShapeTableMismatch(String),
    #[error("weight file truncated at byte {0}")]
    TruncatedPayload(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, NeuralError> {
        if shape.contains(&0) {
            return Err(NeuralError::ShapeMismatch(format!("zero dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NeuralError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn reshaped(mut self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    MaxPool2d { window: usize, stride: usize },
    Flatten,
    Dense { out_features: usize },
    L2Normalize,
}

impl LayerSpec {
    fn tag(&self) -> u8 {
        match self {
            LayerSpec::Conv2d { .. } => 1,
            LayerSpec::Relu => 2,
            LayerSpec::MaxPool2d { .. } => 3,
            LayerSpec::Flatten => 4,
            LayerSpec::Dense { .. } => 5,
            LayerSpec::L2Normalize => 6,
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NeuralError> {
        let spatial = |what: &str| -> Result<(usize, usize, usize), NeuralError> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(NeuralError::ShapeMismatch(format!("{what} needs [C,H,W] input, got {input:?}"))),
            }
        };
        match *self {
            LayerSpec::Conv2d { out_channels, kernel, stride, padding } => {
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(NeuralError::ShapeMismatch("conv2d parameters must be positive".into()));
                }
                let (_, h, w) = spatial("conv2d")?;
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(NeuralError::ShapeMismatch(format!(
                        "kernel {kernel} larger than padded input {input:?}"
                    )));
                }
                let out = |n: usize| (n + 2 * padding - kernel) / stride + 1;
                Ok(vec![out_channels, out(h), out(w)])
            }
            LayerSpec::MaxPool2d { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(NeuralError::ShapeMismatch("maxpool2d parameters must be positive".into()));
                }
                let (c, h, w) = spatial("maxpool2d")?;
                if h < window || w < window {
                    return Err(NeuralError::ShapeMismatch(format!("pool window {window} larger than {input:?}")));
                }
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            LayerSpec::Relu | LayerSpec::L2Normalize => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { out_features } => {
                if out_features == 0 {
                    return Err(NeuralError::ShapeMismatch("dense needs at least one output".into()));
                }
                match *input {
                    [_] => Ok(vec![out_features]),
                    _ => Err(NeuralError::ShapeMismatch(format!("dense needs a flat input, got {input:?}"))),
                }
            }
        }
    }

    /// Weight and bias shapes, if the layer has parameters.
    fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d { out_channels, kernel, .. } => {
                Some((vec![out_channels, input[0], kernel, kernel], vec![out_channels]))
            }
            LayerSpec::Dense { out_features } => Some((vec![out_features, input[0]], vec![out_features])),
            _ => None,
        }
    }
}

/// Shapes flowing between layers: entry `i` is the input of layer `i`, the
/// last entry is the network output.
pub fn shape_trace(spec: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<Vec<usize>>, NeuralError> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(NeuralError::ShapeMismatch(format!("invalid input shape {input_shape:?}")));
    }
    let mut shapes = vec![input_shape.to_vec()];
    for layer in spec {
        let next = layer.output_shape(shapes.last().unwrap())?;
        shapes.push(next);
    }
    Ok(shapes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    params: Vec<Option<Params>>,
    rng_seed: u64,
}

/// Per-layer inputs retained by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Tensor>,
    argmax: Vec<Option<Vec<u32>>>,
}

impl ForwardCache {
    /// Input tensor of each layer, in order.
    pub fn layer_inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    /// Flat input index chosen by each max-pool output, per layer.
    pub fn pool_choices(&self) -> impl Iterator<Item = &[u32]> {
        self.argmax.iter().flatten().map(|v| v.as_slice())
    }
}

/// Parameter gradients, laid out like [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Option<Params>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| Params {
                        weight: Tensor::zeros(p.weight.shape()),
                        bias: Tensor::zeros(p.bias.shape()),
                    })
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Option<Params>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Option<Params>] {
        &mut self.layers
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.weight.data.iter_mut().zip(&b.weight.data).for_each(|(x, y)| *x += y);
                a.bias.data.iter_mut().zip(&b.bias.data).for_each(|(x, y)| *x += y);
            }
        }
    }

    pub fn scale(&mut self, k: f32) {
        for p in self.layers.iter_mut().flatten() {
            p.weight.data.iter_mut().for_each(|x| *x *= k);
            p.bias.data.iter_mut().for_each(|x| *x *= k);
        }
    }
}

fn glorot_limit(spec: &LayerSpec, weight_shape: &[usize]) -> f32 {
    let (fan_in, fan_out) = match spec {
        LayerSpec::Conv2d { kernel, .. } => {
            let area = kernel * kernel;
            (weight_shape[1] * area, weight_shape[0] * area)
        }
        _ => (weight_shape[1], weight_shape[0]),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt() as f32
}

impl Network {
    /// Glorot-uniform weights from a seeded ChaCha stream, zero biases.
    pub fn init(spec: &[LayerSpec], input_shape: &[usize], seed: u64) -> Result<Self, NeuralError> {
        let shapes = shape_trace(spec, input_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .iter()
            .zip(&shapes)
            .map(|(layer, in_shape)| {
                layer.param_shapes(in_shape).map(|(ws, bs)| {
                    let limit = glorot_limit(layer, &ws);
                    let n: usize = ws.iter().product();
                    let data = (0..n).map(|_| (rng.random::<f32>() * 2.0 - 1.0) * limit).collect();
                    Params { weight: Tensor { shape: ws, data }, bias: Tensor::zeros(&bs) }
                })
            })
            .collect();
        Ok(Network { spec: spec.to_vec(), input_shape: input_shape.to_vec(), params, rng_seed: seed })
    }

    pub fn spec(&self) -> &[LayerSpec] {
        &self.spec
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        shape_trace(&self.spec, &self.input_shape)
            .expect("validated at construction")
            .pop()
            .unwrap()
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn params(&self) -> &[Option<Params>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<Params>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ForwardCache), NeuralError> {
        if input.shape != self.input_shape {
            return Err(NeuralError::ShapeMismatch(format!(
                "network expects {:?}, got {:?}",
                self.input_shape, input.shape
            )));
        }
        if !input.is_finite() {
            return Err(NeuralError::NonFiniteValue("network input"));
        }
        let mut inputs = Vec::with_capacity(self.spec.len());
        let mut argmax = Vec::with_capacity(self.spec.len());
        let mut x = input.clone();
        for (layer, params) in self.spec.iter().zip(&self.params) {
            let (y, choice) = layers::forward(layer, params.as_ref(), &x);
            inputs.push(x);
            argmax.push(choice);
            x = y;
        }
        if !x.is_finite() {
            return Err(NeuralError::NonFiniteValue("network output"));
        }
        Ok((x, ForwardCache { inputs, argmax }))
    }

    /// Output only, without keeping activations.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor, NeuralError> {
        self.forward(input).map(|(y, _)| y)
    }

    pub fn backward(&self, cache: &ForwardCache, grad_out: &Tensor) -> Result<(Gradients, Tensor), NeuralError> {
        if cache.inputs.len() != self.spec.len() {
            return Err(NeuralError::ShapeMismatch("cache does not belong to this network".into()));
        }
        let out_shape = self.output_shape();
        if grad_out.shape != out_shape {
            return Err(NeuralError::ShapeMismatch(format!(
                "output gradient {:?} does not match output {:?}",
                grad_out.shape, out_shape
            )));
        }
        let mut grads = Vec::with_capacity(self.spec.len());
        let mut g = grad_out.clone();
        for i in (0..self.spec.len()).rev() {
            let (grad_in, pg) = layers::backward(
                &self.spec[i],
                self.params[i].as_ref(),
                &cache.inputs[i],
                cache.argmax[i].as_deref(),
                &g,
            );
            grads.push(pg);
            g = grad_in;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, g))
    }

    /// `p <- p - lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f32) -> Result<(), NeuralError> {
        if grads.layers.len() != self.params.len() {
            return Err(NeuralError::ShapeMismatch("gradient layer count differs".into()));
        }
        for (p, g) in self.params.iter().zip(&grads.layers) {
            match (p, g) {
                (Some(p), Some(g)) if p.weight.shape == g.weight.shape && p.bias.shape == g.bias.shape => {}
                (None, None) => {}
                _ => return Err(NeuralError::ShapeMismatch("gradient shapes differ from parameters".into())),
            }
        }
        for (p, g) in self.params.iter_mut().zip(&grads.layers) {
            if let (Some(p), Some(g)) = (p, g) {
                p.weight.data.iter_mut().zip(&g.weight.data).for_each(|(w, d)| *w -= lr * d);
                p.bias.data.iter_mut().zip(&g.bias.data).for_each(|(b, d)| *b -= lr * d);
            }
        }
        Ok(())
    }
}

pub fn init_network(spec: &[LayerSpec], input_shape: &[usize], seed: u64) -> Result<Network, NeuralError> {
    Network::init(spec, input_shape, seed)
}

#[cfg(test)]
mod tests;
