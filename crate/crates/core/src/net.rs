//! Multilayer perceptron embedding network with hand-written reverse mode.
//!
//! Hidden layers use ReLU, the output layer is linear and may be followed by a
//! projection onto the unit sphere. Weights are stored `fan_in × fan_out` so a
//! batch is propagated as `inputs · W + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EcamlError, Result};

/// Norms below this are treated as zero when projecting to the sphere.
const MIN_NORM: f64 = 1e-12;

/// Truncation point of the initializer, in units of its scale.
pub const INIT_TRUNCATION: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub normalize_output: bool,
    pub seed: u64,
}

impl MlpConfig {
    /// Desk-scale defaults: two hidden layers of 64 and a 32-d embedding.
    pub fn desk(input_dim: usize) -> Self {
        MlpConfig {
            input_dim,
            hidden_dims: vec![64, 64],
            embedding_dim: 32,
            normalize_output: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(EcamlError::Config("input_dim must be >= 1".into()));
        }
        if self.embedding_dim == 0 {
            return Err(EcamlError::Config("embedding_dim must be >= 1".into()));
        }
        if let Some(pos) = self.hidden_dims.iter().position(|&d| d == 0) {
            return Err(EcamlError::Config(format!(
                "hidden_dims[{pos}] must be >= 1"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// One affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }

    fn zeros_like(&self) -> Self {
        Layer::zeros(self.fan_in(), self.fan_out())
    }

    fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Trainable parameters of the embedding network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub normalize_output: bool,
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

/// Values cached by [`MlpParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l]` feeds layer `l`.
    activations: Vec<Array2<f64>>,
    /// Pre-activations of every layer; the last one is the raw embedding.
    pre_activations: Vec<Array2<f64>>,
    /// Row norms of the raw embedding, present when the output is normalized.
    norms: Option<Array1<f64>>,
    output: Array2<f64>,
}

impl ForwardTrace {
    pub fn raw_embeddings(&self) -> &Array2<f64> {
        self.pre_activations.last().expect("at least one layer")
    }

    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }

    /// Recompute the output from the cached last-layer input.
    pub fn replay(&self, params: &MlpParams) -> Array2<f64> {
        let last = params.layers.last().expect("at least one layer");
        let input = &self.activations[params.layers.len() - 1];
        let raw = input.dot(&last.weights) + &last.bias;
        if params.normalize_output {
            normalize_rows(&raw).0
        } else {
            raw
        }
    }
}

/// How far the backward pass propagates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardScope {
    Full,
    /// Only the output layer receives gradient; everything below is treated
    /// as a constant.
    LastLayerOnly,
}

/// He initialization truncated at ±3 scale, zero biases.
pub fn init_params(config: &MlpConfig) -> Result<MlpParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers = config
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let scale = (2.0 / fan_in as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                scale * truncated_standard_normal(&mut rng)
            });
            Layer {
                weights,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(MlpParams {
        layers,
        normalize_output: config.normalize_output,
    })
}

fn truncated_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= INIT_TRUNCATION {
            return z;
        }
    }
}

/// Row-wise projection onto the unit sphere; returns the projected rows and
/// the original norms.
pub fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    let mut out = x.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        row /= n.max(MIN_NORM);
    }
    (out, norms)
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map(Layer::fan_out).unwrap_or(0)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    /// Embed a batch of inputs.
    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardTrace)> {
        if inputs.ncols() != self.input_dim() {
            return Err(EcamlError::Shape(format!(
                "input width {} but network expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        if let Some(pos) = inputs.iter().position(|v| !v.is_finite()) {
            return Err(EcamlError::Input(format!(
                "non-finite input at row {}, column {}",
                pos / inputs.ncols().max(1),
                pos % inputs.ncols().max(1)
            )));
        }
        let n_layers = self.layers.len();
        let mut activations = Vec::with_capacity(n_layers);
        let mut pre_activations = Vec::with_capacity(n_layers);
        let mut current = inputs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = current.dot(&layer.weights) + &layer.bias;
            activations.push(current);
            current = if l + 1 < n_layers {
                z.mapv(|v| v.max(0.0))
            } else {
                z.clone()
            };
            pre_activations.push(z);
        }
        let (output, norms) = if self.normalize_output {
            let (y, n) = normalize_rows(&current);
            (y, Some(n))
        } else {
            (current, None)
        };
        let trace = ForwardTrace {
            activations,
            pre_activations,
            norms,
            output: output.clone(),
        };
        Ok((output, trace))
    }

    /// Reverse-mode gradients of a scalar loss given `∂L/∂output`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_output: ArrayView2<f64>,
    ) -> Result<(ParamGrads, Array2<f64>)> {
        self.backward_scoped(trace, grad_output, BackwardScope::Full)
    }

    pub fn backward_scoped(
        &self,
        trace: &ForwardTrace,
        grad_output: ArrayView2<f64>,
        scope: BackwardScope,
    ) -> Result<(ParamGrads, Array2<f64>)> {
        if grad_output.dim() != trace.output.dim() {
            return Err(EcamlError::Shape(format!(
                "gradient shape {:?} does not match output shape {:?}",
                grad_output.dim(),
                trace.output.dim()
            )));
        }
        if trace.activations.len() != self.layers.len() {
            return Err(EcamlError::Shape(format!(
                "trace has {} layers, network has {}",
                trace.activations.len(),
                self.layers.len()
            )));
        }

        let mut delta = match &trace.norms {
            Some(norms) => normalization_backward(&trace.output, norms, grad_output),
            None => grad_output.to_owned(),
        };

        let mut grads = self.zero_grads();
        let n_layers = self.layers.len();
        let lowest = match scope {
            BackwardScope::Full => 0,
            BackwardScope::LastLayerOnly => n_layers - 1,
        };
        for l in (lowest..n_layers).rev() {
            let input = &trace.activations[l];
            grads.layers[l].weights = input.t().dot(&delta);
            grads.layers[l].bias = delta.sum_axis(Axis(0));
            let upstream = delta.dot(&self.layers[l].weights.t());
            delta = if l > 0 {
                let mut d = upstream;
                Zip::from(&mut d)
                    .and(&trace.pre_activations[l - 1])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
                d
            } else {
                upstream
            };
        }
        let input_grads = if lowest == 0 {
            delta
        } else {
            Array2::zeros(trace.activations[0].dim())
        };
        Ok((grads, input_grads))
    }

    /// Parameters flattened layer by layer (weights row-major, then bias).
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        unflatten(&mut self.layers, flat)
    }
}

impl ParamGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Backward through `y = x / ‖x‖`: `∂L/∂x = (g − y·(yᵀg)) / ‖x‖`.
fn normalization_backward(
    output: &Array2<f64>,
    norms: &Array1<f64>,
    grad: ArrayView2<f64>,
) -> Array2<f64> {
    let mut out = grad.to_owned();
    for ((mut g, y), &n) in out
        .rows_mut()
        .into_iter()
        .zip(output.rows())
        .zip(norms.iter())
    {
        if n < MIN_NORM {
            g /= MIN_NORM;
            continue;
        }
        let radial = y.dot(&g);
        g.scaled_add(-radial, &y);
        g /= n;
    }
    out
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
        .collect()
}

fn unflatten(layers: &mut [Layer], flat: &[f64]) -> Result<()> {
    let expected: usize = layers.iter().map(Layer::len).sum();
    if flat.len() != expected {
        return Err(EcamlError::Shape(format!(
            "flat parameter vector has {} entries, expected {expected}",
            flat.len()
        )));
    }
    let mut values = flat.iter().copied();
    for layer in layers {
        for (w, v) in layer.weights.iter_mut().zip(&mut values) {
            *w = v;
        }
        for (b, v) in layer.bias.iter_mut().zip(&mut values) {
            *b = v;
        }
    }
    Ok(())
}
