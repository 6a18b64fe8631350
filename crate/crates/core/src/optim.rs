//! Adam with an additive L2 term and per-layer learning-rate multipliers.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{EcamlError, Result};
use crate::net::{Layer, MlpParams, ParamGrads};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators for every parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    first: Vec<Layer>,
    second: Vec<Layer>,
    step: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &MlpParams, hyper: AdamHyper) -> Self {
        let zeros = || {
            params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.fan_in(), l.fan_out()))
                .collect::<Vec<_>>()
        };
        AdamState {
            first: zeros(),
            second: zeros(),
            step: 0,
            hyper,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Adam state for a single flat parameter vector.
#[derive(Debug, Clone)]
pub struct FlatAdam {
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
    pub hyper: AdamHyper,
}

impl FlatAdam {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        FlatAdam {
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
            hyper,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(EcamlError::Shape(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        check_finite(grads, 0)?;
        self.step += 1;
        let corr = Corrections::new(&self.hyper, self.step);
        update(
            params,
            grads,
            &mut self.first,
            &mut self.second,
            &self.hyper,
            corr,
            lr,
            weight_decay,
        );
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Corrections {
    first: f64,
    second: f64,
}

impl Corrections {
    fn new(h: &AdamHyper, step: u64) -> Self {
        let t = step.min(i32::MAX as u64) as i32;
        Corrections {
            first: 1.0 - h.beta1.powi(t),
            second: 1.0 - h.beta2.powi(t),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update(
    params: &mut [f64],
    grads: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    h: &AdamHyper,
    corr: Corrections,
    lr: f64,
    weight_decay: f64,
) {
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        first[i] = h.beta1 * first[i] + (1.0 - h.beta1) * g;
        second[i] = h.beta2 * second[i] + (1.0 - h.beta2) * g * g;
        let m_hat = first[i] / corr.first;
        let v_hat = second[i] / corr.second;
        let denom = v_hat.sqrt() + h.eps;
        if denom > 0.0 {
            params[i] -= lr * m_hat / denom;
        }
    }
}

fn check_finite(values: &[f64], layer: usize) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(EcamlError::NonFinite {
            iteration: 0,
            message: format!("gradient entry {pos} of layer {layer} is {}", values[pos]),
        }),
        None => Ok(()),
    }
}

fn as_slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored contiguously")
}

fn as_slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored contiguously")
}

/// One Adam step over every layer. `lr_multipliers[l]` scales the learning
/// rate of layer `l`; an empty slice means 1 everywhere.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    lr_multipliers: &[f64],
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(EcamlError::Config(format!("learning rate must be > 0, got {lr}")));
    }
    let n = params.layers.len();
    if grads.layers.len() != n || state.first.len() != n {
        return Err(EcamlError::Shape(format!(
            "adam: {n} parameter layers, {} gradient layers, {} moment layers",
            grads.layers.len(),
            state.first.len()
        )));
    }
    if !lr_multipliers.is_empty() && lr_multipliers.len() != n {
        return Err(EcamlError::Shape(format!(
            "{} learning-rate multipliers for {n} layers",
            lr_multipliers.len()
        )));
    }
    for (l, (p, g)) in params.layers.iter().zip(&grads.layers).enumerate() {
        if p.weights.dim() != g.weights.dim() || p.bias.dim() != g.bias.dim() {
            return Err(EcamlError::Shape(format!("layer {l} gradient shape mismatch")));
        }
        check_finite(g.weights.as_slice().unwrap_or(&[]), l)?;
        check_finite(g.bias.as_slice().unwrap_or(&[]), l)?;
    }

    state.step += 1;
    let corr = Corrections::new(&state.hyper, state.step);
    let hyper = state.hyper;
    for l in 0..n {
        let layer_lr = lr * lr_multipliers.get(l).copied().unwrap_or(1.0);
        let p = &mut params.layers[l];
        let g = &grads.layers[l];
        let m = &mut state.first[l];
        let v = &mut state.second[l];
        update(
            as_slice_mut(&mut p.weights),
            g.weights.as_slice().expect("contiguous"),
            as_slice_mut(&mut m.weights),
            as_slice_mut(&mut v.weights),
            &hyper,
            corr,
            layer_lr,
            weight_decay,
        );
        update(
            as_slice1_mut(&mut p.bias),
            g.bias.as_slice().expect("contiguous"),
            as_slice1_mut(&mut m.bias),
            as_slice1_mut(&mut v.bias),
            &hyper,
            corr,
            layer_lr,
            weight_decay,
        );
    }
    if !params.is_finite() {
        return Err(EcamlError::NonFinite {
            iteration: 0,
            message: "parameters became non-finite after the optimizer step".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, MlpConfig};

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = init_params(&MlpConfig::desk(5)).unwrap();
        let before = p.clone();
        let g = p.zero_grads();
        let mut st = AdamState::new(&p, AdamHyper::default());
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut st, 1e-3, 0.0, &[]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 3);
    }

    #[test]
    fn degenerate_adam_is_sign_descent() {
        let hyper = AdamHyper {
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
        };
        let mut opt = FlatAdam::new(1, hyper);
        let mut w = [1.0];
        opt.step(&mut w, &[1.0], 0.1, 0.0).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut opt = FlatAdam::new(1, AdamHyper::default());
        let mut w = [0.0];
        for _ in 0..100 {
            let g = 2.0 * (w[0] - 3.0);
            opt.step(&mut w, &[g], 0.1, 0.0).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 0.05, "w = {}", w[0]);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = init_params(&MlpConfig::desk(3)).unwrap();
        let mut g = p.zero_grads();
        g.layers[1].weights[[0, 0]] = f64::INFINITY;
        let mut st = AdamState::new(&p, AdamHyper::default());
        let before = p.clone();
        let err = adam_step(&mut p, &g, &mut st, 1e-3, 0.0, &[]).unwrap_err();
        assert!(matches!(err, EcamlError::NonFinite { .. }));
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn per_layer_multiplier_scales_first_step() {
        let mut p = init_params(&MlpConfig::desk(3)).unwrap();
        let mut g = p.zero_grads();
        for l in &mut g.layers {
            l.bias.fill(1.0);
        }
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamHyper::default());
        adam_step(&mut p, &g, &mut st, 1e-3, 0.0, &[1.0, 1.0, 10.0]).unwrap();
        let d0 = before.layers[0].bias[0] - p.layers[0].bias[0];
        let d2 = before.layers[2].bias[0] - p.layers[2].bias[0];
        assert!((d2 / d0 - 10.0).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_shrinks_weights() {
        let mut opt = FlatAdam::new(2, AdamHyper::default());
        let mut w = [2.0, -2.0];
        for _ in 0..10 {
            opt.step(&mut w, &[0.0, 0.0], 0.01, 0.1).unwrap();
        }
        assert!(w[0] < 2.0 && w[1] > -2.0);
    }
}
