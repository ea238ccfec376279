//! Fully-connected network building blocks: layer specs, parameters,
//! truncated-normal initialization, and tape-based forward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub width: usize,
    pub batch_norm: bool,
    pub dropout: f64,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(width: usize, batch_norm: bool, dropout: f64, activation: Activation) -> Self {
        LayerSpec {
            width,
            batch_norm,
            dropout,
            activation,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(CoreError::invalid("LayerSpec", "zero width"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::invalid(
                "LayerSpec",
                format!("dropout {} outside [0,1)", self.dropout),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnParams {
    fn new(width: usize) -> Self {
        BnParams {
            gamma: Tensor::filled(vec![width], 1.0),
            beta: Tensor::zeros(vec![width]),
            running_mean: Tensor::zeros(vec![width]),
            running_var: Tensor::filled(vec![width], 1.0),
        }
    }

    /// Fold freshly observed batch statistics into the running estimates.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = momentum * *r + (1.0 - momentum) * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = momentum * *r + (1.0 - momentum) * v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
    pub bn: Option<BnParams>,
    pub spec: LayerSpec,
}

/// Forward mode: training applies dropout and batch statistics, eval is pure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A stack of fully-connected layers with the leaky-ReLU slope shared
/// across the net.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub in_dim: usize,
    pub layers: Vec<Layer>,
    pub leaky_slope: f64,
}

impl Mlp {
    /// Truncated-normal weights, zero biases, unit batch-norm scales.
    pub fn new(
        in_dim: usize,
        specs: &[LayerSpec],
        leaky_slope: f64,
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut fan_in = in_dim;
        for spec in specs {
            spec.validate()?;
            let weight = init_truncated_normal(&[fan_in, spec.width], 0.0, sigma, rng)?;
            layers.push(Layer {
                weight,
                bias: Tensor::zeros(vec![spec.width]),
                bn: spec.batch_norm.then(|| BnParams::new(spec.width)),
                spec: *spec,
            });
            fan_in = spec.width;
        }
        Ok(Mlp {
            in_dim,
            layers,
            leaky_slope,
        })
    }

    /// Same architecture with per-layer sigma scaled by `1/sqrt(fan_in)`.
    pub fn new_fan_in_scaled(
        in_dim: usize,
        specs: &[LayerSpec],
        leaky_slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut mlp = Mlp::new(in_dim, specs, leaky_slope, 1.0, rng)?;
        let mut fan_in = in_dim;
        for layer in &mut mlp.layers {
            let s = (1.0 / fan_in as f64).sqrt();
            for v in layer.weight.data_mut() {
                *v *= s;
            }
            fan_in = layer.spec.width;
        }
        Ok(mlp)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.spec.width).unwrap_or(self.in_dim)
    }

    /// Trainable tensors in canonical order: per layer `[weight, bias,
    /// gamma?, beta?]`. Running statistics are state, not parameters.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(bn) = &l.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn bn_params_mut(&mut self) -> Vec<&mut BnParams> {
        self.layers.iter_mut().filter_map(|l| l.bn.as_mut()).collect()
    }

    /// Insert all trainable tensors as tape leaves.
    ///
    /// `bn_slot` numbers train-mode batch-norm nodes across the whole model;
    /// the caller advances it in the same order it will apply updates.
    pub fn bind(&self, tape: &mut Tape, bn_slot: &mut usize) -> Result<MlpBinding> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let weight = tape.leaf(l.weight.clone())?;
            let bias = tape.leaf(l.bias.clone())?;
            let bn = match &l.bn {
                Some(bn) => {
                    let gamma = tape.leaf(bn.gamma.clone())?;
                    let beta = tape.leaf(bn.beta.clone())?;
                    let slot = *bn_slot;
                    *bn_slot += 1;
                    Some(BnBinding { gamma, beta, slot })
                }
                None => None,
            };
            layers.push(LayerBinding { weight, bias, bn });
        }
        Ok(MlpBinding { layers })
    }

    /// One-shot eval forward for callers that do not need gradients.
    pub fn forward_eval(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone())?;
        let mut slot = 0;
        let binding = self.bind(&mut tape, &mut slot)?;
        let y = binding.forward(&mut tape, self, x, Mode::Eval, None)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Debug, Clone)]
pub struct BnBinding {
    pub gamma: Var,
    pub beta: Var,
    pub slot: usize,
}

#[derive(Debug, Clone)]
pub struct LayerBinding {
    pub weight: Var,
    pub bias: Var,
    pub bn: Option<BnBinding>,
}

#[derive(Debug, Clone)]
pub struct MlpBinding {
    pub layers: Vec<LayerBinding>,
}

impl MlpBinding {
    /// Run the stack on the tape. Per layer: dropout on the layer input
    /// (training only), affine, batch norm where enabled, activation.
    pub fn forward(
        &self,
        tape: &mut Tape,
        mlp: &Mlp,
        input: Var,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if tape.value(input).cols() != mlp.in_dim {
            return Err(CoreError::shape(
                "mlp_forward",
                format!("input width {}", mlp.in_dim),
                format!("{}", tape.value(input).cols()),
            ));
        }
        let mut x = input;
        for (layer, binding) in mlp.layers.iter().zip(&self.layers) {
            if mode == Mode::Train && layer.spec.dropout > 0.0 {
                let rng = rng
                    .as_deref_mut()
                    .ok_or_else(|| CoreError::invalid("mlp_forward", "train mode requires an RNG"))?;
                x = tape.dropout(x, layer.spec.dropout, rng)?;
            }
            x = tape.matmul(x, binding.weight)?;
            x = tape.add_bias(x, binding.bias)?;
            if let (Some(bn), Some(bnb)) = (&layer.bn, &binding.bn) {
                x = match mode {
                    Mode::Train => {
                        tape.batch_norm_train(x, bnb.gamma, bnb.beta, BN_EPS, bnb.slot)?
                    }
                    Mode::Eval => tape.batch_norm_eval(
                        x,
                        bnb.gamma,
                        bnb.beta,
                        bn.running_mean.data(),
                        bn.running_var.data(),
                        BN_EPS,
                    )?,
                };
            }
            x = match layer.spec.activation {
                Activation::LeakyRelu => tape.leaky_relu(x, mlp.leaky_slope)?,
                Activation::Linear => x,
            };
        }
        Ok(x)
    }

    /// Gradient vars in the same canonical order as [`Mlp::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight);
            out.push(l.bias);
            if let Some(bn) = &l.bn {
                out.push(bn.gamma);
                out.push(bn.beta);
            }
        }
        out
    }
}

/// i.i.d. draws from `Normal(mu, sigma²)` resampled until they land within
/// `mu ± 2 sigma`; deterministic for a given RNG state.
pub fn init_truncated_normal(
    shape: &[usize],
    mu: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Err(CoreError::invalid(
            "init_truncated_normal",
            format!("sigma {sigma} must be positive"),
        ));
    }
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(CoreError::invalid("init_truncated_normal", "invalid shape"));
    }
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let x: f64 = rng.sample(StandardNormal);
            if x.abs() <= 2.0 {
                return mu + sigma * x;
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn leaky_specs(widths: &[usize]) -> Vec<LayerSpec> {
        widths
            .iter()
            .map(|&w| LayerSpec::new(w, false, 0.0, Activation::LeakyRelu))
            .collect()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::new(3, &leaky_specs(&[4, 2]), 0.01, 0.001, &mut rng).unwrap();
        for p in mlp.params_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        let x = Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        let y = mlp.forward_eval(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let specs = [LayerSpec::new(2, false, 0.0, Activation::Linear)];
        let mut mlp = Mlp::new(2, &specs, 0.01, 0.001, &mut rng).unwrap();
        let w = &mut mlp.layers[0].weight;
        w.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        mlp.layers[0].bias = Tensor::zeros(vec![2]);
        let x = Tensor::from_vec(vec![3, 2], vec![1.0, -2.0, 0.0, 4.5, 7.0, -0.25]).unwrap();
        let y = mlp.forward_eval(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn scalar_leaky_relu_matches_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let specs = [LayerSpec::new(1, false, 0.0, Activation::LeakyRelu)];
        let mut mlp = Mlp::new(1, &specs, 0.01, 0.001, &mut rng).unwrap();
        mlp.layers[0].weight.data_mut()[0] = 1.0;
        let x = Tensor::from_vec(vec![1, 1], vec![-2.0]).unwrap();
        let y = mlp.forward_eval(&x).unwrap();
        assert!((y.data()[0] - (-0.02)).abs() < 1e-15);
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let specs = [
            LayerSpec::new(8, true, 0.2, Activation::LeakyRelu),
            LayerSpec::new(4, false, 0.2, Activation::Linear),
        ];
        let mlp = Mlp::new(5, &specs, 0.01, 0.1, &mut rng).unwrap();
        let x = init_truncated_normal(&[3, 5], 0.0, 1.0, &mut rng).unwrap();
        let y1 = mlp.forward_eval(&x).unwrap();
        let y2 = mlp.forward_eval(&x).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn train_forward_reproducible_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let specs = [
            LayerSpec::new(8, true, 0.2, Activation::LeakyRelu),
            LayerSpec::new(4, false, 0.2, Activation::Linear),
        ];
        let mlp = Mlp::new(5, &specs, 0.01, 0.1, &mut rng).unwrap();
        let x = init_truncated_normal(&[4, 5], 0.0, 1.0, &mut rng).unwrap();
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone()).unwrap();
            let mut slot = 0;
            let binding = mlp.bind(&mut tape, &mut slot).unwrap();
            let mut drng = ChaCha8Rng::seed_from_u64(seed);
            let y = binding
                .forward(&mut tape, &mlp, xv, Mode::Train, Some(&mut drng))
                .unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(11), run(11));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(3, &leaky_specs(&[4]), 0.01, 0.001, &mut rng).unwrap();
        let x = Tensor::zeros(vec![2, 5]);
        assert!(mlp.forward_eval(&x).is_err());
    }

    #[test]
    fn truncated_normal_within_bounds_and_deterministic() {
        let mut rng1 = ChaCha8Rng::seed_from_u64(42);
        let mut rng2 = ChaCha8Rng::seed_from_u64(42);
        let a = init_truncated_normal(&[50, 10], 1.0, 0.5, &mut rng1).unwrap();
        let b = init_truncated_normal(&[50, 10], 1.0, 0.5, &mut rng2).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (v - 1.0).abs() <= 2.0 * 0.5));
    }

    #[test]
    fn truncated_normal_monte_carlo_std() {
        // std of a 2-sigma-truncated standard normal is about 0.8796
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = init_truncated_normal(&[1_000_000], 0.0, 1.0, &mut rng).unwrap();
        let n = t.numel() as f64;
        let mean: f64 = t.data().iter().sum::<f64>() / n;
        let var: f64 = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.880).abs() < 0.01, "std = {}", var.sqrt());
    }

    #[test]
    fn truncated_normal_rejects_bad_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(init_truncated_normal(&[2], 0.0, 0.0, &mut rng).is_err());
        assert!(init_truncated_normal(&[], 0.0, 1.0, &mut rng).is_err());
    }
}
