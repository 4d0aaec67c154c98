//! Multilayer perceptrons and the Adam optimizer.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{GradientMap, Tensor};

/// Derives an independent seed for a named sub-stream of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Identity => x.clone(),
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.softplus(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

/// One affine layer, `y = x Wᵀ + b` with `W: [out x in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        if x.rank() != 2 || x.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: x.shape().to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        let weight = match mask {
            Some(m) => self.weight.mul(m)?,
            None => self.weight.clone(),
        };
        x.matmul(&weight.transpose()?)?
            .add(&self.bias.expand_rows(x.rows())?)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    hidden: Activation,
    output: Activation,
}

impl Mlp {
    /// Xavier-uniform weights, zero biases, linear output.
    pub fn new(sizes: &[usize], hidden: Activation, seed: u64) -> Result<Mlp> {
        if sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least an input and an output size, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must be positive, got {sizes:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let weight: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| dist.sample(&mut rng))
                    .collect();
                Ok(Linear {
                    weight: Tensor::param(weight, vec![fan_out, fan_in])?,
                    bias: Tensor::param(vec![0.0; fan_out], vec![fan_out])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp {
            layers,
            hidden,
            output: Activation::Identity,
        })
    }

    pub fn with_output_activation(mut self, output: Activation) -> Mlp {
        self.output = output;
        self
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_impl(x, None)
    }

    /// Forward pass with a constant 0/1 mask multiplied into each weight.
    pub fn forward_masked(&self, x: &Tensor, masks: &[Tensor]) -> Result<Tensor> {
        if masks.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} masks for {} layers",
                masks.len(),
                self.layers.len()
            )));
        }
        self.forward_impl(x, Some(masks))
    }

    fn forward_impl(&self, x: &Tensor, masks: Option<&[Tensor]>) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h, masks.map(|m| &m[i]))?;
            h = if i == last {
                self.output.apply(&h)
            } else {
                self.hidden.apply(&h)
            };
        }
        Ok(h)
    }

    /// Zeroes the final layer so the network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.weight = Tensor::param(vec![0.0; last.weight.numel()], last.weight.shape().to_vec())
            .expect("shape already valid");
        last.bias = Tensor::param(vec![0.0; last.bias.numel()], last.bias.shape().to_vec())
            .expect("shape already valid");
    }

    /// Parameters in a fixed order: weight then bias for each layer.
    pub fn params(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), l.weight.clone()),
                    (format!("{prefix}.{i}.bias"), l.bias.clone()),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        2 * self.layers.len()
    }

    /// Replaces parameters from a slice laid out like [`Mlp::params`].
    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                self.param_count(),
                params.len()
            )));
        }
        for (layer, pair) in self.layers.iter_mut().zip(params.chunks(2)) {
            for (slot, new) in [(&mut layer.weight, &pair[0]), (&mut layer.bias, &pair[1])] {
                if slot.shape() != new.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "set_params",
                        left: slot.shape().to_vec(),
                        right: new.shape().to_vec(),
                    });
                }
                *slot = new.clone();
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Adam {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Restores a saved optimizer state.
    pub fn from_state(
        config: AdamConfig,
        step: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    ) -> Result<Adam> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(m, v)| m.len() != v.len())
        {
            return Err(Error::InvalidArgument(
                "moment buffers disagree in shape".into(),
            ));
        }
        Ok(Adam {
            config,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Applies one update to `params` in place. Parameters without a
    /// gradient entry are left untouched, as are their moments.
    pub fn step(&mut self, params: &mut [Tensor], grads: &GradientMap) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters but {} were given",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if self.first[i].len() != p.numel() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: vec![self.first[i].len()],
                    right: p.shape().to_vec(),
                });
            }
            if let Some(g) = grads.get(p) {
                if g.shape() != p.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        left: p.shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
            }
        }
        self.step = self
            .step
            .checked_add(1)
            .ok_or_else(|| Error::InvalidArgument("optimizer step counter overflow".into()))?;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(p) else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let mut data = p.to_vec();
            for (j, (&gj, w)) in g.data().iter().zip(data.iter_mut()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / correct1;
                let v_hat = v[j] / correct2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            *p = Tensor::param(data, p.shape().to_vec())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = Mlp::new(&[2, 4, 2], Activation::Relu, 7).unwrap();
        let b = Mlp::new(&[2, 4, 2], Activation::Relu, 7).unwrap();
        for (x, y) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(
                x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        for layer in a.layers() {
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_variance_matches_xavier() {
        let net = Mlp::new(&[256, 256], Activation::Identity, 3).unwrap();
        let w = net.layers()[0].weight.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / 512.0;
        assert!((var / expected - 1.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(Mlp::new(&[], Activation::Relu, 0).is_err());
        assert!(Mlp::new(&[3], Activation::Relu, 0).is_err());
        assert!(Mlp::new(&[3, 0, 2], Activation::Relu, 0).is_err());
    }

    #[test]
    fn zero_net_relu_output_is_zero() {
        let mut net = Mlp::new(&[3, 1], Activation::Relu, 1)
            .unwrap()
            .with_output_activation(Activation::Relu);
        net.zero_output_layer();
        let x = Tensor::new(vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5], vec![2, 3]).unwrap();
        assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = Mlp::new(&[2, 2], Activation::Relu, 1).unwrap();
        let eye = Tensor::param(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let zero = Tensor::param(vec![0.0, 0.0], vec![2]).unwrap();
        net.set_params(&[eye, zero]).unwrap();
        let x = Tensor::new(vec![1.5, -2.0, 0.25, 4.0], vec![2, 2]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let net = Mlp::new(&[3, 2], Activation::Relu, 1).unwrap();
        let x = Tensor::zeros(&[4, 2]).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = Mlp::new(&[3, 5, 2], Activation::Tanh, 11).unwrap();
        let x = Tensor::new(vec![0.2, -0.4, 0.9, 1.1, 0.3, -0.8], vec![2, 3]).unwrap();
        let report = grad_check(
            |p| Ok(net.forward(&p[0])?.square().sum_all()),
            &[x],
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn bias_free_linear_net_is_homogeneous() {
        let net = Mlp::new(&[3, 4, 2], Activation::Identity, 5).unwrap();
        let x = Tensor::new(vec![0.2, -0.4, 0.9], vec![1, 3]).unwrap();
        let fx = net.forward(&x).unwrap();
        let f2x = net.forward(&x.scale(2.5)).unwrap();
        for (a, b) in fx.data().iter().zip(f2x.data()) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
    }

    fn scalar_param(v: f64) -> Tensor {
        Tensor::param(vec![v], vec![1]).unwrap()
    }

    fn grads_for(p: &Tensor, g: f64) -> GradientMap {
        // d/dp (g * p) = g
        p.scale(g).sum_all().backward().unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = vec![scalar_param(1.0)];
        let grads = grads_for(&params[0], 1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut params, &grads).unwrap();
        let expected = 1.0 - 5e-4 * 1.0 / (1.0 + 1e-8);
        assert!((params[0].item() - expected).abs() < 1e-15);

        let mut params = vec![scalar_param(1.0)];
        let grads = grads_for(&params[0], -1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut params, &grads).unwrap();
        assert!((params[0].item() - (2.0 - expected)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_changes_nothing() {
        let mut params = vec![scalar_param(0.7)];
        let grads = grads_for(&params[0], 0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params[0].item(), 0.7);
        assert_eq!(adam.first_moments()[0], vec![0.0]);
        assert_eq!(adam.second_moments()[0], vec![0.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_skips_parameters_without_gradients() {
        let mut params = vec![scalar_param(0.7), scalar_param(-0.2)];
        let grads = grads_for(&params[0], 3.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut params, &grads).unwrap();
        assert_ne!(params[0].item(), 0.7);
        assert_eq!(params[1].item(), -0.2);
    }

    #[test]
    fn adam_rejects_changed_parameter_shapes() {
        let mut params = vec![scalar_param(0.7)];
        let grads = grads_for(&params[0], 1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut params, &grads).unwrap();
        let mut other = vec![Tensor::param(vec![0.0, 0.0], vec![2]).unwrap()];
        let grads = other[0].sum_all().backward().unwrap();
        assert!(adam.step(&mut other, &grads).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(9, 4), derive_seed(9, 4));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn adam_first_step_is_bounded_by_lr(g in -1e6f64..1e6, p0 in -10.0f64..10.0) {
                let mut params = vec![scalar_param(p0)];
                let grads = grads_for(&params[0], g);
                let mut adam = Adam::new(AdamConfig::default());
                adam.step(&mut params, &grads).unwrap();
                // Allow one rounding of the update at the magnitude of p0.
                let slack = 2.0 * f64::EPSILON * p0.abs().max(1.0);
                prop_assert!((params[0].item() - p0).abs() <= 5e-4 + slack);
            }
        }
    }
}
