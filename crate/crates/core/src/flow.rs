//! Masked autoregressive affine flow used as a learned latent prior.
//!
//! Each step maps `z` to `u` with `u_i = (z_i - shift_i) * exp(-log_scale_i)`
//! where `shift_i` and `log_scale_i` depend only on the coordinates that
//! precede `i` in the step's ordering. Density evaluation is a single
//! parallel pass; sampling inverts each step one coordinate at a time.
//! Consecutive steps alternate between the natural and reversed ordering.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{derive_seed, Activation, Mlp};
use crate::tensor::Tensor;
use crate::vae::standard_normal_log_density;

pub const FLOW_STEPS: usize = 3;
pub const LOG_SCALE_LIMIT: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct AffineFlowStep {
    conditioner: Mlp,
    masks: Vec<Tensor>,
    /// `order[k]` is the coordinate processed k-th.
    order: Vec<usize>,
}

impl AffineFlowStep {
    pub fn new(
        dim: usize,
        hidden: &[usize],
        order: Vec<usize>,
        seed: u64,
    ) -> Result<AffineFlowStep> {
        if order.len() != dim || {
            let mut seen = order.clone();
            seen.sort_unstable();
            seen != (0..dim).collect::<Vec<_>>()
        } {
            return Err(Error::InvalidArgument(format!(
                "{order:?} is not a permutation of 0..{dim}"
            )));
        }
        let mut sizes = vec![dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * dim);
        let mut conditioner = Mlp::new(&sizes, Activation::Relu, seed)?;
        conditioner.zero_output_layer();
        let masks = made_masks(&order, &sizes)?;
        Ok(AffineFlowStep {
            conditioner,
            masks,
            order,
        })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn conditioner(&self) -> &Mlp {
        &self.conditioner
    }

    pub fn conditioner_mut(&mut self) -> &mut Mlp {
        &mut self.conditioner
    }

    /// `(shift, log_scale)`, each `[batch x dim]`.
    pub fn shift_and_log_scale(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let dim = self.order.len();
        let out = self.conditioner.forward_masked(x, &self.masks)?;
        Ok((
            out.narrow_cols(0, dim)?,
            out.narrow_cols(dim, dim)?
                .clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT),
        ))
    }

    /// Returns `(u, log|det du/dz|)` with the log-determinant per row.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let (shift, log_scale) = self.shift_and_log_scale(z)?;
        let u = z.sub(&shift)?.mul(&log_scale.neg().exp())?;
        Ok((u, log_scale.neg().sum(Some(1))?))
    }

    /// Inverse of [`AffineFlowStep::forward`], computed without gradients.
    pub fn inverse(&self, u: &Tensor) -> Result<Tensor> {
        let (rows, dim) = (u.rows(), self.order.len());
        let u = u.detach();
        let mut z = vec![0.0; rows * dim];
        for &coord in &self.order {
            let current = Tensor::new(z.clone(), vec![rows, dim])?;
            let (shift, log_scale) = self.shift_and_log_scale(&current)?;
            for r in 0..rows {
                let k = r * dim + coord;
                z[k] = u.data()[k] * log_scale.data()[k].exp() + shift.data()[k];
            }
        }
        Tensor::new(z, vec![rows, dim])
    }
}

/// Autoregressive masks for a conditioner with layer `sizes`
/// (`[dim, hidden.., 2 * dim]`).
fn made_masks(order: &[usize], sizes: &[usize]) -> Result<Vec<Tensor>> {
    let dim = order.len();
    let mut input_degree = vec![0usize; dim];
    for (rank, &coord) in order.iter().enumerate() {
        input_degree[coord] = rank + 1;
    }
    let span = dim.saturating_sub(1).max(1);
    let mut prev: Vec<usize> = input_degree.clone();
    let mut masks = Vec::with_capacity(sizes.len() - 1);
    for (layer, w) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let is_output = layer == sizes.len() - 2;
        let degrees: Vec<usize> = if is_output {
            (0..fan_out).map(|o| input_degree[o % dim]).collect()
        } else {
            (0..fan_out).map(|k| k % span + 1).collect()
        };
        let mut data = vec![0.0; fan_out * fan_in];
        for o in 0..fan_out {
            for i in 0..fan_in {
                let allowed = if is_output {
                    degrees[o] > prev[i]
                } else {
                    degrees[o] >= prev[i]
                };
                if allowed {
                    data[o * fan_in + i] = 1.0;
                }
            }
        }
        masks.push(Tensor::new(data, vec![fan_out, fan_in])?);
        prev = degrees;
    }
    Ok(masks)
}

#[derive(Debug, Clone)]
pub struct FlowPrior {
    steps: Vec<AffineFlowStep>,
    dim: usize,
}

impl FlowPrior {
    /// A three-step flow initialized to the identity map.
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Result<FlowPrior> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "flow dimension must be positive".into(),
            ));
        }
        let steps = (0..FLOW_STEPS)
            .map(|k| {
                let mut order: Vec<usize> = (0..dim).collect();
                if k % 2 == 1 {
                    order.reverse();
                }
                AffineFlowStep::new(dim, hidden, order, derive_seed(seed, 100 + k as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FlowPrior { steps, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> &[AffineFlowStep] {
        &self.steps
    }

    pub fn steps_mut(&mut self) -> &mut [AffineFlowStep] {
        &mut self.steps
    }

    fn check_width(&self, z: &Tensor) -> Result<()> {
        if z.rank() != 2 || z.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "flow",
                left: z.shape().to_vec(),
                right: vec![z.rows(), self.dim],
            });
        }
        Ok(())
    }

    /// Maps `z` to base space. Returns `(u, summed log|det J|)` per row.
    pub fn to_base(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_width(z)?;
        let mut x = z.clone();
        let mut logdet: Option<Tensor> = None;
        for step in &self.steps {
            let (u, ld) = step.forward(&x)?;
            logdet = Some(match logdet {
                Some(acc) => acc.add(&ld)?,
                None => ld,
            });
            x = u;
        }
        Ok((x, logdet.expect("flow has steps")))
    }

    pub fn from_base(&self, u: &Tensor) -> Result<Tensor> {
        self.check_width(u)?;
        let mut x = u.detach();
        for step in self.steps.iter().rev() {
            x = step.inverse(&x)?;
        }
        Ok(x)
    }

    /// Per-row log density `log N(u; 0, I) + log|det du/dz|`.
    pub fn log_prob(&self, z: &Tensor) -> Result<Tensor> {
        let (u, logdet) = self.to_base(z)?;
        standard_normal_log_density(&u)?.add(&logdet)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "sample count must be positive".into(),
            ));
        }
        let base: Vec<f64> = (0..n * self.dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.from_base(&Tensor::new(base, vec![n, self.dim])?)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.steps
            .iter()
            .flat_map(|s| s.conditioner.params())
            .collect()
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.steps
            .iter()
            .enumerate()
            .flat_map(|(k, s)| s.conditioner.named_params(&format!("{prefix}.step{k}")))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.steps.iter().map(|s| s.conditioner.param_count()).sum()
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} flow parameter tensors, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut offset = 0;
        for step in &mut self.steps {
            let n = step.conditioner.param_count();
            step.conditioner.set_params(&params[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }
}
