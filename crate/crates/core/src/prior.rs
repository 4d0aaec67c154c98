//! The latent prior as a tagged union with one bound/sample contract.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{ancestral_sample, ddpm_elbo, DiffusionPrior};
use crate::error::{Error, Result};
use crate::flow::FlowPrior;
use crate::tensor::Tensor;
use crate::vae::standard_normal_log_density;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    Gaussian,
    Flow,
    Diffusion,
}

impl PriorKind {
    pub fn name(self) -> &'static str {
        match self {
            PriorKind::Gaussian => "gaussian",
            PriorKind::Flow => "flow",
            PriorKind::Diffusion => "diffusion",
        }
    }
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PriorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(PriorKind::Gaussian),
            "flow" => Ok(PriorKind::Flow),
            "diffusion" => Ok(PriorKind::Diffusion),
            other => Err(format!(
                "unknown prior `{other}` (expected gaussian, flow or diffusion)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub enum PriorModel {
    /// Fixed `N(0, I)` over `dim` latent coordinates.
    Gaussian {
        dim: usize,
    },
    Flow(FlowPrior),
    Diffusion(DiffusionPrior),
}

impl PriorModel {
    pub fn kind(&self) -> PriorKind {
        match self {
            PriorModel::Gaussian { .. } => PriorKind::Gaussian,
            PriorModel::Flow(_) => PriorKind::Flow,
            PriorModel::Diffusion(_) => PriorKind::Diffusion,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PriorModel::Gaussian { dim } => *dim,
            PriorModel::Flow(f) => f.dim(),
            PriorModel::Diffusion(d) => d.dim(),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        match self {
            PriorModel::Gaussian { .. } => Vec::new(),
            PriorModel::Flow(f) => f.params(),
            PriorModel::Diffusion(d) => d.params(),
        }
    }

    /// Parameters named under `prior.`.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        match self {
            PriorModel::Gaussian { .. } => Vec::new(),
            PriorModel::Flow(f) => f.named_params("prior.flow"),
            PriorModel::Diffusion(d) => d.named_params("prior"),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            PriorModel::Gaussian { .. } => 0,
            PriorModel::Flow(f) => f.param_count(),
            PriorModel::Diffusion(d) => d.param_count(),
        }
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        match self {
            PriorModel::Gaussian { .. } if params.is_empty() => Ok(()),
            PriorModel::Gaussian { .. } => Err(Error::InvalidArgument(format!(
                "the gaussian prior has no parameters, got {}",
                params.len()
            ))),
            PriorModel::Flow(f) => f.set_params(params),
            PriorModel::Diffusion(d) => d.set_params(params),
        }
    }

    /// Draws `n` latent vectors.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        match self {
            PriorModel::Gaussian { dim } => {
                if n == 0 {
                    return Err(Error::InvalidArgument(
                        "sample count must be positive".into(),
                    ));
                }
                let data = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
                Tensor::new(data, vec![n, *dim])
            }
            PriorModel::Flow(f) => f.sample(n, rng),
            PriorModel::Diffusion(d) => ancestral_sample(d, n, rng),
        }
    }

    /// Per-row `log p(z)`, exact for the Gaussian and flow priors and a
    /// single-trajectory lower bound for the diffusion prior.
    pub fn log_prob_bound<R: Rng + ?Sized>(&self, z: &Tensor, rng: &mut R) -> Result<Vec<f64>> {
        match self {
            PriorModel::Gaussian { .. } => Ok(standard_normal_log_density(&z.detach())?.to_vec()),
            PriorModel::Flow(f) => Ok(f.log_prob(&z.detach())?.to_vec()),
            PriorModel::Diffusion(d) => ddpm_elbo(d, z, rng),
        }
    }
}
