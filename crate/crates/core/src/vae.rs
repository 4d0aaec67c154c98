//! Encoder, decoder and the per-sample terms of the VAE evidence lower bound.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::{derive_seed, Activation, Mlp};
use crate::tensor::Tensor;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodKind {
    Gaussian,
    Bernoulli,
}

impl LikelihoodKind {
    pub fn name(self) -> &'static str {
        match self {
            LikelihoodKind::Gaussian => "gaussian",
            LikelihoodKind::Bernoulli => "bernoulli",
        }
    }
}

impl std::str::FromStr for LikelihoodKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(LikelihoodKind::Gaussian),
            "bernoulli" => Ok(LikelihoodKind::Bernoulli),
            other => Err(format!("unknown likelihood `{other}`")),
        }
    }
}

/// How the Gaussian decoder models its variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderVariance {
    /// One learned log-variance per data dimension, shared across inputs.
    Shared,
    /// A log-variance head on the decoder network.
    Full,
}

impl DecoderVariance {
    pub fn name(self) -> &'static str {
        match self {
            DecoderVariance::Shared => "shared",
            DecoderVariance::Full => "full",
        }
    }
}

impl std::str::FromStr for DecoderVariance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "shared" => Ok(DecoderVariance::Shared),
            "full" => Ok(DecoderVariance::Full),
            other => Err(format!("unknown decoder variance `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    /// Natural log of the variance, clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Tensor,
}

#[derive(Debug, Clone)]
pub enum LikelihoodParams {
    Gaussian { mu: Tensor, logvar: Tensor },
    Bernoulli { logits: Tensor },
}

impl LikelihoodParams {
    /// Decoder mean: `mu` for Gaussian, `sigmoid(logits)` for Bernoulli.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            LikelihoodParams::Gaussian { mu, .. } => mu.to_vec(),
            LikelihoodParams::Bernoulli { logits } => logits
                .data()
                .iter()
                .map(|&l| 1.0 / (1.0 + (-l).exp()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeArchitecture {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub likelihood: LikelihoodKind,
    pub decoder_variance: DecoderVariance,
    pub decoder_logvar_init: f64,
}

#[derive(Debug, Clone)]
pub struct VaeModel {
    encoder: Mlp,
    decoder: Mlp,
    decoder_logvar: Option<Tensor>,
    arch: VaeArchitecture,
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

impl VaeModel {
    pub fn new(arch: VaeArchitecture, seed: u64) -> Result<VaeModel> {
        if arch.data_dim == 0 || arch.latent_dim == 0 {
            return Err(Error::InvalidArgument(
                "data and latent dimensions must be positive".into(),
            ));
        }
        let (d, h) = (arch.data_dim, arch.latent_dim);
        let encoder = Mlp::new(
            &layer_sizes(d, &arch.encoder_hidden, 2 * h),
            arch.activation,
            derive_seed(seed, 1),
        )?;
        let full_head = arch.likelihood == LikelihoodKind::Gaussian
            && arch.decoder_variance == DecoderVariance::Full;
        let decoder_out = if full_head { 2 * d } else { d };
        let decoder = Mlp::new(
            &layer_sizes(h, &arch.decoder_hidden, decoder_out),
            arch.activation,
            derive_seed(seed, 2),
        )?;
        let decoder_logvar = (arch.likelihood == LikelihoodKind::Gaussian
            && arch.decoder_variance == DecoderVariance::Shared)
            .then(|| Tensor::param(vec![arch.decoder_logvar_init; d], vec![d]))
            .transpose()?;
        Ok(VaeModel {
            encoder,
            decoder,
            decoder_logvar,
            arch,
        })
    }

    pub fn architecture(&self) -> &VaeArchitecture {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    pub fn encode(&self, x: &Tensor) -> Result<GaussianPosterior> {
        if x.rank() != 2 || x.cols() != self.arch.data_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: x.shape().to_vec(),
                right: vec![x.rows(), self.arch.data_dim],
            });
        }
        let h = self.arch.latent_dim;
        let out = self.encoder.forward(x)?;
        Ok(GaussianPosterior {
            mu: out.narrow_cols(0, h)?,
            logvar: out.narrow_cols(h, h)?.clamp(LOGVAR_MIN, LOGVAR_MAX),
        })
    }

    pub fn decode(&self, z: &Tensor) -> Result<LikelihoodParams> {
        if z.rank() != 2 || z.cols() != self.arch.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "decode",
                left: z.shape().to_vec(),
                right: vec![z.rows(), self.arch.latent_dim],
            });
        }
        let d = self.arch.data_dim;
        let out = self.decoder.forward(z)?;
        Ok(match self.arch.likelihood {
            LikelihoodKind::Bernoulli => LikelihoodParams::Bernoulli { logits: out },
            LikelihoodKind::Gaussian => match &self.decoder_logvar {
                Some(shared) => LikelihoodParams::Gaussian {
                    mu: out,
                    logvar: shared.expand_rows(z.rows())?.clamp(LOGVAR_MIN, LOGVAR_MAX),
                },
                None => LikelihoodParams::Gaussian {
                    mu: out.narrow_cols(0, d)?,
                    logvar: out.narrow_cols(d, d)?.clamp(LOGVAR_MIN, LOGVAR_MAX),
                },
            },
        })
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = self.encoder.params();
        out.extend(self.decoder.params());
        out.extend(self.decoder_logvar.iter().cloned());
        out
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.encoder.named_params("encoder");
        out.extend(self.decoder.named_params("decoder"));
        if let Some(lv) = &self.decoder_logvar {
            out.push(("decoder.logvar".to_string(), lv.clone()));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.decoder.param_count()
            + usize::from(self.decoder_logvar.is_some())
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} VAE parameter tensors, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let ne = self.encoder.param_count();
        let nd = self.decoder.param_count();
        self.encoder.set_params(&params[..ne])?;
        self.decoder.set_params(&params[ne..ne + nd])?;
        if let Some(lv) = &mut self.decoder_logvar {
            let new = &params[ne + nd];
            if new.shape() != lv.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_params",
                    left: lv.shape().to_vec(),
                    right: new.shape().to_vec(),
                });
            }
            *lv = new.clone();
        }
        Ok(())
    }
}

/// `z = mu + exp(logvar / 2) * noise`.
pub fn reparameterize(post: &GaussianPosterior, noise: &Tensor) -> Result<Tensor> {
    if noise.shape() != post.mu.shape() {
        return Err(Error::ShapeMismatch {
            op: "reparameterize",
            left: post.mu.shape().to_vec(),
            right: noise.shape().to_vec(),
        });
    }
    post.mu.add(&post.logvar.scale(0.5).exp().mul(noise)?)
}

fn require_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Per-row log density of `x` under the decoder's likelihood.
pub fn log_likelihood(params: &LikelihoodParams, x: &Tensor) -> Result<Tensor> {
    match params {
        LikelihoodParams::Gaussian { mu, logvar } => gaussian_log_density(x, mu, logvar),
        LikelihoodParams::Bernoulli { logits } => {
            require_same("log_likelihood", logits, x)?;
            if let Some(bad) = x.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::Domain {
                    op: "bernoulli log_likelihood",
                    detail: format!("observation {bad} is not binary"),
                });
            }
            // x * l - softplus(l)
            x.mul(logits)?.sub(&logits.softplus())?.sum(Some(1))
        }
    }
}

/// Per-row log density of a diagonal Gaussian.
pub fn gaussian_log_density(z: &Tensor, mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    require_same("gaussian_log_density", z, mu)?;
    require_same("gaussian_log_density", z, logvar)?;
    let sq = z.sub(mu)?.square().mul(&logvar.neg().exp())?;
    sq.add(logvar)?.add_scalar(LN_2PI).scale(-0.5).sum(Some(1))
}

/// Per-row log density under `N(0, I)`.
pub fn standard_normal_log_density(z: &Tensor) -> Result<Tensor> {
    if z.rank() != 2 {
        return Err(Error::InvalidArgument(
            "expected a [batch x dim] tensor".into(),
        ));
    }
    z.square().add_scalar(LN_2PI).scale(-0.5).sum(Some(1))
}

/// `KL[N(mu, diag exp(logvar)) || N(0, I)]` per row.
pub fn kl_diag_gaussian_to_standard(post: &GaussianPosterior) -> Result<Tensor> {
    require_same("kl_diag_gaussian_to_standard", &post.mu, &post.logvar)?;
    post.mu
        .square()
        .add(&post.logvar.exp())?
        .sub(&post.logvar)?
        .add_scalar(-1.0)
        .scale(0.5)
        .sum(Some(1))
}

pub(crate) fn ln_2pi() -> f64 {
    (2.0 * PI).ln()
}
