//! Denoising diffusion over latent vectors.
//!
//! The forward process noises `z_0` through `T` Gaussian steps with variances
//! `beta_t`. The reverse chain is parameterized by a network predicting the
//! transition mean `mu(z_t, t)` directly, with fixed variances `sigma_t^2`.
//!
//! Time steps are 1-based throughout: `t` ranges over `1..=T`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::tensor::Tensor;
use crate::vae::ln_2pi;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

/// The `beta_t` sequence of the forward process and its derived arrays.
///
/// Generative variances: `sigma_t^2 = beta_tilde_t` for `t >= 2`, and
/// `sigma_1^2 = beta_1`, the variance of the final decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
    sigma_sq: Vec<f64>,
}

pub fn make_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<VarianceSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "schedule needs at least one step".into(),
        ));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min} and {beta_max}"
        )));
    }
    let beta = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_min],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    VarianceSchedule::from_betas(beta)
}

impl VarianceSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<VarianceSchedule> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "every beta must lie in (0, 1), got {beta:?}"
            )));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let beta_tilde: Vec<f64> = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        let sigma_sq = (0..beta.len())
            .map(|i| if i == 0 { beta[0] } else { beta_tilde[i] })
            .collect();
        Ok(VarianceSchedule {
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
            sigma_sq,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "time step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn sigma_sq(&self, t: usize) -> f64 {
        self.sigma_sq[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Coefficients `(c0, ct)` of the forward posterior mean
    /// `c0 * z0 + ct * zt`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.index(t)?;
        let (ab, ab_prev) = (self.alpha_bar(t), self.alpha_bar(t - 1));
        Ok((
            ab_prev.sqrt() * self.beta(t) / (1.0 - ab),
            self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        ))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) noise`.
pub fn forward_marginal_sample(
    schedule: &VarianceSchedule,
    z0: &Tensor,
    t: usize,
    noise: &Tensor,
) -> Result<Tensor> {
    schedule.index(t)?;
    same_shape("forward_marginal_sample", z0, noise)?;
    let ab = schedule.alpha_bar(t);
    z0.scale(ab.sqrt()).add(&noise.scale((1.0 - ab).sqrt()))
}

/// Mean and variance of `q(z_{t-1} | z_t, z_0)`.
pub fn posterior_mean_var(
    schedule: &VarianceSchedule,
    z0: &Tensor,
    zt: &Tensor,
    t: usize,
) -> Result<(Tensor, f64)> {
    same_shape("posterior_mean_var", z0, zt)?;
    let (c0, ct) = schedule.posterior_coefficients(t)?;
    if t == 1 {
        return Ok((z0.clone(), 0.0));
    }
    Ok((z0.scale(c0).add(&zt.scale(ct))?, schedule.beta_tilde(t)))
}

/// Sinusoidal embedding of a time step.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// The network `mu(z_t, t)` of the reverse transitions.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    net: Mlp,
    embed_dim: usize,
    dim: usize,
}

impl DenoiserNet {
    pub fn new(
        dim: usize,
        embed_dim: usize,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Result<DenoiserNet> {
        let mut sizes = vec![dim + embed_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        Ok(DenoiserNet {
            net: Mlp::new(&sizes, activation, seed)?,
            embed_dim,
            dim,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Predicted mean for every row at a common time step.
    pub fn forward(&self, zt: &Tensor, t: usize) -> Result<Tensor> {
        self.forward_rows(zt, &vec![t; zt.rows()])
    }

    /// Predicted mean with a separate time step per row.
    pub fn forward_rows(&self, zt: &Tensor, ts: &[usize]) -> Result<Tensor> {
        if zt.rank() != 2 || zt.cols() != self.dim || ts.len() != zt.rows() {
            return Err(Error::ShapeMismatch {
                op: "denoiser",
                left: zt.shape().to_vec(),
                right: vec![ts.len(), self.dim],
            });
        }
        let input = if self.embed_dim == 0 {
            zt.clone()
        } else {
            let emb: Vec<f64> = ts
                .iter()
                .flat_map(|&t| time_embedding(t, self.embed_dim))
                .collect();
            zt.concat_cols(&Tensor::new(emb, vec![ts.len(), self.embed_dim])?)?
        };
        self.net.forward(&input)
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionPrior {
    pub schedule: VarianceSchedule,
    pub denoiser: DenoiserNet,
    dim: usize,
}

impl DiffusionPrior {
    pub fn new(schedule: VarianceSchedule, denoiser: DenoiserNet) -> DiffusionPrior {
        let dim = denoiser.dim;
        DiffusionPrior {
            schedule,
            denoiser,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.denoiser.net.params()
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.denoiser
            .net
            .named_params(&format!("{prefix}.denoiser"))
    }

    pub fn param_count(&self) -> usize {
        self.denoiser.net.param_count()
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        self.denoiser.net.set_params(params)
    }

    fn check_latents(&self, z0: &Tensor) -> Result<()> {
        if z0.rank() != 2 || z0.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "diffusion prior",
                left: z0.shape().to_vec(),
                right: vec![z0.rows(), self.dim],
            });
        }
        Ok(())
    }
}

fn normal_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    let data = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Tensor::new(data, vec![rows, cols])
}

/// Per-row weighted mean-matching loss at per-row time steps:
/// `||mu(z_t, t) - mu_tilde_t(z0, z_t)||^2 / (2 sigma_t^2)`.
///
/// Differentiable with respect to the denoiser and to `z0`.
pub fn ddpm_simple_loss_rows(
    prior: &DiffusionPrior,
    z0: &Tensor,
    ts: &[usize],
    noise: &Tensor,
) -> Result<Tensor> {
    prior.check_latents(z0)?;
    same_shape("ddpm_simple_loss", z0, noise)?;
    if ts.len() != z0.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} time steps for {} rows",
            ts.len(),
            z0.rows()
        )));
    }
    let s = &prior.schedule;
    let (rows, dim) = (z0.rows(), z0.cols());
    // Per-row coefficients expanded to [rows x dim] constants.
    let mut sqrt_ab = Vec::with_capacity(rows * dim);
    let mut sqrt_1mab = Vec::with_capacity(rows * dim);
    let mut c0 = Vec::with_capacity(rows * dim);
    let mut ct = Vec::with_capacity(rows * dim);
    let mut weight = Vec::with_capacity(rows * dim);
    for &t in ts {
        s.index(t)?;
        let ab = s.alpha_bar(t);
        let (a, b) = if t == 1 {
            (1.0, 0.0)
        } else {
            s.posterior_coefficients(t)?
        };
        for _ in 0..dim {
            sqrt_ab.push(ab.sqrt());
            sqrt_1mab.push((1.0 - ab).sqrt());
            c0.push(a);
            ct.push(b);
            weight.push(0.5 / s.sigma_sq(t));
        }
    }
    let mat = |v: Vec<f64>| Tensor::new(v, vec![rows, dim]);
    let zt = z0.mul(&mat(sqrt_ab)?)?.add(&noise.mul(&mat(sqrt_1mab)?)?)?;
    let target = z0.mul(&mat(c0)?)?.add(&zt.mul(&mat(ct)?)?)?;
    let predicted = prior.denoiser.forward_rows(&zt, ts)?;
    predicted
        .sub(&target)?
        .square()
        .mul(&mat(weight)?)?
        .sum(Some(1))
}

/// Batch mean of the weighted mean-matching loss at a single time step `t`.
pub fn ddpm_simple_loss(
    prior: &DiffusionPrior,
    z0: &Tensor,
    t: usize,
    noise: &Tensor,
) -> Result<Tensor> {
    prior.schedule.index(t)?;
    Ok(ddpm_simple_loss_rows(prior, z0, &vec![t; z0.rows()], noise)?.mean_all())
}

/// `KL[N(mq, vq I) || N(mp, vp I)]` per row of `[rows x dim]` means.
pub fn kl_isotropic(mq: &[f64], vq: f64, mp: &[f64], vp: f64, dim: usize) -> Vec<f64> {
    mq.chunks(dim)
        .zip(mp.chunks(dim))
        .map(|(a, b)| {
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
            0.5 * (dim as f64 * (vq / vp - 1.0 + (vp / vq).ln()) + sq / vp)
        })
        .collect()
}

/// Terms of the negative diffusion bound for one sampled trajectory, per row.
#[derive(Debug, Clone)]
pub struct DdpmTerms {
    /// `KL[q(z_T | z_0) || N(0, I)]`.
    pub endpoint_kl: Vec<f64>,
    /// `-log p(z_0 | z_1)`.
    pub decoder_nll: Vec<f64>,
    /// `KL[q(z_{t-1} | z_t, z_0) || p(z_{t-1} | z_t)]` for `t = 2..=T`,
    /// indexed by `t - 2`.
    pub transition_kl: Vec<Vec<f64>>,
}

impl DdpmTerms {
    /// Per-row negative bound: the sum of all terms.
    pub fn negative_bound(&self) -> Vec<f64> {
        (0..self.endpoint_kl.len())
            .map(|r| {
                self.endpoint_kl[r]
                    + self.decoder_nll[r]
                    + self.transition_kl.iter().map(|k| k[r]).sum::<f64>()
            })
            .collect()
    }

    /// Per-row `sum_{t>=2} KL_t + (-log p(z_0|z_1) - normalizer)`: the
    /// mean-matching parts of the bound.
    pub fn mean_matching(&self, schedule: &VarianceSchedule, dim: usize) -> Vec<f64> {
        let normalizer = 0.5 * dim as f64 * (ln_2pi() + schedule.sigma_sq(1).ln());
        (0..self.endpoint_kl.len())
            .map(|r| {
                self.decoder_nll[r] - normalizer
                    + self.transition_kl.iter().map(|k| k[r]).sum::<f64>()
            })
            .collect()
    }
}

/// Draws a forward trajectory `z_1..z_T` by chaining single-step kernels.
/// Element `t - 1` of the result is `z_t`.
pub fn forward_trajectory<R: Rng + ?Sized>(
    schedule: &VarianceSchedule,
    z0: &Tensor,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    let mut traj = Vec::with_capacity(schedule.steps());
    let mut prev = z0.detach();
    for t in 1..=schedule.steps() {
        let noise = normal_tensor(prev.rows(), prev.cols(), rng)?;
        let next = prev
            .scale(schedule.alpha(t).sqrt())
            .add(&noise.scale(schedule.beta(t).sqrt()))?;
        traj.push(next.clone());
        prev = next;
    }
    Ok(traj)
}

/// Closed-form terms of the decomposed negative bound along one trajectory.
pub fn ddpm_elbo_terms<R: Rng + ?Sized>(
    prior: &DiffusionPrior,
    z0: &Tensor,
    rng: &mut R,
) -> Result<DdpmTerms> {
    prior.check_latents(z0)?;
    let z0 = z0.detach();
    let s = &prior.schedule;
    let (dim, steps) = (prior.dim, s.steps());
    let traj = forward_trajectory(s, &z0, rng)?;

    let ab_t = s.alpha_bar(steps);
    let endpoint_kl = z0
        .data()
        .chunks(dim)
        .map(|row| {
            let sq: f64 = row.iter().map(|v| v * v).sum();
            0.5 * (ab_t * sq + dim as f64 * (-ab_t - (1.0 - ab_t).ln()))
        })
        .collect();

    let mu1 = prior.denoiser.forward(&traj[0], 1)?;
    let var1 = s.sigma_sq(1);
    let decoder_nll = z0
        .data()
        .chunks(dim)
        .zip(mu1.data().chunks(dim))
        .map(|(x, m)| {
            let sq: f64 = x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
            0.5 * (dim as f64 * (ln_2pi() + var1.ln()) + sq / var1)
        })
        .collect();

    let mut transition_kl = Vec::with_capacity(steps.saturating_sub(1));
    for t in 2..=steps {
        let zt = &traj[t - 1];
        let (mu_tilde, beta_tilde) = posterior_mean_var(s, &z0, zt, t)?;
        let mu = prior.denoiser.forward(zt, t)?;
        transition_kl.push(kl_isotropic(
            mu_tilde.data(),
            beta_tilde,
            mu.data(),
            s.sigma_sq(t),
            dim,
        ));
    }
    Ok(DdpmTerms {
        endpoint_kl,
        decoder_nll,
        transition_kl,
    })
}

/// Single-trajectory estimate of the lower bound on `log p(z0)` per row,
/// using the closed-form decomposition.
pub fn ddpm_elbo<R: Rng + ?Sized>(
    prior: &DiffusionPrior,
    z0: &Tensor,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(ddpm_elbo_terms(prior, z0, rng)?
        .negative_bound()
        .into_iter()
        .map(|v| -v)
        .collect())
}

fn isotropic_log_density(x: &[f64], mean: &[f64], var: f64, dim: usize) -> Vec<f64> {
    x.chunks(dim)
        .zip(mean.chunks(dim))
        .map(|(a, m)| {
            let sq: f64 = a.iter().zip(m).map(|(u, v)| (u - v).powi(2)).sum();
            -0.5 * (dim as f64 * (ln_2pi() + var.ln()) + sq / var)
        })
        .collect()
}

/// Single-trajectory estimate of the same bound as the plain log-ratio
/// `log p(z_{0:T}) - log q(z_{1:T} | z_0)`. Draws the trajectory exactly as
/// [`ddpm_elbo`] does, so equal seeds give equal trajectories.
pub fn ddpm_elbo_log_ratio<R: Rng + ?Sized>(
    prior: &DiffusionPrior,
    z0: &Tensor,
    rng: &mut R,
) -> Result<Vec<f64>> {
    prior.check_latents(z0)?;
    let z0 = z0.detach();
    let s = &prior.schedule;
    let (dim, steps) = (prior.dim, s.steps());
    let traj = forward_trajectory(s, &z0, rng)?;
    let zeros = vec![0.0; z0.numel()];
    let mut total = isotropic_log_density(traj[steps - 1].data(), &zeros, 1.0, dim);
    for t in 1..=steps {
        let prev = if t == 1 { &z0 } else { &traj[t - 2] };
        let zt = &traj[t - 1];
        let mu = prior.denoiser.forward(zt, t)?;
        let log_p = isotropic_log_density(prev.data(), mu.data(), s.sigma_sq(t), dim);
        let q_mean = prev.scale(s.alpha(t).sqrt());
        let log_q = isotropic_log_density(zt.data(), q_mean.data(), s.beta(t), dim);
        for r in 0..total.len() {
            total[r] += log_p[r] - log_q[r];
        }
    }
    Ok(total)
}

/// Ancestral sampling through the reverse chain. The final step returns the
/// predicted mean without noise.
pub fn ancestral_sample<R: Rng + ?Sized>(
    prior: &DiffusionPrior,
    n: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sample count must be positive".into(),
        ));
    }
    let s = &prior.schedule;
    let mut z = normal_tensor(n, prior.dim, rng)?;
    for t in (1..=s.steps()).rev() {
        let mean = prior.denoiser.forward(&z, t)?.detach();
        z = if t > 1 {
            let noise = normal_tensor(n, prior.dim, rng)?;
            mean.add(&noise.scale(s.sigma_sq(t).sqrt()))?
        } else {
            mean
        };
    }
    Ok(z)
}
