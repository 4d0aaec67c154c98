//! Sample-quality and likelihood-bound metrics.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::ddpm_elbo_terms;
use crate::error::{Error, Result};
use crate::prior::PriorModel;
use crate::tensor::Tensor;
use crate::training::{VaeWithPrior, EVAL_CHUNK};
use crate::vae::{
    gaussian_log_density, kl_diag_gaussian_to_standard, log_likelihood, reparameterize,
};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    /// Monte-Carlo or bootstrap standard error.
    pub stderr: f64,
    pub n_samples: usize,
}

const BOOTSTRAP_ROUNDS: usize = 50;
const BOOTSTRAP_SEED: u64 = 0x006d_6d64;

/// Pooled RBF Gram matrix of `a` stacked on `b`.
struct Gram {
    k: Vec<f64>,
    m: usize,
    na: usize,
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "mmd_rbf",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::InvalidArgument(
            "mmd needs two nonempty sample sets".into(),
        ));
    }
    Ok(())
}

fn pooled<'a>(a: &'a Tensor, b: &'a Tensor) -> Vec<&'a [f64]> {
    let d = a.cols();
    a.data().chunks(d).chain(b.data().chunks(d)).collect()
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum()
}

/// Median pairwise Euclidean distance of the pooled sample.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let pts = pooled(a, b);
    let mut d: Vec<f64> = Vec::with_capacity(pts.len() * (pts.len() - 1) / 2);
    for i in 0..pts.len() {
        for j in 0..i {
            d.push(sq_dist(pts[i], pts[j]));
        }
    }
    if d.is_empty() {
        return Ok(1.0);
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let median = m.sqrt();
    Ok(if median > 0.0 { median } else { 1.0 })
}

impl Gram {
    fn new(a: &Tensor, b: &Tensor, bandwidth: f64) -> Gram {
        let pts = pooled(a, b);
        let m = pts.len();
        let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
        let mut k = vec![0.0; m * m];
        for i in 0..m {
            k[i * m + i] = 1.0;
            for j in 0..i {
                let v = (-gamma * sq_dist(pts[i], pts[j])).exp();
                k[i * m + j] = v;
                k[j * m + i] = v;
            }
        }
        Gram { k, m, na: a.rows() }
    }

    /// `c^T K c`.
    fn quad(&self, c: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.m {
            if c[i] == 0.0 {
                continue;
            }
            let row = &self.k[i * self.m..(i + 1) * self.m];
            total += c[i] * row.iter().zip(c).map(|(k, cj)| k * cj).sum::<f64>();
        }
        total
    }

    /// Weights whose quadratic form is the V-statistic for membership `in_a`.
    fn weights(&self, in_a: &[bool], counts: Option<&[f64]>) -> Vec<f64> {
        let na = in_a.iter().filter(|&&x| x).count() as f64;
        let nb = self.m as f64 - na;
        (0..self.m)
            .map(|i| {
                let w = counts.map_or(1.0, |c| c[i]);
                if in_a[i] {
                    w / na
                } else {
                    -w / nb
                }
            })
            .collect()
    }

    fn statistic(&self) -> f64 {
        let in_a: Vec<bool> = (0..self.m).map(|i| i < self.na).collect();
        self.quad(&self.weights(&in_a, None)).max(0.0)
    }
}

/// Biased MMD^2 with an RBF kernel; the bandwidth defaults to the median
/// pairwise distance. The standard error is from resampling each set.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidth: Option<f64>) -> Result<MetricReport> {
    check_pair(a, b)?;
    let bw = match bandwidth {
        Some(bw) if bw > 0.0 && bw.is_finite() => bw,
        Some(bw) => {
            return Err(Error::InvalidArgument(format!(
                "bandwidth {bw} must be positive"
            )))
        }
        None => median_bandwidth(a, b)?,
    };
    let gram = Gram::new(a, b, bw);
    let value = gram.statistic();

    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    let in_a: Vec<bool> = (0..gram.m).map(|i| i < gram.na).collect();
    let mut stats = Vec::with_capacity(BOOTSTRAP_ROUNDS);
    for _ in 0..BOOTSTRAP_ROUNDS {
        let mut counts = vec![0.0; gram.m];
        for _ in 0..gram.na {
            counts[rng.random_range(0..gram.na)] += 1.0;
        }
        for _ in gram.na..gram.m {
            counts[rng.random_range(gram.na..gram.m)] += 1.0;
        }
        stats.push(gram.quad(&gram.weights(&in_a, Some(&counts))));
    }
    let mean = stats.iter().sum::<f64>() / stats.len() as f64;
    let var = stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (stats.len() - 1) as f64;
    Ok(MetricReport {
        name: "mmd".into(),
        value,
        stderr: var.sqrt(),
        n_samples: gram.m,
    })
}

/// MMD^2 values under random relabelings of the pooled sample.
pub fn permutation_null(
    a: &Tensor,
    b: &Tensor,
    bandwidth: Option<f64>,
    rounds: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let bw = match bandwidth {
        Some(bw) => bw,
        None => median_bandwidth(a, b)?,
    };
    let gram = Gram::new(a, b, bw);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_a: Vec<bool> = (0..gram.m).map(|i| i < gram.na).collect();
    Ok((0..rounds)
        .map(|_| {
            in_a.shuffle(&mut rng);
            gram.quad(&gram.weights(&in_a, None)).max(0.0)
        })
        .collect())
}

/// Empirical `q`-quantile by the nearest-rank rule.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Per-row single-draw bound samples for a batch.
fn bound_draw<R: Rng + ?Sized>(model: &VaeWithPrior, x: &Tensor, rng: &mut R) -> Result<Vec<f64>> {
    let (n, h) = (x.rows(), model.vae.latent_dim());
    let post = model.vae.encode(x)?;
    let noise: Vec<f64> = (0..n * h).map(|_| rng.sample(StandardNormal)).collect();
    let z = reparameterize(&post, &Tensor::new(noise, vec![n, h])?)?;
    let recon = log_likelihood(&model.vae.decode(&z)?, x)?;
    let out = match &model.prior {
        PriorModel::Gaussian { .. } => recon.sub(&kl_diag_gaussian_to_standard(&post)?)?.to_vec(),
        prior => {
            let log_q = gaussian_log_density(&z, &post.mu, &post.logvar)?;
            let log_p = prior.log_prob_bound(&z, rng)?;
            recon
                .data()
                .iter()
                .zip(log_q.data())
                .zip(&log_p)
                .map(|((r, q), p)| r - q + p)
                .collect()
        }
    };
    Ok(out)
}

/// Mean per-datum evidence lower bound of `x`, each datum averaged over
/// `n_mc` draws. Uses the full diffusion bound for the diffusion prior.
///
/// The standard error is the spread of the per-datum averages over
/// `sqrt(rows)`.
pub fn heldout_elbo(
    model: &VaeWithPrior,
    x: &Tensor,
    n_mc: usize,
    seed: u64,
) -> Result<MetricReport> {
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::Dataset("held-out split is empty".into()));
    }
    if x.cols() != model.vae.data_dim() {
        return Err(Error::ShapeMismatch {
            op: "heldout_elbo",
            left: x.shape().to_vec(),
            right: vec![x.rows(), model.vae.data_dim()],
        });
    }
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_datum = Vec::with_capacity(x.rows());
    let indices: Vec<usize> = (0..x.rows()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = x.select_rows(chunk)?;
        let mut sums = vec![0.0; chunk.len()];
        for _ in 0..n_mc {
            for (s, v) in sums.iter_mut().zip(bound_draw(model, &batch, &mut rng)?) {
                *s += v;
            }
        }
        per_datum.extend(sums.into_iter().map(|s| s / n_mc as f64));
    }
    if per_datum.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("held-out bound".into()));
    }
    let n = per_datum.len() as f64;
    let mean = per_datum.iter().sum::<f64>() / n;
    let stderr = if per_datum.len() > 1 {
        (per_datum.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(MetricReport {
        name: "elbo".into(),
        value: mean,
        stderr,
        n_samples: per_datum.len() * n_mc,
    })
}

/// Averaged terms of the diffusion-prior bound, one entry per chain step.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundDiagnostics {
    /// Mean `log p(x | z_0)`.
    pub reconstruction: f64,
    /// Mean `-log q(z_0 | x)`.
    pub entropy: f64,
    /// Mean `KL[q(z_T | z_0) || N(0, I)]`.
    pub endpoint_kl: f64,
    /// Mean `-log p(z_0 | z_1)`.
    pub decoder_nll: f64,
    /// Mean transition KL for `t = 2..=T`, indexed by `t - 2`.
    pub transition_kl: Vec<f64>,
    pub n_samples: usize,
}

impl BoundDiagnostics {
    /// The bound reassembled from the averaged terms.
    pub fn elbo(&self) -> f64 {
        self.reconstruction + self.entropy
            - self.endpoint_kl
            - self.decoder_nll
            - self.transition_kl.iter().sum::<f64>()
    }
}

/// Breaks the diffusion-prior bound on `x` into its per-step terms. Draws
/// randomness in the same order as [`heldout_elbo`], so equal seeds give the
/// same bound.
pub fn diffusion_diagnostics(
    model: &VaeWithPrior,
    x: &Tensor,
    n_mc: usize,
    seed: u64,
) -> Result<BoundDiagnostics> {
    let PriorModel::Diffusion(prior) = &model.prior else {
        return Err(Error::InvalidArgument(format!(
            "per-step diagnostics need a diffusion prior, found {}",
            model.prior.kind()
        )));
    };
    if x.rank() != 2 || x.rows() == 0 || x.cols() != model.vae.data_dim() {
        return Err(Error::ShapeMismatch {
            op: "diffusion_diagnostics",
            left: x.shape().to_vec(),
            right: vec![x.rows(), model.vae.data_dim()],
        });
    }
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be positive".into()));
    }
    let h = model.vae.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = BoundDiagnostics {
        reconstruction: 0.0,
        entropy: 0.0,
        endpoint_kl: 0.0,
        decoder_nll: 0.0,
        transition_kl: vec![0.0; prior.steps().saturating_sub(1)],
        n_samples: x.rows() * n_mc,
    };
    let indices: Vec<usize> = (0..x.rows()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = x.select_rows(chunk)?;
        let n = chunk.len();
        for _ in 0..n_mc {
            let post = model.vae.encode(&batch)?;
            let noise: Vec<f64> = (0..n * h).map(|_| rng.sample(StandardNormal)).collect();
            let z = reparameterize(&post, &Tensor::new(noise, vec![n, h])?)?;
            let recon = log_likelihood(&model.vae.decode(&z)?, &batch)?;
            let log_q = gaussian_log_density(&z, &post.mu, &post.logvar)?;
            let terms = ddpm_elbo_terms(prior, &z, &mut rng)?;
            acc.reconstruction += recon.data().iter().sum::<f64>();
            acc.entropy -= log_q.data().iter().sum::<f64>();
            acc.endpoint_kl += terms.endpoint_kl.iter().sum::<f64>();
            acc.decoder_nll += terms.decoder_nll.iter().sum::<f64>();
            for (a, k) in acc.transition_kl.iter_mut().zip(&terms.transition_kl) {
                *a += k.iter().sum::<f64>();
            }
        }
    }
    let total = acc.n_samples as f64;
    acc.reconstruction /= total;
    acc.entropy /= total;
    acc.endpoint_kl /= total;
    acc.decoder_nll /= total;
    acc.transition_kl.iter_mut().for_each(|k| *k /= total);
    let finite = [
        acc.reconstruction,
        acc.entropy,
        acc.endpoint_kl,
        acc.decoder_nll,
    ]
    .iter()
    .chain(&acc.transition_kl)
    .all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite("bound diagnostics".into()));
    }
    Ok(acc)
}
