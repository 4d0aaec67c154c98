//! Joint VAE and prior objective, the epoch loop and model selection.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::config::{TimeSampling, TrainConfig};
use crate::data::{load_idx_images, make_toy_dataset, Dataset, Split};
use crate::diffusion::{
    ddpm_simple_loss_rows, make_schedule, DenoiserNet, DiffusionPrior, ScheduleKind,
};
use crate::error::{Error, Result};
use crate::flow::FlowPrior;
use crate::nn::{derive_seed, Adam, AdamConfig};
use crate::prior::{PriorKind, PriorModel};
use crate::tensor::Tensor;
use crate::vae::{
    gaussian_log_density, kl_diag_gaussian_to_standard, log_likelihood, reparameterize,
    VaeArchitecture, VaeModel,
};

/// Seed streams derived from the run seed.
const VAE_STREAM: u64 = 10;
const PRIOR_STREAM: u64 = 20;
const SHUFFLE_STREAM: u64 = 30;
const LOSS_STREAM: u64 = 40;
pub const VALIDATION_STREAM: u64 = 50;

/// Rows per chunk when evaluating a whole split.
pub const EVAL_CHUNK: usize = 512;

/// Batch means of the objective and its parts.
///
/// `total = -reconstruction + prior_term` for the Gaussian prior, and
/// `total = -reconstruction - entropy + prior_term` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    /// `E[log p(x | z0)]`.
    pub reconstruction: f64,
    /// `-E[log q(z0 | x)]`.
    pub entropy: f64,
    /// Closed-form KL, `-log p_flow(z0)` or the sampled diffusion penalty.
    pub prior_term: f64,
}

impl LossBreakdown {
    pub fn recombine(&self, kind: PriorKind) -> f64 {
        match kind {
            PriorKind::Gaussian => -self.reconstruction + self.prior_term,
            PriorKind::Flow | PriorKind::Diffusion => {
                -self.reconstruction - self.entropy + self.prior_term
            }
        }
    }

    fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.total += weight * other.total;
        self.reconstruction += weight * other.reconstruction;
        self.entropy += weight * other.entropy;
        self.prior_term += weight * other.prior_term;
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.reconstruction,
            self.entropy,
            self.prior_term,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} reconstruction={} entropy={} prior_term={}",
            self.total, self.reconstruction, self.entropy, self.prior_term
        )
    }
}

/// A VAE together with its latent prior.
#[derive(Debug, Clone)]
pub struct VaeWithPrior {
    pub vae: VaeModel,
    pub prior: PriorModel,
}

impl VaeWithPrior {
    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.vae.params();
        p.extend(self.prior.params());
        p
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut p = self.vae.named_params();
        p.extend(self.prior.named_params());
        p
    }

    pub fn param_count(&self) -> usize {
        self.vae.param_count() + self.prior.param_count()
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        let n = self.vae.param_count();
        if params.len() != self.param_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                self.param_count(),
                params.len()
            )));
        }
        self.vae.set_params(&params[..n])?;
        self.prior.set_params(&params[n..])
    }

    /// Draws `n` observations: latent from the prior, then the decoder mean,
    /// or a draw from the likelihood when `draw_pixels` is set.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        n: usize,
        draw_pixels: bool,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let z = self.prior.sample(n, rng)?;
        let params = self.vae.decode(&z)?;
        let mean = params.mean();
        if !draw_pixels {
            return Ok(mean);
        }
        Ok(match params {
            crate::vae::LikelihoodParams::Gaussian { logvar, .. } => mean
                .iter()
                .zip(logvar.data())
                .map(|(m, lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            crate::vae::LikelihoodParams::Bernoulli { .. } => mean
                .iter()
                .map(|&p| f64::from(u8::from(rng.random::<f64>() < p)))
                .collect(),
        })
    }
}

pub fn build_model(config: &TrainConfig, data_dim: usize) -> Result<VaeWithPrior> {
    let h = config.latent_dim;
    let arch = VaeArchitecture {
        data_dim,
        latent_dim: h,
        encoder_hidden: config.encoder_hidden.clone(),
        decoder_hidden: config.decoder_hidden.clone(),
        activation: config.activation,
        likelihood: config.likelihood,
        decoder_variance: config.decoder_variance,
        decoder_logvar_init: config.decoder_logvar_init,
    };
    let vae = VaeModel::new(arch, derive_seed(config.seed, VAE_STREAM))?;
    let prior_seed = derive_seed(config.seed, PRIOR_STREAM);
    let prior = match config.prior {
        PriorKind::Gaussian => PriorModel::Gaussian { dim: h },
        PriorKind::Flow => PriorModel::Flow(FlowPrior::new(h, &config.flow_hidden, prior_seed)?),
        PriorKind::Diffusion => {
            let steps = config
                .steps
                .ok_or_else(|| crate::error::ConfigError::MissingKey("T".into()))?;
            let schedule = make_schedule(
                ScheduleKind::Linear,
                steps,
                config.beta_min,
                config.beta_max,
            )?;
            let denoiser = DenoiserNet::new(
                h,
                config.time_embed_dim,
                &config.denoiser_hidden,
                config.activation,
                prior_seed,
            )?;
            PriorModel::Diffusion(DiffusionPrior::new(schedule, denoiser))
        }
    };
    Ok(VaeWithPrior { vae, prior })
}

fn normal_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    let data = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Tensor::new(data, vec![rows, cols])
}

pub struct JointLoss {
    /// Differentiable scalar objective.
    pub tensor: Tensor,
    pub breakdown: LossBreakdown,
}

/// Minimization objective on a batch `x`, differentiable with respect to
/// the encoder, decoder and prior jointly.
///
/// Draw order: reparameterization noise, then (diffusion only) time steps
/// and forward-process noise. The diffusion penalty is `T` times the
/// weighted mean-matching loss at the sampled steps, an unbiased estimate of
/// the sum over all steps.
pub fn joint_loss<R: Rng + ?Sized>(
    model: &VaeWithPrior,
    x: &Tensor,
    rng: &mut R,
    t_sampling: TimeSampling,
) -> Result<JointLoss> {
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::InvalidArgument(
            "joint loss needs a nonempty [batch x dim] tensor".into(),
        ));
    }
    let (n, h) = (x.rows(), model.vae.latent_dim());
    let post = model.vae.encode(x)?;
    let z0 = reparameterize(&post, &normal_tensor(n, h, rng)?)?;
    let reconstruction = log_likelihood(&model.vae.decode(&z0)?, x)?.mean_all();
    let entropy = gaussian_log_density(&z0, &post.mu, &post.logvar)?
        .mean_all()
        .neg();
    let prior_term = match &model.prior {
        PriorModel::Gaussian { .. } => kl_diag_gaussian_to_standard(&post)?.mean_all(),
        PriorModel::Flow(flow) => flow.log_prob(&z0)?.mean_all().neg(),
        PriorModel::Diffusion(diffusion) => {
            let steps = diffusion.steps();
            let ts = match t_sampling {
                TimeSampling::Batch => vec![rng.random_range(1..=steps); n],
                TimeSampling::Element => (0..n).map(|_| rng.random_range(1..=steps)).collect(),
            };
            let noise = normal_tensor(n, h, rng)?;
            ddpm_simple_loss_rows(diffusion, &z0, &ts, &noise)?
                .mean_all()
                .scale(steps as f64)
        }
    };
    let total = match model.prior.kind() {
        PriorKind::Gaussian => reconstruction.neg().add(&prior_term)?,
        PriorKind::Flow | PriorKind::Diffusion => {
            reconstruction.neg().sub(&entropy)?.add(&prior_term)?
        }
    };
    let breakdown = LossBreakdown {
        total: total.item(),
        reconstruction: reconstruction.item(),
        entropy: entropy.item(),
        prior_term: prior_term.item(),
    };
    if !breakdown.is_finite() {
        return Err(Error::NonFiniteLoss(breakdown));
    }
    Ok(JointLoss {
        tensor: total,
        breakdown,
    })
}

/// The joint objective over a whole split, evaluated in chunks of
/// [`EVAL_CHUNK`] rows with per-row time steps and a fixed seed.
pub fn evaluate_objective(model: &VaeWithPrior, x: &Tensor, seed: u64) -> Result<LossBreakdown> {
    if x.rows() == 0 {
        return Err(Error::Dataset("cannot evaluate on an empty split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = LossBreakdown::default();
    let indices: Vec<usize> = (0..x.rows()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = x.select_rows(chunk)?;
        let loss = joint_loss(model, &batch, &mut rng, TimeSampling::Element)?;
        acc.accumulate(&loss.breakdown, chunk.len() as f64 / x.rows() as f64);
    }
    Ok(acc)
}

/// Seed of the fixed validation noise for a run.
pub fn validation_seed(config: &TrainConfig) -> u64 {
    derive_seed(config.seed, VALIDATION_STREAM)
}

pub fn load_dataset(config: &TrainConfig) -> Result<Dataset> {
    let mut ds = match config.dataset.as_str() {
        "idx" => {
            let path = config
                .idx_path
                .as_ref()
                .ok_or_else(|| crate::error::ConfigError::MissingKey("idx_path".into()))?;
            load_idx_images(Path::new(path), config.binarize)?
        }
        name => make_toy_dataset(name.parse()?, config.n_samples, config.data_seed)?,
    };
    ds.resplit(config.validation_fraction, derive_seed(config.data_seed, 1))?;
    Ok(ds)
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    pub train: LossBreakdown,
    pub validation: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VaeWithPrior,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub optimizer_steps: u64,
}

pub const METRICS_HEADER: &str = "epoch,split,total,reconstruction,entropy,prior_term";

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for rec in &self.history {
            for (split, b) in [("train", &rec.train), ("validation", &rec.validation)] {
                out.push_str(&format!(
                    "{},{split},{},{},{},{}\n",
                    rec.epoch, b.total, b.reconstruction, b.entropy, b.prior_term
                ));
            }
        }
        out
    }

    /// Writes `best.ckpt`, `final.ckpt` and `metrics.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.best.save(&dir.join("best.ckpt"))?;
        self.last.save(&dir.join("final.ckpt"))?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        Ok(())
    }
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let ds = load_dataset(config)?;
    train_on(config, &ds, |_| {})
}

/// Minibatch Adam over the training split with best-validation selection.
/// `on_epoch` sees each record as soon as it is complete.
pub fn train_on<F: FnMut(&EpochRecord)>(
    config: &TrainConfig,
    ds: &Dataset,
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_x = ds.split(Split::Train)?;
    let val_x = ds.split(Split::Validation)?;
    let mut model = build_model(config, ds.dim)?;
    let mut adam = Adam::new(AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    });
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SHUFFLE_STREAM));
    let mut loss_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, LOSS_STREAM));
    let val_seed = validation_seed(config);

    let mut order: Vec<usize> = (0..train_x.rows()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut val_history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut train_acc = LossBreakdown::default();
        for batch_idx in order.chunks(config.batch_size) {
            let batch = train_x.select_rows(batch_idx)?;
            let loss = joint_loss(&model, &batch, &mut loss_rng, config.t_sampling)?;
            let mut grads = loss.tensor.backward()?;
            let mut params = model.params();
            let norm = grads.clip_global_norm(&params, config.grad_clip);
            if !norm.is_finite() {
                return Err(Error::NonFiniteLoss(loss.breakdown));
            }
            adam.step(&mut params, &grads)?;
            model.set_params(&params)?;
            train_acc.accumulate(&loss.breakdown, batch_idx.len() as f64 / order.len() as f64);
        }
        let validation = evaluate_objective(&model, &val_x, val_seed)?;
        val_history.push(validation.total);
        let record = EpochRecord {
            epoch,
            train: train_acc,
            validation,
        };
        on_epoch(&record);
        history.push(record);
        if best
            .as_ref()
            .is_none_or(|(score, _)| validation.total < *score)
        {
            best = Some((
                validation.total,
                Checkpoint::capture(config, &model, &adam, epoch, &val_history),
            ));
        }
    }
    let last = Checkpoint::capture(config, &model, &adam, config.epochs, &val_history);
    Ok(TrainOutcome {
        model,
        best: best.expect("at least one epoch").1,
        last,
        history,
        optimizer_steps: adam.step_count(),
    })
}

/// Settings for fitting a diffusion prior directly to latent samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine-anneal the learning rate to zero over the run.
    pub cosine_decay: bool,
    /// Decay of the parameter moving average copied into the prior at the end.
    pub ema_decay: Option<f64>,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PriorTrainOptions {
    fn default() -> Self {
        PriorTrainOptions {
            epochs: 50,
            batch_size: 128,
            learning_rate: 5e-4,
            cosine_decay: false,
            ema_decay: None,
            grad_clip: 100.0,
            seed: 0,
        }
    }
}

/// Fits a diffusion prior to fixed samples with the uniform-t mean-matching loss.
/// Returns the mean training loss of each epoch.
pub fn train_standalone_prior(
    prior: &mut DiffusionPrior,
    data: &Tensor,
    options: &PriorTrainOptions,
) -> Result<Vec<f64>> {
    if data.rank() != 2 || data.rows() == 0 || options.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "need nonempty data and a positive batch size".into(),
        ));
    }
    if let Some(d) = options.ema_decay {
        if !(0.0..1.0).contains(&d) {
            return Err(Error::InvalidArgument(format!(
                "ema decay {d} outside [0, 1)"
            )));
        }
    }
    let mut adam = Adam::new(AdamConfig {
        lr: options.learning_rate,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let steps = prior.steps();
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let per_epoch = data.rows().div_ceil(options.batch_size);
    let total = (per_epoch * options.epochs).max(1);
    let mut ema: Option<Vec<Vec<f64>>> = options
        .ema_decay
        .map(|_| prior.params().iter().map(|p| p.to_vec()).collect());
    let mut step = 0usize;
    let mut losses = Vec::with_capacity(options.epochs);
    for _ in 0..options.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(options.batch_size) {
            let z0 = data.select_rows(idx)?;
            let ts: Vec<usize> = (0..idx.len())
                .map(|_| rng.random_range(1..=steps))
                .collect();
            let noise = normal_tensor(idx.len(), prior.dim(), &mut rng)?;
            let loss = ddpm_simple_loss_rows(prior, &z0, &ts, &noise)?
                .mean_all()
                .scale(steps as f64);
            if !loss.item().is_finite() {
                return Err(Error::NonFinite(format!("prior loss {}", loss.item())));
            }
            let mut grads = loss.backward()?;
            let mut params = prior.params();
            grads.clip_global_norm(&params, options.grad_clip);
            if options.cosine_decay {
                let progress = step as f64 / total as f64;
                adam.config.lr =
                    0.5 * options.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos());
            }
            adam.step(&mut params, &grads)?;
            prior.set_params(&params)?;
            if let (Some(avg), Some(d)) = (ema.as_mut(), options.ema_decay) {
                // Warm-up keeps the average from clinging to the initialization.
                let d = d.min((1.0 + step as f64) / (10.0 + step as f64));
                for (a, p) in avg.iter_mut().zip(&params) {
                    for (ai, &pi) in a.iter_mut().zip(p.data()) {
                        *ai = d * *ai + (1.0 - d) * pi;
                    }
                }
            }
            step += 1;
            epoch_loss += loss.item() * idx.len() as f64 / data.rows() as f64;
        }
        losses.push(epoch_loss);
    }
    if let Some(avg) = ema {
        let params = prior
            .params()
            .iter()
            .zip(avg)
            .map(|(p, a)| Tensor::param(a, p.shape().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        prior.set_params(&params)?;
    }
    Ok(losses)
}
