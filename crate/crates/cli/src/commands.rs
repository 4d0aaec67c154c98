use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vdp::data::{load_idx_images, make_toy_dataset, write_csv};
use vdp::metrics::{diffusion_diagnostics, heldout_elbo, mmd_rbf};
use vdp::training::{load_dataset, train_on, validation_seed};
use vdp::{Checkpoint, PriorKind, Split, Tensor, ToyKind, TrainConfig};

use crate::error::{CliError, CliResult};
use crate::ppm::{square_side, tile_grid};
use crate::{usage, DataArgs, DiagnoseArgs, EvalArgs, Metric, SampleArgs, SampleFormat, TrainArgs};

pub const OUT_ROOT_VAR: &str = "VDP_OUT_ROOT";

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let config = TrainConfig::from_file(&args.config)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.config.display())))?;
    config.validate()?;
    let out = match (&args.out, &config.out_dir) {
        (Some(dir), _) => dir.clone(),
        (None, Some(dir)) => PathBuf::from(dir),
        (None, None) => {
            let stem = args
                .config
                .file_stem()
                .map_or_else(|| "run".into(), |s| s.to_os_string());
            out_root().join(stem)
        }
    };
    let ds = load_dataset(&config)?;
    println!(
        "{:>6}  {:>12}  {:>12}  {:>12}  {:>12}  {:>12}",
        "epoch", "train", "validation", "recon", "entropy", "prior"
    );
    let outcome = train_on(&config, &ds, |rec| {
        let v = &rec.validation;
        println!(
            "{:>6}  {:>12.5}  {:>12.5}  {:>12.5}  {:>12.5}  {:>12.5}",
            rec.epoch, rec.train.total, v.total, v.reconstruction, v.entropy, v.prior_term
        );
    })?;
    outcome.write_to(&out)?;
    println!(
        "best epoch {} written to {}",
        outcome.best.epoch,
        out.display()
    );
    Ok(())
}

fn default_grid(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().floor().max(1.0) as usize;
    (n / cols, cols)
}

pub fn sample(args: &SampleArgs) -> CliResult<()> {
    if args.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let grid = match (&args.grid, args.format) {
        (Some(_), SampleFormat::Csv) => return Err(usage("--grid only applies to --format ppm")),
        (Some(g), SampleFormat::Ppm) => {
            let (rows, cols) = (g[0], g[1]);
            if rows == 0 || cols == 0 || rows * cols > args.n {
                return Err(usage(format!(
                    "a {rows}x{cols} grid needs between 1 and --n = {} tiles",
                    args.n
                )));
            }
            Some((rows, cols))
        }
        (None, SampleFormat::Ppm) => Some(default_grid(args.n)),
        (None, SampleFormat::Csv) => None,
    };
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let d = ckpt.data_dim;
    if grid.is_some() {
        square_side(d)?;
    }
    let model = ckpt.model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let samples = model.generate(args.n, args.draw_pixels, &mut rng)?;
    let ext = match args.format {
        SampleFormat::Csv => "csv",
        SampleFormat::Ppm => "ppm",
    };
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(format!("samples.{ext}")));
    ensure_parent(&path)?;
    match grid {
        None => write_csv(std::fs::File::create(&path)?, &samples, d)?,
        Some((rows, cols)) => std::fs::write(&path, tile_grid(&samples, d, rows, cols)?)?,
    }
    eprintln!("wrote {} samples to {}", args.n, path.display());
    Ok(())
}

/// Loads the rows named by `--dataset` and `--split`.
fn resolve_data(ckpt: &Checkpoint, args: &DataArgs) -> CliResult<(String, Tensor)> {
    let spec = args.dataset.as_str();
    let (ds, default_split) = if spec == "run" {
        (load_dataset(&ckpt.config)?, Split::Validation)
    } else if let Some(path) = spec.strip_prefix("idx:") {
        (
            load_idx_images(Path::new(path), ckpt.config.binarize)?,
            Split::All,
        )
    } else {
        let mut parts = spec.split(':');
        let kind: ToyKind = parts.next().unwrap_or_default().parse().map_err(|_| {
            usage(format!(
                "unknown dataset `{spec}`; expected run, idx:<path> or a toy name"
            ))
        })?;
        let mut number = |name: &str, default: u64| -> CliResult<u64> {
            parts.next().map_or(Ok(default), |v| {
                v.parse()
                    .map_err(|_| usage(format!("dataset {name} `{v}` is not an integer")))
            })
        };
        let n = number("size", ckpt.config.n_samples as u64)?;
        let seed = number("seed", ckpt.config.data_seed)?;
        if parts.next().is_some() {
            return Err(usage(format!("too many fields in dataset `{spec}`")));
        }
        (make_toy_dataset(kind, n as usize, seed)?, Split::All)
    };
    if ds.dim != ckpt.data_dim {
        return Err(CliError::Data(format!(
            "dataset `{spec}` has dimension {} but the checkpoint models dimension {}",
            ds.dim, ckpt.data_dim
        )));
    }
    let split = args.split.map_or(default_split, Split::from);
    let label = format!("{spec}@{}", format!("{split:?}").to_lowercase());
    Ok((label, ds.split(split)?))
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    if args.n == Some(0) {
        return Err(usage("--n must be positive"));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = ckpt.model()?;
    let (label, x) = resolve_data(&ckpt, &args.data)?;
    let seed = args.seed.unwrap_or_else(|| validation_seed(&ckpt.config));
    let report = match args.metric {
        Metric::Elbo => heldout_elbo(&model, &x, args.n.unwrap_or(1), seed)?,
        Metric::Mmd => {
            let n = args.n.unwrap_or(x.rows());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples = Tensor::new(model.generate(n, false, &mut rng)?, vec![n, x.cols()])?;
            mmd_rbf(&samples, &x, None)?
        }
    };
    println!("{},{},{}", report.name, report.value, report.stderr);

    let dir = args.out.clone().unwrap_or_else(out_root);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("eval.csv");
    let fresh = !path.exists();
    let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        writeln!(
            file,
            "checkpoint,dataset,metric,value,stderr,n_samples,seed"
        )?;
    }
    writeln!(
        file,
        "{},{label},{},{},{},{},{seed}",
        args.checkpoint.display(),
        report.name,
        report.value,
        report.stderr,
        report.n_samples
    )?;
    Ok(())
}

pub fn diagnose(args: &DiagnoseArgs) -> CliResult<()> {
    if args.n_mc == 0 {
        return Err(usage("--n-mc must be positive"));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = ckpt.model_expecting(PriorKind::Diffusion)?;
    let (_, x) = resolve_data(&ckpt, &args.data)?;
    let seed = args.seed.unwrap_or_else(|| validation_seed(&ckpt.config));
    let diag = diffusion_diagnostics(&model, &x, args.n_mc, seed)?;
    let steps = diag.transition_kl.len() + 1;
    println!("term,t,value");
    println!("reconstruction,,{}", diag.reconstruction);
    println!("entropy,,{}", diag.entropy);
    println!("endpoint_kl,{steps},{}", diag.endpoint_kl);
    for t in (2..=steps).rev() {
        println!("transition_kl,{t},{}", diag.transition_kl[t - 2]);
    }
    println!("decoder_nll,1,{}", diag.decoder_nll);
    println!("elbo,,{}", diag.elbo());
    Ok(())
}
