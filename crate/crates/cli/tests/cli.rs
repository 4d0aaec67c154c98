use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use vdp::data::write_idx_images;

fn vdp(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdp"))
        .args(args)
        .env("VDP_OUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "\
dataset=eight_gaussians
n_samples=300
data_seed=5
encoder_hidden=16
decoder_hidden=16
denoiser_hidden=16
flow_hidden=16
time_embed_dim=4
batch_size=32
";

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

/// Trains `body` into `dir/out_name` and returns that directory.
fn train(dir: &Path, out_name: &str, body: &str) -> PathBuf {
    let cfg = write_config(dir, &format!("{out_name}.cfg"), body);
    let out = dir.join(out_name);
    let o = vdp(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        dir,
    );
    assert!(o.status.success(), "train failed: {}", stderr(&o));
    out
}

fn last_validation_total(run: &Path) -> f64 {
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let line = csv
        .lines()
        .rev()
        .find(|l| l.contains(",validation,"))
        .unwrap();
    line.split(',').nth(2).unwrap().parse().unwrap()
}

fn first_value(o: &Output) -> f64 {
    stdout(o).trim().split(',').nth(1).unwrap().parse().unwrap()
}

#[test]
fn minimal_train_writes_three_files() {
    let tmp = TempDir::new().unwrap();
    let run = train(
        tmp.path(),
        "run",
        &format!("{SMALL}prior=gaussian\nepochs=1\n"),
    );
    for f in ["best.ckpt", "final.ckpt", "metrics.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn train_prints_epoch_table() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "a.cfg",
        &format!("{SMALL}prior=gaussian\nepochs=3\n"),
    );
    let o = vdp(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(o.status.success());
    let table = stdout(&o);
    assert!(table.lines().next().unwrap().contains("validation"));
    assert_eq!(
        table
            .lines()
            .filter(|l| l.trim_start().starts_with(char::is_numeric))
            .count(),
        3
    );
}

#[test]
fn default_output_lands_under_out_root() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "toy.cfg",
        &format!("{SMALL}prior=gaussian\nepochs=1\n"),
    );
    let root = tmp.path().join("root");
    let o = vdp(&["train", "--config", cfg.to_str().unwrap()], &root);
    assert!(o.status.success());
    assert!(root.join("toy").join("final.ckpt").is_file());
}

#[test]
fn diffusion_without_steps_names_the_missing_key() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "d.cfg",
        &format!("{SMALL}prior=diffusion\nepochs=1\n"),
    );
    let o = vdp(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`T`"), "{}", stderr(&o));
}

#[test]
fn unknown_key_and_bad_number_are_reported() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "u.cfg", "prior=gaussian\nlearnin_rate=0.1\n");
    let o = vdp(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learnin_rate"));

    let cfg = write_config(tmp.path(), "n.cfg", "prior=gaussian\n\nepochs=ten\n");
    let o = vdp(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn identical_configs_give_identical_metrics() {
    let tmp = TempDir::new().unwrap();
    let body = format!("{SMALL}prior=flow\nepochs=2\nseed=4\n");
    let a = train(tmp.path(), "a", &body);
    let b = train(tmp.path(), "b", &body);
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("final.ckpt")).unwrap(),
        std::fs::read(b.join("final.ckpt")).unwrap()
    );
}

#[test]
fn csv_samples_have_requested_shape_and_are_reproducible() {
    let tmp = TempDir::new().unwrap();
    let run = train(
        tmp.path(),
        "run",
        &format!("{SMALL}prior=gaussian\nepochs=1\n"),
    );
    let ckpt = run.join("final.ckpt");
    let mut outputs = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let out = tmp.path().join(name);
        let o = vdp(
            &[
                "sample",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--n",
                "5",
                "--seed",
                "3",
                "--out",
                out.to_str().unwrap(),
            ],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(std::fs::read(out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs.remove(0)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 2));
}

#[test]
fn ppm_grid_of_8x8_images_is_35_pixels_square() {
    let tmp = TempDir::new().unwrap();
    let pixels: Vec<u8> = (0..40 * 64)
        .map(|i| if (i / 7) % 3 == 0 { 255 } else { 0 })
        .collect();
    let idx = tmp.path().join("images.idx");
    write_idx_images(&idx, 8, 8, &pixels).unwrap();
    let body = format!(
        "dataset=idx\nidx_path={}\nbinarize=0.5\nlikelihood=bernoulli\nprior=gaussian\nepochs=1\nencoder_hidden=8\ndecoder_hidden=8\nbatch_size=16\n",
        idx.display()
    );
    let run = train(tmp.path(), "img", &body);
    let ckpt = run.join("final.ckpt");
    let out = tmp.path().join("grid.ppm");
    let o = vdp(
        &[
            "sample",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--n",
            "16",
            "--format",
            "ppm",
            "--grid",
            "4",
            "4",
            "--out",
            out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(&out).unwrap();
    let header = b"P6\n35 35\n255\n";
    assert!(bytes.starts_with(header));
    assert_eq!(bytes.len(), header.len() + 35 * 35 * 3);

    let o = vdp(
        &[
            "sample",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--n",
            "4",
            "--format",
            "ppm",
            "--grid",
            "4",
            "4",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));

    // An 8x8 checkpoint cannot be scored against two-dimensional toy data.
    let o = vdp(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--dataset",
            "eight_gaussians:100:1",
            "--metric",
            "elbo",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dimension"));
}

#[test]
fn ppm_needs_square_samples_and_grid_needs_ppm() {
    let tmp = TempDir::new().unwrap();
    let run = train(
        tmp.path(),
        "run",
        &format!("{SMALL}prior=gaussian\nepochs=1\n"),
    );
    let ckpt = run.join("final.ckpt");
    let o = vdp(
        &[
            "sample",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--format",
            "ppm",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("square"));
    let o = vdp(
        &[
            "sample",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--grid",
            "2",
            "2",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn elbo_on_the_validation_split_matches_the_logged_objective() {
    let tmp = TempDir::new().unwrap();
    for prior in ["gaussian", "flow"] {
        let run = train(
            tmp.path(),
            prior,
            &format!("{SMALL}prior={prior}\nepochs=3\n"),
        );
        let ckpt = run.join("final.ckpt");
        let o = vdp(
            &[
                "eval",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--metric",
                "elbo",
            ],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).starts_with("elbo,"));
        // The logged objective is a loss, the negated bound.
        let logged = last_validation_total(&run);
        let elbo = first_value(&o);
        assert!(
            (elbo + logged).abs() < 1e-9 * logged.abs().max(1.0),
            "{prior}: {elbo} vs {logged}"
        );
    }
    let csv = std::fs::read_to_string(tmp.path().join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("checkpoint,dataset,metric,value,stderr"));
}

#[test]
fn unknown_metric_lists_valid_ones() {
    let tmp = TempDir::new().unwrap();
    let o = vdp(
        &["eval", "--checkpoint", "x.ckpt", "--metric", "fid"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("elbo") && err.contains("mmd"), "{err}");
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let o = vdp(
        &["eval", "--checkpoint", "nope.ckpt", "--metric", "mmd"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_succeeds_and_missing_flags_are_usage_errors() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(vdp(&["--help"], tmp.path()).status.code(), Some(0));
    assert_eq!(vdp(&["sample"], tmp.path()).status.code(), Some(1));
    assert_eq!(vdp(&["bogus"], tmp.path()).status.code(), Some(1));
}

#[test]
fn training_lowers_mmd_against_held_out_data() {
    let tmp = TempDir::new().unwrap();
    let mut untrained = 0.0;
    let mut trained = 0.0;
    for seed in 1..=5 {
        let base = format!("{SMALL}prior=gaussian\ndecoder_logvar_init=-2\nseed={seed}\n");
        for (epochs, lr, acc) in [(1, "1e-9", &mut untrained), (80, "2e-3", &mut trained)] {
            let run = train(
                tmp.path(),
                &format!("s{seed}e{epochs}"),
                &format!("{base}epochs={epochs}\nlearning_rate={lr}\n"),
            );
            let ckpt = run.join("final.ckpt");
            let o = vdp(
                &[
                    "eval",
                    "--checkpoint",
                    ckpt.to_str().unwrap(),
                    "--metric",
                    "mmd",
                    "--split",
                    "test",
                    "--seed",
                    "9",
                ],
                tmp.path(),
            );
            assert!(o.status.success(), "{}", stderr(&o));
            *acc += first_value(&o) / 5.0;
        }
    }
    assert!(
        trained < untrained,
        "trained {trained} vs untrained {untrained}"
    );
}

fn diagnose_rows(o: &Output) -> Vec<(String, Option<usize>, f64)> {
    stdout(o)
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().ok(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn diagnose_terms_regroup_the_bound() {
    let tmp = TempDir::new().unwrap();
    let run = train(
        tmp.path(),
        "diff",
        &format!("{SMALL}prior=diffusion\nT=50\nepochs=2\n"),
    );
    let ckpt = run.join("final.ckpt");
    let o = vdp(
        &[
            "diagnose",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--n-mc",
            "2",
            "--seed",
            "7",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = diagnose_rows(&o);
    let get = |name: &str| rows.iter().find(|r| r.0 == name).unwrap().2;
    let kls: Vec<f64> = rows
        .iter()
        .filter(|r| r.0.ends_with("_kl"))
        .map(|r| r.2)
        .collect();
    assert_eq!(kls.len(), 50);
    assert!(kls.iter().all(|&k| k >= 0.0));

    let sum = get("reconstruction") + get("entropy") - get("decoder_nll") - kls.iter().sum::<f64>();
    let elbo = get("elbo");
    assert!((sum - elbo).abs() < 1e-10 * elbo.abs().max(1.0));

    let o = vdp(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--metric",
            "elbo",
            "--n",
            "2",
            "--seed",
            "7",
        ],
        tmp.path(),
    );
    let direct = first_value(&o);
    assert!(
        (direct - elbo).abs() < 1e-10 * elbo.abs().max(1.0),
        "{direct} vs {elbo}"
    );

    // KL[N(sqrt(abar) z, (1 - abar) I) || N(0, I)] with abar = prod(1 - beta_t)
    // over the default linear schedule, for standardized latents.
    let abar: f64 = (0..50)
        .map(|i| 1.0 - (1e-3 + (0.2 - 1e-3) * i as f64 / 49.0))
        .product();
    let oracle = -(1.0 - abar).ln();
    assert!(oracle < 1e-2);
    let endpoint = get("endpoint_kl");
    assert!(
        endpoint < 1e-2,
        "endpoint {endpoint}, unit-variance value {oracle}"
    );
}

#[test]
fn diagnose_rejects_other_priors() {
    let tmp = TempDir::new().unwrap();
    let run = train(
        tmp.path(),
        "g",
        &format!("{SMALL}prior=gaussian\nepochs=1\n"),
    );
    let o = vdp(
        &[
            "diagnose",
            "--checkpoint",
            run.join("final.ckpt").to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("diffusion"));
}
