//! Command-line interface: dataset generation, training, evaluation,
//! ablation suites, gradient checks, the representation-diversity
//! diagnostic, and per-sample visualization dumps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
//! failure.

use std::path::{Path, PathBuf};

use clap::{error::ErrorKind, Parser, Subcommand};

use bevplan::ablate::{parse_suite, run_ablation};
use bevplan::config::Config;
use bevplan::eval::{
    channel_mean, diversity_score, evaluate, future_features, metric_values, predict,
    METRIC_COLUMNS,
};
use bevplan::gradsuite::{run_gradient_suite, GRAD_TOL};
use bevplan::model::Model;
use bevplan::report::{write_csv, write_pgm};
use bevplan::sim::dataset::{generate_dataset, read_dataset, write_dataset, Dataset};
use bevplan::train::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainError};

#[derive(Parser)]
#[command(name = "bevplan", version, about = "BEV trajectory planner on a synthetic driving benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train and eval datasets from a config
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// train dataset path; the eval dataset is written to `<out>.eval`
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and save a checkpoint
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write a metrics CSV
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate every (arm, seed) pair of a suite file
    Ablate {
        #[arg(long)]
        suite: PathBuf,
        /// training dataset; the suite file names the eval dataset
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify every differentiable block against finite differences
    Gradcheck,
    /// Diversity of predicted future features over the first 100 samples
    Collapse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump rasters, feature heatmaps, and trajectories for one sample
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{e}"))
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Gen { config, out } => cmd_gen(&config, &out),
        Cmd::Train { config, data, out } => cmd_train(&config, &data, &out),
        Cmd::Eval { ckpt, data, report } => cmd_eval(&ckpt, &data, &report),
        Cmd::Ablate { suite, data, out } => cmd_ablate(&suite, &data, &out),
        Cmd::Gradcheck => cmd_gradcheck(),
        Cmd::Collapse { ckpt, data, out } => cmd_collapse(&ckpt, &data, &out),
        Cmd::Viz { ckpt, data, index, out } => cmd_viz(&ckpt, &data, index, &out),
    }
}

fn generate_split(cfg: &Config, split: u64, count: usize) -> Result<Dataset, CliError> {
    generate_dataset(&cfg.gen(), cfg.seed, split, count).map_err(data_err)
}

fn eval_dataset_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".eval");
    out.with_file_name(name)
}

fn cmd_gen(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = Config::from_file(config).map_err(data_err)?;
    let train_ds = generate_split(&cfg, 0, cfg.train_samples)?;
    write_dataset(&train_ds, out).map_err(data_err)?;
    println!("wrote {} train samples to {}", train_ds.samples.len(), out.display());
    let eval_ds = generate_split(&cfg, 1, cfg.eval_samples)?;
    let eval_path = eval_dataset_path(out);
    write_dataset(&eval_ds, &eval_path).map_err(data_err)?;
    println!("wrote {} eval samples to {}", eval_ds.samples.len(), eval_path.display());
    Ok(())
}

fn check_compat(cfg: &Config, ds: &Dataset) -> Result<(), CliError> {
    if ds.spec != cfg.spec() || ds.k != cfg.k || ds.n_t != cfg.n_t {
        return Err(CliError::Data(format!(
            "dataset layout ({}x{} @{} m, k={}, n_t={}) does not match the config",
            ds.spec.h, ds.spec.w, ds.spec.resolution, ds.k, ds.n_t
        )));
    }
    Ok(())
}

fn cmd_train(config: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = Config::from_file(config).map_err(data_err)?;
    let ds = read_dataset(data).map_err(data_err)?;
    check_compat(&cfg, &ds)?;
    let result = train(&cfg, &ds).map_err(|e| match e {
        TrainError::NonFinite { .. } => CliError::Numerical(format!("{e}")),
        TrainError::EmptyDataset => CliError::Data(format!("{e}")),
    })?;
    let ckpt = Checkpoint { config: cfg, params: result.params, opt: Some(result.opt) };
    save_checkpoint(&ckpt, out).map_err(data_err)?;

    let loss_rows: Vec<Vec<String>> = result
        .epoch_losses
        .iter()
        .zip(result.val_losses.iter())
        .enumerate()
        .map(|(e, (t, v))| vec![e.to_string(), format!("{t:.6}"), format!("{v:.6}")])
        .collect();
    let mut losses_path = out.as_os_str().to_os_string();
    losses_path.push(".losses.csv");
    write_csv(Path::new(&losses_path), &["epoch", "train_loss", "val_loss"], &loss_rows)
        .map_err(data_err)?;
    println!(
        "saved checkpoint to {} (best epoch {}, val loss {:.6})",
        out.display(),
        result.best_epoch,
        result.val_losses[result.best_epoch]
    );
    Ok(())
}

fn cmd_eval(ckpt_path: &Path, data: &Path, report: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path).map_err(data_err)?;
    let ds = read_dataset(data).map_err(data_err)?;
    check_compat(&ckpt.config, &ds)?;
    let model = Model::new(ckpt.config.model());
    let (prior, fin) = evaluate(&model, &ckpt.params, &ds.samples);
    for (name, m) in [("prior", &prior), ("final", &fin)] {
        if metric_values(m).iter().any(|v| !v.is_finite()) {
            return Err(CliError::Numerical(format!("non-finite {name} metrics")));
        }
    }
    let mut header = vec!["trajectory"];
    header.extend(METRIC_COLUMNS);
    let row = |name: &str, m| {
        let mut r = vec![name.to_string()];
        r.extend(metric_values(m).iter().map(|v| format!("{v:.6}")));
        r
    };
    write_csv(report, &header, &[row("prior", &prior), row("final", &fin)]).map_err(data_err)?;
    println!(
        "avg L2 prior {:.4} m, final {:.4} m; avg CR final {:.4} ({} samples)",
        prior.l2_avg_uniad,
        fin.l2_avg_uniad,
        fin.cr_avg,
        ds.samples.len()
    );
    Ok(())
}

fn cmd_ablate(suite_path: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(suite_path).map_err(data_err)?;
    let suite = parse_suite(&text).map_err(data_err)?;
    if suite.arms.is_empty() || suite.seeds.is_empty() {
        return Err(CliError::Data("suite file must set `arms` and `seeds`".into()));
    }
    let eval_path = suite
        .eval_data
        .clone()
        .ok_or_else(|| CliError::Data("suite file must set `eval_data`".into()))?;
    // relative eval paths resolve against the suite file's directory
    let eval_path = if eval_path.is_relative() {
        suite_path.parent().unwrap_or(Path::new(".")).join(eval_path)
    } else {
        eval_path
    };
    let train_ds = read_dataset(data).map_err(data_err)?;
    let eval_ds = read_dataset(&eval_path).map_err(data_err)?;
    let cache = out.join("cache");
    let runs =
        run_ablation(&suite, &train_ds, &eval_ds, out, Some(&cache)).map_err(data_err)?;
    for r in &runs {
        match &r.error {
            None => println!("{} seed {}: ok", r.arm, r.seed),
            Some(e) => println!("{} seed {}: FAILED ({e})", r.arm, r.seed),
        }
    }
    println!("report written to {}", out.join("report.csv").display());
    Ok(())
}

fn cmd_gradcheck() -> Result<(), CliError> {
    let mut failures = 0;
    for (name, err) in run_gradient_suite() {
        let ok = err <= GRAD_TOL;
        println!("{name}: max rel err {err:.3e} {}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(CliError::Numerical(format!(
            "{failures} block(s) exceeded the {GRAD_TOL:e} gradient tolerance"
        )));
    }
    Ok(())
}

fn cmd_collapse(ckpt_path: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path).map_err(data_err)?;
    let ds = read_dataset(data).map_err(data_err)?;
    check_compat(&ckpt.config, &ds)?;
    let samples = &ds.samples[..ds.samples.len().min(100)];
    if samples.len() < 2 {
        return Err(CliError::Data("diversity diagnostic needs at least 2 samples".into()));
    }
    std::fs::create_dir_all(out).map_err(data_err)?;
    let model = Model::new(ckpt.config.model());
    let feats = future_features(&model, &ckpt.params, samples);
    let score = diversity_score(&feats);
    if !score.is_finite() {
        return Err(CliError::Numerical("non-finite diversity score".into()));
    }
    let spec = ckpt.config.spec();
    for (i, f) in feats.iter().enumerate() {
        write_pgm(&out.join(format!("scene_{i:03}.pgm")), spec.h, spec.w, &channel_mean(f))
            .map_err(data_err)?;
    }
    write_csv(
        &out.join("diversity.csv"),
        &["n_scenes", "diversity"],
        &[vec![samples.len().to_string(), format!("{score:.6}")]],
    )
    .map_err(data_err)?;
    println!("diversity over {} scenes: {score:.6}", samples.len());
    Ok(())
}

const RASTER_CHANNEL_NAMES: [&str; 3] = ["corridor", "obstacles", "agents"];

fn cmd_viz(ckpt_path: &Path, data: &Path, index: usize, out: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path).map_err(data_err)?;
    let ds = read_dataset(data).map_err(data_err)?;
    check_compat(&ckpt.config, &ds)?;
    if index >= ds.samples.len() {
        return Err(CliError::Usage(format!(
            "sample index {index} out of range (dataset has {})",
            ds.samples.len()
        )));
    }
    std::fs::create_dir_all(out).map_err(data_err)?;
    let sample = &ds.samples[index];
    let spec = ckpt.config.spec();
    let k = ckpt.config.k;

    // input rasters, oldest first: age k down to 0
    for (i, raster) in sample.rasters.iter().enumerate() {
        let age = k - i;
        for (ch, name) in RASTER_CHANNEL_NAMES.iter().enumerate() {
            let hw = spec.h * spec.w;
            let data: Vec<f64> =
                raster.data[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).collect();
            write_pgm(&out.join(format!("raster_tminus{age}_{name}.pgm")), spec.h, spec.w, &data)
                .map_err(data_err)?;
        }
    }

    let model = Model::new(ckpt.config.model());
    let pred = predict(&model, &ckpt.params, sample);
    let feats = future_features(&model, &ckpt.params, std::slice::from_ref(sample));
    write_pgm(&out.join("feature_future.pgm"), spec.h, spec.w, &channel_mean(&feats[0]))
        .map_err(data_err)?;

    let rows: Vec<Vec<String>> = (0..sample.gt_trajectory.len())
        .map(|j| {
            vec![
                j.to_string(),
                format!("{:.4}", sample.gt_trajectory[j][0]),
                format!("{:.4}", sample.gt_trajectory[j][1]),
                format!("{:.4}", pred.prior[j][0]),
                format!("{:.4}", pred.prior[j][1]),
                format!("{:.4}", pred.fin[j][0]),
                format!("{:.4}", pred.fin[j][1]),
            ]
        })
        .collect();
    write_csv(
        &out.join("trajectories.csv"),
        &["step", "gt_x", "gt_y", "prior_x", "prior_y", "final_x", "final_y"],
        &rows,
    )
    .map_err(data_err)?;
    println!("wrote visualization for sample {index} to {}", out.display());
    Ok(())
}
