//! `secu`: train, evaluate, probe and reproduce the two-cluster toy.
//!
//! Exit codes: 0 success, 1 user error, 2 internal error.

mod config;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use secu_core::data_io::load_features;
use secu_core::numerics::{rng, Mat};
use secu_core::probes::{
    coverage_probe, drift_probe, variance_ratio_probe, DriftConfig, SphereClusterModel,
};
use secu_core::toy::{search, ToyConfig};
use secu_core::trainer::{evaluate, fit_with, write_logs_jsonl};
use secu_core::{checkpoint, SecuError};

use config::RunConfig;

/// Marks an error caused by the user's input rather than by the program.
#[derive(Debug)]
pub struct UserError(anyhow::Error);

impl UserError {
    pub fn wrap(e: anyhow::Error) -> anyhow::Error {
        anyhow::Error::new(UserError(e))
    }
}

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UserError {}

#[derive(Parser)]
#[command(name = "secu", version, about = "Stable cluster discrimination")]
struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.secu, assignments.csv and metrics.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print clustering metrics of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labelled feature file (CSV or binary).
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        data: Option<PathBuf>,
        /// Take the data set from a run config instead.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        head: usize,
    },
    /// Run a diagnostic probe and write its CSV.
    Probe {
        #[command(subcommand)]
        kind: Probe,
    },
    /// Search for a two-cluster toy where hardness-weighted centers beat uniform ones.
    Toy {
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// First seed tried; defaults to --seed or 0.
        #[arg(long)]
        start: Option<u64>,
        #[arg(long, default_value_t = ToyConfig::default().max_tries)]
        max_tries: u64,
    },
}

#[derive(Args)]
struct ProbeOut {
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Probe {
    /// Distinct clusters hit by a uniformly drawn mini-batch.
    Coverage {
        #[arg(long, default_value_t = 10_000)]
        k: usize,
        #[arg(long, default_value_t = 1024)]
        batch: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[command(flatten)]
        out: ProbeOut,
    },
    /// Positive against negative variance on a sphere cluster model.
    Variance {
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Norm of the cluster means.
        #[arg(long, default_value_t = 0.9)]
        a: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[command(flatten)]
        out: ProbeOut,
    },
    /// Center displacement under cross-entropy and stable gradients.
    Drift {
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0.7)]
        a: f64,
        #[arg(long, default_value_t = 20)]
        per_cluster: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1.2)]
        lr: f64,
        #[arg(long, default_value_t = 0.05)]
        lambda: f64,
        #[command(flatten)]
        out: ProbeOut,
    },
}

fn user<T>(msg: String) -> anyhow::Result<T> {
    Err(UserError::wrap(anyhow::anyhow!(msg)))
}

/// Creates `dir` and checks that none of `names` exists in it unless `force`.
fn prepare_outputs(dir: &Path, names: &[&str], force: bool) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(UserError::wrap)?;
    let paths: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return user(format!("{} exists; pass --force to overwrite", p.display()));
        }
    }
    Ok(paths)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot write {}", path.display())
    })?))
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_train(
    config: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    force: bool,
) -> anyhow::Result<()> {
    let cfg = load_config(config, seed)?;
    let Some(dir) = out.or_else(|| cfg.out.clone()) else {
        return user("no output directory: pass --out or set `out` in the config".into());
    };
    let ds = cfg.dataset()?;
    let tc = cfg.train_config(ds.n())?;
    let paths = prepare_outputs(
        &dir,
        &["checkpoint.secu", "assignments.csv", "metrics.jsonl"],
        force,
    )?;
    let (model, logs) = fit_with(&ds, &tc, |log| {
        let acc = log.acc.map(|a| format!(" acc {a:.4}")).unwrap_or_default();
        eprintln!(
            "epoch {:>3} loss {:.4} sizes {}..{}{acc}",
            log.epoch, log.loss_repr, log.count_min, log.count_max
        );
    })?;
    checkpoint::save(&model, &paths[0])?;
    let mut w = create(&paths[1])?;
    model.heads[0].state.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&paths[2])?;
    write_logs_jsonl(&logs, &mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    data: Option<PathBuf>,
    config: Option<PathBuf>,
    head: usize,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let model = checkpoint::load(ckpt)
        .with_context(|| format!("cannot load checkpoint {}", ckpt.display()))
        .map_err(UserError::wrap)?;
    let ds = match (data, config) {
        (Some(p), _) => load_features(&p)
            .with_context(|| format!("cannot load {}", p.display()))
            .map_err(UserError::wrap)?,
        (None, Some(c)) => load_config(&c, seed)?.dataset()?,
        (None, None) => bail!("eval needs --data or --config"),
    };
    if head >= model.heads.len() {
        return user(format!(
            "head {head} out of range, checkpoint has {}",
            model.heads.len()
        ));
    }
    if ds.dim() != model.encoder.input_dim() {
        return user(format!(
            "data has {} features, checkpoint expects {}",
            ds.dim(),
            model.encoder.input_dim()
        ));
    }
    if ds.labels.is_none() {
        return user("evaluation needs labelled data".into());
    }
    let report = evaluate(&model, head, &ds)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_probe(kind: Probe, seed: u64, force: bool) -> anyhow::Result<()> {
    match kind {
        Probe::Coverage {
            k,
            batch,
            trials,
            out,
        } => {
            let paths = prepare_outputs(&out.out, &["coverage.csv"], force)?;
            let report =
                coverage_probe(k, batch, trials, seed).map_err(|e| UserError::wrap(e.into()))?;
            report.write_csv(create(&paths[0])?)?;
            eprintln!(
                "max covered {} of {}, mean uncovered fraction {:.4}",
                report.max_covered,
                k,
                report.mean_uncovered_fraction()
            );
        }
        Probe::Variance {
            k,
            dim,
            a,
            samples,
            out,
        } => {
            let paths = prepare_outputs(&out.out, &["variance.csv"], force)?;
            let model =
                SphereClusterModel::random(k, dim, a, &mut rng::stream(seed, rng::STREAM_DATA))
                    .map_err(|e| UserError::wrap(e.into()))?;
            let report = variance_ratio_probe(&model, samples, seed)
                .map_err(|e| UserError::wrap(e.into()))?;
            report.write_csv(create(&paths[0])?)?;
            eprintln!(
                "variance ratio {:.4}, predicted {:.4}",
                report.empirical_ratio, report.predicted_ratio
            );
        }
        Probe::Drift {
            k,
            dim,
            a,
            per_cluster,
            steps,
            batch,
            lr,
            lambda,
            out,
        } => {
            let paths = prepare_outputs(&out.out, &["drift.csv"], force)?;
            let mut r = rng::stream(seed, rng::STREAM_DATA);
            let model = SphereClusterModel::random(k, dim, a, &mut r)
                .map_err(|e| UserError::wrap(e.into()))?;
            let (xs, ys) = model.dataset(per_cluster, &mut r);
            let mut r = rng::stream(seed, rng::STREAM_INIT_ORDER);
            let rows: Vec<Vec<f64>> = (0..k).map(|_| rng::unit_vector(&mut r, dim)).collect();
            let init = Mat::from_rows(&rows)?;
            let cfg = DriftConfig {
                steps,
                batch_size: batch,
                lr,
                lambda,
            };
            let report =
                drift_probe(&xs, &ys, &init, &cfg, seed).map_err(|e| UserError::wrap(e.into()))?;
            report.write_csv(create(&paths[0])?)?;
            eprintln!(
                "final displacement ce {:.4} secu {:.4}",
                report.ce.last().copied().unwrap_or(0.0),
                report.secu.last().copied().unwrap_or(0.0)
            );
        }
    }
    Ok(())
}

fn cmd_toy(out: &Path, start: u64, max_tries: u64, force: bool) -> anyhow::Result<()> {
    let paths = prepare_outputs(out, &["toy.csv", "toy.json"], force)?;
    let cfg = ToyConfig {
        max_tries,
        ..ToyConfig::default()
    };
    let found = search(start, &cfg)?;
    let mut w = create(&paths[0])?;
    found.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&paths[1])?;
    serde_json::to_writer_pretty(&mut w, &found)?;
    writeln!(w)?;
    w.flush()?;
    eprintln!(
        "seed {}: uniform centers acc {:.2}, hardness-weighted acc {:.2}",
        found.seed, found.kmeans_acc, found.secu_acc
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Train { config, out } => cmd_train(&config, out, seed, cli.force),
        Command::Eval {
            checkpoint,
            data,
            config,
            head,
        } => cmd_eval(&checkpoint, data, config, head, seed),
        Command::Probe { kind } => cmd_probe(kind, seed.unwrap_or(0), cli.force),
        Command::Toy {
            out,
            start,
            max_tries,
        } => cmd_toy(&out, start.or(seed).unwrap_or(0), max_tries, cli.force),
    }
}

fn is_user_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<UserError>()
            || matches!(
                c.downcast_ref::<SecuError>(),
                Some(
                    SecuError::Config(_)
                        | SecuError::InvalidArgument(_)
                        | SecuError::Parse { .. }
                        | SecuError::Csv(_)
                        | SecuError::Shape(_)
                        | SecuError::Infeasible(_)
                )
            )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_user_error(&e) { 1 } else { 2 })
        }
    }
}
