//! Command-line entry points: synthetic data generation, training,
//! retrieval evaluation, transport solving, and gradient checking.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};

use cmemd::config::{load_run_config, preset, preset_names, RunConfig};
use cmemd::data::{load_feature_file, write_feature_file};
use cmemd::error::Error;
use cmemd::eval::{evaluate_retrieval, split_for_direction, Direction};
use cmemd::gradcheck::{run_gradcheck, GradComponent};
use cmemd::math::CostMatrix;
use cmemd::model::Model;
use cmemd::ot::{
    adjusted_cost_monotonicity_check, exact_transport, sinkhorn, transport_cost, MarginalWeights,
    SinkhornConfig,
};
use cmemd::trainer;

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "cmemd", about = "Cross-modality alignment toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile name (sysu-profile, regdb-profile).
    #[arg(long)]
    preset: Option<String>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("pass either --config or --preset, not both".into()))
            }
            (Some(path), None) => load_run_config(path)?,
            (None, Some(name)) => preset(name).ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset '{}'; available: {}",
                    name,
                    preset_names().join(", ")
                ))
            })?,
            (None, None) => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.run.out_dir = out.display().to_string();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality dataset plus manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the toy two-stream model and write metrics plus a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on a feature file, both retrieval directions.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature CSV with the held-out samples.
        #[arg(long)]
        test_file: PathBuf,
        /// Fusion weight override (defaults to the checkpoint's).
        #[arg(long)]
        beta: Option<f64>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve a transportation problem from a cost-matrix CSV.
    OtSolve {
        /// CSV of nonnegative costs, one row per line.
        cost: PathBuf,
        /// Entropic regularization strength.
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        /// Marginal stop tolerance.
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        /// Iteration budget.
        #[arg(long, default_value_t = 10000)]
        max_iterations: usize,
        /// Comma-separated row marginals (default: uniform).
        #[arg(long)]
        row_marginals: Option<String>,
        /// Comma-separated column marginals (default: uniform).
        #[arg(long)]
        col_marginals: Option<String>,
        /// Also run the exact small-instance solver for comparison.
        #[arg(long)]
        exact: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every analytic gradient path.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Probes per component (0 = vacuous pass).
        #[arg(long, default_value_t = 20)]
        probes: usize,
        /// Test fixture: deliberately corrupt one component's gradient.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { config } => gen_data(&config.resolve()?),
        Command::Train { config } => {
            let cfg = config.resolve()?;
            let out_dir = PathBuf::from(&cfg.run.out_dir);
            let (_, outcome) = trainer::train(&cfg, &out_dir)?;
            println!(
                "trained {} epochs; metrics: {}; checkpoint: {}",
                outcome.epochs_run,
                outcome.metrics_path.display(),
                outcome.checkpoint_path.display()
            );
            println!(
                "held-out modality_gap={} fisher_ratio={}",
                outcome.final_gap, outcome.final_fisher
            );
            Ok(())
        }
        Command::Eval { checkpoint, test_file, beta, out } => {
            eval_checkpoint(&checkpoint, &test_file, beta, out.as_deref())
        }
        Command::OtSolve {
            cost,
            epsilon,
            tolerance,
            max_iterations,
            row_marginals,
            col_marginals,
            exact,
            out,
        } => ot_solve(
            &cost,
            epsilon,
            tolerance,
            max_iterations,
            row_marginals.as_deref(),
            col_marginals.as_deref(),
            exact,
            out.as_deref(),
        ),
        Command::Gradcheck { config, probes, corrupt } => {
            let cfg = config.resolve()?;
            let corrupt = match corrupt {
                None => None,
                Some(name) => Some(GradComponent::parse(&name).ok_or_else(|| {
                    Error::Config(format!("unknown gradcheck component '{}'", name))
                })?),
            };
            let report = run_gradcheck(&cfg, probes, corrupt)?;
            if report.vacuous {
                eprintln!("warning: 0 probes requested; nothing was checked");
                println!("gradcheck: vacuous PASS");
                return Ok(());
            }
            for c in &report.components {
                println!(
                    "{:<24} max_rel_error={:<12.3e} probes={:<4} {}",
                    c.component.name(),
                    c.max_rel_error,
                    c.probes,
                    if c.max_rel_error <= report.threshold { "PASS" } else { "FAIL" }
                );
            }
            if report.passed() {
                println!("gradcheck: PASS (threshold {:.0e})", report.threshold);
                Ok(())
            } else {
                Err(Error::Numerical(format!(
                    "gradient check exceeded threshold {:.0e}",
                    report.threshold
                )))
            }
        }
    }
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
    rows: usize,
}

#[derive(Serialize)]
struct Manifest {
    schema_version: u32,
    config_hash: String,
    seed: u64,
    spec: cmemd::data::SynthSpec,
    train: FileEntry,
    test: FileEntry,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
}

fn gen_data(cfg: &RunConfig) -> Result<(), Error> {
    let out_dir = PathBuf::from(&cfg.run.out_dir);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let ds = cmemd::data::generate_dataset(&cfg.data.synth)?;
    let train_path = out_dir.join("train.csv");
    let test_path = out_dir.join("test.csv");
    write_feature_file(&train_path, &ds.train, ds.dim)?;
    write_feature_file(&test_path, &ds.test, ds.dim)?;
    let entry = |path: &Path, rows: usize| -> Result<FileEntry, Error> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(FileEntry { path: path.display().to_string(), sha256: sha256_hex(&bytes), rows })
    };
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.data.synth.seed,
        spec: cfg.data.synth.clone(),
        train: entry(&train_path, ds.train.len())?,
        test: entry(&test_path, ds.test.len())?,
    };
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    println!(
        "wrote {} ({} rows), {} ({} rows), {}",
        train_path.display(),
        ds.train.len(),
        test_path.display(),
        ds.test.len(),
        manifest_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    schema_version: u32,
    config_hash: String,
    beta: f64,
    visible_to_thermal: cmemd::eval::RetrievalReport,
    thermal_to_visible: cmemd::eval::RetrievalReport,
}

fn eval_checkpoint(
    checkpoint: &Path,
    test_file: &Path,
    beta_override: Option<f64>,
    out: Option<&Path>,
) -> Result<(), Error> {
    let (mut model, meta) = Model::load(checkpoint)?;
    let batch = load_feature_file(test_file)?;
    if batch.dim() != model.shape.input_dim {
        return Err(Error::Config(format!(
            "test file dim {} does not match checkpoint input dim {}",
            batch.dim(),
            model.shape.input_dim
        )));
    }
    let beta = beta_override.unwrap_or(meta.beta);
    let features =
        model.inference_features(&batch.features, &batch.modalities, beta)?;
    let fused = cmemd::batch::LabeledBatch::new(
        features,
        batch.identities.clone(),
        batch.modalities.clone(),
    )?;
    let (qv, gt) = split_for_direction(&fused, Direction::VisibleToThermal)?;
    let v2t = evaluate_retrieval(&qv, &gt, Direction::VisibleToThermal)?;
    let (qt, gv) = split_for_direction(&fused, Direction::ThermalToVisible)?;
    let t2v = evaluate_retrieval(&qt, &gv, Direction::ThermalToVisible)?;
    let report = EvalReport {
        schema_version: SCHEMA_VERSION,
        config_hash: meta.config_hash,
        beta,
        visible_to_thermal: v2t,
        thermal_to_visible: t2v,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match out {
        Some(path) => fs::write(path, json).map_err(|e| Error::io(path, e))?,
        None => println!("{}", json),
    }
    Ok(())
}

fn parse_cost_csv(path: &Path) -> Result<CostMatrix<f64>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line: idx + 1,
                message: format!("bad number '{}'", field.trim()),
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected {} columns, got {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 1, message: "cost file is empty".into() });
    }
    let (m, n) = (rows.len(), rows[0].len());
    let values = Array2::from_shape_fn((m, n), |(i, j)| rows[i][j]);
    CostMatrix::new(values)
}

fn parse_marginals(text: Option<&str>, len: usize) -> Result<MarginalWeights<f64>, Error> {
    match text {
        None => Ok(MarginalWeights::uniform(len)),
        Some(t) => {
            let vals: Result<Vec<f64>, Error> = t
                .split(',')
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| {
                        Error::InvalidArgument(format!("bad marginal '{}'", f.trim()))
                    })
                })
                .collect();
            MarginalWeights::new(vals?)
        }
    }
}

#[derive(Serialize)]
struct ExactSection {
    objective: f64,
    plan: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct OtReport {
    schema_version: u32,
    epsilon: f64,
    converged: bool,
    iterations: usize,
    marginal_violation: f64,
    objective: f64,
    row_monotone_in_adjusted_cost: bool,
    plan: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    exact: Option<ExactSection>,
}

#[allow(clippy::too_many_arguments)]
fn ot_solve(
    cost_path: &Path,
    epsilon: f64,
    tolerance: f64,
    max_iterations: usize,
    row_marginals: Option<&str>,
    col_marginals: Option<&str>,
    run_exact: bool,
    out: Option<&Path>,
) -> Result<(), Error> {
    let cost = parse_cost_csv(cost_path)?;
    let v = parse_marginals(row_marginals, cost.nrows())?;
    let t = parse_marginals(col_marginals, cost.ncols())?;
    let cfg = SinkhornConfig { epsilon, tolerance, max_iterations, ..Default::default() };
    let plan = sinkhorn(&cost, &v, &t, &cfg)?;
    let objective = transport_cost(&plan, &cost)?;
    let monotone = adjusted_cost_monotonicity_check(&plan, &cost)?;
    let to_rows = |m: &Array2<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).to_vec()).collect()
    };
    let exact = if run_exact {
        let ex = exact_transport(&cost, &v, &t)?;
        Some(ExactSection {
            objective: transport_cost(&ex, &cost)?,
            plan: to_rows(&ex.plan),
        })
    } else {
        None
    };
    let report = OtReport {
        schema_version: SCHEMA_VERSION,
        epsilon,
        converged: plan.converged,
        iterations: plan.iterations,
        marginal_violation: plan.marginal_violation,
        objective,
        row_monotone_in_adjusted_cost: monotone,
        plan: to_rows(&plan.plan),
        exact,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match out {
        Some(path) => fs::write(path, json).map_err(|e| Error::io(path, e))?,
        None => println!("{}", json),
    }
    Ok(())
}
