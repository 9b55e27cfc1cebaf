use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use soc_ude::experiments::{run_case_on, train_and_evaluate, evaluate_into, CaseReport, RunMode};
use soc_ude::gradient::gradcheck;
use soc_ude::io::{read_checkpoint, read_dataset_bundle, write_atomic, write_dataset_bundle, write_toml};
use soc_ude::report::{write_case_outputs, FinalPlan, PLAN_FILE, REPORT_FILE};
use soc_ude::tuning::run_search;
use soc_ude::{build_dataset, Activation, CaseSpec, Dataset, Precision, RunConfig, TrainHistory};

const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "soc-ude", version, about = "Soil organic carbon UDE experiments")]
struct Cli {
    /// Seed for noise, initialisation and sweeps (falls back to SOC_UDE_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// TOML configuration file; `-` prints the built-in defaults.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Threads for tuning sweeps.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the dataset of a case as a reusable bundle.
    Generate(CaseArg),
    /// Run the hyperparameter sweep of a case.
    Tune(CaseData),
    /// Final training from a best-config or report manifest.
    Train(TrainArgs),
    /// Metrics, profiles and heatmap for a parameter checkpoint.
    Eval(EvalArgs),
    /// Full case: sweep, final training and evaluation.
    Case(CaseArgs),
    /// Cases 1-6, each in `<out>/case<N>`.
    All(AllArgs),
    /// Reverse-mode gradient against central differences on a toy problem.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct CaseArg {
    #[arg(long, alias = "case", value_parser = clap::value_parser!(u8).range(1..=6))]
    id: u8,
}

#[derive(Args, Debug)]
struct CaseData {
    #[command(flatten)]
    case: CaseArg,
    /// Frozen dataset bundle (directory or dataset.toml) instead of regenerating.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// best.toml or report.toml; without it the case's reference configuration is trained.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, alias = "case", value_parser = clap::value_parser!(u8).range(1..=6), required_unless_present = "manifest")]
    id: Option<u8>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint header (params.toml).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest with the case configuration; defaults to report.toml next to the checkpoint.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CaseArgs {
    #[arg(long, alias = "case", value_parser = clap::value_parser!(u8).range(1..=6), required_unless_present = "manifest")]
    id: Option<u8>,
    /// Skip the sweep and train the reference configuration.
    #[arg(long)]
    final_only: bool,
    /// Rerun exactly the case recorded in a report manifest.
    #[arg(long, conflicts_with = "id")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AllArgs {
    #[arg(long)]
    final_only: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    coords: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if cli.config.as_deref() == Some("-") {
        print!("{}", RunConfig::default().to_toml());
        return ExitCode::SUCCESS;
    }
    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let Some(command) = &cli.command else {
        eprintln!("error: a subcommand is required (try --help)");
        return ExitCode::from(1);
    };
    match run(command, &cfg, &cli.out) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    } else if let Ok(s) = std::env::var("SOC_UDE_SEED") {
        cfg.seed = s.trim().parse().with_context(|| format!("SOC_UDE_SEED={s:?} is not an unsigned integer"))?;
    }
    if let Some(p) = &cli.precision {
        cfg.precision = p.parse::<Precision>()?;
    }
    if let Some(w) = cli.workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        cfg.workers = w;
    }
    Ok(cfg)
}

fn load_dataset(spec: &CaseSpec, bundle: Option<&Path>) -> anyhow::Result<Dataset> {
    match bundle {
        Some(p) => Ok(read_dataset_bundle(p)?.1),
        None => Ok(build_dataset(&spec.dataset)?),
    }
}

/// Returns whether the command succeeded.
fn run(command: &Command, cfg: &RunConfig, out: &Path) -> anyhow::Result<bool> {
    match command {
        Command::Generate(a) => {
            let spec = cfg.case(a.id)?;
            let ds = build_dataset(&spec.dataset)?;
            for p in write_dataset_bundle(out, &spec.dataset, &ds)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Command::Tune(a) => {
            let spec = cfg.case(a.case.id)?;
            let ds = load_dataset(&spec, a.dataset.as_deref())?;
            let sweep = run_search(&spec.search_space, &ds, &spec.loss, &spec.final_budget, cfg.workers)?;
            write_atomic(&out.join("sweep.csv"), sweep.to_csv(false).as_bytes())?;
            write_atomic(&out.join("sweep_timing.csv"), sweep.to_csv(true).as_bytes())?;
            let plan = FinalPlan {
                chosen: (&sweep.best).into(),
                config: spec,
            };
            write_toml(&out.join(PLAN_FILE), &plan)?;
            let best = sweep.best_result();
            println!("best trial {} ({}): loss {:e}", best.config.id, best.config.key(), best.loss);
            Ok(sweep.results.iter().any(|r| r.is_ok()))
        }
        Command::Train(a) => {
            let plan = match &a.manifest {
                Some(p) => FinalPlan::read(p)?,
                None => {
                    let config = cfg.case(a.id.expect("clap requires id"))?;
                    FinalPlan {
                        chosen: config.reference,
                        config,
                    }
                }
            };
            let ds = load_dataset(&plan.config, a.dataset.as_deref())?;
            let report = train_and_evaluate(&plan.config, RunMode::FinalOnly, ds, None, plan.chosen, 0.0);
            finish(&report, out)
        }
        Command::Eval(a) => {
            let manifest = match &a.manifest {
                Some(p) => p.clone(),
                None => a.checkpoint.parent().unwrap_or(Path::new(".")).join(REPORT_FILE),
            };
            let plan = FinalPlan::read(&manifest)?;
            let params = read_checkpoint(&a.checkpoint)?;
            let dataset = load_dataset(&plan.config, a.dataset.as_deref())?;
            let mut report = CaseReport {
                spec: plan.config,
                mode: RunMode::FinalOnly,
                dataset,
                sweep: None,
                chosen: plan.chosen,
                params,
                history: TrainHistory::default(),
                prediction: Vec::new(),
                metrics: None,
                heatmap: None,
                status: Ok(()),
                sweep_ms: 0.0,
                train_ms: 0.0,
            };
            evaluate_into(&mut report);
            finish(&report, out)
        }
        Command::Case(a) => {
            let (spec, mode) = match &a.manifest {
                Some(p) => {
                    let m: soc_ude::report::RunManifest = soc_ude::io::read_toml(p)?;
                    (m.config, m.mode)
                }
                None => (cfg.case(a.id.expect("clap requires id"))?, mode_of(a.final_only)),
            };
            let ds = load_dataset(&spec, a.dataset.as_deref())?;
            let report = run_case_on(&spec, mode, ds, cfg.workers)?;
            finish(&report, out)
        }
        Command::All(a) => {
            let mut ok = true;
            for id in 1..=6 {
                let spec = cfg.case(id)?;
                let ds = build_dataset(&spec.dataset)?;
                let report = run_case_on(&spec, mode_of(a.final_only), ds, cfg.workers)?;
                ok &= finish(&report, &out.join(format!("case{id}")))?;
            }
            Ok(ok)
        }
        Command::Gradcheck(a) => {
            let mut worst: f64 = 0.0;
            for act in [Activation::Tanh, Activation::Gelu] {
                let g = gradcheck(act, cfg.seed, a.coords);
                println!("{act}: max relative error {:.3e} over {} coordinates", g.max_rel_error, g.coords.len());
                worst = worst.max(g.max_rel_error);
            }
            let pass = worst <= GRADCHECK_TOL;
            println!("max relative error {worst:.3e} ({})", if pass { "pass" } else { "FAIL" });
            Ok(pass)
        }
    }
}

fn mode_of(final_only: bool) -> RunMode {
    if final_only {
        RunMode::FinalOnly
    } else {
        RunMode::TuneThenFinal
    }
}

fn finish(report: &CaseReport, dir: &Path) -> anyhow::Result<bool> {
    let manifest = write_case_outputs(report, dir)?;
    let c = &report.chosen;
    print!(
        "case {} [{} {}x{} lr {}]: ",
        report.spec.id, c.activation, c.h1, c.h2, c.lr
    );
    match &manifest.metrics {
        Some(m) => println!(
            "mse_clean {:.3e} r2_clean {:.6} mse_noisy {:.3e} r2_noisy {:.6}",
            m.mse_clean, m.r2_clean, m.mse_noisy, m.r2_noisy
        ),
        None => println!("{}", manifest.status),
    }
    println!("{}", dir.join(REPORT_FILE).display());
    Ok(report.is_ok())
}
