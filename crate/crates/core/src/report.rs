//! Per-case output directory and its manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::experiments::{CaseMetrics, CaseReport, CaseSpec, HyperParams, RunMode, EVAL_TOL};
use crate::grid::TransportParams;
use crate::integrator::Precision;
use crate::io::{
    bounds_path, file_sha256, read_toml, write_atomic, write_checkpoint, write_dataset_bundle, write_heatmap,
    write_profile_csv, write_toml,
};
use crate::tuning::TUNING_TOL;

pub const REPORT_FILE: &str = "report.toml";
pub const PLAN_FILE: &str = "best.toml";
pub const TIMING_FILE: &str = "timing.toml";

/// The case configuration and the hyperparameters to train. Every report
/// and best-config file parses as a plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalPlan {
    pub config: CaseSpec,
    pub chosen: HyperParams,
}

impl FinalPlan {
    pub fn read(path: &Path) -> Result<FinalPlan> {
        read_toml(path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub train_method: String,
    pub train_dt: f64,
    pub eval_method: String,
    pub eval_rtol: f64,
    pub eval_atol: f64,
    pub tuning_rtol: f64,
    pub tuning_atol: f64,
    pub precision: Precision,
}

impl SolverSettings {
    fn new(dt: f64, precision: Precision) -> Self {
        SolverSettings {
            train_method: "rk4".into(),
            train_dt: dt,
            eval_method: "tsit5".into(),
            eval_rtol: EVAL_TOL,
            eval_atol: EVAL_TOL,
            tuning_rtol: TUNING_TOL,
            tuning_atol: TUNING_TOL,
            precision,
        }
    }
}

/// Everything needed to rerun a case plus hashes of what it produced.
/// Wall-clock timings go to a separate file so that identical runs give
/// identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub case: u8,
    pub mode: RunMode,
    pub seed: u64,
    pub status: String,
    pub solver: SolverSettings,
    pub transport: TransportParams,
    pub config: CaseSpec,
    pub chosen: HyperParams,
    pub metrics: Option<CaseMetrics>,
    pub residual: Vec<f64>,
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub sweep_ms: f64,
    pub train_ms: f64,
}

/// Writes dataset bundle, sweep table, training history, profiles,
/// heatmap, parameter checkpoint, timing and finally the manifest.
pub fn write_case_outputs(report: &CaseReport, dir: &Path) -> Result<RunManifest> {
    let mut written: Vec<PathBuf> = write_dataset_bundle(dir, &report.spec.dataset, &report.dataset)?;
    let plan = FinalPlan {
        config: report.spec.clone(),
        chosen: report.chosen,
    };
    if let Some(sweep) = &report.sweep {
        let p = dir.join("sweep.csv");
        write_atomic(&p, sweep.to_csv(false).as_bytes())?;
        written.push(p);
        let p = dir.join(PLAN_FILE);
        write_toml(&p, &plan)?;
        written.push(p);
        write_atomic(&dir.join("sweep_timing.csv"), sweep.to_csv(true).as_bytes())?;
    }
    let p = dir.join("history.csv");
    write_atomic(&p, report.history.to_csv(false).as_bytes())?;
    written.push(p);
    write_atomic(&dir.join("history_timing.csv"), report.history.to_csv(true).as_bytes())?;
    let p = write_checkpoint(dir, "params", &report.params)?;
    written.push(dir.join("params.bin"));
    written.push(p);
    let ds = &report.dataset;
    let mut residual = Vec::new();
    if !report.prediction.is_empty() {
        let z = ds.grid.nodes();
        let p = dir.join("profile.csv");
        write_profile_csv(&p, z, &ds.clean_target.values, &report.prediction)?;
        written.push(p);
        let p = dir.join("profile_target.csv");
        write_profile_csv(&p, z, &ds.target_profile.values, &report.prediction)?;
        written.push(p);
        residual = report
            .prediction
            .iter()
            .zip(&ds.clean_target.values)
            .map(|(p, t)| p - t)
            .collect();
    }
    if let Some(h) = &report.heatmap {
        let p = dir.join("heatmap.ppm");
        write_heatmap(&p, &h.truth, &h.pred)?;
        written.push(bounds_path(&p));
        written.push(p);
    }
    write_toml(
        &dir.join(TIMING_FILE),
        &Timing {
            sweep_ms: report.sweep_ms,
            train_ms: report.train_ms,
        },
    )?;
    let mut files = BTreeMap::new();
    for p in &written {
        let name = p.file_name().expect("file name").to_string_lossy().into_owned();
        files.insert(name, file_sha256(p)?);
    }
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        case: report.spec.id,
        mode: report.mode.clone(),
        seed: report.spec.seed(),
        status: match &report.status {
            Ok(()) => "ok".into(),
            Err(e) => format!("failed: {e}"),
        },
        solver: SolverSettings::new(report.spec.final_budget.dt, report.spec.final_budget.precision),
        transport: ds.transport,
        config: plan.config,
        chosen: plan.chosen,
        metrics: report.metrics,
        residual,
        files,
    };
    write_toml(&dir.join(REPORT_FILE), &manifest)?;
    Ok(manifest)
}
