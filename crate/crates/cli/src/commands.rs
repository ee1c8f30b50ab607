use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use mdbias::data::format_real;
use mdbias::diagnostics::{
    bregman_gap, fit_convergence_rate, fit_norm_growth, identity_suite_with, write_trace, IdentityReport,
    Mutation, NormGrowthReport, RateFit, SuiteOptions,
};
use mdbias::loss::data_bound_c;
use mdbias::margin::{
    angle_between, classifier_norm_table, grid_oracle_2d, max_margin, regularization_path, NormTable,
};
use mdbias::optimize::{run_trajectory_full, StepKind};
use mdbias::{Dataset, Error, LossSpec, WeightVector};

use crate::config::{read_target, ExperimentConfig, SweepAxis, TargetKind};

pub const GRID_RESOLUTION: usize = 1_000_000;

/// A failed invariant or check, reported with exit code 2.
#[derive(Debug)]
pub struct InvariantFailure(pub String);

impl fmt::Display for InvariantFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvariantFailure {}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

#[derive(Debug, Clone, Serialize)]
pub struct MaxMarginSummary {
    pub margin_value: f64,
    pub lp_margin: f64,
    pub solver_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub p: f64,
    pub beta: f64,
    pub step_kind: StepKind,
    pub steps: u64,
    pub seed: u64,
    pub final_t: u64,
    pub final_loss: f64,
    pub final_psi_norm: f64,
    pub final_margin: f64,
    pub final_bregman_gap: Option<f64>,
    pub max_margin: Option<MaxMarginSummary>,
    pub norm_growth: Option<NormGrowthReport>,
    pub rate_fit: Option<RateFit>,
    /// All norm-growth bound checks that could be evaluated held.
    pub bounds_ok: Option<bool>,
    pub notes: Vec<String>,
}

fn resolve_target(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Option<Vec<f64>>, Option<MaxMarginSummary>)> {
    let pot = cfg.potential()?;
    match cfg.target.kind {
        TargetKind::None => Ok((None, None)),
        TargetKind::File => {
            let path = cfg.target.path.as_ref().context("target.path is required")?;
            let u = read_target(path)?;
            data.check_dim(&u).context("target direction")?;
            Ok((Some(u), None))
        }
        TargetKind::MaxMargin => {
            let mm = max_margin(data, &pot)?;
            let summary = MaxMarginSummary {
                margin_value: mm.margin_value,
                lp_margin: mm.lp_margin(&pot),
                solver_gap: mm.solver_gap,
            };
            Ok((Some(mm.direction.into_inner()), Some(summary)))
        }
    }
}

/// Runs one trajectory, writes `trace.csv` and `summary.json` into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset, dir: &Path) -> Result<(RunSummary, WeightVector)> {
    cfg.validate_run()?;
    let rc = cfg.run_config()?;
    let (target, mm) = resolve_target(cfg, data)?;
    create_dir(dir)?;
    let w0 = rc.initial_weights(data.d());
    let traj = run_trajectory_full(&rc, data, w0, target.as_deref())?;
    let mut trace = Vec::new();
    write_trace(&traj.rows, &mut trace)?;
    fs::write(dir.join("trace.csv"), trace).context("writing trace.csv")?;

    let last = traj.rows.last().expect("trace has the initial row");
    let mut notes = Vec::new();
    let norm_growth = match &mm {
        Some(m) if rc.spec.kind.is_strictly_monotone() => {
            match fit_norm_growth(&traj.rows, rc.step_kind, &rc.pot, m.margin_value, data_bound_c(data, &rc.pot)) {
                Ok(r) => Some(r),
                Err(e) => {
                    notes.push(format!("norm growth not fitted: {e}"));
                    None
                }
            }
        }
        _ => None,
    };
    let rate_fit = if target.is_some() {
        match fit_convergence_rate(&traj.rows, rc.step_kind) {
            Ok(r) => Some(r),
            Err(e) => {
                notes.push(format!("rate not fitted: {e}"));
                None
            }
        }
    } else {
        None
    };
    let bounds_ok = norm_growth.map(|r| r.upper_ok && r.lower_ok.unwrap_or(true));
    let summary = RunSummary {
        p: rc.pot.p(),
        beta: rc.pot.beta(),
        step_kind: rc.step_kind,
        steps: rc.steps,
        seed: rc.seed,
        final_t: last.t,
        final_loss: last.loss,
        final_psi_norm: last.psi_norm_w,
        final_margin: last.margin_w,
        final_bregman_gap: last.bregman_gap,
        max_margin: mm,
        norm_growth,
        rate_fit,
        bounds_ok,
        notes,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok((summary, traj.final_w))
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate_run()?;
    let data = cfg.generator()?.generate()?;
    let (summary, _) = run_experiment(cfg, &data, &cfg.outputs.dir)?;
    info!("wrote {}", cfg.outputs.dir.display());
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct SweepCell {
    pub value: String,
    pub dir: String,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
    pub norm_table: Option<NormTable>,
    pub column_minimizers: Vec<String>,
    /// For `axis = "p"`: whether the classifier trained at `p = q` is the
    /// smallest in the `l_q` column, for each column with such a classifier.
    pub diagonal_minimal: Vec<(String, bool)>,
    pub notes: Vec<String>,
}

impl SweepReport {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

fn write_norm_table(path: &Path, table: &NormTable) -> Result<()> {
    let mut out = Vec::new();
    let header: Vec<String> = table.columns.iter().map(|q| format!("l{q}")).collect();
    writeln!(out, "classifier,{}", header.join(","))?;
    for (label, row) in table.rows.iter().zip(&table.values) {
        let vals: Vec<String> = row.iter().map(|v| format_real(*v)).collect();
        writeln!(out, "{label},{}", vals.join(","))?;
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// One run per sweep value on the shared dataset, at most `workers` at a
/// time. Cell failures are recorded without stopping the other cells.
pub fn cmd_sweep(cfg: &ExperimentConfig, workers: usize) -> Result<SweepReport> {
    let cells = cfg.sweep_cells()?;
    let axis = cfg.sweep.as_ref().expect("checked by sweep_cells").axis;
    let norms = cfg.norms()?;
    let data = cfg.generator()?.generate()?;
    let root = &cfg.outputs.dir;
    create_dir(root)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    let results: Vec<(String, String, Result<(RunSummary, WeightVector)>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|(label, cell)| {
                let name = format!("{axis}_{label}");
                let r = run_experiment(cell, &data, &root.join(&name));
                (label.clone(), name, r)
            })
            .collect()
    });

    let mut classifiers = Vec::new();
    let mut report_cells = Vec::new();
    for (label, name, r) in results {
        match r {
            Ok((summary, w)) => {
                classifiers.push((label.clone(), w));
                report_cells.push(SweepCell { value: label, dir: name, summary: Some(summary), error: None });
            }
            Err(e) => {
                warn!("sweep cell {label} failed: {e:#}");
                report_cells.push(SweepCell { value: label, dir: name, summary: None, error: Some(format!("{e:#}")) });
            }
        }
    }

    let mut notes = Vec::new();
    let norm_table = if classifiers.is_empty() {
        None
    } else {
        match classifier_norm_table(&classifiers, &data, &norms) {
            Ok(t) => Some(t),
            Err(e) => {
                notes.push(format!("norm table not computed: {e}"));
                None
            }
        }
    };
    let mut column_minimizers = Vec::new();
    let mut diagonal_minimal = Vec::new();
    if let Some(t) = &norm_table {
        write_norm_table(&root.join("norm_table.csv"), t)?;
        column_minimizers = t.column_minimizers().into_iter().map(String::from).collect();
        if axis == SweepAxis::P {
            for (q, best) in t.columns.iter().zip(&column_minimizers) {
                let q = q.to_string();
                if t.rows.contains(&q) {
                    diagonal_minimal.push((q.clone(), *best == q));
                }
            }
        }
    }
    let report = SweepReport {
        axis,
        cells: report_cells,
        norm_table,
        column_minimizers,
        diagonal_minimal,
        notes,
    };
    write_json(&root.join("sweep.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct GridComparison {
    pub resolution: usize,
    pub margin_value: f64,
    pub direction: Vec<f64>,
    pub margin_diff: f64,
    pub angle: f64,
}

#[derive(Debug, Serialize)]
pub struct MaxMarginReport {
    pub p: f64,
    pub beta: f64,
    pub direction: Vec<f64>,
    pub margin_value: f64,
    pub lp_margin: f64,
    pub solver_gap: f64,
    pub grid: Option<GridComparison>,
}

pub fn cmd_maxmargin(cfg: &ExperimentConfig) -> Result<MaxMarginReport> {
    let pot = cfg.potential()?;
    let data = cfg.generator()?.generate()?;
    create_dir(&cfg.outputs.dir)?;
    let mm = max_margin(&data, &pot)?;
    let grid = if data.d() == 2 {
        let g = grid_oracle_2d(&data, &pot, GRID_RESOLUTION)?;
        Some(GridComparison {
            resolution: GRID_RESOLUTION,
            margin_value: g.margin_value,
            margin_diff: (mm.margin_value - g.margin_value).abs(),
            angle: angle_between(&mm.direction, &g.direction),
            direction: g.direction.into_inner(),
        })
    } else {
        None
    };
    let report = MaxMarginReport {
        p: pot.p(),
        beta: pot.beta(),
        lp_margin: mm.lp_margin(&pot),
        margin_value: mm.margin_value,
        solver_gap: mm.solver_gap,
        direction: mm.direction.into_inner(),
        grid,
    };
    write_json(&cfg.outputs.dir.join("maxmargin.json"), &report)?;
    Ok(report)
}

/// Writes `path.csv`: one row per budget with the loss, the Frank-Wolfe gap,
/// the iteration count, the Bregman gap of `minimizer / B` to the target
/// (empty without one) and the minimizer.
pub fn cmd_path(cfg: &ExperimentConfig) -> Result<usize> {
    let pot = cfg.potential()?;
    let budgets = cfg.budgets()?;
    let spec = LossSpec::new(cfg.run.loss, cfg.run.reduction);
    let data = cfg.generator()?.generate()?;
    let (target, _) = resolve_target(cfg, &data)?;
    create_dir(&cfg.outputs.dir)?;
    let path = regularization_path(&data, &pot, spec, budgets)?;
    let mut out = Vec::new();
    let coords: Vec<String> = (1..=data.d()).map(|j| format!("w{j}")).collect();
    writeln!(out, "budget,loss,fw_gap,iterations,bregman_gap,{}", coords.join(","))?;
    for pt in &path {
        let gap = match &target {
            Some(u) if pt.minimizer.iter().any(|x| *x != 0.0) => {
                let w: Vec<f64> = pt.minimizer.iter().map(|x| x / pt.budget).collect();
                format_real(bregman_gap(&w, u, &pot)?)
            }
            _ => String::new(),
        };
        let w: Vec<String> = pt.minimizer.iter().map(|x| format_real(*x)).collect();
        writeln!(
            out,
            "{},{},{},{},{gap},{}",
            format_real(pt.budget),
            format_real(pt.loss_at),
            format_real(pt.fw_gap),
            pt.iterations,
            w.join(",")
        )?;
    }
    fs::write(cfg.outputs.dir.join("path.csv"), out).context("writing path.csv")?;
    Ok(path.len())
}

pub fn cmd_verify(seed: u64, mutant: bool, out: Option<&Path>) -> Result<IdentityReport> {
    let opts = SuiteOptions {
        mutation: if mutant { Mutation::DropGradPrefactor } else { Mutation::None },
        ..SuiteOptions::default()
    };
    let report = identity_suite_with(seed, &opts);
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("verify.json"), &report)?;
    }
    Ok(report)
}

/// Exit code for an error: 3 for infeasible data, 2 for a failed invariant,
/// 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<InvariantFailure>().is_some() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Infeasible { .. } | Error::NonPositiveMargin(_) => 3,
                Error::MonotonicityViolation { .. } | Error::NonFiniteState { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}
