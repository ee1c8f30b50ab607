//! Experiment configuration, read from TOML.
//!
//! Every section and key is optional. Unknown keys are rejected.
//!
//! ```toml
//! [dataset]
//! kind = "planar2d"        # planar2d | sparse_highdim | custom_file
//! seed = 0
//! path = "points.csv"      # custom_file only
//!
//! [run]
//! p = 2.0
//! beta = 2.0               # defaults to p
//! loss = "exponential"     # exponential | logistic | square | hinge
//! reduction = "mean"       # mean | sum
//! step_kind = "fixed"      # fixed | normalized
//! eta = 1e-3
//! lambda = 1.0
//! steps = 1000000
//! seed = 0
//! w0_scale = 1.0
//! loss_floor = 1e-5
//! record_every = 100
//! monotonicity = "abort"   # abort | halve
//! warm_start_steps = 0     # normalized runs only; unset means no warm start
//!
//! [target]
//! kind = "max_margin"      # max_margin | none | file
//! path = "u.txt"           # file only: comma or whitespace separated reals
//!
//! [outputs]
//! dir = "out"
//!
//! [report]
//! norms = [1.1, 2, 3, 10]  # q >= 1, or "inf"
//!
//! [sweep]
//! axis = "p"               # p | beta | step_kind
//! values = [1.1, 2, 3, 10]
//!
//! [path]
//! budgets = [1, 2, 4, 8, 16, 32]
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mdbias::data::GeneratorSpec;
use mdbias::margin::NormIndex;
use mdbias::optimize::{MonotonicityPolicy, RunConfig, StepKind};
use mdbias::{LossKind, LossSpec, Potential, Reduction};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub run: RunSection,
    pub target: TargetSection,
    pub outputs: OutputsSection,
    pub report: ReportSection,
    pub sweep: Option<SweepSection>,
    pub path: PathSection,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Planar2d,
    SparseHighdim,
    CustomFile,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub loss: LossKind,
    pub reduction: Reduction,
    pub step_kind: StepKind,
    pub eta: f64,
    pub lambda: f64,
    pub steps: u64,
    pub seed: u64,
    pub w0_scale: f64,
    pub loss_floor: f64,
    pub record_every: u64,
    pub monotonicity: MonotonicityPolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warm_start_steps: Option<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            p: 2.0,
            beta: None,
            loss: LossKind::Exponential,
            reduction: Reduction::Mean,
            step_kind: StepKind::Fixed,
            eta: 1e-3,
            lambda: 1.0,
            steps: 1_000_000,
            seed: 0,
            w0_scale: 1.0,
            loss_floor: mdbias::optimize::DEFAULT_LOSS_FLOOR,
            record_every: 100,
            monotonicity: MonotonicityPolicy::Abort,
            warm_start_steps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[default]
    MaxMargin,
    None,
    File,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSection {
    pub kind: TargetKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputsSection {
    pub dir: PathBuf,
}

impl Default for OutputsSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// A number, or a word such as `inf` or `normalized`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Number(f64),
    Word(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Number(x) => write!(f, "{x}"),
            Scalar::Word(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub norms: Vec<Scalar>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { norms: [1.1, 2.0, 3.0, 10.0].into_iter().map(Scalar::Number).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    P,
    Beta,
    StepKind,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::P => "p",
            SweepAxis::Beta => "beta",
            SweepAxis::StepKind => "step_kind",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<Scalar>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSection {
    pub budgets: Vec<f64>,
}

impl Default for PathSection {
    fn default() -> Self {
        Self { budgets: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0] }
    }
}

/// Command-line overrides applied after the file is read.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub record_every: Option<u64>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// `--seed` sets both the run seed and the generator seed.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.run.seed = s;
            self.dataset.seed = s;
        }
        if let Some(dir) = &o.out {
            self.outputs.dir = dir.clone();
        }
        if let Some(r) = o.record_every {
            self.run.record_every = r;
        }
    }

    pub fn generator(&self) -> Result<GeneratorSpec> {
        Ok(match self.dataset.kind {
            DatasetKind::Planar2d => GeneratorSpec::Planar2d { seed: self.dataset.seed },
            DatasetKind::SparseHighdim => GeneratorSpec::SparseHighdim { seed: self.dataset.seed },
            DatasetKind::CustomFile => match &self.dataset.path {
                Some(p) => GeneratorSpec::CustomFile { path: p.to_string_lossy().into_owned() },
                None => bail!("dataset.path is required for kind = \"custom_file\""),
            },
        })
    }

    pub fn potential(&self) -> Result<Potential> {
        let beta = self.run.beta.unwrap_or(self.run.p);
        Potential::new(self.run.p, beta).context("run.p / run.beta")
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let r = &self.run;
        let cfg = RunConfig {
            step_kind: r.step_kind,
            eta: r.eta,
            lambda: r.lambda,
            steps: r.steps,
            seed: r.seed,
            w0_scale: r.w0_scale,
            loss_floor: r.loss_floor,
            record_every: r.record_every,
            monotonicity: r.monotonicity,
            warm_start_steps: r.warm_start_steps,
            ..RunConfig::new(self.potential()?, LossSpec::new(r.loss, r.reduction))
        };
        cfg.validate().context("[run]")?;
        Ok(cfg)
    }

    pub fn norms(&self) -> Result<Vec<NormIndex>> {
        if self.report.norms.is_empty() {
            bail!("report.norms must not be empty");
        }
        self.report
            .norms
            .iter()
            .map(|s| {
                match s {
                    Scalar::Number(q) => NormIndex::new(*q),
                    Scalar::Word(w) => w.parse(),
                }
                .context("report.norms")
            })
            .collect()
    }

    pub fn budgets(&self) -> Result<&[f64]> {
        let b = &self.path.budgets;
        if b.is_empty() {
            bail!("path.budgets must not be empty");
        }
        if let Some(x) = b.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            bail!("path.budgets entries must be > 0, got {x}");
        }
        Ok(b)
    }

    /// Everything a `run` needs, checked before any compute.
    pub fn validate_run(&self) -> Result<()> {
        self.generator()?;
        self.run_config()?;
        self.norms()?;
        if self.target.kind == TargetKind::File && self.target.path.is_none() {
            bail!("target.path is required for kind = \"file\"");
        }
        Ok(())
    }

    /// One configuration per sweep value, in axis order, with its row label.
    pub fn sweep_cells(&self) -> Result<Vec<(String, ExperimentConfig)>> {
        let Some(sweep) = &self.sweep else {
            bail!("sweep needs a [sweep] section with axis and values");
        };
        if sweep.values.is_empty() {
            bail!("sweep.values must not be empty");
        }
        let mut cells = Vec::with_capacity(sweep.values.len());
        for v in &sweep.values {
            let mut cell = self.clone();
            cell.sweep = None;
            match (sweep.axis, v) {
                (SweepAxis::P, Scalar::Number(x)) => cell.run.p = *x,
                (SweepAxis::Beta, Scalar::Number(x)) => cell.run.beta = Some(*x),
                (SweepAxis::StepKind, Scalar::Word(w)) => {
                    cell.run.step_kind = match w.as_str() {
                        "fixed" => StepKind::Fixed,
                        "normalized" => StepKind::Normalized,
                        _ => bail!("sweep.values: unknown step_kind {w:?}"),
                    }
                }
                (axis, v) => bail!("sweep.values: {v} is not a valid {axis}"),
            }
            cell.validate_run().with_context(|| format!("sweep value {v}"))?;
            cells.push((v.to_string(), cell));
        }
        Ok(cells)
    }
}

/// Reads a target direction: reals separated by commas or whitespace.
pub fn read_target(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().with_context(|| format!("{}: bad number {s:?}", path.display())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_documented_defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.run.steps, 1_000_000);
        assert_eq!(c.run.record_every, 100);
        assert_eq!(c.potential().unwrap(), Potential::euclidean());
        c.validate_run().unwrap();
    }

    #[test]
    fn dotted_keys_and_sections_agree() {
        let a = ExperimentConfig::parse("[run]\np = 3.0\nbeta = 2.0\n").unwrap();
        let b = ExperimentConfig::parse("run.p = 3.0\nrun.beta = 2.0\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.potential().unwrap(), Potential::new(3.0, 2.0).unwrap());
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in ["[run]\nstep = 1\n", "[nope]\n", "extra = 1\n", "[sweep]\naxis = \"p\"\nvalues = [2]\nx = 1\n"] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text:?}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "run.p = 1.0",
            "run.eta = 0.0",
            "run.steps = 0",
            "run.w0_scale = 0.0\nrun.p = 3.0\nrun.beta = 2.0",
            "dataset.kind = \"custom_file\"",
            "target.kind = \"file\"",
            "report.norms = [0.5]",
            "report.norms = []",
        ] {
            let c = ExperimentConfig::parse(text).unwrap();
            assert!(c.validate_run().is_err(), "{text:?}");
        }
    }

    #[test]
    fn overrides_apply() {
        let mut c = ExperimentConfig::default();
        c.apply(&Overrides { seed: Some(9), out: Some("x".into()), record_every: Some(7) });
        assert_eq!((c.run.seed, c.dataset.seed, c.run.record_every), (9, 9, 7));
        assert_eq!(c.outputs.dir, PathBuf::from("x"));
    }

    #[test]
    fn sweep_cells_follow_axis_order() {
        let c = ExperimentConfig::parse("[sweep]\naxis = \"p\"\nvalues = [3, 1.5, 2]\n").unwrap();
        let cells = c.sweep_cells().unwrap();
        let labels: Vec<&str> = cells.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, ["3", "1.5", "2"]);
        assert_eq!(cells[1].1.potential().unwrap(), Potential::pgd(1.5).unwrap());

        let c = ExperimentConfig::parse("[sweep]\naxis = \"step_kind\"\nvalues = [\"fixed\", \"normalized\"]\n").unwrap();
        assert_eq!(c.sweep_cells().unwrap()[1].1.run.step_kind, StepKind::Normalized);

        for bad in ["[sweep]\naxis = \"p\"\nvalues = []\n", "[sweep]\naxis = \"beta\"\nvalues = [\"x\"]\n", "[sweep]\naxis = \"p\"\nvalues = [1.0]\n"] {
            assert!(ExperimentConfig::parse(bad).unwrap().sweep_cells().is_err(), "{bad:?}");
        }
        assert!(ExperimentConfig::default().sweep_cells().is_err());
    }

    #[test]
    fn norms_accept_inf() {
        let c = ExperimentConfig::parse("report.norms = [1, 2, \"inf\"]").unwrap();
        assert_eq!(c.norms().unwrap()[2], NormIndex::Infinity);
    }
}
