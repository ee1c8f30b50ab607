//! Convergence measurements and rate-law fits over recorded trajectories,
//! the numerical identity suite, and the trace file format.
//!
//! Rate checks assert bounds and orderings rather than exact exponents. The
//! laws being checked are one-sided `O(.)` statements with unspecified
//! constants, so only their direction can be falsified.

use std::io::{BufRead, Write};

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{format_real, gen_planar2d};
use crate::error::{Error, Result};
use crate::loss::{data_bound_c, Dataset, EmpiricalLoss, LossKind, LossSpec, Objective, Reduction};
use crate::margin::max_margin;
use crate::optimize::{max_safe_eta, StepKind};
use crate::potential::{dot, l2_norm, Potential};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: u64,
    pub loss: f64,
    pub psi_norm_w: f64,
    pub margin_w: f64,
    pub eta_effective: f64,
    pub bregman_gap: Option<f64>,
}

/// `D_psi(target, w / ||w||_psi)`.
pub fn bregman_gap(w: &[f64], target: &[f64], pot: &Potential) -> Result<f64> {
    let u = pot.normalize(w)?;
    if u.len() != target.len() {
        return Err(Error::DimensionMismatch { expected: target.len(), got: u.len() });
    }
    pot.bregman(target, &u)
}

pub const TRACE_HEADER: &str = "t,loss,psi_norm,margin,eta_effective,bregman_gap";

pub fn write_trace<W: Write>(rows: &[TraceRow], mut out: W) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in rows {
        let gap = r.bregman_gap.map(format_real).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.t,
            format_real(r.loss),
            format_real(r.psi_norm_w),
            format_real(r.margin_w),
            format_real(r.eta_effective),
            gap
        )?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRow>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != TRACE_HEADER {
        return Err(Error::Parse { line: 1, message: format!("expected header {TRACE_HEADER}") });
    }
    let mut rows: Vec<TraceRow> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(Error::Parse { line: lineno, message: format!("expected 6 fields, got {}", f.len()) });
        }
        let bad = |s: &str| Error::Parse { line: lineno, message: format!("bad number {s:?}") };
        let real = |s: &str| s.parse::<f64>().map_err(|_| bad(s));
        let t = f[0].parse::<u64>().map_err(|_| bad(f[0]))?;
        if rows.last().is_some_and(|r| r.t >= t) {
            return Err(Error::Parse { line: lineno, message: "t is not strictly increasing".into() });
        }
        rows.push(TraceRow {
            t,
            loss: real(f[1])?,
            psi_norm_w: real(f[2])?,
            margin_w: real(f[3])?,
            eta_effective: real(f[4])?,
            bregman_gap: if f[5].is_empty() { None } else { Some(real(f[5])?) },
        });
    }
    Ok(rows)
}

/// Least-squares line `y = slope * x + intercept` over a trace window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (u64, u64),
}

pub const MIN_TRACE_ROWS: usize = 100;
pub const DEFAULT_BURN_IN: f64 = 0.5;
pub const GAP_CLAMP: f64 = 1e-300;
/// Relative slack on the norm upper bound.
pub const NORM_UPPER_SLACK: f64 = 0.1;

fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 && sxx > 0.0 { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) } else { 1.0 };
    (slope, intercept, r2)
}

/// Rows after the burn-in fraction, restricted to `t > min_t`.
fn tail(trace: &[TraceRow], burn_in: f64, min_t: f64) -> Result<&[TraceRow]> {
    if trace.len() < MIN_TRACE_ROWS {
        return Err(Error::TraceTooShort { rows: trace.len(), needed: MIN_TRACE_ROWS });
    }
    let start = ((trace.len() as f64) * burn_in.clamp(0.0, 1.0)) as usize;
    let mut w = &trace[start.min(trace.len() - 1)..];
    while w.first().is_some_and(|r| (r.t as f64) <= min_t) {
        w = &w[1..];
    }
    if w.len() < 2 {
        return Err(Error::TraceTooShort { rows: w.len(), needed: 2 });
    }
    Ok(w)
}

fn fit_over(rows: &[TraceRow], x: impl Fn(f64) -> f64, y: impl Fn(&TraceRow) -> f64) -> RateFit {
    let xs: Vec<f64> = rows.iter().map(|r| x(r.t as f64)).collect();
    let ys: Vec<f64> = rows.iter().map(y).collect();
    let (slope, intercept, r_squared) = linear_fit(&xs, &ys);
    RateFit { slope, intercept, r_squared, window: (rows[0].t, rows[rows.len() - 1].t) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormGrowthReport {
    pub fit: RateFit,
    /// `||w_T||_psi / log T`, or `/ sqrt T` in normalized mode.
    pub final_ratio: f64,
    /// `gamma_hat^-1 beta / (beta - 1)`.
    pub upper_limit: f64,
    pub upper_ok: bool,
    /// `(1/C)(log T - beta log log T) - slack`, fixed mode only.
    pub lower_bound: Option<f64>,
    pub slack: Option<f64>,
    pub lower_ok: Option<bool>,
}

/// `(1/C)(log t - beta log log t)`.
fn norm_lower_curve(t: f64, beta: f64, c: f64) -> f64 {
    (t.ln() - beta * t.ln().ln()) / c
}

/// Fits `||w_t||_psi` against `log t` (fixed steps) or `sqrt t` (normalized
/// steps) on the tail window and checks the two-sided growth bounds.
///
/// The lower bound holds up to an `O(1)` term. Its size is calibrated as the
/// largest shortfall of `||w_t||_psi` below the lower curve over the head of
/// the trace (the rows before the tail window).
pub fn fit_norm_growth(
    trace: &[TraceRow],
    mode: StepKind,
    pot: &Potential,
    gamma_hat: f64,
    c: f64,
) -> Result<NormGrowthReport> {
    fit_norm_growth_with(trace, mode, pot, gamma_hat, c, DEFAULT_BURN_IN)
}

pub fn fit_norm_growth_with(
    trace: &[TraceRow],
    mode: StepKind,
    pot: &Potential,
    gamma_hat: f64,
    c: f64,
    burn_in: f64,
) -> Result<NormGrowthReport> {
    let rows = tail(trace, burn_in, 1.0)?;
    let beta = pot.beta();
    let last = rows[rows.len() - 1];
    let t_end = last.t as f64;
    let upper_limit = beta / ((beta - 1.0) * gamma_hat);
    let (fit, final_ratio) = match mode {
        StepKind::Fixed => (fit_over(rows, f64::ln, |r| r.psi_norm_w), last.psi_norm_w / t_end.ln()),
        StepKind::Normalized => (fit_over(rows, f64::sqrt, |r| r.psi_norm_w), last.psi_norm_w / t_end.sqrt()),
    };
    let upper_ok = final_ratio <= upper_limit * (1.0 + NORM_UPPER_SLACK);
    let (lower_bound, slack, lower_ok) = match mode {
        StepKind::Normalized => (None, None, None),
        StepKind::Fixed => {
            let head_end = trace.len() - rows.len();
            let slack = trace[..head_end]
                .iter()
                .filter(|r| (r.t as f64) > std::f64::consts::E)
                .map(|r| norm_lower_curve(r.t as f64, beta, c) - r.psi_norm_w)
                .fold(0.0, f64::max);
            let lb = norm_lower_curve(t_end, beta, c) - slack;
            (Some(lb), Some(slack), Some(last.psi_norm_w >= lb))
        }
    };
    Ok(NormGrowthReport { fit, final_ratio, upper_limit, upper_ok, lower_bound, slack, lower_ok })
}

/// Regresses `log gap` on `log log t` (fixed steps, expected slope about
/// `-(beta - 1)`) or on `log t` (normalized steps) over the tail window.
/// Gaps at or below zero are clamped to [`GAP_CLAMP`].
pub fn fit_convergence_rate(trace: &[TraceRow], mode: StepKind) -> Result<RateFit> {
    fit_convergence_rate_with(trace, mode, DEFAULT_BURN_IN)
}

pub fn fit_convergence_rate_with(trace: &[TraceRow], mode: StepKind, burn_in: f64) -> Result<RateFit> {
    if trace.iter().any(|r| r.t > 0 && r.bregman_gap.is_none()) {
        return Err(Error::MissingGap);
    }
    let min_t = match mode {
        StepKind::Fixed => std::f64::consts::E,
        StepKind::Normalized => 0.0,
    };
    let rows = tail(trace, burn_in, min_t)?;
    let mut clamped = 0;
    let gap = |r: &TraceRow| {
        let g = r.bregman_gap.unwrap_or(0.0);
        if g > GAP_CLAMP {
            g.ln()
        } else {
            GAP_CLAMP.ln()
        }
    };
    for r in rows {
        if r.bregman_gap.unwrap_or(0.0) <= GAP_CLAMP {
            clamped += 1;
        }
    }
    if clamped > 0 {
        warn!("{clamped} gaps at or below {GAP_CLAMP:e} clamped before the fit");
    }
    Ok(match mode {
        StepKind::Fixed => fit_over(rows, |t| t.ln().ln(), gap),
        StepKind::Normalized => fit_over(rows, f64::ln, gap),
    })
}

/// Tolerances of the identity suite, all in one place.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub instances: usize,
    pub md_identity: f64,
    pub euler: f64,
    pub homogeneity: f64,
    pub parallel: f64,
    pub round_trip: f64,
    pub sandwich: f64,
    pub norm_axioms: f64,
    pub fd_gradient: f64,
    pub fd_step: f64,
    pub hessian_scaling: f64,
    pub cross_term: f64,
    /// `alpha` of the cross-term inequality.
    pub alpha: f64,
    /// Exponent range for random potentials.
    pub exponent_range: (f64, f64),
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            instances: 1000,
            md_identity: 1e-8,
            euler: 1e-10,
            homogeneity: 1e-9,
            parallel: 1e-12,
            round_trip: 1e-10,
            sandwich: 1e-10,
            norm_axioms: 1e-10,
            fd_gradient: 1e-5,
            fd_step: 1e-6,
            hessian_scaling: 1e-4,
            cross_term: 1e-10,
            alpha: 0.1,
            exponent_range: (1.1, 10.0),
        }
    }
}

/// Deliberate defects for checking that the suite catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    #[default]
    None,
    /// Mirror map without its `beta/p` factor.
    DropGradPrefactor,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SuiteOptions {
    pub tolerances: Tolerances,
    pub mutation: Mutation,
    /// Test a single potential instead of random ones.
    pub potential: Option<Potential>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub instances: usize,
    pub failures: usize,
    /// Largest relative error (equalities) or relative violation (inequalities).
    pub max_error: f64,
    pub tolerance: f64,
}

impl IdentityCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub seed: u64,
    pub checks: Vec<IdentityCheck>,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(IdentityCheck::passed)
    }
}

/// The maps under test, possibly mutated.
#[derive(Debug, Clone, Copy)]
struct Maps {
    pot: Potential,
    mutation: Mutation,
}

impl Maps {
    fn value(&self, w: &[f64]) -> f64 {
        self.pot.value(w)
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        let mut g = self.pot.grad(w).expect("suite points are nonzero");
        if self.mutation == Mutation::DropGradPrefactor {
            let c = self.pot.p() / self.pot.beta();
            g.iter_mut().for_each(|x| *x *= c);
        }
        g
    }

    fn inv_grad(&self, z: &[f64]) -> Vec<f64> {
        self.pot.inv_grad(z)
    }

    fn bregman(&self, x: &[f64], y: &[f64]) -> f64 {
        let g = self.grad(y);
        let cross: f64 = (0..x.len()).map(|j| g[j] * (x[j] - y[j])).sum();
        self.value(x) - self.value(y) - cross
    }

    fn norm(&self, w: &[f64]) -> f64 {
        self.pot.norm(w)
    }
}

struct Tally {
    check: IdentityCheck,
}

impl Tally {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            check: IdentityCheck { name: name.into(), instances: 0, failures: 0, max_error: 0.0, tolerance },
        }
    }

    fn record(&mut self, err: f64) {
        self.check.instances += 1;
        let err = if err.is_nan() { f64::INFINITY } else { err };
        self.check.max_error = self.check.max_error.max(err);
        if err > self.check.tolerance {
            self.check.failures += 1;
        }
    }

    fn done(self) -> IdentityCheck {
        self.check
    }
}

fn rel(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(f64::MIN_POSITIVE)
}

struct Gen {
    rng: ChaCha8Rng,
    fixed: Option<Potential>,
    range: (f64, f64),
}

impl Gen {
    fn pot(&mut self) -> Potential {
        if let Some(p) = self.fixed {
            return p;
        }
        let (lo, hi) = self.range;
        let p = self.rng.random_range(lo..hi);
        let b = self.rng.random_range(lo..hi);
        Potential::new(p, b).expect("exponents above one")
    }

    fn dim(&mut self) -> usize {
        self.rng.random_range(2..=5)
    }

    fn normal(&mut self, d: usize) -> Vec<f64> {
        (0..d).map(|_| StandardNormal.sample(&mut self.rng)).collect()
    }

    /// Entries with `|w_j|` in `[lo, hi)` and random signs.
    fn away_from_axes(&mut self, d: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..d)
            .map(|_| {
                let m = self.rng.random_range(lo..hi);
                if self.rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect()
    }

    fn scalar(&mut self) -> f64 {
        loop {
            let c: f64 = self.rng.random_range(-5.0..5.0);
            if c.abs() > 1e-3 {
                return c;
            }
        }
    }
}

/// Runs every numerical identity on seeded random instances.
pub fn identity_suite(seed: u64) -> IdentityReport {
    identity_suite_with(seed, &SuiteOptions::default())
}

pub fn identity_suite_with(seed: u64, opts: &SuiteOptions) -> IdentityReport {
    let tol = opts.tolerances;
    let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(seed), fixed: opts.potential, range: tol.exponent_range };
    let maps = |pot: Potential| Maps { pot, mutation: opts.mutation };
    let n = tol.instances;
    let checks = vec![
        check_md_identity(&mut g, &maps, n, tol.md_identity),
        check_euler(&mut g, &maps, n, tol.euler),
        check_homogeneity(&mut g, &maps, n, tol.homogeneity),
        check_parallel(&mut g, &maps, n, tol.parallel),
        check_round_trip(&mut g, &maps, n, tol.round_trip),
        check_sandwich(&mut g, &maps, n, tol.sandwich),
        check_norm_axioms(&mut g, &maps, n, tol.norm_axioms),
        check_fd_gradient(&mut g, &maps, n, tol.fd_gradient, tol.fd_step),
        check_hessian_scaling(&mut g, &maps, n, tol.hessian_scaling),
        check_cross_term(&mut g, &maps, n, tol.cross_term, tol.alpha),
    ];
    IdentityReport { seed, checks }
}

/// `D_f(x, y)` for `f = a psi + b L`.
fn d_combo(m: &Maps, obj: &dyn Objective, a: f64, b: f64, x: &[f64], y: &[f64]) -> f64 {
    let mut gl = vec![0.0; y.len()];
    let ly = obj.value_and_grad(y, &mut gl);
    let gp = m.grad(y);
    let cross: f64 = (0..x.len()).map(|j| (a * gp[j] + b * gl[j]) * (x[j] - y[j])).sum();
    a * m.value(x) + b * obj.value(x) - (a * m.value(y) + b * ly) - cross
}

fn check_md_identity(g: &mut Gen, maps: &dyn Fn(Potential) -> Maps, n: usize, tol: f64) -> IdentityCheck {
    let mut t = Tally::new("md_identity", tol);
    let datasets: Vec<Dataset> = (0..4).map(gen_planar2d).collect();
    let spec = LossSpec::exponential();
    for i in 0..n {
        let m = maps(g.pot());
        let data = &datasets[i % datasets.len()];
        let obj = EmpiricalLoss::new(data, spec);
        let w = g.normal(2);
        let wt = g.away_from_axes(2, 0.1, 2.0);
        let eta = 0.5 * max_safe_eta(data, &m.pot, spec, &wt).unwrap_or(1e-3).min(1e-1);
        let mut gl = vec![0.0; 2];
        let lt = obj.value_and_grad(&wt, &mut gl);
        let z: Vec<f64> = m.grad(&wt).iter().zip(&gl).map(|(a, b)| a - eta * b).collect();
        let w1 = m.inv_grad(&z);
        let lhs = m.bregman(&w, &wt);
        let (lw, l1) = (obj.value(&w), obj.value(&w1));
        let common = m.bregman(&w, &w1) + d_combo(&m, &obj, 1.0, -eta, &w1, &wt) + eta * l1;
        let form1 = common + eta * d_combo(&m, &obj, 0.0, 1.0, &w, &wt) - eta * lw;
        let inner: f64 = (0..2).map(|j| gl[j] * (w[j] - wt[j])).sum();
        let form2 = common - eta * inner - eta * lt;
        let scale = 1.0 + lhs.abs() + m.value(&w) + m.value(&wt) + eta * (lw + lt);
        t.record(rel(lhs, form1, scale).max(rel(lhs, form2, scale)));
    }
    t.done()
}

fn check_euler(g: &mut Gen, maps: &dyn Fn(Potential) -> Maps, n: usize, tol: f64) -> IdentityCheck {
    let mut t = Tally::new("euler", tol);
    for _ in 0..n {
        let m = maps(g.pot());
        let d = g.dim();
        let w = g.normal(d);
        let v = m.value(&w);
        let b = m.pot.beta();
        t.record(rel(dot(&m.grad(&w), &w), b * v, 1.0 + b * v));
    }
    t.done()
}

fn check_homogeneity(g: &mut Gen, maps: &dyn Fn(Potential) -> Maps, n: usize, tol: f64) -> IdentityCheck {
    let mut t = Tally::new("bregman_homogeneity", tol);
    for _ in 0..n {
        let m = maps(g.pot());
        let d = g.dim();
        let (x, y) = (g.normal(d), g.normal(d));
        let c = g.scalar();
        let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
        let cy: Vec<f64> = y.iter().map(|v| c * v).collect();
        let lhs = m.bregman(&cx, &cy);
        let rhs = c.abs().powf(m.pot.beta()) * m.bregman(&x, &y);
        let scale = c.abs().powf(m.pot.beta()) * (m.value(&x) + m.value(&y)) + lhs.abs();
        t.record(rel(lhs, rhs, scale));
    }
    t.done()
}

fn check_parallel(g: &mut Gen, maps: &dyn Fn(Potential) -> Maps, n: usize, tol: f64) -> IdentityCheck {
    let mut t = Tally::new("parallel_gradient", tol);
    for _ in 0..n {
        let m = maps(g.pot());
        let d = g.dim();
        let w = g.normal(d);
        let mut v = g.normal(d);
        let s = m.norm(&w) / m.norm(&v);
        v.iter_mut().for_each(|x| *x *= s);
        let gw = m.grad(&w);
        let (a, b) = (dot(&gw, &v).abs(), dot(&gw, &w).abs());
        t.record(((a - b) / b.max(f64::MIN_POSITIVE)).max(0.0));
    }
    t.done()
}

fn check_round_trip(g: &mut Gen, maps: &dyn Fn(Potential) -> Maps, n: usize, tol: f64) -> IdentityCheck {
    let mut t = Tally::new("mirror_round_trip", tol);
    for _ in 0..n {
        let m = maps(g.pot());
        let d = g.dim();
        let w = g.normal(d);
        let back = m.inv_grad(&m.grad(&w));
        let err = w.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        t.record(err / w.iter().fold(0.0_f64, |m, x| m.max(x.abs())));
    }
    t.done()
}

/// Max-margin solutions shared by the data-dependent checks.
struct Problems {
    items: Vec<(Dataset, Potential, Vec<f64>, f64)>,
}

impl Problems {
    fn new(g: &mut Gen) -> Self {
        let mut items = Vec::new();
        for seed in 0..4 {
            let data = gen_planar2d(seed);
            for _ in 0..3 {
                let pot = g.pot();
                if let Ok(r) = max_margin(&data, &pot) {
                    items.push((data.clone(), pot, r.direction.into_inner(), r.margin_value));
                }
            }
        }
        Self { items }
    }
}

fn check_sandwich(g: &mut Gen, maps: &dyn Fn(Potential) -> Maps, n: usize, tol: f64) -> IdentityCheck {
    let mut t = Tally::new("dual_norm_sandwich", tol);
    let probs = Problems::new(g);
    let spec = LossSpec::new(LossKind::Exponential, Reduction::Sum);
    for i in 0..n {
        let (data, pot, _, gamma) = &probs.items[i % probs.items.len()];
        let m = maps(*pot);
        let obj = EmpiricalLoss::new(data, spec);
        let w: Vec<f64> = g.normal(2).iter().map(|x| 3.0 * x).collect();
        let mut gl = vec![0.0; 2];
        let l = obj.value_and_grad(&w, &mut gl);
        let dn = m.pot.dual_norm(&gl);
        let c = data_bound_c(data, &m.pot);
        let low = (gamma * l - dn) / (c * l);
        let high = (dn - c * l) / (c * l);
        t.record(low.max(high).max(0.0));
    }
    t.done()
}

fn check_norm_axioms(g: &mut Gen, maps: &dyn Fn(Potential) -> Maps, n: usize, tol: f64) -> IdentityCheck {
    let mut t = Tally::new("norm_axioms", tol);
    for _ in 0..n {
        let m = maps(g.pot());
        let d = g.dim();
        let (x, y) = (g.normal(d), g.normal(d));
        let c = g.scalar();
        let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let (nx, ny) = (m.norm(&x), m.norm(&y));
        let homog = rel(m.norm(&cx), c.abs() * nx, c.abs() * nx);
        let tri = ((m.norm(&sum) - nx - ny) / (nx + ny)).max(0.0);
        let bound = m.pot.dual_norm(&x) * ny;
        let holder = ((dot(&x, &y) - bound) / bound).max(0.0);
        t.record(homog.max(tri).max(holder));
    }
    t.done()
}

fn check_fd_gradient(g: &mut Gen, maps: &dyn Fn(Potential) -> Maps, n: usize, tol: f64, h: f64) -> IdentityCheck {
    let mut t = Tally::new("fd_gradient", tol);
    for _ in 0..n {
        let m = maps(g.pot());
        let d = g.dim();
        let w = g.away_from_axes(d, 0.1, 2.0);
        let gw = m.grad(&w);
        let scale = l2_norm(&gw).max(1e-300);
        let mut err: f64 = 0.0;
        for j in 0..d {
            let (mut a, mut b) = (w.clone(), w.clone());
            a[j] += h;
            b[j] -= h;
            let fd = (m.value(&a) - m.value(&b)) / (2.0 * h);
            err = err.max((fd - gw[j]).abs() / scale);
        }
        t.record(err);
    }
    t.done()
}

fn fd_hessian(m: &Maps, w: &[f64]) -> DMatrix<f64> {
    let d = w.len();
    let h = 1e-6 * l2_norm(w);
    let mut out = DMatrix::zeros(d, d);
    for k in 0..d {
        let (mut a, mut b) = (w.to_vec(), w.to_vec());
        a[k] += h;
        b[k] -= h;
        let (ga, gb) = (m.grad(&a), m.grad(&b));
        for j in 0..d {
            out[(j, k)] = (ga[j] - gb[j]) / (2.0 * h);
        }
    }
    (&out + out.transpose()) * 0.5
}

fn operator_norm(h: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(h).eigenvalues.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn check_hessian_scaling(g: &mut Gen, maps: &dyn Fn(Potential) -> Maps, n: usize, tol: f64) -> IdentityCheck {
    let mut t = Tally::new("hessian_scaling", tol);
    for _ in 0..n {
        let m = maps(g.pot());
        let d = g.dim();
        let w = g.away_from_axes(d, 0.1, 2.0);
        let r = l2_norm(&w);
        let u: Vec<f64> = w.iter().map(|x| x / r).collect();
        let lhs = operator_norm(fd_hessian(&m, &w));
        let rhs = r.powf(m.pot.beta() - 2.0) * operator_norm(fd_hessian(&m, &u));
        t.record(rel(lhs, rhs, lhs.abs().max(rhs.abs())));
    }
    t.done()
}

/// `<grad L(w), w> >= (1 + alpha) ||w||_psi <grad L(w), u_hat>` at points
/// `w` where the loss comparison `L((1 + alpha) ||w||_psi u_hat) <= L(w)`
/// holds; the radius is located by doubling.
fn check_cross_term(g: &mut Gen, maps: &dyn Fn(Potential) -> Maps, n: usize, tol: f64, alpha: f64) -> IdentityCheck {
    let mut t = Tally::new("cross_term", tol);
    let probs = Problems::new(g);
    let spec = LossSpec::new(LossKind::Exponential, Reduction::Sum);
    for i in 0..n {
        let (data, pot, u, _) = &probs.items[i % probs.items.len()];
        let m = maps(*pot);
        let obj = EmpiricalLoss::new(data, spec);
        let v = m.pot.normalize(&g.normal(2)).expect("nonzero");
        let mut r = 1.0;
        let located = loop {
            let w: Vec<f64> = v.iter().map(|x| r * x).collect();
            let ref_pt: Vec<f64> = u.iter().map(|x| (1.0 + alpha) * r * x).collect();
            if obj.value(&ref_pt) <= obj.value(&w) {
                break Some(w);
            }
            r *= 2.0;
            if r > 1e3 {
                break None;
            }
        };
        let Some(w) = located else { continue };
        let mut gl = vec![0.0; 2];
        obj.value_and_grad(&w, &mut gl);
        let lhs = dot(&gl, &w);
        let rhs = (1.0 + alpha) * m.norm(&w) * dot(&gl, u);
        let scale = lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
        t.record(((rhs - lhs) / scale).max(0.0));
    }
    t.done()
}
