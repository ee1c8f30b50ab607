//! Generalized max-margin directions, the regularization path, and the
//! classifier rescaling used to compare implicit biases across geometries.
//!
//! The max-margin problem `max_{psi(w) <= 1} min_i y_i <x_i, w>` is solved by
//! maximizing the log-sum-exp relaxation `-tau log sum_i exp(-m_i(w) / tau)`
//! along a geometric temperature schedule. Every ascent step is taken in
//! mirror coordinates and mapped back onto the unit sphere of the potential;
//! the fixed points of that map are exactly the KKT points of the
//! sphere-constrained problem. The final iterate is certified through weak
//! duality: for any weights `lambda` on the simplex,
//! `||sum_i lambda_i y_i x_i||_{psi,*}` bounds the optimal margin from above.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{margin_unchecked, Dataset, EmpiricalLoss, LossSpec, Objective};
use crate::potential::{dot, l2_norm, lp_norm, Potential, WeightVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxMarginResult {
    /// Unit vector in the potential norm.
    pub direction: WeightVector,
    /// Optimal margin measured over the unit ball of the potential norm.
    pub margin_value: f64,
    /// Certified upper bound on `optimal margin - margin_value`.
    pub solver_gap: f64,
}

impl MaxMarginResult {
    /// The same margin measured over the unit `l_p` ball, which is the
    /// potential ball shrunk by `p^(1/beta)`.
    pub fn lp_margin(&self, pot: &Potential) -> f64 {
        self.margin_value / pot.lp_scale()
    }

    pub fn separable(&self) -> bool {
        self.margin_value > 0.0
    }
}

/// Knobs of the smoothed solver. The defaults are the documented schedule:
/// temperature from 1 down to 1e-6 by halving, 500 ascent iterations per level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_factor: f64,
    pub inner_iters: usize,
    /// Target for the certified gap; the schedule is extended below
    /// `tau_end` (down to `tau_floor`) until it is met.
    pub gap_target: f64,
    pub tau_floor: f64,
    /// Random initial direction instead of the data mean.
    pub restart_seed: Option<u64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tau_start: 1.0,
            tau_end: 1e-6,
            tau_factor: 0.5,
            inner_iters: 500,
            gap_target: 1e-6,
            tau_floor: 1e-10,
            restart_seed: None,
        }
    }
}

pub fn max_margin(data: &Dataset, pot: &Potential) -> Result<MaxMarginResult> {
    max_margin_with(data, pot, &SolverOptions::default())
}

struct Smoothed<'a> {
    rows: &'a [Vec<f64>],
    margins: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a> Smoothed<'a> {
    fn new(rows: &'a [Vec<f64>]) -> Self {
        Self {
            rows,
            margins: vec![0.0; rows.len()],
            weights: vec![0.0; rows.len()],
        }
    }

    /// Evaluates the smoothed margin at `w` and leaves the softmax weights in
    /// `self.weights`.
    fn eval(&mut self, w: &[f64], tau: f64) -> f64 {
        for (m, a) in self.margins.iter_mut().zip(self.rows) {
            *m = dot(a, w);
        }
        let m_min = self.margins.iter().copied().fold(f64::INFINITY, f64::min);
        let mut z = 0.0;
        for (l, m) in self.weights.iter_mut().zip(&self.margins) {
            *l = (-(m - m_min) / tau).exp();
            z += *l;
        }
        for l in self.weights.iter_mut() {
            *l /= z;
        }
        m_min - tau * z.ln()
    }

    fn ascent_direction(&self, out: &mut [f64]) {
        out.fill(0.0);
        for (a, l) in self.rows.iter().zip(&self.weights) {
            for (o, x) in out.iter_mut().zip(a) {
                *o += l * x;
            }
        }
    }

    fn min_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn signed_rows(data: &Dataset) -> Vec<Vec<f64>> {
    (0..data.n()).map(|i| data.signed_row(i)).collect()
}

fn initial_direction(rows: &[Vec<f64>], pot: &Potential, seed: Option<u64>) -> Vec<f64> {
    let d = rows[0].len();
    let mut w: Vec<f64> = match seed {
        Some(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
        }
        None => {
            let mut mean = vec![0.0; d];
            for a in rows {
                for (m, x) in mean.iter_mut().zip(a) {
                    *m += x;
                }
            }
            mean
        }
    };
    if pot.norm(&w) == 0.0 {
        w = vec![1.0; d];
    }
    pot.normalize(&w).expect("nonzero by construction")
}

pub fn max_margin_with(
    data: &Dataset,
    pot: &Potential,
    opts: &SolverOptions,
) -> Result<MaxMarginResult> {
    let rows = signed_rows(data);
    let d = data.d();
    let mut w = initial_direction(&rows, pot, opts.restart_seed);
    let mut sm = Smoothed::new(&rows);
    let mut z = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut cand = vec![0.0; d];
    let mut tau = opts.tau_start;
    let mut best_w = w.clone();
    let mut best_primal = margin_unchecked(&w, data);
    let mut best_dual = f64::INFINITY;
    let mut best_gap;
    loop {
        let mut f = sm.eval(&w, tau);
        let mut step = 1.0;
        let mut stalled = 0;
        for _ in 0..opts.inner_iters {
            sm.ascent_direction(&mut g);
            pot.grad_into(&w, &mut z)?;
            let mut improved = false;
            for _ in 0..60 {
                for ((c, zj), gj) in cand.iter_mut().zip(&z).zip(&g) {
                    *c = zj + step * gj;
                }
                let v = pot.inv_grad(&cand);
                let n = pot.norm(&v);
                if n > 0.0 && n.is_finite() {
                    for (c, vj) in cand.iter_mut().zip(&v) {
                        *c = vj / n;
                    }
                    let fc = sm.eval(&cand, tau);
                    if fc >= f {
                        improved = fc > f;
                        w.copy_from_slice(&cand);
                        step *= 1.5;
                        break;
                    }
                }
                step *= 0.5;
            }
            // Restore the softmax weights of the accepted point.
            f = sm.eval(&w, tau);
            if improved {
                stalled = 0;
            } else {
                stalled += 1;
                if stalled >= 3 {
                    break;
                }
                step = step.max(1e-12);
            }
        }
        sm.eval(&w, tau);
        let primal = sm.min_margin();
        if primal > best_primal {
            best_primal = primal;
            best_w.copy_from_slice(&w);
        }
        sm.ascent_direction(&mut g);
        best_dual = best_dual.min(pot.dual_norm(&g));
        best_gap = (best_dual - best_primal).max(0.0);
        let next = tau * opts.tau_factor;
        if tau <= opts.tau_end && (best_gap <= opts.gap_target || next < opts.tau_floor) {
            break;
        }
        tau = next;
    }
    let w = best_w;
    let margin_value = margin_unchecked(&w, data);
    let scale = rows.iter().map(|a| pot.dual_norm(a)).fold(0.0, f64::max);
    if margin_value <= 1e-12 * scale {
        return Err(Error::Infeasible {
            best_margin: margin_value,
        });
    }
    Ok(MaxMarginResult {
        direction: WeightVector::new(w)?,
        margin_value,
        solver_gap: best_gap,
    })
}

/// Brute-force max-margin over `resolution` angles of the plane, each ray
/// scaled onto the unit sphere of the potential norm.
///
/// A non-separable dataset yields `margin_value <= 0` rather than an error.
/// `solver_gap` is the Lipschitz bound `max_i ||a_i||_2 * max_v ||v||_2 * pi / resolution`
/// over grid neighbours.
pub fn grid_oracle_2d(data: &Dataset, pot: &Potential, resolution: usize) -> Result<MaxMarginResult> {
    if data.d() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: data.d(),
        });
    }
    let resolution = resolution.max(4);
    let rows = signed_rows(data);
    let mut best = (f64::NEG_INFINITY, [1.0, 0.0]);
    let mut max_radius: f64 = 0.0;
    for k in 0..resolution {
        let th = 2.0 * PI * k as f64 / resolution as f64;
        let ray = [th.cos(), th.sin()];
        let n = pot.norm(&ray);
        let v = [ray[0] / n, ray[1] / n];
        max_radius = max_radius.max(1.0 / n);
        let m = rows
            .iter()
            .map(|a| a[0] * v[0] + a[1] * v[1])
            .fold(f64::INFINITY, f64::min);
        if m > best.0 {
            best = (m, v);
        }
    }
    let lip = rows.iter().map(|a| l2_norm(a)).fold(0.0, f64::max) * max_radius;
    Ok(MaxMarginResult {
        direction: WeightVector::new(best.1.to_vec())?,
        margin_value: best.0,
        solver_gap: lip * PI / resolution as f64,
    })
}

/// Returns some `w` with positive margin, or `None` when the data is not
/// linearly separable.
pub fn separability_witness(data: &Dataset) -> Option<Vec<f64>> {
    let rows = signed_rows(data);
    let (n, d) = (data.n(), data.d());
    if n <= d {
        // Minimum-norm solution of A w = 1 when the Gram matrix is regular.
        let a = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let gram = &a * a.transpose();
        if let Some(chol) = gram.cholesky() {
            let alpha = chol.solve(&DVector::from_element(n, 1.0));
            let w = a.transpose() * alpha;
            let w: Vec<f64> = w.iter().copied().collect();
            if w.iter().all(|x| x.is_finite()) && margin_unchecked(&w, data) > 0.0 {
                return Some(w);
            }
        }
    }
    max_margin(data, &Potential::euclidean())
        .ok()
        .map(|r| r.direction.into_inner())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub budget: f64,
    pub minimizer: WeightVector,
    pub loss_at: f64,
    /// Frank-Wolfe duality gap at termination.
    pub fw_gap: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathOptions {
    /// Stop once the duality gap is below `rel_gap * max(loss, 1e-300)`.
    pub rel_gap: f64,
    pub max_iters: usize,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self {
            rel_gap: 1e-8,
            max_iters: 100_000,
        }
    }
}

pub fn regularization_path(
    data: &Dataset,
    pot: &Potential,
    spec: LossSpec,
    budgets: &[f64],
) -> Result<Vec<PathPoint>> {
    regularization_path_with(data, pot, spec, budgets, &PathOptions::default())
}

/// Frank-Wolfe over nested potential-norm balls, warm-started along the
/// budgets. The linear minimization oracle over `||w||_p <= R` is
/// `v = -R sign(g) |g|^(q-1) / ||g||_q^(q-1)`; steps use exact line search.
pub fn regularization_path_with(
    data: &Dataset,
    pot: &Potential,
    spec: LossSpec,
    budgets: &[f64],
    opts: &PathOptions,
) -> Result<Vec<PathPoint>> {
    if let Some(b) = budgets.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
        return Err(Error::InvalidConfig(format!("budget {b} is not positive")));
    }
    if budgets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig("budgets must be strictly increasing".into()));
    }
    let obj = EmpiricalLoss::new(data, spec);
    let d = data.d();
    let q = pot.q();
    let mut w = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut out = Vec::with_capacity(budgets.len());
    for &b in budgets {
        let radius = b * pot.lp_scale();
        let mut loss = obj.value_and_grad(&w, &mut g);
        let mut gap = f64::INFINITY;
        let mut iters = 0;
        while iters < opts.max_iters {
            let gq = lp_norm(&g, q);
            if gq == 0.0 {
                gap = 0.0;
                break;
            }
            gap = dot(&g, &w) + radius * gq;
            if gap <= opts.rel_gap * loss.max(1e-300) {
                break;
            }
            let scale = radius / gq.powf(q - 1.0);
            for (vj, gj) in v.iter_mut().zip(&g) {
                *vj = -scale * gj.signum() * gj.abs().powf(q - 1.0);
            }
            let dir: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a - b).collect();
            let gamma = line_search(data, spec, &w, &dir);
            if gamma == 0.0 {
                break;
            }
            for (wj, dj) in w.iter_mut().zip(&dir) {
                *wj += gamma * dj;
            }
            let next = obj.value_and_grad(&w, &mut g);
            iters += 1;
            if next > loss {
                // Line search is exact up to rounding; never accept an ascent.
                for (wj, dj) in w.iter_mut().zip(&dir) {
                    *wj -= gamma * dj;
                }
                loss = obj.value_and_grad(&w, &mut g);
                break;
            }
            loss = next;
        }
        out.push(PathPoint {
            budget: b,
            minimizer: WeightVector::new(w.clone())?,
            loss_at: loss,
            fw_gap: gap.max(0.0),
            iterations: iters,
        });
    }
    Ok(out)
}

/// Exact minimization of `L(w + gamma dir)` over `gamma in [0, 1]` by
/// bisection on the (monotone) directional derivative.
fn line_search(data: &Dataset, spec: LossSpec, w: &[f64], dir: &[f64]) -> f64 {
    let z: Vec<f64> = data.rows().map(|x| dot(x, w)).collect();
    let dz: Vec<f64> = data.rows().map(|x| dot(x, dir)).collect();
    let deriv = |gamma: f64| -> f64 {
        z.iter()
            .zip(&dz)
            .zip(data.labels())
            .map(|((zi, di), &y)| point_derivative(spec, zi + gamma * di, y) * di)
            .sum()
    };
    if deriv(0.0) >= 0.0 {
        return 0.0;
    }
    if deriv(1.0) <= 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if deriv(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-16 {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn point_derivative(spec: LossSpec, z: f64, y: f64) -> f64 {
    use crate::loss::LossKind::*;
    let m = y * z;
    match spec.kind {
        Exponential => -(-m).exp() * y,
        Logistic => {
            let s = if m >= 0.0 {
                let e = (-m).exp();
                e / (1.0 + e)
            } else {
                1.0 / (1.0 + m.exp())
            };
            -s * y
        }
        Square => 2.0 * (z - y),
        Hinge => {
            if 1.0 - m > 0.0 {
                -y
            } else {
                0.0
            }
        }
    }
}

/// `w / margin(w)`.
pub fn rescale_to_unit_margin(w: &[f64], data: &Dataset) -> Result<Vec<f64>> {
    data.check_dim(w)?;
    let g = margin_unchecked(w, data);
    if !(g > 0.0) {
        return Err(Error::NonPositiveMargin(g));
    }
    Ok(w.iter().map(|x| x / g).collect())
}

/// Index of an `l_q` norm column: any `q >= 1`, or infinity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NormIndex {
    Finite(f64),
    Infinity,
}

impl NormIndex {
    pub fn new(q: f64) -> Result<Self> {
        if q == f64::INFINITY {
            return Ok(NormIndex::Infinity);
        }
        if !(q.is_finite() && q >= 1.0) {
            return Err(Error::InvalidConfig(format!("norm index {q} must be >= 1 or inf")));
        }
        Ok(NormIndex::Finite(q))
    }

    pub fn eval(&self, w: &[f64]) -> f64 {
        match *self {
            NormIndex::Infinity => w.iter().fold(0.0, |m, x| m.max(x.abs())),
            NormIndex::Finite(q) => lp_norm(w, q),
        }
    }
}

impl fmt::Display for NormIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormIndex::Infinity => write!(f, "inf"),
            NormIndex::Finite(q) => write!(f, "{q}"),
        }
    }
}

impl FromStr for NormIndex {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(NormIndex::Infinity),
            t => {
                let q: f64 = t
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad norm index {t:?}")))?;
                NormIndex::new(q)
            }
        }
    }
}

/// Norms of unit-margin-rescaled classifiers, one row per classifier and one
/// column per norm index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormTable {
    pub rows: Vec<String>,
    pub columns: Vec<NormIndex>,
    pub values: Vec<Vec<f64>>,
}

impl NormTable {
    /// Row label of the smallest entry in each column.
    pub fn column_minimizers(&self) -> Vec<&str> {
        (0..self.columns.len())
            .map(|c| {
                let (best, _) = self
                    .values
                    .iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |acc, (r, row)| {
                        if row[c] < acc.1 {
                            (r, row[c])
                        } else {
                            acc
                        }
                    });
                self.rows[best].as_str()
            })
            .collect()
    }
}

pub fn classifier_norm_table(
    classifiers: &[(String, WeightVector)],
    data: &Dataset,
    report_norms: &[NormIndex],
) -> Result<NormTable> {
    let mut values = Vec::with_capacity(classifiers.len());
    for (_, w) in classifiers {
        let u = rescale_to_unit_margin(w, data)?;
        values.push(report_norms.iter().map(|q| q.eval(&u)).collect());
    }
    Ok(NormTable {
        rows: classifiers.iter().map(|(l, _)| l.clone()).collect(),
        columns: report_norms.to_vec(),
        values,
    })
}

/// Angle in radians between two nonzero vectors.
pub fn angle_between(a: &[f64], b: &[f64]) -> f64 {
    let c = dot(a, b) / (l2_norm(a) * l2_norm(b));
    c.clamp(-1.0, 1.0).acos()
}
