//! Mirror descent, `p`-GD and normalized mirror descent, step-size bounds, and
//! trajectory execution.
//!
//! A run keeps the mirror coordinates `grad psi(w_t)` as its primary state and
//! materializes `w_t` once per step:
//!
//! ```text
//! grad psi(w_{t+1}) = grad psi(w_t) - eta_t grad L(w_t)
//! ```
//!
//! with `eta_t = eta` for fixed steps and
//! `eta_t = eta0 / (sqrt(1 + lambda t) max(L(w_t), loss_floor))` for
//! normalized steps.

use log::{info, warn};
use nalgebra::SymmetricEigen;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{bregman_gap, TraceRow};
use crate::error::{Error, Result};
use crate::loss::{data_bound_c, margin_unchecked, Dataset, EmpiricalLoss, LossSpec, Objective};
use crate::potential::{l2_norm, signed_pow, Potential, WeightVector};

pub const DEFAULT_LOSS_FLOOR: f64 = 1e-5;
/// Slack allowed by the monotonicity guard, `L(w_{t+1}) <= L(w_t) + tol`.
pub const MONOTONE_TOL: f64 = 1e-12;
/// `epsilon` of the augmented potential `(epsilon/2) ||w||_2^2 + psi` used by
/// [`max_safe_eta`] when `beta > 2`.
pub const AUGMENT_EPS: f64 = 1e-2;

const INIT_STREAM: u64 = 1 << 32;
const SPHERE_SEED: u64 = 0x5eed;
const SPHERE_SAMPLES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    #[default]
    Fixed,
    Normalized,
}

/// What a fixed-step run does when the loss goes up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonotonicityPolicy {
    /// Stop with [`Error::MonotonicityViolation`].
    #[default]
    Abort,
    /// Retry the step once with half the step size, and keep the halved
    /// step size from then on.
    Halve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub pot: Potential,
    pub spec: LossSpec,
    pub step_kind: StepKind,
    /// Fixed step `eta`, or the base step `eta0` of the normalized schedule.
    pub eta: f64,
    pub lambda: f64,
    pub steps: u64,
    pub seed: u64,
    /// Standard deviation of the Gaussian initialization.
    pub w0_scale: f64,
    pub loss_floor: f64,
    pub record_every: u64,
    pub monotonicity: MonotonicityPolicy,
    /// For normalized runs: take up to this many fixed steps of size `eta`
    /// first, stopping once `L(w) <= 1/(2n)`.
    pub warm_start_steps: Option<u64>,
}

impl RunConfig {
    pub fn new(pot: Potential, spec: LossSpec) -> Self {
        Self {
            pot,
            spec,
            step_kind: StepKind::Fixed,
            eta: 1e-3,
            lambda: 1.0,
            steps: 1000,
            seed: 0,
            w0_scale: 1.0,
            loss_floor: DEFAULT_LOSS_FLOOR,
            record_every: 1,
            monotonicity: MonotonicityPolicy::Abort,
            warm_start_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if !(self.loss_floor.is_finite() && self.loss_floor > 0.0) {
            return bad(format!("loss_floor must be > 0, got {}", self.loss_floor));
        }
        if self.record_every == 0 {
            return bad("record_every must be >= 1".into());
        }
        if !(self.w0_scale.is_finite() && self.w0_scale >= 0.0) {
            return bad(format!("w0_scale must be >= 0, got {}", self.w0_scale));
        }
        if self.w0_scale == 0.0 && self.pot.beta() < self.pot.p() {
            return bad("w0 = 0 is a singular point of the mirror map when beta < p".into());
        }
        Ok(())
    }

    /// `w0 ~ N(0, w0_scale^2 I)`, drawn from the run seed.
    pub fn initial_weights(&self, d: usize) -> WeightVector {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(INIT_STREAM);
        let w = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.w0_scale * z
            })
            .collect();
        WeightVector::new(w).expect("finite by construction")
    }
}

/// Result of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss_before: f64,
    pub loss_after: f64,
    /// Multiplier applied to `grad L(w_t)`.
    pub eta_effective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rule {
    Mirror,
    Coordinate,
}

#[derive(Debug, Clone)]
pub struct OptimizerRun {
    config: RunConfig,
    w: WeightVector,
    t: u64,
    mirror_state: WeightVector,
    eta_scale: f64,
    eval: Option<(f64, Vec<f64>)>,
    next_w: Vec<f64>,
    next_z: Vec<f64>,
    next_grad: Vec<f64>,
}

impl OptimizerRun {
    pub fn new(config: RunConfig, w0: WeightVector) -> Result<Self> {
        config.validate()?;
        let z = config.pot.grad(&w0)?;
        let d = w0.len();
        Ok(Self {
            config,
            mirror_state: WeightVector::new(z)?,
            w: w0,
            t: 0,
            eta_scale: 1.0,
            eval: None,
            next_w: vec![0.0; d],
            next_z: vec![0.0; d],
            next_grad: vec![0.0; d],
        })
    }

    /// Starts from the seeded Gaussian initialization.
    pub fn init(config: RunConfig, d: usize) -> Result<Self> {
        config.validate()?;
        let w0 = config.initial_weights(d);
        Self::new(config, w0)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn w(&self) -> &WeightVector {
        &self.w
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn mirror_state(&self) -> &WeightVector {
        &self.mirror_state
    }

    /// Step size currently in force, after any halving by the guard.
    pub fn eta(&self) -> f64 {
        self.config.eta * self.eta_scale
    }

    /// `L(w_t)`, evaluated once and cached.
    pub fn loss<O: Objective + ?Sized>(&mut self, obj: &O) -> Result<f64> {
        self.ensure_eval(obj)?;
        Ok(self.eval.as_ref().map(|e| e.0).unwrap())
    }

    fn ensure_eval<O: Objective + ?Sized>(&mut self, obj: &O) -> Result<()> {
        if self.eval.is_none() {
            if obj.dim() != self.w.len() {
                return Err(Error::DimensionMismatch { expected: self.w.len(), got: obj.dim() });
            }
            let mut g = vec![0.0; self.w.len()];
            let l = obj.value_and_grad(&self.w, &mut g);
            if !l.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteState { step: self.t });
            }
            self.eval = Some((l, g));
        }
        Ok(())
    }

    fn eta_effective(&self, kind: StepKind, loss: f64) -> f64 {
        let eta = self.eta();
        match kind {
            StepKind::Fixed => eta,
            StepKind::Normalized => {
                let decay = (1.0 + self.config.lambda * self.t as f64).sqrt();
                eta / (decay * loss.max(self.config.loss_floor))
            }
        }
    }

    /// Step size the next step would apply.
    pub fn next_eta_effective<O: Objective + ?Sized>(&mut self, obj: &O) -> Result<f64> {
        let l = self.loss(obj)?;
        Ok(self.eta_effective(self.config.step_kind, l))
    }

    /// Fills the `next_*` buffers without touching the current state.
    fn propose<O: Objective + ?Sized>(&mut self, obj: &O, kind: StepKind, rule: Rule) -> Result<StepReport> {
        self.ensure_eval(obj)?;
        let (loss, grad) = self.eval.as_ref().unwrap();
        let loss = *loss;
        let eta = self.eta_effective(kind, loss);
        match rule {
            Rule::Mirror => {
                for ((n, z), g) in self.next_z.iter_mut().zip(self.mirror_state.iter()).zip(grad) {
                    *n = z - eta * g;
                }
                self.config.pot.inv_grad_into(&self.next_z, &mut self.next_w);
            }
            Rule::Coordinate => {
                let p = self.config.pot.p();
                let (pm1, inv) = (p - 1.0, 1.0 / (p - 1.0));
                for j in 0..self.w.len() {
                    let plus = signed_pow(self.w[j], pm1) - eta * grad[j];
                    self.next_z[j] = plus;
                    self.next_w[j] = signed_pow(plus, inv);
                }
            }
        }
        let step = self.t + 1;
        if self.next_w.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
        let after = obj.value_and_grad(&self.next_w, &mut self.next_grad);
        if !after.is_finite() || self.next_grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
        Ok(StepReport { loss_before: loss, loss_after: after, eta_effective: eta })
    }

    fn commit(&mut self, report: &StepReport) {
        std::mem::swap(self.w.vec_mut(), &mut self.next_w);
        std::mem::swap(self.mirror_state.vec_mut(), &mut self.next_z);
        let spare = match self.eval.take() {
            Some((_, g)) => g,
            None => vec![0.0; self.w.len()],
        };
        let grad = std::mem::replace(&mut self.next_grad, spare);
        self.eval = Some((report.loss_after, grad));
        self.t += 1;
    }

    fn require(&self, kind: StepKind, op: &str) -> Result<()> {
        if self.config.step_kind != kind {
            return Err(Error::InvalidConfig(format!(
                "{op} needs step_kind {kind:?}, run is {:?}",
                self.config.step_kind
            )));
        }
        Ok(())
    }

    /// Fixed-step mirror descent.
    pub fn md_step<O: Objective + ?Sized>(&mut self, obj: &O) -> Result<StepReport> {
        self.require(StepKind::Fixed, "md_step")?;
        let r = self.propose(obj, StepKind::Fixed, Rule::Mirror)?;
        self.commit(&r);
        Ok(r)
    }

    /// Normalized mirror descent.
    pub fn nmd_step<O: Objective + ?Sized>(&mut self, obj: &O) -> Result<StepReport> {
        self.require(StepKind::Normalized, "nmd_step")?;
        let r = self.propose(obj, StepKind::Normalized, Rule::Mirror)?;
        self.commit(&r);
        Ok(r)
    }

    /// The coordinate-wise `p`-GD update
    /// `w+_j = |w_j|^(p-1) sign(w_j) - eta_t g_j`, `w_j <- |w+_j|^(1/(p-1)) sign(w+_j)`.
    /// It recomputes the mirror coordinates from `w` instead of using the
    /// cached state, so it doubles as an independent check of [`md_step`].
    ///
    /// [`md_step`]: OptimizerRun::md_step
    pub fn pgd_step<O: Objective + ?Sized>(&mut self, obj: &O) -> Result<StepReport> {
        if !self.config.pot.is_separable() {
            return Err(Error::InvalidConfig(format!(
                "pgd_step needs beta = p, got p = {}, beta = {}",
                self.config.pot.p(),
                self.config.pot.beta()
            )));
        }
        let r = self.propose(obj, self.config.step_kind, Rule::Coordinate)?;
        self.commit(&r);
        Ok(r)
    }

    /// One step of the configured kind.
    pub fn step<O: Objective + ?Sized>(&mut self, obj: &O) -> Result<StepReport> {
        let r = self.propose(obj, self.config.step_kind, Rule::Mirror)?;
        self.commit(&r);
        Ok(r)
    }

    /// [`step`](OptimizerRun::step) with the monotonicity guard applied to
    /// fixed-step runs.
    pub fn guarded_step<O: Objective + ?Sized>(&mut self, obj: &O) -> Result<StepReport> {
        let kind = self.config.step_kind;
        let r = self.propose(obj, kind, Rule::Mirror)?;
        if kind == StepKind::Normalized || r.loss_after <= r.loss_before + MONOTONE_TOL {
            self.commit(&r);
            return Ok(r);
        }
        let violation = Error::MonotonicityViolation {
            step: self.t + 1,
            before: r.loss_before,
            after: r.loss_after,
        };
        if self.config.monotonicity == MonotonicityPolicy::Abort {
            return Err(violation);
        }
        self.eta_scale *= 0.5;
        warn!("{violation}; retrying with eta = {:e}", self.eta());
        let r = self.propose(obj, kind, Rule::Mirror)?;
        if r.loss_after > r.loss_before + MONOTONE_TOL {
            return Err(Error::MonotonicityViolation {
                step: self.t + 1,
                before: r.loss_before,
                after: r.loss_after,
            });
        }
        self.commit(&r);
        Ok(r)
    }

    /// Fixed steps of size `eta` until `L(w) <= 1/(2n)` or `budget` steps.
    /// The step counter is reset afterwards. Returns the steps taken.
    pub fn warm_start<O: Objective + ?Sized>(&mut self, obj: &O, n: usize, budget: u64) -> Result<u64> {
        let target = 1.0 / (2.0 * n as f64);
        let mut taken = 0;
        while taken < budget && self.loss(obj)? > target {
            let r = self.propose(obj, StepKind::Fixed, Rule::Mirror)?;
            self.commit(&r);
            taken += 1;
        }
        self.t = 0;
        Ok(taken)
    }
}

/// Largest step size for which `psi - eta L` is certified convex at `w0`:
/// `mu(w0) / (C^2 L(w0))`, using `||hess L(w)||_2 <= C^2 L(w)`.
///
/// `mu(w0)` is `1` for `(2, 2)`. Otherwise it is `m ||w0||_2^(beta-2)`, with
/// `m` the smallest Hessian eigenvalue of `psi` over a fixed sample of the
/// unit sphere, plus [`AUGMENT_EPS`] when `beta > 2` (the bound then holds for
/// the augmented potential). The Hessian bound is valid for the
/// exponential and logistic losses.
pub fn max_safe_eta(data: &Dataset, pot: &Potential, spec: LossSpec, w0: &[f64]) -> Result<f64> {
    data.check_dim(w0)?;
    let c = data_bound_c(data, pot);
    let l0 = EmpiricalLoss::new(data, spec).value(w0);
    let mu = local_curvature(pot, w0);
    Ok(mu / (c * c * l0))
}

fn local_curvature(pot: &Potential, w0: &[f64]) -> f64 {
    if pot.p() == 2.0 && pot.beta() == 2.0 {
        return 1.0;
    }
    let m = sphere_min_eigenvalue(pot, w0.len());
    let r = l2_norm(w0);
    let base = m * r.powf(pot.beta() - 2.0);
    if pot.beta() > 2.0 {
        base + AUGMENT_EPS
    } else {
        base
    }
}

/// `min lambda_min(hess psi(u))` over seeded Gaussian directions `u`.
pub fn sphere_min_eigenvalue(pot: &Potential, d: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(SPHERE_SEED);
    let mut best = f64::INFINITY;
    let mut u = vec![0.0; d];
    for _ in 0..SPHERE_SAMPLES {
        for x in u.iter_mut() {
            *x = StandardNormal.sample(&mut rng);
        }
        let n = l2_norm(&u);
        if n == 0.0 || u.contains(&0.0) {
            continue;
        }
        u.iter_mut().for_each(|x| *x /= n);
        let Ok(h) = pot.hessian(&u) else { continue };
        let lo = SymmetricEigen::new(h).eigenvalues.min();
        best = best.min(lo);
    }
    best.max(0.0)
}

/// Runs `config.steps` steps from the seeded initialization and records
/// `t = 0`, every `record_every`-th step, and the final step. With a
/// `target` direction the Bregman gap `D_psi(target, w_t / ||w_t||_psi)` is
/// recorded as well.
pub fn run_trajectory(config: &RunConfig, data: &Dataset, target: Option<&[f64]>) -> Result<Vec<TraceRow>> {
    config.validate()?;
    let w0 = config.initial_weights(data.d());
    run_trajectory_from(config, data, w0, target)
}

pub fn run_trajectory_from(
    config: &RunConfig,
    data: &Dataset,
    w0: WeightVector,
    target: Option<&[f64]>,
) -> Result<Vec<TraceRow>> {
    run_trajectory_full(config, data, w0, target).map(|t| t.rows)
}

/// Recorded rows together with the final iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rows: Vec<TraceRow>,
    pub final_w: WeightVector,
}

pub fn run_trajectory_full(
    config: &RunConfig,
    data: &Dataset,
    w0: WeightVector,
    target: Option<&[f64]>,
) -> Result<Trajectory> {
    config.validate()?;
    data.check_dim(&w0)?;
    if let Some(u) = target {
        data.check_dim(u)?;
    }
    let obj = EmpiricalLoss::new(data, config.spec);
    let mut run = OptimizerRun::new(config.clone(), w0)?;
    if let (StepKind::Normalized, Some(budget)) = (config.step_kind, config.warm_start_steps) {
        let taken = run.warm_start(&obj, data.n(), budget)?;
        info!("warm start took {taken} fixed steps");
    }
    let pot = config.pot;
    let record = |run: &OptimizerRun, loss: f64, eta: f64| -> Result<TraceRow> {
        let w = run.w();
        let gap = match target {
            Some(u) if w.iter().any(|x| *x != 0.0) => Some(bregman_gap(w, u, &pot)?),
            _ => None,
        };
        Ok(TraceRow {
            t: run.t(),
            loss,
            psi_norm_w: pot.norm(w),
            margin_w: margin_unchecked(w, data),
            eta_effective: eta,
            bregman_gap: gap,
        })
    };
    let expected = (config.steps / config.record_every) as usize + 2;
    let mut rows = Vec::with_capacity(expected);
    let l0 = run.loss(&obj)?;
    let eta0 = run.next_eta_effective(&obj)?;
    rows.push(record(&run, l0, eta0)?);
    for t in 1..=config.steps {
        let guarded = config.step_kind == StepKind::Fixed;
        let r = if guarded { run.guarded_step(&obj)? } else { run.step(&obj)? };
        if t % config.record_every == 0 || t == config.steps {
            let eta = run.next_eta_effective(&obj)?;
            rows.push(record(&run, r.loss_after, eta)?);
        }
    }
    Ok(Trajectory {
        rows,
        final_w: run.w().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_planar2d;
    use crate::loss::{LossKind, Reduction};
    use crate::margin::max_margin;
    use proptest::prelude::*;

    fn unit_basis() -> Dataset {
        Dataset::positive(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap()
    }

    fn fixed(pot: Potential, spec: LossSpec, eta: f64) -> RunConfig {
        RunConfig { eta, ..RunConfig::new(pot, spec) }
    }

    fn run_from(cfg: RunConfig, w0: &[f64]) -> OptimizerRun {
        OptimizerRun::new(cfg, WeightVector::new(w0.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn hinge_gd_iterates_are_exact() {
        let data = unit_basis();
        let spec = LossSpec::new(LossKind::Hinge, Reduction::Sum);
        let obj = EmpiricalLoss::new(&data, spec);
        let cases = [(2.0, [1.0, 0.0, -1.0], [1.0, 2.0, 1.0]), (3.0, [2.0, 1.0, 0.0], [2.0, 1.0, 3.0])];
        for (eta, w1, w2) in cases {
            let mut run = run_from(fixed(Potential::euclidean(), spec, eta), &[-1.0, -2.0, -3.0]);
            run.md_step(&obj).unwrap();
            assert_eq!(run.w().as_slice(), &w1);
            run.md_step(&obj).unwrap();
            assert_eq!(run.w().as_slice(), &w2);
        }
    }

    #[test]
    fn euclidean_md_is_gradient_descent() {
        let data = gen_planar2d(1);
        let spec = LossSpec::exponential();
        let obj = EmpiricalLoss::new(&data, spec);
        let mut run = run_from(fixed(Potential::euclidean(), spec, 0.1), &[0.3, -0.2]);
        let mut w = vec![0.3, -0.2];
        let mut g = vec![0.0; 2];
        for _ in 0..50 {
            obj.value_and_grad(&w, &mut g);
            for (x, gj) in w.iter_mut().zip(&g) {
                *x -= 0.1 * gj;
            }
            run.md_step(&obj).unwrap();
            for (a, b) in run.w().iter().zip(&w) {
                assert!((a - b).abs() <= 1e-15 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn pgd_hand_example() {
        // Constant gradient (1, 1).
        struct Linear;
        impl Objective for Linear {
            fn dim(&self) -> usize {
                2
            }
            fn value(&self, w: &[f64]) -> f64 {
                w[0] + w[1]
            }
            fn value_and_grad(&self, w: &[f64], g: &mut [f64]) -> f64 {
                g.fill(1.0);
                self.value(w)
            }
        }
        let pot = Potential::pgd(3.0).unwrap();
        let mut run = run_from(fixed(pot, LossSpec::exponential(), 1.0), &[2.0, -3.0]);
        run.pgd_step(&Linear).unwrap();
        assert_eq!(run.mirror_state().as_slice(), &[3.0, -10.0]);
        assert!((run.w()[0] - 3f64.sqrt()).abs() < 1e-15);
        assert!((run.w()[1] + 10f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pgd_single_step_equals_md_exactly() {
        let data = gen_planar2d(2);
        let spec = LossSpec::exponential();
        let obj = EmpiricalLoss::new(&data, spec);
        let cfg = RunConfig { seed: 9, ..fixed(Potential::pgd(3.0).unwrap(), spec, 0.01) };
        let mut a = OptimizerRun::init(cfg.clone(), 2).unwrap();
        let mut b = OptimizerRun::init(cfg, 2).unwrap();
        a.md_step(&obj).unwrap();
        b.pgd_step(&obj).unwrap();
        assert_eq!(a.w(), b.w());
    }

    #[test]
    fn pgd_rejects_non_separable_potential() {
        let data = unit_basis();
        let obj = EmpiricalLoss::new(&data, LossSpec::exponential());
        let mut run = run_from(fixed(Potential::new(2.0, 3.0).unwrap(), LossSpec::exponential(), 0.1), &[1.0; 3]);
        assert!(matches!(run.pgd_step(&obj), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn step_kind_is_enforced() {
        let data = unit_basis();
        let obj = EmpiricalLoss::new(&data, LossSpec::exponential());
        let mut run = run_from(fixed(Potential::euclidean(), LossSpec::exponential(), 0.1), &[1.0; 3]);
        assert!(run.nmd_step(&obj).is_err());
        assert!(run.md_step(&obj).is_ok());
    }

    #[test]
    fn normalized_step_reduces_to_plain_step() {
        // lambda = 1, t = 0, L(w0) = 1 at w0 = 0: all factors are one.
        let data = unit_basis();
        let spec = LossSpec::exponential();
        let obj = EmpiricalLoss::new(&data, spec);
        let cfg = RunConfig { step_kind: StepKind::Normalized, eta: 0.25, ..RunConfig::new(Potential::euclidean(), spec) };
        let mut n = run_from(cfg, &[0.0; 3]);
        let mut f = run_from(fixed(Potential::euclidean(), spec, 0.25), &[0.0; 3]);
        let r = n.nmd_step(&obj).unwrap();
        f.md_step(&obj).unwrap();
        assert_eq!(r.eta_effective, 0.25);
        assert_eq!(n.w(), f.w());

        // lambda = 0 keeps eta0 / L(w_t) at every step.
        let cfg = RunConfig { step_kind: StepKind::Normalized, eta: 0.25, lambda: 0.0, ..RunConfig::new(Potential::euclidean(), spec) };
        let mut n = run_from(cfg, &[0.0; 3]);
        for _ in 0..5 {
            let l = n.loss(&obj).unwrap();
            let r = n.nmd_step(&obj).unwrap();
            assert!((r.eta_effective - 0.25 / l).abs() <= 1e-15 * r.eta_effective);
        }
    }

    #[test]
    fn mirror_state_tracks_weights() {
        let data = gen_planar2d(4);
        let spec = LossSpec::exponential();
        let obj = EmpiricalLoss::new(&data, spec);
        for pot in [Potential::new(1.5, 2.5).unwrap(), Potential::new(3.0, 1.5).unwrap()] {
            let mut run = OptimizerRun::init(fixed(pot, spec, 1e-2), 2).unwrap();
            for _ in 0..200 {
                run.md_step(&obj).unwrap();
            }
            let g = pot.grad(run.w()).unwrap();
            for (a, b) in g.iter().zip(run.mirror_state().iter()) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn safe_eta_closed_form() {
        let data = unit_basis();
        let spec = LossSpec::exponential();
        let pot = Potential::euclidean();
        let eta = max_safe_eta(&data, &pot, spec, &[0.0; 3]).unwrap();
        assert!((eta - 0.5).abs() < 1e-15);
        let eta2 = max_safe_eta(&data.scaled(2.0), &pot, spec, &[0.0; 3]).unwrap();
        assert!((eta2 - 0.125).abs() < 1e-15);
    }

    #[test]
    fn safe_eta_is_positive_for_non_euclidean_potentials() {
        let data = gen_planar2d(0);
        let spec = LossSpec::exponential();
        let w0 = RunConfig::new(Potential::euclidean(), spec).initial_weights(2);
        for pot in [Potential::pgd(1.5).unwrap(), Potential::pgd(3.0).unwrap(), Potential::new(2.0, 1.5).unwrap()] {
            let eta = max_safe_eta(&data, &pot, spec, &w0).unwrap();
            assert!(eta.is_finite() && eta > 0.0, "{pot:?}: {eta}");
        }
    }

    #[test]
    fn safe_eta_keeps_loss_monotone() {
        let data = gen_planar2d(0);
        let spec = LossSpec::exponential();
        let obj = EmpiricalLoss::new(&data, spec);
        for pot in [Potential::euclidean(), Potential::pgd(1.5).unwrap(), Potential::pgd(3.0).unwrap()] {
            let base = RunConfig::new(pot, spec);
            let w0 = base.initial_weights(2);
            let eta = max_safe_eta(&data, &pot, spec, &w0).unwrap();
            let mut run = OptimizerRun::new(RunConfig { eta: 0.999 * eta, ..base }, w0).unwrap();
            for _ in 0..2000 {
                let r = run.md_step(&obj).unwrap();
                assert!(r.loss_after <= r.loss_before + MONOTONE_TOL);
            }
        }
    }

    /// `L(w) = |w|^2` on the line.
    struct Quadratic;
    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, w: &[f64]) -> f64 {
            w[0] * w[0]
        }
        fn value_and_grad(&self, w: &[f64], g: &mut [f64]) -> f64 {
            g[0] = 2.0 * w[0];
            self.value(w)
        }
    }

    #[test]
    fn guard_aborts_or_halves() {
        let spec = LossSpec::exponential();
        // eta = 1.5 maps w to -2w; eta = 0.75 maps it to -w/2.
        let mut run = run_from(fixed(Potential::euclidean(), spec, 1.5), &[1.0]);
        assert_eq!(
            run.guarded_step(&Quadratic),
            Err(Error::MonotonicityViolation { step: 1, before: 1.0, after: 4.0 })
        );
        assert_eq!(run.t(), 0);
        let cfg = RunConfig { monotonicity: MonotonicityPolicy::Halve, ..fixed(Potential::euclidean(), spec, 1.5) };
        let mut run = run_from(cfg.clone(), &[1.0]);
        run.guarded_step(&Quadratic).unwrap();
        assert_eq!(run.eta(), 0.75);
        assert_eq!(run.w().as_slice(), &[-0.5]);
        let mut run = run_from(RunConfig { eta: 3.0, ..cfg }, &[1.0]);
        assert!(run.guarded_step(&Quadratic).is_err());
    }

    #[test]
    fn fixed_trajectory_aborts_on_large_step() {
        let data = gen_planar2d(0);
        let spec = LossSpec::new(LossKind::Square, Reduction::Sum);
        let cfg = RunConfig { eta: 10.0, steps: 50, ..RunConfig::new(Potential::euclidean(), spec) };
        assert!(matches!(run_trajectory(&cfg, &data, None), Err(Error::MonotonicityViolation { step: 1, .. })));
    }

    #[test]
    fn loss_vanishes_and_norm_diverges() {
        let data = gen_planar2d(0);
        let spec = LossSpec::exponential();
        let cfg = RunConfig { steps: 100_000, record_every: 10_000, ..RunConfig::new(Potential::euclidean(), spec) };
        let rows = run_trajectory(&cfg, &data, None).unwrap();
        assert!(rows[rows.len() - 1].loss < rows[0].loss / 10.0);
        assert!(rows[1..].windows(2).all(|w| w[1].psi_norm_w > w[0].psi_norm_w));
    }

    #[test]
    fn trajectory_records_initial_and_final_rows() {
        let data = gen_planar2d(0);
        let spec = LossSpec::exponential();
        let u = max_margin(&data, &Potential::euclidean()).unwrap().direction;
        let cfg = RunConfig { steps: 1, ..RunConfig::new(Potential::euclidean(), spec) };
        let rows = run_trajectory(&cfg, &data, Some(&u)).unwrap();
        assert_eq!(rows.iter().map(|r| r.t).collect::<Vec<_>>(), vec![0, 1]);
        assert!(rows.iter().all(|r| r.bregman_gap.is_some()));
        let cfg = RunConfig { steps: 25, record_every: 10, ..cfg };
        let rows = run_trajectory(&cfg, &data, None).unwrap();
        assert_eq!(rows.iter().map(|r| r.t).collect::<Vec<_>>(), vec![0, 10, 20, 25]);
        assert!(rows.iter().all(|r| r.bregman_gap.is_none()));
    }

    #[test]
    fn trajectories_are_deterministic() {
        let data = gen_planar2d(3);
        let cfg = RunConfig {
            steps: 2000,
            record_every: 7,
            seed: 11,
            ..RunConfig::new(Potential::new(1.5, 2.5).unwrap(), LossSpec::exponential())
        };
        let a = run_trajectory(&cfg, &data, None).unwrap();
        let b = run_trajectory(&cfg, &data, None).unwrap();
        let bits = |r: &[TraceRow]| r.iter().map(|x| (x.loss.to_bits(), x.psi_norm_w.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = run_trajectory(&RunConfig { seed: 12, ..cfg }, &data, None).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn square_loss_gd_solves_least_squares() {
        // Two equations in three unknowns; the minimum-norm solution from
        // w0 = 0 is x = A^T (A A^T)^{-1} y.
        let data = Dataset::new(vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]], vec![1.0, -1.0]).unwrap();
        let spec = LossSpec::new(LossKind::Square, Reduction::Sum);
        let cfg = RunConfig { eta: 0.1, steps: 2000, w0_scale: 0.0, ..RunConfig::new(Potential::euclidean(), spec) };
        let obj = EmpiricalLoss::new(&data, spec);
        let mut run = OptimizerRun::init(cfg, 3).unwrap();
        for _ in 0..2000 {
            run.md_step(&obj).unwrap();
        }
        assert!(run.loss(&obj).unwrap() < 1e-20);
        let expect = [1.0, -1.0, 0.0];
        for (a, b) in run.w().iter().zip(expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_init_rejected_when_mirror_map_is_singular() {
        let cfg = RunConfig { w0_scale: 0.0, ..RunConfig::new(Potential::new(3.0, 2.0).unwrap(), LossSpec::exponential()) };
        assert!(OptimizerRun::init(cfg, 2).is_err());
    }

    /// `D_f(x, y) = f(x) - f(y) - <grad f(y), x - y>` for `f = a psi + b L`.
    fn d_combo(pot: &Potential, obj: &EmpiricalLoss, a: f64, b: f64, x: &[f64], y: &[f64]) -> f64 {
        let mut gl = vec![0.0; y.len()];
        let ly = obj.value_and_grad(y, &mut gl);
        let gp = pot.grad(y).unwrap();
        let f = |v: &[f64], l: f64| a * pot.value(v) + b * l;
        let cross: f64 = (0..x.len()).map(|j| (a * gp[j] + b * gl[j]) * (x[j] - y[j])).sum();
        f(x, obj.value(x)) - f(y, ly) - cross
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pgd_and_md_agree(p in 1.2f64..4.0, seed in 0u64..1000, steps in 1usize..40) {
            let data = gen_planar2d(seed % 5);
            let spec = LossSpec::exponential();
            let obj = EmpiricalLoss::new(&data, spec);
            let cfg = RunConfig { seed, ..fixed(Potential::pgd(p).unwrap(), spec, 1e-2) };
            let mut a = OptimizerRun::init(cfg.clone(), 2).unwrap();
            let mut b = OptimizerRun::init(cfg, 2).unwrap();
            for _ in 0..steps {
                a.md_step(&obj).unwrap();
                b.pgd_step(&obj).unwrap();
            }
            for (x, y) in a.w().iter().zip(b.w().iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1e-300));
            }
        }

        #[test]
        fn md_identity_holds(
            p in 1.3f64..4.0,
            beta in 1.3f64..4.0,
            w in proptest::collection::vec(-2.0f64..2.0, 2),
            wt in proptest::collection::vec(-2.0f64..2.0, 2),
            seed in 0u64..5,
        ) {
            prop_assume!(wt.iter().all(|x| x.abs() > 1e-3));
            let pot = Potential::new(p, beta).unwrap();
            let data = gen_planar2d(seed);
            let spec = LossSpec::exponential();
            let obj = EmpiricalLoss::new(&data, spec);
            let eta = 1e-2;
            let mut run = run_from(fixed(pot, spec, eta), &wt);
            run.md_step(&obj).unwrap();
            let w1 = run.w().to_vec();
            let lhs = pot.bregman(&w, &wt).unwrap();
            let lw = obj.value(&w);
            let l1 = obj.value(&w1);
            let common = pot.bregman(&w, &w1).unwrap() + d_combo(&pot, &obj, 1.0, -eta, &w1, &wt) + eta * l1;
            let form1 = common + eta * d_combo(&pot, &obj, 0.0, 1.0, &w, &wt) - eta * lw;
            let mut g = vec![0.0; 2];
            let lt = obj.value_and_grad(&wt, &mut g);
            let inner: f64 = (0..2).map(|j| g[j] * (w[j] - wt[j])).sum();
            let form2 = common - eta * inner - eta * lt;
            let scale = 1.0 + lhs.abs() + pot.value(&w) + pot.value(&wt);
            prop_assert!((lhs - form1).abs() <= 1e-8 * scale);
            prop_assert!((lhs - form2).abs() <= 1e-8 * scale);
        }
    }
}
