//! Datasets, classification losses over linear models, and margins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::{dot, l2_norm, Potential};

/// `n` labelled points in `R^d`, stored row-major. Labels are `+1` or `-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<f64>,
    d: usize,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidDataset("no points".into()));
        }
        if labels.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{} rows but {} labels",
                n,
                labels.len()
            )));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::InvalidDataset("zero-dimensional points".into()));
        }
        let mut inputs = Vec::with_capacity(n * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::InvalidDataset(format!(
                    "row {i} has {} entries, expected {d}",
                    row.len()
                )));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidDataset(format!("row {i} has a non-finite entry")));
            }
            inputs.extend_from_slice(row);
        }
        if let Some(i) = labels.iter().position(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidDataset(format!(
                "label {} at row {i} is not +1 or -1",
                labels[i]
            )));
        }
        Ok(Self { inputs, labels, d })
    }

    /// All labels `+1`.
    pub fn positive(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        Self::new(rows, vec![1.0; n])
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.inputs.chunks_exact(self.d)
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// `y_i x_i`, the form in which labels are absorbed into the inputs.
    pub fn signed_row(&self, i: usize) -> Vec<f64> {
        let y = self.labels[i];
        self.row(i).iter().map(|x| y * x).collect()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            inputs: self.inputs.iter().map(|x| c * x).collect(),
            labels: self.labels.clone(),
            d: self.d,
        }
    }

    pub fn check_dim(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: w.len(),
            });
        }
        Ok(())
    }

    /// `y_i <x_i, w>` for every point.
    pub fn margins_into(&self, w: &[f64], out: &mut [f64]) {
        for ((o, x), y) in out.iter_mut().zip(self.rows()).zip(&self.labels) {
            *o = y * dot(x, w);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Exponential,
    Logistic,
    Square,
    Hinge,
}

impl LossKind {
    /// Losses with no attainable minimum that strictly decrease in the margin.
    pub fn is_strictly_monotone(self) -> bool {
        matches!(self, LossKind::Exponential | LossKind::Logistic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default)]
    pub reduction: Reduction,
}

impl LossSpec {
    pub fn new(kind: LossKind, reduction: Reduction) -> Self {
        Self { kind, reduction }
    }

    pub fn exponential() -> Self {
        Self::new(LossKind::Exponential, Reduction::Mean)
    }

    fn scale(&self, n: usize) -> f64 {
        match self.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        }
    }
}

/// Anything the optimizers can descend on. Linear models over a [`Dataset`]
/// implement it through [`EmpiricalLoss`]; other models can plug in here.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, w: &[f64]) -> f64;
    /// Writes the gradient into `grad` and returns the value.
    fn value_and_grad(&self, w: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct EmpiricalLoss<'a> {
    pub data: &'a Dataset,
    pub spec: LossSpec,
}

impl<'a> EmpiricalLoss<'a> {
    pub fn new(data: &'a Dataset, spec: LossSpec) -> Self {
        Self { data, spec }
    }

    /// Per-point loss and its derivative with respect to `<w, x_i>`.
    #[inline]
    fn point(&self, z: f64, y: f64) -> (f64, f64) {
        let m = y * z;
        match self.spec.kind {
            LossKind::Exponential => {
                let e = (-m).exp();
                (e, -e * y)
            }
            LossKind::Logistic => {
                let value = (-m).max(0.0) + (-m.abs()).exp().ln_1p();
                // sigma(-m) without overflow
                let s = if m >= 0.0 {
                    let e = (-m).exp();
                    e / (1.0 + e)
                } else {
                    1.0 / (1.0 + m.exp())
                };
                (value, -s * y)
            }
            LossKind::Square => {
                let r = z - y;
                (r * r, 2.0 * r)
            }
            LossKind::Hinge => {
                // The kink at margin 1 counts as inactive.
                if 1.0 - m > 0.0 {
                    (1.0 - m, -y)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }
}

impl Objective for EmpiricalLoss<'_> {
    fn dim(&self) -> usize {
        self.data.d()
    }

    fn value(&self, w: &[f64]) -> f64 {
        let total: f64 = self
            .data
            .rows()
            .zip(self.data.labels())
            .map(|(x, &y)| self.point(dot(x, w), y).0)
            .sum();
        total * self.spec.scale(self.data.n())
    }

    fn value_and_grad(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let mut total = 0.0;
        for (x, &y) in self.data.rows().zip(self.data.labels()) {
            let (v, dz) = self.point(dot(x, w), y);
            total += v;
            if dz != 0.0 {
                for (g, xj) in grad.iter_mut().zip(x) {
                    *g += dz * xj;
                }
            }
        }
        let s = self.spec.scale(self.data.n());
        if s != 1.0 {
            for g in grad.iter_mut() {
                *g *= s;
            }
        }
        total * s
    }
}

pub fn loss_value(w: &[f64], data: &Dataset, spec: LossSpec) -> Result<f64> {
    data.check_dim(w)?;
    Ok(EmpiricalLoss::new(data, spec).value(w))
}

pub fn loss_grad(w: &[f64], data: &Dataset, spec: LossSpec) -> Result<Vec<f64>> {
    data.check_dim(w)?;
    let mut g = vec![0.0; w.len()];
    EmpiricalLoss::new(data, spec).value_and_grad(w, &mut g);
    Ok(g)
}

/// `min_i y_i <x_i, w>`.
pub fn margin(w: &[f64], data: &Dataset) -> Result<f64> {
    data.check_dim(w)?;
    Ok(margin_unchecked(w, data))
}

pub(crate) fn margin_unchecked(w: &[f64], data: &Dataset) -> f64 {
    data.rows()
        .zip(data.labels())
        .map(|(x, y)| y * dot(x, w))
        .fold(f64::INFINITY, f64::min)
}

/// `C = max_i max(||x_i||_2, ||x_i||_{psi,*})`.
pub fn data_bound_c(data: &Dataset, pot: &Potential) -> f64 {
    data.rows()
        .map(|x| l2_norm(x).max(pot.dual_norm(x)))
        .fold(0.0, f64::max)
}
