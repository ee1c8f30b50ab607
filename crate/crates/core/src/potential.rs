//! Homogeneous potentials `psi(w) = (1/p) ||w||_p^beta` and the maps derived
//! from them: the induced norm, its dual, the mirror map and its inverse, and
//! the Bregman divergence.

use std::ops::{Deref, DerefMut};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A parameter vector of a linear model. Entries are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if let Some(index) = coords.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(coords))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Callers keep the entries finite.
    pub(crate) fn vec_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

impl Deref for WeightVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for WeightVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

/// `psi(w) = (1/p) ||w||_p^beta` with `p > 1`, `beta > 1`.
///
/// The induced norm is `||w||_psi = psi(w)^(1/beta) = p^(-1/beta) ||w||_p`, so
/// directions are the same as for the plain `l_p` norm while magnitudes carry
/// the factor `p^(-1/beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    p: f64,
    beta: f64,
}

impl Potential {
    pub fn new(p: f64, beta: f64) -> Result<Self> {
        if !(p.is_finite() && p > 1.0) {
            return Err(Error::InvalidPotential(format!("p must be > 1, got {p}")));
        }
        if !(beta.is_finite() && beta > 1.0) {
            return Err(Error::InvalidPotential(format!(
                "beta must be > 1, got {beta}"
            )));
        }
        Ok(Self { p, beta })
    }

    /// The coordinate-separable `p`-GD potential `(1/p) ||w||_p^p`.
    pub fn pgd(p: f64) -> Result<Self> {
        Self::new(p, p)
    }

    /// `(1/2) ||w||_2^2`, i.e. plain gradient descent.
    pub fn euclidean() -> Self {
        Self { p: 2.0, beta: 2.0 }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Conjugate exponent `q = p / (p - 1)`.
    pub fn q(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    pub fn is_separable(&self) -> bool {
        self.beta == self.p
    }

    /// Scale factor between the `l_p` norm and the potential norm:
    /// `||w||_p = p^(1/beta) ||w||_psi`.
    pub fn lp_scale(&self) -> f64 {
        self.p.powf(1.0 / self.beta)
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        if self.is_separable() {
            return w.iter().map(|x| x.abs().powf(self.p)).sum::<f64>() / self.p;
        }
        lp_norm(w, self.p).powf(self.beta) / self.p
    }

    pub fn norm(&self, w: &[f64]) -> f64 {
        lp_norm(w, self.p) / self.lp_scale()
    }

    pub fn dual_norm(&self, x: &[f64]) -> f64 {
        self.lp_scale() * lp_norm(x, self.q())
    }

    /// `w / ||w||_psi`.
    pub fn normalize(&self, w: &[f64]) -> Result<Vec<f64>> {
        let n = self.norm(w);
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(w.iter().map(|x| x / n).collect())
    }

    pub fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; w.len()];
        self.grad_into(w, &mut out)?;
        Ok(out)
    }

    /// Mirror map `grad psi(w)_j = (beta/p) ||w||_p^(beta-p) |w_j|^(p-1) sign(w_j)`.
    pub fn grad_into(&self, w: &[f64], out: &mut [f64]) -> Result<()> {
        check_len(w.len(), out.len())?;
        if self.p == 2.0 && self.beta == 2.0 {
            out.copy_from_slice(w);
            return Ok(());
        }
        let pm1 = self.p - 1.0;
        if self.is_separable() {
            for (o, &x) in out.iter_mut().zip(w) {
                *o = signed_pow(x, pm1);
            }
            return Ok(());
        }
        let r = lp_norm(w, self.p);
        if r == 0.0 {
            if self.beta < self.p {
                return Err(Error::SingularOrigin);
            }
            out.fill(0.0);
            return Ok(());
        }
        let c = self.beta / self.p * r.powf(self.beta - self.p);
        for (o, &x) in out.iter_mut().zip(w) {
            *o = c * signed_pow(x, pm1);
        }
        Ok(())
    }

    pub fn inv_grad(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        self.inv_grad_into(z, &mut out);
        out
    }

    /// Inverse mirror map. The recovered `||w||_p` is
    /// `r = ((p/beta) ||z||_q)^(1/(beta-1))`, after which each coordinate is
    /// `sign(z_j) ((p/beta) r^(p-beta) |z_j|)^(1/(p-1))`.
    pub fn inv_grad_into(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), out.len());
        if self.p == 2.0 && self.beta == 2.0 {
            out.copy_from_slice(z);
            return;
        }
        let inv_pm1 = 1.0 / (self.p - 1.0);
        if self.is_separable() {
            for (o, &x) in out.iter_mut().zip(z) {
                *o = signed_pow(x, inv_pm1);
            }
            return;
        }
        let nz = lp_norm(z, self.q());
        if nz == 0.0 {
            out.fill(0.0);
            return;
        }
        let ratio = self.p / self.beta;
        let r = (ratio * nz).powf(1.0 / (self.beta - 1.0));
        let c = ratio * r.powf(self.p - self.beta);
        for (o, &x) in out.iter_mut().zip(z) {
            *o = x.signum() * (c * x.abs()).powf(inv_pm1);
        }
    }

    /// `D_psi(x, y) = psi(x) - psi(y) - <grad psi(y), x - y>`.
    pub fn bregman(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_len(x.len(), y.len())?;
        let g = self.grad(y)?;
        let cross: f64 = g.iter().zip(x.iter().zip(y)).map(|(g, (a, b))| g * (a - b)).sum();
        Ok(self.value(x) - self.value(y) - cross)
    }

    /// Analytic Hessian of `psi`. Coordinates equal to zero make it singular
    /// for `p < 2`; callers sample points away from coordinate hyperplanes.
    pub fn hessian(&self, w: &[f64]) -> Result<DMatrix<f64>> {
        let d = w.len();
        let (p, beta) = (self.p, self.beta);
        let s: f64 = w.iter().map(|x| x.abs().powf(p)).sum();
        if s == 0.0 {
            return match () {
                _ if beta > 2.0 => Ok(DMatrix::zeros(d, d)),
                _ if p == 2.0 && beta == 2.0 => Ok(DMatrix::identity(d, d)),
                _ => Err(Error::SingularOrigin),
            };
        }
        let g: Vec<f64> = w.iter().map(|&x| signed_pow(x, p - 1.0)).collect();
        let outer = beta * (beta / p - 1.0) * s.powf(beta / p - 2.0);
        let diag_c = beta / p * (p - 1.0) * s.powf(beta / p - 1.0);
        let mut h = DMatrix::zeros(d, d);
        for j in 0..d {
            for k in 0..d {
                h[(j, k)] = outer * g[j] * g[k];
            }
            h[(j, j)] += diag_c * w[j].abs().powf(p - 2.0);
        }
        Ok(h)
    }
}

/// `sign(x) |x|^e`.
#[inline]
pub(crate) fn signed_pow(x: f64, e: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * x.abs().powf(e)
    }
}

/// Plain `l_p` norm, scaled by the largest entry to stay clear of overflow.
pub fn lp_norm(w: &[f64], p: f64) -> f64 {
    let m = w.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    if p == 2.0 {
        return m * w.iter().map(|x| (x / m) * (x / m)).sum::<f64>().sqrt();
    }
    m * w.iter().map(|x| (x.abs() / m).powf(p)).sum::<f64>().powf(1.0 / p)
}

pub fn l2_norm(w: &[f64]) -> f64 {
    lp_norm(w, 2.0)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
