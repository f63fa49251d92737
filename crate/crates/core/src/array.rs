//! Uniform linear and planar array responses.
//!
//! Arrays lie in the y-z plane. A spatial angle `phi` in `[-1, 1]` maps to a
//! progressive phase of `pi * phi` between adjacent elements at half-wavelength
//! spacing. Planar array responses are Kronecker products of a y-axis and a
//! z-axis linear response, with element `(i, j)` stored at `i * n_z + j`.

use std::f64::consts::PI;
use std::ops::{Add, Sub};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::{ComplexMatrix, ComplexVector};

/// Point in 3D space, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Position3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(&self, other: &Position3) -> f64 {
        (*self - *other).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl From<[f64; 3]> for Position3 {
    fn from(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<Position3> for [f64; 3] {
    fn from(p: Position3) -> Self {
        [p.x, p.y, p.z]
    }
}

impl Sub for Position3 {
    type Output = Position3;
    fn sub(self, rhs: Position3) -> Position3 {
        Position3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Add for Position3 {
    type Output = Position3;
    fn add(self, rhs: Position3) -> Position3 {
        Position3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

/// Azimuth-like (`mu`, y axis) and elevation-like (`nu`, z axis) spatial angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialAnglePair {
    pub mu: f64,
    pub nu: f64,
}

impl SpatialAnglePair {
    pub const fn new(mu: f64, nu: f64) -> Self {
        Self { mu, nu }
    }

    pub fn is_finite(&self) -> bool {
        self.mu.is_finite() && self.nu.is_finite()
    }
}

impl Add for SpatialAnglePair {
    type Output = SpatialAnglePair;
    fn add(self, rhs: SpatialAnglePair) -> SpatialAnglePair {
        SpatialAnglePair::new(self.mu + rhs.mu, self.nu + rhs.nu)
    }
}

impl Sub for SpatialAnglePair {
    type Output = SpatialAnglePair;
    fn sub(self, rhs: SpatialAnglePair) -> SpatialAnglePair {
        SpatialAnglePair::new(self.mu - rhs.mu, self.nu - rhs.nu)
    }
}

/// Planar array dimensions and element spacing in wavelengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpaConfig {
    pub n_y: usize,
    pub n_z: usize,
    #[serde(default = "half")]
    pub spacing_over_lambda: f64,
}

fn half() -> f64 {
    0.5
}

impl UpaConfig {
    /// Half-wavelength array with `n_y * n_z` elements.
    pub fn new(n_y: usize, n_z: usize) -> Result<Self> {
        let cfg = Self { n_y, n_z, spacing_over_lambda: 0.5 };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Square half-wavelength array.
    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_y == 0 || self.n_z == 0 {
            return Err(invalid(format!("array dimensions must be positive, got {}x{}", self.n_y, self.n_z)));
        }
        if !(self.spacing_over_lambda.is_finite() && self.spacing_over_lambda > 0.0) {
            return Err(invalid(format!("element spacing must be positive, got {}", self.spacing_over_lambda)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_y * self.n_z
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Array response at the given spatial angles.
    pub fn response(&self, angles: SpatialAnglePair) -> ComplexVector {
        kron(&steering_unchecked(angles.mu, self.n_y), &steering_unchecked(angles.nu, self.n_z))
    }
}

fn check_angle(phi: f64) -> Result<()> {
    if phi.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("spatial angle must be finite, got {phi}")))
    }
}

/// Phase slope of element `i` of an `n`-element array, per unit `pi/2 * phi`.
#[inline]
pub(crate) fn element_offset(i: usize, n: usize) -> f64 {
    2.0 * i as f64 - n as f64 + 1.0
}

pub(crate) fn steering_unchecked(phi: f64, n: usize) -> ComplexVector {
    DVector::from_fn(n, |i, _| Complex64::from_polar(1.0, element_offset(i, n) * PI * phi / 2.0))
}

/// Centered linear-array steering vector.
///
/// Element `i` (0-based) is `exp(j (2i - n + 1) pi phi / 2)`, so the phases run
/// symmetrically from `-(n-1) pi phi / 2` to `+(n-1) pi phi / 2`.
pub fn steering_vector(phi: f64, n: usize) -> Result<ComplexVector> {
    check_angle(phi)?;
    if n == 0 {
        return Err(invalid("steering vector length must be positive"));
    }
    Ok(steering_unchecked(phi, n))
}

/// Derivative of [`steering_vector`] with respect to `phi`.
pub fn steering_derivative(phi: f64, n: usize) -> Result<ComplexVector> {
    let u = steering_vector(phi, n)?;
    Ok(DVector::from_fn(n, |i, _| Complex64::new(0.0, element_offset(i, n) * PI / 2.0) * u[i]))
}

/// Kronecker product of two column vectors; entry `(i, j)` lands at `i * b.len() + j`.
pub fn kron(a: &ComplexVector, b: &ComplexVector) -> ComplexVector {
    let nb = b.len();
    DVector::from_fn(a.len() * nb, |k, _| a[k / nb] * b[k % nb])
}

/// Planar array response `u(mu, n_y) (x) u(nu, n_z)`.
pub fn upa_response(angles: SpatialAnglePair, cfg: &UpaConfig) -> Result<ComplexVector> {
    cfg.validate()?;
    check_angle(angles.mu)?;
    check_angle(angles.nu)?;
    Ok(cfg.response(angles))
}

/// Partial derivatives of the planar response with respect to `mu` and `nu`.
pub fn upa_response_derivatives(angles: SpatialAnglePair, cfg: &UpaConfig) -> Result<(ComplexVector, ComplexVector)> {
    cfg.validate()?;
    let uy = steering_vector(angles.mu, cfg.n_y)?;
    let uz = steering_vector(angles.nu, cfg.n_z)?;
    let duy = steering_derivative(angles.mu, cfg.n_y)?;
    let duz = steering_derivative(angles.nu, cfg.n_z)?;
    Ok((kron(&duy, &uz), kron(&uy, &duz)))
}

/// Spatial angles of the direction from `from` toward `to`.
///
/// `mu = 2 (d/lambda) (y_to - y_from) / |to - from|`, and likewise for `nu` with z.
pub fn spatial_doa(from: &Position3, to: &Position3, spacing_over_lambda: f64) -> Result<SpatialAnglePair> {
    if !(from.is_finite() && to.is_finite()) {
        return Err(invalid("positions must be finite"));
    }
    let delta = *to - *from;
    let dist = delta.norm();
    if dist <= 1e-12 * (1.0 + from.norm().max(to.norm())) {
        return Err(Error::DegenerateGeometry(format!("coincident points {from:?} and {to:?}")));
    }
    let scale = 2.0 * spacing_over_lambda / dist;
    Ok(SpatialAnglePair::new(scale * delta.y, scale * delta.z))
}

/// DFT codebook with `t` columns of length `n` and per-column power `power`.
///
/// Entry `(k, tau)` (0-based) is `sqrt(power / n) exp(-j 2 pi tau k / t)`. With
/// `t >= n` the probing covariance `W W^H / t` is `power / n` times identity for
/// `t` a multiple of `n`, and close to it otherwise.
pub fn dft_codebook(n: usize, t: usize, power: f64) -> Result<ComplexMatrix> {
    if n == 0 || t == 0 {
        return Err(invalid(format!("codebook needs n, t > 0, got n={n}, t={t}")));
    }
    if !(power.is_finite() && power >= 0.0) {
        return Err(invalid(format!("codebook power must be non-negative, got {power}")));
    }
    if t < n {
        log::debug!("DFT codebook with t={t} < n={n} is rank deficient");
    }
    let amp = (power / n as f64).sqrt();
    Ok(DMatrix::from_fn(n, t, |k, tau| {
        let phase = -2.0 * PI * ((tau * k) % t) as f64 / t as f64;
        Complex64::from_polar(amp, phase)
    }))
}

/// Normalized planar beam gain for an angular mismatch `(d_mu, d_nu)` on an
/// `n_bar x n_bar` array. Equals 1 at zero mismatch.
pub fn normalized_beam_gain(d_mu: f64, d_nu: f64, n_bar: usize) -> Result<f64> {
    check_angle(d_mu)?;
    check_angle(d_nu)?;
    if n_bar == 0 {
        return Err(invalid("array size must be positive"));
    }
    let axis = |d: f64| steering_unchecked(d, n_bar).iter().sum::<Complex64>().norm();
    Ok(axis(d_mu) * axis(d_nu) / (n_bar * n_bar) as f64)
}
