//! Scene geometry, free-space path gains and narrowband channel matrices.

use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::array::{spatial_doa, Position3, SpatialAnglePair, UpaConfig};
use crate::error::{invalid, Error, Result};
use crate::{ComplexMatrix, ComplexVector};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Convert dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Convert watts to dBm.
pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// Convert a radar cross-section in dBsm to m^2.
pub fn dbsm_to_square_meters(dbsm: f64) -> f64 {
    10f64.powf(dbsm / 10.0)
}

/// A reflecting surface: centre position and element layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrsPanel {
    pub position: Position3,
    pub upa: UpaConfig,
}

/// A point target with its radar cross-section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub position: Position3,
    #[serde(default = "default_rcs")]
    pub rcs_dbsm: f64,
}

fn default_rcs() -> f64 {
    7.0
}

impl Target {
    pub fn new(position: Position3, rcs_dbsm: f64) -> Self {
        Self { position, rcs_dbsm }
    }
}

/// Positions and array layouts of the BS, surfaces and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub bs: Position3,
    pub bs_upa: UpaConfig,
    #[serde(default)]
    pub irs: Vec<IrsPanel>,
    pub targets: Vec<Target>,
    #[serde(default = "default_carrier")]
    pub carrier_freq_hz: f64,
}

fn default_carrier() -> f64 {
    750e6
}

impl SceneGeometry {
    /// One BS at `[0,0,5]`, one 30x30 surface at `[-20,0,3]` and one target at `[-20,2,0]`.
    pub fn reference_single_target() -> Self {
        Self {
            bs: Position3::new(0.0, 0.0, 5.0),
            bs_upa: UpaConfig::square(20).expect("valid"),
            irs: vec![IrsPanel {
                position: Position3::new(-20.0, 0.0, 3.0),
                upa: UpaConfig::square(30).expect("valid"),
            }],
            targets: vec![Target::new(Position3::new(-20.0, 2.0, 0.0), 7.0)],
            carrier_freq_hz: 750e6,
        }
    }

    /// One BS, three surfaces on the x axis and three targets.
    pub fn reference_multi_target() -> Self {
        let irs =
            |x: f64| IrsPanel { position: Position3::new(x, 0.0, 3.0), upa: UpaConfig::square(30).expect("valid") };
        Self {
            bs: Position3::new(0.0, 0.0, 5.0),
            bs_upa: UpaConfig::square(20).expect("valid"),
            irs: vec![irs(-20.0), irs(-10.0), irs(-5.0)],
            targets: vec![
                Target::new(Position3::new(-10.0, 10.0, 0.0), 7.0),
                Target::new(Position3::new(-20.0, 2.0, 0.0), 7.0),
                Target::new(Position3::new(-5.0, 10.0, 0.0), 7.0),
            ],
            carrier_freq_hz: 750e6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_freq_hz.is_finite() && self.carrier_freq_hz > 0.0) {
            return Err(invalid(format!("carrier frequency must be positive, got {}", self.carrier_freq_hz)));
        }
        self.bs_upa.validate()?;
        if !self.bs.is_finite() {
            return Err(invalid("BS position must be finite"));
        }
        for (m, p) in self.irs.iter().enumerate() {
            p.upa.validate()?;
            if !p.position.is_finite() {
                return Err(invalid(format!("surface {m} position must be finite")));
            }
            if p.position.distance(&self.bs) < 1e-9 {
                return Err(Error::DegenerateGeometry(format!("surface {m} coincides with the BS")));
            }
        }
        for (k, t) in self.targets.iter().enumerate() {
            if !t.position.is_finite() || !t.rcs_dbsm.is_finite() {
                return Err(invalid(format!("target {k} must have finite position and RCS")));
            }
            if t.position.distance(&self.bs) < 1e-9 {
                return Err(Error::DegenerateGeometry(format!("target {k} coincides with the BS")));
            }
            for (m, p) in self.irs.iter().enumerate() {
                if t.position.distance(&p.position) < 1e-9 {
                    return Err(Error::DegenerateGeometry(format!("target {k} coincides with surface {m}")));
                }
            }
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq_hz
    }

    pub fn panel(&self, m: usize) -> Result<&IrsPanel> {
        self.irs.get(m).ok_or_else(|| invalid(format!("surface index {m} out of range ({})", self.irs.len())))
    }

    pub fn target(&self, k: usize) -> Result<&Target> {
        self.targets.get(k).ok_or_else(|| invalid(format!("target index {k} out of range ({})", self.targets.len())))
    }

    /// Direction from the BS to target `k`, in BS array angles.
    pub fn bs_to_target(&self, k: usize) -> Result<SpatialAnglePair> {
        spatial_doa(&self.bs, &self.target(k)?.position, self.bs_upa.spacing_over_lambda)
    }

    /// Direction from the BS to surface `m`, in BS array angles.
    pub fn bs_to_irs(&self, m: usize) -> Result<SpatialAnglePair> {
        spatial_doa(&self.bs, &self.panel(m)?.position, self.bs_upa.spacing_over_lambda)
    }

    /// Direction from surface `m` toward the BS, in surface array angles.
    pub fn irs_to_bs(&self, m: usize) -> Result<SpatialAnglePair> {
        let p = self.panel(m)?;
        spatial_doa(&p.position, &self.bs, p.upa.spacing_over_lambda)
    }

    /// Direction from surface `m` to target `k`, in surface array angles.
    pub fn irs_to_target(&self, m: usize, k: usize) -> Result<SpatialAnglePair> {
        let p = self.panel(m)?;
        spatial_doa(&p.position, &self.target(k)?.position, p.upa.spacing_over_lambda)
    }

    pub fn dist_bs_target(&self, k: usize) -> Result<f64> {
        Ok(self.bs.distance(&self.target(k)?.position))
    }

    pub fn dist_bs_irs(&self, m: usize) -> Result<f64> {
        Ok(self.bs.distance(&self.panel(m)?.position))
    }

    pub fn dist_irs_target(&self, m: usize, k: usize) -> Result<f64> {
        Ok(self.panel(m)?.position.distance(&self.target(k)?.position))
    }
}

/// Propagation path categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PathKind {
    /// BS to target and back.
    BsTargetBs,
    /// BS to surface.
    BsIrs,
    /// Surface to target and back.
    IrsTargetIrs,
    /// BS to target to surface.
    BsTargetIrs,
}

/// Complex path coefficient together with the distance it was computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathGain {
    pub value: Complex64,
    pub distance_m: f64,
    pub kind: PathKind,
}

fn radar_gain(lambda: f64, kappa: f64, d1: f64, d2: f64) -> Complex64 {
    let amp = (lambda * lambda * kappa / (64.0 * PI.powi(3) * d1 * d1 * d2 * d2)).sqrt();
    Complex64::from_polar(amp, -2.0 * PI * (d1 + d2) / lambda)
}

fn need(idx: Option<usize>, what: &str) -> Result<usize> {
    idx.ok_or_else(|| invalid(format!("path gain needs a {what} index")))
}

/// Free-space path coefficient for the given path.
///
/// Two-way radar paths use `sqrt(lambda^2 kappa / (64 pi^3 d1^2 d2^2))` with the
/// round-trip phase; the one-way BS-surface link uses `lambda / (4 pi d)`.
pub fn path_gain(
    geometry: &SceneGeometry,
    kind: PathKind,
    irs: Option<usize>,
    target: Option<usize>,
) -> Result<PathGain> {
    let lambda = geometry.wavelength();
    match kind {
        PathKind::BsTargetBs => {
            let k = need(target, "target")?;
            let d = geometry.dist_bs_target(k)?;
            let kappa = dbsm_to_square_meters(geometry.target(k)?.rcs_dbsm);
            Ok(PathGain { value: radar_gain(lambda, kappa, d, d), distance_m: d, kind })
        }
        PathKind::BsIrs => {
            let m = need(irs, "surface")?;
            let d = geometry.dist_bs_irs(m)?;
            let value = Complex64::from_polar(lambda / (4.0 * PI * d), -2.0 * PI * d / lambda);
            Ok(PathGain { value, distance_m: d, kind })
        }
        PathKind::IrsTargetIrs => {
            let m = need(irs, "surface")?;
            let k = need(target, "target")?;
            let d = geometry.dist_irs_target(m, k)?;
            let kappa = dbsm_to_square_meters(geometry.target(k)?.rcs_dbsm);
            Ok(PathGain { value: radar_gain(lambda, kappa, d, d), distance_m: d, kind })
        }
        PathKind::BsTargetIrs => {
            let m = need(irs, "surface")?;
            let k = need(target, "target")?;
            let d1 = geometry.dist_bs_target(k)?;
            let d2 = geometry.dist_irs_target(m, k)?;
            let kappa = dbsm_to_square_meters(geometry.target(k)?.rcs_dbsm);
            Ok(PathGain { value: radar_gain(lambda, kappa, d1, d2), distance_m: d1 + d2, kind })
        }
    }
}

pub(crate) fn outer_t(x: &ComplexVector, y: &ComplexVector) -> ComplexMatrix {
    x * y.transpose()
}

/// Direct echo `beta a a^T` between the BS and target `k`.
pub fn channel_btb(geometry: &SceneGeometry, k: usize) -> Result<ComplexMatrix> {
    let beta = path_gain(geometry, PathKind::BsTargetBs, None, Some(k))?.value;
    let a = geometry.bs_upa.response(geometry.bs_to_target(k)?);
    Ok(outer_t(&a, &a) * beta)
}

/// BS-to-surface channel `beta b(arrival) a^T(departure)`, surface rows by BS columns.
pub fn channel_b2i(geometry: &SceneGeometry, m: usize) -> Result<ComplexMatrix> {
    let beta = path_gain(geometry, PathKind::BsIrs, Some(m), None)?.value;
    let b = geometry.panel(m)?.upa.response(geometry.irs_to_bs(m)?);
    let a = geometry.bs_upa.response(geometry.bs_to_irs(m)?);
    Ok(outer_t(&b, &a) * beta)
}

/// Surface-target-surface channel `beta b b^T`.
pub fn channel_iti(geometry: &SceneGeometry, m: usize, k: usize) -> Result<ComplexMatrix> {
    let beta = path_gain(geometry, PathKind::IrsTargetIrs, Some(m), Some(k))?.value;
    let b = geometry.panel(m)?.upa.response(geometry.irs_to_target(m, k)?);
    Ok(outer_t(&b, &b) * beta)
}

/// BS-target-surface channel `beta b a^T`, surface rows by BS columns.
pub fn channel_bti(geometry: &SceneGeometry, m: usize, k: usize) -> Result<ComplexMatrix> {
    let beta = path_gain(geometry, PathKind::BsTargetIrs, Some(m), Some(k))?.value;
    let b = geometry.panel(m)?.upa.response(geometry.irs_to_target(m, k)?);
    let a = geometry.bs_upa.response(geometry.bs_to_target(k)?);
    Ok(outer_t(&b, &a) * beta)
}

/// Check that a reflection vector has unit-modulus entries and the right length.
pub fn check_reflection(theta: &ComplexVector, n: usize) -> Result<()> {
    if theta.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: theta.len() });
    }
    if let Some(bad) = theta.iter().find(|z| (z.norm() - 1.0).abs() > 1e-9) {
        return Err(invalid(format!("reflection coefficient {bad} is not unit modulus")));
    }
    Ok(())
}

/// Dense channel matrices for the reflected echoes of one (surface, target) pair.
///
/// Applying a reflection vector `theta` gives the stage-2 effective channel
/// `G^T diag(theta) H diag(theta) G + G^T diag(theta) F + F^T diag(theta) G`,
/// where `G` is BS-to-surface, `H` surface-target-surface and `F` BS-target-surface.
#[derive(Debug, Clone)]
pub struct ReflectedChannels {
    pub b2i: ComplexMatrix,
    pub iti: ComplexMatrix,
    pub bti: ComplexMatrix,
}

impl ReflectedChannels {
    pub fn new(geometry: &SceneGeometry, m: usize, k: usize) -> Result<Self> {
        geometry.validate()?;
        Ok(Self {
            b2i: channel_b2i(geometry, m)?,
            iti: channel_iti(geometry, m, k)?,
            bti: channel_bti(geometry, m, k)?,
        })
    }

    pub fn irs_len(&self) -> usize {
        self.b2i.nrows()
    }

    fn scaled_rows(theta: &ComplexVector, mat: &ComplexMatrix) -> ComplexMatrix {
        let mut out = mat.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= theta[i];
        }
        out
    }

    /// The three reflected terms: double-bounce and the two single-bounce paths.
    pub fn terms(&self, theta: &ComplexVector) -> Result<[ComplexMatrix; 3]> {
        check_reflection(theta, self.irs_len())?;
        let tg = Self::scaled_rows(theta, &self.b2i);
        let g_t = self.b2i.transpose();
        let double = &g_t * Self::scaled_rows(theta, &(&self.iti * &tg));
        let via_target_first = &g_t * Self::scaled_rows(theta, &self.bti);
        let via_irs_first = self.bti.transpose() * &tg;
        Ok([double, via_target_first, via_irs_first])
    }

    /// Dense effective stage-2 channel for reflection vector `theta`.
    pub fn effective(&self, theta: &ComplexVector) -> Result<ComplexMatrix> {
        let [a, b, c] = self.terms(theta)?;
        Ok(a + b + c)
    }

    /// Effective channel applied to a BS beam, without forming the matrix.
    pub fn apply(&self, theta: &ComplexVector, w: &ComplexVector) -> Result<ComplexVector> {
        check_reflection(theta, self.irs_len())?;
        if w.len() != self.b2i.ncols() {
            return Err(Error::DimensionMismatch { expected: self.b2i.ncols(), found: w.len() });
        }
        let g_w = &self.b2i * w;
        let f_w = &self.bti * w;
        let tg_w = g_w.component_mul(theta);
        let h_tg_w = &self.iti * &tg_w;
        let inner = h_tg_w.component_mul(theta) + f_w.component_mul(theta);
        Ok(self.b2i.tr_mul(&inner) + self.bti.tr_mul(&tg_w))
    }
}

/// `b_in^T diag(theta) b_out`.
pub fn cascade_scalar(theta: &ComplexVector, b_in: &ComplexVector, b_out: &ComplexVector) -> Result<Complex64> {
    check_reflection(theta, b_in.len())?;
    if b_out.len() != b_in.len() {
        return Err(Error::DimensionMismatch { expected: b_in.len(), found: b_out.len() });
    }
    Ok(b_in.iter().zip(theta.iter()).zip(b_out.iter()).map(|((x, t), y)| x * t * y).sum())
}

/// All-ones reflection vector of length `n`.
pub fn unit_reflection(n: usize) -> ComplexVector {
    DVector::from_element(n, Complex64::new(1.0, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::kron;
    use crate::array::steering_vector;

    fn small_scene() -> SceneGeometry {
        SceneGeometry {
            bs: Position3::new(0.0, 0.0, 5.0),
            bs_upa: UpaConfig::new(3, 2).unwrap(),
            irs: vec![IrsPanel { position: Position3::new(-20.0, 0.0, 3.0), upa: UpaConfig::new(4, 3).unwrap() }],
            targets: vec![Target::new(Position3::new(-18.0, 6.0, 1.0), 7.0)],
            carrier_freq_hz: 750e6,
        }
    }

    #[test]
    fn unit_conversions() {
        assert!((dbm_to_watts(30.0) - 1.0).abs() < 1e-15);
        assert!((dbm_to_watts(-80.0) - 1e-11).abs() < 1e-25);
        assert!((watts_to_dbm(1e-3)).abs() < 1e-12);
        assert!((dbsm_to_square_meters(10.0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn path_gain_closed_forms() {
        let g = SceneGeometry::reference_single_target();
        let lambda = SPEED_OF_LIGHT / 750e6;
        let kappa = 10f64.powf(0.7);
        let d = (400.0f64 + 4.0 + 25.0).sqrt();
        let btb = path_gain(&g, PathKind::BsTargetBs, None, Some(0)).unwrap();
        let expect = (lambda * lambda * kappa / (64.0 * PI.powi(3) * d.powi(4))).sqrt();
        assert!((btb.value.norm() - expect).abs() < 1e-12 * expect);
        let phase = Complex64::from_polar(1.0, -4.0 * PI * d / lambda);
        assert!((btb.value / btb.value.norm() - phase).norm() < 1e-9);

        let b2i = path_gain(&g, PathKind::BsIrs, Some(0), None).unwrap();
        let d = (400.0f64 + 4.0).sqrt();
        assert!((b2i.value.norm() - lambda / (4.0 * PI * d)).abs() < 1e-15);
        assert!(path_gain(&g, PathKind::BsIrs, None, None).is_err());
    }

    #[test]
    fn doa_conventions() {
        let g = SceneGeometry::reference_single_target();
        let bs_t = g.bs_to_target(0).unwrap();
        assert!((bs_t.mu - 0.0966).abs() < 1e-4 && (bs_t.nu + 0.2414).abs() < 1e-4);
        let i_t = g.irs_to_target(0, 0).unwrap();
        assert!((i_t.mu - 0.5547).abs() < 1e-4 && (i_t.nu + 0.8321).abs() < 1e-4);
        let dep = g.bs_to_irs(0).unwrap();
        let arr = g.irs_to_bs(0).unwrap();
        assert!((dep.nu + arr.nu).abs() < 1e-15);
        assert!((arr.nu - 2.0 / 404f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn channels_are_rank_one_outer_products() {
        let g = small_scene();
        let h = channel_btb(&g, 0).unwrap();
        assert_eq!(h.shape(), (6, 6));
        assert!((&h - h.transpose()).norm() < 1e-18);
        let gm = channel_b2i(&g, 0).unwrap();
        assert_eq!(gm.shape(), (12, 6));
        let svd = gm.clone().svd(false, false);
        let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(s[1] < 1e-12 * s[0]);
    }

    #[test]
    fn apply_matches_dense_effective_channel() {
        let g = small_scene();
        let ch = ReflectedChannels::new(&g, 0, 0).unwrap();
        let theta = DVector::from_fn(12, |i, _| Complex64::from_polar(1.0, 0.7 * i as f64));
        let w = DVector::from_fn(6, |i, _| Complex64::new(1.0 + i as f64, -0.5 * i as f64));
        let dense = ch.effective(&theta).unwrap() * &w;
        let fast = ch.apply(&theta, &w).unwrap();
        assert!((dense - &fast).norm() <= 1e-12 * fast.norm());
    }

    #[test]
    fn cascade_factorizes() {
        let uy = steering_vector(0.3, 4).unwrap();
        let uz = steering_vector(-0.2, 3).unwrap();
        let b_in = kron(&uy, &uz);
        let b_out = kron(&steering_vector(0.1, 4).unwrap(), &steering_vector(0.5, 3).unwrap());
        let wy = steering_vector(0.25, 4).unwrap();
        let wz = steering_vector(0.1, 3).unwrap();
        let theta = kron(&wy, &wz);
        let q = cascade_scalar(&theta, &b_in, &b_out).unwrap();
        let comp_y = steering_vector(0.4, 4).unwrap();
        let comp_z = steering_vector(0.3, 3).unwrap();
        let expect = comp_y.transpose() * &wy * (comp_z.transpose() * &wz);
        assert!((q - expect[(0, 0)]).norm() < 1e-12);
        let bad = DVector::from_element(12, Complex64::new(0.5, 0.0));
        assert!(cascade_scalar(&bad, &b_in, &b_out).is_err());
    }

    #[test]
    fn validate_rejects_coincident_target() {
        let mut g = small_scene();
        g.targets[0].position = g.irs[0].position;
        assert!(g.validate().is_err());
        g = small_scene();
        g.carrier_freq_hz = 0.0;
        assert!(g.validate().is_err());
    }
}
