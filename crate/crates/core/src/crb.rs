//! Fisher information matrices and Cramér-Rao bounds.
//!
//! All FIMs are for a complex Gaussian mean with white noise:
//! `F_ij = (2 / sigma^2) Re{ sum_t conj(du_t/d eta_i) du_t/d eta_j }`.
//! Closed forms are provided for BS probing, for the double-bounce surface
//! scan and for the single-bounce surface scan, next to a finite-difference
//! oracle that only needs the noiseless mean as a function of the parameters.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::array::{element_offset, upa_response_derivatives, SpatialAnglePair, UpaConfig};
use crate::channel::{check_reflection, path_gain, PathKind, SceneGeometry};
use crate::error::{invalid, Error, Result};
use crate::stage2::{case1_amplitude, case2_amplitude, IrsScanPlan};
use crate::{ComplexMatrix, ComplexVector};

/// Normalized-eigenvalue threshold below which a FIM is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-12;

/// A real FIM with its derived bounds.
#[derive(Debug, Clone)]
pub struct FimResult {
    pub matrix: DMatrix<f64>,
    pub labels: Vec<String>,
    /// Diagonal of the inverse; `+inf` for every entry when singular.
    pub crb_diag: Vec<f64>,
    pub determinant: f64,
    /// Condition number of the diagonally normalized FIM.
    pub condition_estimate: f64,
    pub singular: bool,
}

impl FimResult {
    /// Wrap a symmetric FIM.
    ///
    /// Singularity is judged on `D^-1/2 F D^-1/2` with `D = diag(F)`, so the
    /// verdict does not depend on the units of individual parameters.
    pub fn from_matrix(matrix: DMatrix<f64>, labels: Vec<String>) -> Result<Self> {
        let n = matrix.nrows();
        if !matrix.is_square() || labels.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: labels.len() });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(invalid("FIM has non-finite entries"));
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let determinant = sym.determinant();
        let diag: Vec<f64> = (0..n).map(|i| sym[(i, i)]).collect();
        let zero_diag = diag.iter().any(|&d| d <= 0.0);
        let (singular, condition_estimate, crb_diag) = if zero_diag {
            (true, f64::INFINITY, vec![f64::INFINITY; n])
        } else {
            let norm = normalized(&sym, &diag);
            let eig = SymmetricEigen::new(norm.clone()).eigenvalues;
            let max = eig.max();
            let min = eig.min();
            let cond = if min > 0.0 { max / min } else { f64::INFINITY };
            if min < SINGULAR_TOL * max {
                (true, cond, vec![f64::INFINITY; n])
            } else {
                match norm.cholesky() {
                    Some(ch) => {
                        let inv = ch.inverse();
                        (false, cond, (0..n).map(|i| inv[(i, i)] / diag[i]).collect())
                    }
                    None => (true, cond, vec![f64::INFINITY; n]),
                }
            }
        };
        Ok(Self { matrix: sym, labels, crb_diag, determinant, condition_estimate, singular })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Sum of the CRB diagonal, `+inf` when singular.
    pub fn crb_trace(&self) -> f64 {
        self.crb_diag.iter().sum()
    }

    /// Diagonal of a ridge-regularized inverse; finite even for singular FIMs.
    ///
    /// The ridge is `SINGULAR_TOL` on the normalized FIM, so this is the
    /// "numerically inverted" bound a naive solver would report.
    pub fn pseudo_crb_diag(&self) -> Vec<f64> {
        let n = self.dim();
        let diag: Vec<f64> = (0..n).map(|i| self.matrix[(i, i)]).collect();
        if diag.iter().any(|&d| d <= 0.0) {
            return vec![f64::INFINITY; n];
        }
        // Eigen route: small closed-form inverses lose the null directions entirely.
        let eig = SymmetricEigen::new(normalized(&self.matrix, &diag));
        (0..n)
            .map(|i| {
                let s: f64 = (0..n)
                    .map(|j| eig.eigenvectors[(i, j)].powi(2) / (eig.eigenvalues[j].max(0.0) + SINGULAR_TOL))
                    .sum();
                s / diag[i]
            })
            .collect()
    }

    /// FIM of a parameter subset when the remaining parameters are known.
    pub fn submatrix(&self, keep: &[usize]) -> Result<FimResult> {
        if let Some(&bad) = keep.iter().find(|&&i| i >= self.dim()) {
            return Err(invalid(format!("parameter index {bad} out of range")));
        }
        let m = DMatrix::from_fn(keep.len(), keep.len(), |i, j| self.matrix[(keep[i], keep[j])]);
        let labels = keep.iter().map(|&i| self.labels[i].clone()).collect();
        FimResult::from_matrix(m, labels)
    }

    /// Smallest eigenvalue over largest, for the symmetric PSD check.
    pub fn min_eig_ratio(&self) -> f64 {
        let e = SymmetricEigen::new(self.matrix.clone()).eigenvalues;
        e.min() / e.max().abs().max(f64::MIN_POSITIVE)
    }
}

fn normalized(m: &DMatrix<f64>, diag: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] / (diag[i] * diag[j]).sqrt())
}

fn labels(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Gaussian-mean FIM from per-parameter gradient vectors of the mean.
pub fn fim_from_gradients(grads: &[ComplexVector], noise_var: f64) -> Result<DMatrix<f64>> {
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(invalid(format!("noise variance must be positive, got {noise_var}")));
    }
    let p = grads.len();
    if let Some(g) = grads.iter().find(|g| g.len() != grads[0].len()) {
        return Err(Error::DimensionMismatch { expected: grads[0].len(), found: g.len() });
    }
    Ok(DMatrix::from_fn(p, p, |i, j| 2.0 / noise_var * grads[i].dotc(&grads[j]).re))
}

// ---------------------------------------------------------------------------
// BS probing
// ---------------------------------------------------------------------------

/// How traces of the form `tr(X R Y^H)` are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceRoute {
    /// Expand rank-one factors: `tr(x1 y1^T R conj(y2) x2^H) = (x2^H x1)(y1^T R conj(y2))`.
    RankOne,
    /// Form the matrices and multiply.
    Dense,
}

/// Sum of outer products `x y^T`.
type RankOneSum = Vec<(ComplexVector, ComplexVector)>;

fn dense(terms: &RankOneSum) -> ComplexMatrix {
    let n = terms[0].0.len();
    let mut m = DMatrix::zeros(n, terms[0].1.len());
    for (x, y) in terms {
        m += x * y.transpose();
    }
    m
}

fn trace_xry(x: &RankOneSum, y: &RankOneSum, r: &ComplexMatrix, route: TraceRoute) -> Complex64 {
    match route {
        TraceRoute::RankOne => {
            let mut acc = Complex64::new(0.0, 0.0);
            for (x1, y1) in x {
                for (x2, y2) in y {
                    let ry2 = r * y2.map(|z| z.conj());
                    acc += x2.dotc(x1) * y1.dot(&ry2);
                }
            }
            acc
        }
        TraceRoute::Dense => (dense(x) * r * dense(y).adjoint()).trace(),
    }
}

fn check_covariance(r: &ComplexMatrix, n: usize) -> Result<()> {
    if r.shape() != (n, n) {
        return Err(Error::DimensionMismatch { expected: n, found: r.nrows() });
    }
    if (r - r.adjoint()).norm() > 1e-9 * r.norm().max(f64::MIN_POSITIVE) {
        return Err(invalid("probing covariance must be Hermitian"));
    }
    Ok(())
}

/// FIM of `[mu, nu, Re beta, Im beta]` for target `k` from `t1` probing slots
/// with covariance `probing_cov`.
pub fn fim_stage1(
    geometry: &SceneGeometry,
    k: usize,
    probing_cov: &ComplexMatrix,
    t1: usize,
    noise_var: f64,
) -> Result<FimResult> {
    fim_stage1_with(geometry, k, probing_cov, t1, noise_var, TraceRoute::RankOne)
}

/// [`fim_stage1`] with an explicit trace evaluation route.
pub fn fim_stage1_with(
    geometry: &SceneGeometry,
    k: usize,
    probing_cov: &ComplexMatrix,
    t1: usize,
    noise_var: f64,
    route: TraceRoute,
) -> Result<FimResult> {
    geometry.validate()?;
    check_covariance(probing_cov, geometry.bs_upa.len())?;
    if t1 == 0 || !(noise_var > 0.0) {
        return Err(invalid("need t1 > 0 and positive noise variance"));
    }
    let beta = path_gain(geometry, PathKind::BsTargetBs, None, Some(k))?.value;
    let ang = geometry.bs_to_target(k)?;
    let a = geometry.bs_upa.response(ang);
    let (da_mu, da_nu) = upa_response_derivatives(ang, &geometry.bs_upa)?;
    let resp: RankOneSum = vec![(a.clone(), a.clone())];
    let d_mu: RankOneSum = vec![(da_mu.clone(), a.clone()), (a.clone(), da_mu)];
    let d_nu: RankOneSum = vec![(da_nu.clone(), a.clone()), (a.clone(), da_nu)];
    // Parameter i enters the mean as coef_i * D_i * w.
    let j = Complex64::new(0.0, 1.0);
    let one = Complex64::new(1.0, 0.0);
    let params: [(&RankOneSum, Complex64); 4] = [(&d_mu, beta), (&d_nu, beta), (&resp, one), (&resp, j)];
    let scale = 2.0 * t1 as f64 / noise_var;
    let mut f = DMatrix::zeros(4, 4);
    for (p, (dp, cp)) in params.iter().enumerate() {
        for (q, (dq, cq)) in params.iter().enumerate().skip(p) {
            let v = scale * (cp.conj() * cq * trace_xry(dq, dp, probing_cov, route)).re;
            f[(p, q)] = v;
            f[(q, p)] = v;
        }
    }
    FimResult::from_matrix(f, labels(&["mu", "nu", "re_beta", "im_beta"]))
}

/// Closed-form stage-1 FIM under white probing `(P/N) I`: diagonal with
/// `f_mumu = |beta|^2 T P pi^2 N_z sum_y (N_y - 2n + 1)^2 / sigma^2` and
/// `F_betabeta = 2 T N P / sigma^2 I`.
pub fn fim_stage1_white(geometry: &SceneGeometry, k: usize, p_bs: f64, t1: usize, noise_var: f64) -> Result<FimResult> {
    geometry.validate()?;
    if t1 == 0 || !(noise_var > 0.0) || !(p_bs > 0.0) {
        return Err(invalid("need t1 > 0, positive power and positive noise variance"));
    }
    let beta2 = path_gain(geometry, PathKind::BsTargetBs, None, Some(k))?.value.norm_sqr();
    let upa = &geometry.bs_upa;
    let sq = |n: usize| (0..n).map(|i| element_offset(i, n).powi(2)).sum::<f64>();
    let pi2 = std::f64::consts::PI.powi(2);
    let t = t1 as f64;
    let f_mu = beta2 * t * p_bs * pi2 * upa.n_z as f64 * sq(upa.n_y) / noise_var;
    let f_nu = beta2 * t * p_bs * pi2 * upa.n_y as f64 * sq(upa.n_z) / noise_var;
    let f_b = 2.0 * t * upa.len() as f64 * p_bs / noise_var;
    FimResult::from_matrix(
        DMatrix::from_diagonal(&DVector::from_vec(vec![f_mu, f_nu, f_b, f_b])),
        labels(&["mu", "nu", "re_beta", "im_beta"]),
    )
}

/// Trace of the stage-1 CRB; `+inf` when singular.
pub fn crb_trace_stage1(
    geometry: &SceneGeometry,
    k: usize,
    probing_cov: &ComplexMatrix,
    t1: usize,
    noise_var: f64,
) -> Result<f64> {
    Ok(fim_stage1(geometry, k, probing_cov, t1, noise_var)?.crb_trace())
}

/// Worst-case stage-1 CRB trace over a set of target directions, with the
/// path gain held fixed at target `k`'s value.
pub fn worst_case_crb_trace_stage1(
    geometry: &SceneGeometry,
    k: usize,
    probing_cov: &ComplexMatrix,
    t1: usize,
    noise_var: f64,
    directions: &[SpatialAnglePair],
) -> Result<f64> {
    let beta = path_gain(geometry, PathKind::BsTargetBs, None, Some(k))?.value;
    let mut worst: f64 = 0.0;
    for &d in directions {
        let f = fim_stage1_direction(&geometry.bs_upa, d, beta, probing_cov, t1, noise_var)?;
        worst = worst.max(f.crb_trace());
    }
    Ok(worst)
}

fn fim_stage1_direction(
    upa: &UpaConfig,
    ang: SpatialAnglePair,
    beta: Complex64,
    r: &ComplexMatrix,
    t1: usize,
    noise_var: f64,
) -> Result<FimResult> {
    let a = upa.response(ang);
    let (da_mu, da_nu) = upa_response_derivatives(ang, upa)?;
    let resp: RankOneSum = vec![(a.clone(), a.clone())];
    let d_mu: RankOneSum = vec![(da_mu.clone(), a.clone()), (a.clone(), da_mu)];
    let d_nu: RankOneSum = vec![(da_nu.clone(), a.clone()), (a.clone(), da_nu)];
    let j = Complex64::new(0.0, 1.0);
    let one = Complex64::new(1.0, 0.0);
    let params: [(&RankOneSum, Complex64); 4] = [(&d_mu, beta), (&d_nu, beta), (&resp, one), (&resp, j)];
    let scale = 2.0 * t1 as f64 / noise_var;
    let f = DMatrix::from_fn(4, 4, |p, q| {
        let (dp, cp) = params[p];
        let (dq, cq) = params[q];
        scale * (cp.conj() * cq * trace_xry(dq, dp, r, TraceRoute::RankOne)).re
    });
    FimResult::from_matrix(f, labels(&["mu", "nu", "re_beta", "im_beta"]))
}

// ---------------------------------------------------------------------------
// Surface scanning
// ---------------------------------------------------------------------------

fn check_codewords(codewords: &[ComplexVector], n: usize) -> Result<()> {
    if codewords.is_empty() {
        return Err(invalid("need at least one codeword"));
    }
    codewords.iter().try_for_each(|w| check_reflection(w, n))
}

/// FIM of `[mu, nu, Re alpha, Im alpha]` for the double-bounce echo
/// `alpha (w^T q)^2`, where `q` is the composite surface response and
/// `(mu, nu)` the surface-to-target angles. Per-sample noise `N_BS sigma^2`.
pub fn fim_stage2_case1(
    geometry: &SceneGeometry,
    m: usize,
    k: usize,
    codewords: &[ComplexVector],
    noise_var: f64,
    p_bs: f64,
) -> Result<FimResult> {
    geometry.validate()?;
    let upa = geometry.panel(m)?.upa;
    check_codewords(codewords, upa.len())?;
    let alpha = case1_amplitude(geometry, m, k, p_bs)?;
    let comp = geometry.irs_to_bs(m)? + geometry.irs_to_target(m, k)?;
    let q = upa.response(comp);
    let (dq_mu, dq_nu) = upa_response_derivatives(comp, &upa)?;
    let t = codewords.len();
    let mut g = vec![DVector::zeros(t); 4];
    let j = Complex64::new(0.0, 1.0);
    for (s, w) in codewords.iter().enumerate() {
        // w^T Q w with Q = q q^T, and w^T Q_mu w = 2 (w^T q_mu)(q^T w).
        let wq = w.dot(&q);
        let quad = wq * wq;
        g[0][s] = alpha * 2.0 * w.dot(&dq_mu) * wq;
        g[1][s] = alpha * 2.0 * w.dot(&dq_nu) * wq;
        g[2][s] = quad;
        g[3][s] = j * quad;
    }
    let f = fim_from_gradients(&g, geometry.bs_upa.len() as f64 * noise_var)?;
    FimResult::from_matrix(f, labels(&["mu", "nu", "re_alpha", "im_alpha"]))
}

/// FIM of `[mu_I2T, nu_I2T, mu_B2T, nu_B2T, Re alpha, Im alpha]` for the
/// single-bounce echo `alpha b(mu_B2T, nu_B2T) w^T q(mu_I2T, nu_I2T)`.
///
/// The mean depends on `alpha` and `b` only through their product, so this
/// 6x6 FIM has rank at most 4. Use [`FimResult::submatrix`] with
/// `[0, 1, 4, 5]` for the surface angles when the BS angles are known.
pub fn fim_stage2_case2(
    geometry: &SceneGeometry,
    m: usize,
    k: usize,
    codewords: &[ComplexVector],
    noise_var: f64,
    p_bs: f64,
) -> Result<FimResult> {
    geometry.validate()?;
    let upa = geometry.panel(m)?.upa;
    check_codewords(codewords, upa.len())?;
    let (alpha, b) = case2_amplitude(geometry, m, k, p_bs)?;
    let comp = geometry.irs_to_bs(m)? + geometry.irs_to_target(m, k)?;
    let q = upa.response(comp);
    let (dq_mu, dq_nu) = upa_response_derivatives(comp, &upa)?;
    let a_d = geometry.bs_upa.response(geometry.bs_to_irs(m)?);
    let (da_mu, da_nu) = upa_response_derivatives(geometry.bs_to_target(k)?, &geometry.bs_upa)?;
    let db_mu = a_d.dotc(&da_mu);
    let db_nu = a_d.dotc(&da_nu);
    let t = codewords.len();
    let mut g = vec![DVector::zeros(t); 6];
    let j = Complex64::new(0.0, 1.0);
    for (s, w) in codewords.iter().enumerate() {
        let wq = w.dot(&q);
        g[0][s] = alpha * b * w.dot(&dq_mu);
        g[1][s] = alpha * b * w.dot(&dq_nu);
        g[2][s] = alpha * db_mu * wq;
        g[3][s] = alpha * db_nu * wq;
        g[4][s] = b * wq;
        g[5][s] = j * b * wq;
    }
    let f = fim_from_gradients(&g, geometry.bs_upa.len() as f64 * noise_var)?;
    FimResult::from_matrix(f, labels(&["mu_i2t", "nu_i2t", "mu_b2t", "nu_b2t", "re_alpha", "im_alpha"]))
}

/// Central-difference FIM of an arbitrary mean function.
///
/// `noise_var` is either one value for all samples or one per sample.
pub fn fim_finite_difference_oracle<F>(
    mean_fn: F,
    noise_var: &[f64],
    params: &[f64],
    steps: &[f64],
) -> Result<FimResult>
where
    F: Fn(&[f64]) -> Result<ComplexVector>,
{
    if steps.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), found: steps.len() });
    }
    if steps.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(invalid("finite-difference steps must be positive"));
    }
    let mut grads = Vec::with_capacity(params.len());
    for (i, &h) in steps.iter().enumerate() {
        let mut plus = params.to_vec();
        let mut minus = params.to_vec();
        plus[i] += h;
        minus[i] -= h;
        let up = mean_fn(&plus)?;
        let um = mean_fn(&minus)?;
        if up.iter().chain(um.iter()).any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(invalid(format!("mean function returned non-finite values at parameter {i}")));
        }
        grads.push((up - um) / Complex64::new(2.0 * h, 0.0));
    }
    let len = grads[0].len();
    let var: Vec<f64> = match noise_var.len() {
        1 => vec![noise_var[0]; len],
        n if n == len => noise_var.to_vec(),
        n => return Err(Error::DimensionMismatch { expected: len, found: n }),
    };
    if var.iter().any(|v| !(*v > 0.0)) {
        return Err(invalid("noise variances must be positive"));
    }
    let p = params.len();
    let f = DMatrix::from_fn(p, p, |i, j| (0..len).map(|t| 2.0 / var[t] * (grads[i][t].conj() * grads[j][t]).re).sum());
    FimResult::from_matrix(f, (0..p).map(|i| format!("eta{i}")).collect())
}

/// Evidence that a repeated-codeword double-bounce FIM is singular.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularityWitness {
    pub determinant: f64,
    pub diagonal_product: f64,
    /// `|| F11 F22 - F12 F21 ||_F`.
    pub block_difference_norm: f64,
    /// `|| F11 ||_F || F22 ||_F`, the natural scale of the block products.
    pub block_scale: f64,
    pub identical_codewords: bool,
}

/// Block factorization check on the double-bounce FIM for the given codewords.
pub fn singularity_witness(
    geometry: &SceneGeometry,
    m: usize,
    k: usize,
    codewords: &[ComplexVector],
    noise_var: f64,
    p_bs: f64,
) -> Result<SingularityWitness> {
    let identical = codewords.windows(2).all(|w| (&w[0] - &w[1]).norm() < 1e-12);
    if !identical {
        log::warn!("block identity only holds for a repeated codeword");
    }
    let fim = fim_stage2_case1(geometry, m, k, codewords, noise_var, p_bs)?;
    let f = &fim.matrix;
    let f11 = f.fixed_view::<2, 2>(0, 0).into_owned();
    let f12 = f.fixed_view::<2, 2>(0, 2).into_owned();
    let f21 = f.fixed_view::<2, 2>(2, 0).into_owned();
    let f22 = f.fixed_view::<2, 2>(2, 2).into_owned();
    let diff = f11 * f22 - f12 * f21;
    Ok(SingularityWitness {
        determinant: fim.determinant,
        diagonal_product: (0..4).map(|i| f[(i, i)]).product(),
        block_difference_norm: diff.norm(),
        block_scale: f11.norm() * f22.norm(),
        identical_codewords: identical,
    })
}

/// Scan schedule with `n_distinct` beams around `center`, repeated to `total` samples.
///
/// Beams are taken from the plan grid in the order centre, +y, +z, -y, -z,
/// then diagonals, so three beams already cover both axes.
pub fn distinct_beam_schedule(
    plan: &IrsScanPlan,
    center: (usize, usize),
    n_distinct: usize,
    total: usize,
) -> Result<Vec<ComplexVector>> {
    const OFFSETS: [(i64, i64); 9] = [(0, 0), (1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)];
    if n_distinct == 0 || n_distinct > OFFSETS.len() || total < n_distinct {
        return Err(invalid(format!("need 1..=9 distinct beams and total >= distinct, got {n_distinct}/{total}")));
    }
    let clamp = |v: i64, n: usize| v.rem_euclid(n as i64) as usize;
    let beams: Vec<ComplexVector> = OFFSETS[..n_distinct]
        .iter()
        .map(|&(di, dj)| plan.codeword(clamp(center.0 as i64 + di, plan.t2_y), clamp(center.1 as i64 + dj, plan.t2_z)))
        .collect();
    Ok((0..total).map(|t| beams[t % n_distinct].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{dft_codebook, Position3};
    use crate::channel::{channel_btb, IrsPanel, Target};
    use crate::stage1::{complex_awgn, seeded_rng};
    use crate::stage2::build_scan_plan;
    use proptest::prelude::*;

    fn scene(n_bs: (usize, usize), n_r: (usize, usize)) -> SceneGeometry {
        SceneGeometry {
            bs: Position3::new(0.0, 0.0, 5.0),
            bs_upa: UpaConfig::new(n_bs.0, n_bs.1).unwrap(),
            irs: vec![IrsPanel {
                position: Position3::new(-20.0, 0.0, 3.0),
                upa: UpaConfig::new(n_r.0, n_r.1).unwrap(),
            }],
            targets: vec![Target::new(Position3::new(-17.0, 4.0, 0.5), 7.0)],
            carrier_freq_hz: 750e6,
        }
    }

    fn white(n: usize, p: f64) -> ComplexMatrix {
        DMatrix::identity(n, n) * Complex64::new(p / n as f64, 0.0)
    }

    fn random_psd(n: usize, p: f64, seed: u64) -> ComplexMatrix {
        let mut rng = seeded_rng(seed);
        let g = complex_awgn(&mut rng, n, n, 1.0);
        let r = &g * g.adjoint();
        let tr = r.trace().re;
        r * Complex64::new(p / tr, 0.0)
    }

    #[test]
    fn white_fim_is_diagonal_and_matches_closed_form() {
        let g = scene((4, 3), (2, 2));
        let p = 0.1;
        let f = fim_stage1(&g, 0, &white(12, p), 10, 1e-11).unwrap();
        let cf = fim_stage1_white(&g, 0, p, 10, 1e-11).unwrap();
        for i in 0..4 {
            assert!((f.matrix[(i, i)] - cf.matrix[(i, i)]).abs() < 1e-10 * cf.matrix[(i, i)]);
            for j in 0..4 {
                if i != j {
                    let gm = (f.matrix[(i, i)] * f.matrix[(j, j)]).sqrt();
                    assert!(f.matrix[(i, j)].abs() < 1e-10 * gm);
                }
            }
        }
    }

    #[test]
    fn rank_one_and_dense_traces_agree() {
        let g = scene((3, 3), (2, 2));
        let r = random_psd(9, 0.5, 3);
        let a = fim_stage1_with(&g, 0, &r, 7, 1e-10, TraceRoute::RankOne).unwrap();
        let b = fim_stage1_with(&g, 0, &r, 7, 1e-10, TraceRoute::Dense).unwrap();
        assert!((&a.matrix - &b.matrix).norm() < 1e-10 * a.matrix.norm());
    }

    #[test]
    fn stage1_matches_finite_difference() {
        let g = scene((3, 4), (2, 2));
        let w = dft_codebook(12, 5, 0.2).unwrap();
        let r = &w * w.adjoint() / Complex64::new(5.0, 0.0);
        let cf = fim_stage1(&g, 0, &r, 5, 1e-11).unwrap();
        let beta = path_gain(&g, PathKind::BsTargetBs, None, Some(0)).unwrap().value;
        let ang = g.bs_to_target(0).unwrap();
        let upa = g.bs_upa;
        let mean = |eta: &[f64]| -> Result<ComplexVector> {
            let a = upa.response(SpatialAnglePair::new(eta[0], eta[1]));
            let y = (&a * a.transpose()) * &w * Complex64::new(eta[2], eta[3]);
            Ok(DVector::from_column_slice(y.as_slice()))
        };
        let fd = fim_finite_difference_oracle(
            mean,
            &[1e-11],
            &[ang.mu, ang.nu, beta.re, beta.im],
            &[1e-5, 1e-5, 1e-6, 1e-6],
        )
        .unwrap();
        let rel = (&cf.matrix - &fd.matrix).norm() / cf.matrix.norm();
        assert!(rel < 1e-4, "{rel}");
        // Channel-module cross-check of the mean at the true parameters.
        let y = channel_btb(&g, 0).unwrap() * &w;
        let m0 = mean(&[ang.mu, ang.nu, beta.re, beta.im]).unwrap();
        assert!((DVector::from_column_slice(y.as_slice()) - m0).norm() < 1e-12 * y.norm());
    }

    #[test]
    fn linear_mean_is_exact_for_any_step() {
        let c = DVector::from_vec(vec![Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.3)]);
        let mean = |eta: &[f64]| Ok(&c * Complex64::new(eta[0], 0.0));
        for h in [1e-1, 1e-4, 3.0] {
            let fd = fim_finite_difference_oracle(mean, &[0.5], &[0.7], &[h]).unwrap();
            let exact = 2.0 / 0.5 * c.norm_squared();
            assert!((fd.matrix[(0, 0)] - exact).abs() < 1e-12 * exact);
        }
    }

    #[test]
    fn finite_difference_converges_second_order() {
        let g = scene((4, 4), (2, 2));
        let w = dft_codebook(16, 16, 1.0).unwrap();
        let r = &w * w.adjoint() / Complex64::new(16.0, 0.0);
        let cf = fim_stage1(&g, 0, &r, 16, 1e-11).unwrap();
        let beta = path_gain(&g, PathKind::BsTargetBs, None, Some(0)).unwrap().value;
        let ang = g.bs_to_target(0).unwrap();
        let upa = g.bs_upa;
        let mean = |eta: &[f64]| -> Result<ComplexVector> {
            let a = upa.response(SpatialAnglePair::new(eta[0], eta[1]));
            let y = (&a * a.transpose()) * &w * Complex64::new(eta[2], eta[3]);
            Ok(DVector::from_column_slice(y.as_slice()))
        };
        let err = |h: f64| {
            let fd =
                fim_finite_difference_oracle(mean, &[1e-11], &[ang.mu, ang.nu, beta.re, beta.im], &[h, h, 1e-6, 1e-6])
                    .unwrap();
            (&cf.matrix - &fd.matrix).norm() / cf.matrix.norm()
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        assert!(e2 < e1 / 3.0, "{e1} vs {e2}");
    }

    #[test]
    fn repeated_codeword_is_singular() {
        let g = scene((3, 3), (4, 4));
        let plan = build_scan_plan(&g.irs[0].upa, 7, 7).unwrap();
        let comp = g.irs_to_bs(0).unwrap() + g.irs_to_target(0, 0).unwrap();
        let center = plan.nearest_beam(comp);
        let one = distinct_beam_schedule(&plan, center, 1, 12).unwrap();
        let three = distinct_beam_schedule(&plan, center, 3, 12).unwrap();
        let f1 = fim_stage2_case1(&g, 0, 0, &one, 1e-11, 1.0).unwrap();
        let f3 = fim_stage2_case1(&g, 0, 0, &three, 1e-11, 1.0).unwrap();
        assert!(f1.singular && f1.crb_diag[0].is_infinite());
        assert!(!f3.singular && f3.crb_diag[0].is_finite());
        let w = singularity_witness(&g, 0, 0, &one, 1e-11, 1.0).unwrap();
        assert!(w.identical_codewords);
        assert!(w.block_difference_norm <= 1e-9 * w.block_scale);
        assert!(w.determinant.abs() <= 1e-8 * w.diagonal_product);
    }

    #[test]
    fn case2_full_fim_is_rank_deficient() {
        let g = scene((3, 3), (4, 4));
        let plan = build_scan_plan(&g.irs[0].upa, 7, 7).unwrap();
        let cw = plan.codewords(&plan.joint_beams());
        let f = fim_stage2_case2(&g, 0, 0, &cw, 1e-11, 1.0).unwrap();
        assert!(f.singular);
        let sub = f.submatrix(&[0, 1, 4, 5]).unwrap();
        assert!(!sub.singular);
    }

    #[test]
    fn diagonal_fim_trace_is_sum_of_reciprocals() {
        let f = FimResult::from_matrix(
            DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0, 8.0])),
            labels(&["a", "b", "c"]),
        )
        .unwrap();
        assert!((f.crb_trace() - (0.5 + 0.25 + 0.125)).abs() < 1e-15);
    }

    #[test]
    fn pseudo_crb_resolves_null_direction() {
        let f = FimResult::from_matrix(DMatrix::from_element(2, 2, 1.0), labels(&["a", "b"])).unwrap();
        assert!(f.singular);
        let p = f.pseudo_crb_diag();
        assert!((p[0] - (0.25 + 0.5 / SINGULAR_TOL)).abs() < 1e-6 * p[0]);
    }

    #[test]
    fn power_scaling_divides_crb() {
        let g = scene((3, 3), (2, 2));
        let r = random_psd(9, 0.3, 11);
        let a = fim_stage1(&g, 0, &r, 5, 1e-11).unwrap();
        let b = fim_stage1(&g, 0, &(r * Complex64::new(10.0, 0.0)), 5, 1e-11).unwrap();
        for i in 0..4 {
            assert!((a.crb_diag[i] / b.crb_diag[i] - 10.0).abs() < 1e-8);
        }
    }

    #[test]
    fn white_minimizes_worst_case_crb_trace() {
        let g = scene((3, 3), (2, 2));
        let p = 0.2;
        let dirs: Vec<SpatialAnglePair> = (0..21)
            .flat_map(|i| (0..21).map(move |j| SpatialAnglePair::new(-1.0 + 0.1 * i as f64, -1.0 + 0.1 * j as f64)))
            .collect();
        let white_worst = worst_case_crb_trace_stage1(&g, 0, &white(9, p), 4, 1e-11, &dirs).unwrap();
        for seed in 0..50 {
            let r = random_psd(9, p, 100 + seed);
            let worst = worst_case_crb_trace_stage1(&g, 0, &r, 4, 1e-11, &dirs).unwrap();
            assert!(worst >= white_worst * (1.0 - 1e-9), "seed {seed}: {worst:e} < {white_worst:e}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fims_are_symmetric_psd(seed in 0u64..10_000, t in 1usize..6) {
            let g = scene((3, 2), (3, 3));
            let r = random_psd(6, 0.4, seed);
            let f1 = fim_stage1(&g, 0, &r, 4, 1e-11).unwrap();
            prop_assert!(f1.min_eig_ratio() >= -1e-8);
            let plan = build_scan_plan(&g.irs[0].upa, 5, 5).unwrap();
            let mut rng = seeded_rng(seed);
            use rand::Rng;
            let beams: Vec<(usize, usize)> = (0..t + 2).map(|_| (rng.random_range(0..5), rng.random_range(0..5))).collect();
            let cw = plan.codewords(&beams);
            let f2 = fim_stage2_case1(&g, 0, 0, &cw, 1e-11, 1.0).unwrap();
            prop_assert!(f2.min_eig_ratio() >= -1e-8);
            prop_assert!((&f2.matrix - f2.matrix.transpose()).norm() == 0.0);
        }
    }
}
