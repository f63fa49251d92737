//! BS-side probing and 2D MUSIC direction estimation.
//!
//! The BS transmits a probing codebook and receives the superposition of the
//! direct target echoes plus white noise. The noise subspace of the sample
//! covariance is scanned on a uniform `(mu, nu)` grid and the strongest
//! separated peaks are refined by successive zoomed grids.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::array::{steering_unchecked, SpatialAnglePair, UpaConfig};
use crate::channel::{channel_btb, SceneGeometry};
use crate::error::{invalid, Error, Result};
use crate::{ComplexMatrix, ComplexVector};

/// Received BS snapshots, one column per probing slot.
#[derive(Debug, Clone)]
pub struct SnapshotBlock {
    pub samples: ComplexMatrix,
    pub noise_var: f64,
    pub seed: u64,
}

/// Circularly-symmetric complex Gaussian matrix with per-entry variance `var`.
pub fn complex_awgn<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, var: f64) -> ComplexMatrix {
    let s = (var / 2.0).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(s * re, s * im)
    })
}

/// Deterministic RNG for a given seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check_noise(noise_var: f64) -> Result<()> {
    if noise_var.is_finite() && noise_var >= 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("noise variance must be non-negative, got {noise_var}")))
    }
}

/// Noiseless echoes `sum_k H_k W` of all targets for probing matrix `W`.
pub fn stage1_noiseless(geometry: &SceneGeometry, probing: &ComplexMatrix) -> Result<ComplexMatrix> {
    geometry.validate()?;
    let n = geometry.bs_upa.len();
    if probing.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, found: probing.nrows() });
    }
    let mut y = DMatrix::zeros(n, probing.ncols());
    for k in 0..geometry.targets.len() {
        y += channel_btb(geometry, k)? * probing;
    }
    Ok(y)
}

/// Noisy stage-1 snapshots. Noise entries are `CN(0, noise_var)`.
pub fn synthesize_stage1(
    geometry: &SceneGeometry,
    probing: &ComplexMatrix,
    noise_var: f64,
    seed: u64,
) -> Result<SnapshotBlock> {
    check_noise(noise_var)?;
    let clean = stage1_noiseless(geometry, probing)?;
    let mut rng = seeded_rng(seed);
    let noise = complex_awgn(&mut rng, clean.nrows(), clean.ncols(), noise_var);
    Ok(SnapshotBlock { samples: clean + noise, noise_var, seed })
}

/// Hermitian-symmetrized sample covariance `Y Y^H / T`.
pub fn sample_covariance(block: &SnapshotBlock) -> Result<ComplexMatrix> {
    let t = block.samples.ncols();
    if t == 0 {
        return Err(invalid("snapshot block is empty"));
    }
    let r = &block.samples * block.samples.adjoint() / Complex64::new(t as f64, 0.0);
    Ok((&r + r.adjoint()) * Complex64::new(0.5, 0.0))
}

/// Leading eigenpairs of a Hermitian matrix, sorted by decreasing eigenvalue.
#[derive(Debug, Clone)]
pub struct SubspaceDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: ComplexMatrix,
}

impl SubspaceDecomposition {
    /// Full eigendecomposition of a Hermitian matrix.
    pub fn from_covariance(cov: &ComplexMatrix) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::DimensionMismatch { expected: cov.nrows(), found: cov.ncols() });
        }
        let herm = (cov + cov.adjoint()) * Complex64::new(0.5, 0.0);
        let eig = SymmetricEigen::new(herm);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let vecs = DMatrix::from_fn(cov.nrows(), order.len(), |i, j| eig.eigenvectors[(i, order[j])]);
        Ok(Self { eigenvalues: order.iter().map(|&i| eig.eigenvalues[i]).collect(), eigenvectors: vecs })
    }

    /// Leading `max_rank` eigenpairs of `Y Y^H / T` computed from whichever of
    /// `Y Y^H` or `Y^H Y` is smaller.
    pub fn from_snapshots(samples: &ComplexMatrix, max_rank: usize) -> Result<Self> {
        let (n, t) = samples.shape();
        if t == 0 || n == 0 {
            return Err(invalid("snapshot block is empty"));
        }
        let scale = Complex64::new(1.0 / t as f64, 0.0);
        if t >= n {
            let r = samples * samples.adjoint() * scale;
            return Self::from_covariance(&r).map(|d| d.truncated(max_rank));
        }
        let gram = Self::from_covariance(&(samples.adjoint() * samples * scale))?.truncated(max_rank);
        let mut vecs = samples * &gram.eigenvectors;
        for (j, mut col) in vecs.column_iter_mut().enumerate() {
            let lam = gram.eigenvalues[j];
            let norm = col.norm();
            if lam > 0.0 && norm > 0.0 {
                col /= Complex64::new(norm, 0.0);
            }
        }
        Ok(Self { eigenvalues: gram.eigenvalues, eigenvectors: vecs })
    }

    fn truncated(mut self, rank: usize) -> Self {
        let r = rank.min(self.eigenvalues.len());
        self.eigenvalues.truncate(r);
        self.eigenvectors = self.eigenvectors.columns(0, r).into_owned();
        self
    }

    /// First `k` eigenvectors as columns.
    pub fn signal_subspace(&self, k: usize) -> Result<ComplexMatrix> {
        if k > self.eigenvectors.ncols() {
            return Err(invalid(format!("requested {k} signal vectors, only {} available", self.eigenvectors.ncols())));
        }
        Ok(self.eigenvectors.columns(0, k).into_owned())
    }
}

/// Options for grid search and peak refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MusicOptions {
    /// Coarse grid step in spatial-angle units.
    pub grid_step: f64,
    /// Number of successive 10x zoom passes around each peak.
    pub refine_levels: usize,
    /// Non-maximum suppression radius, in coarse grid steps.
    pub nms_radius: usize,
}

impl Default for MusicOptions {
    fn default() -> Self {
        Self { grid_step: 2e-3, refine_levels: 6, nms_radius: 3 }
    }
}

/// Uniform grid of spatial angles covering `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleGrid {
    pub nodes: Vec<f64>,
}

impl AngleGrid {
    pub fn with_step(step: f64) -> Result<Self> {
        if !(step.is_finite() && step > 0.0 && step <= 2.0) {
            return Err(invalid(format!("grid step must be in (0, 2], got {step}")));
        }
        let n = (2.0 / step).round() as usize + 1;
        let h = 2.0 / (n - 1) as f64;
        Ok(Self { nodes: (0..n).map(|i| -1.0 + h * i as f64).collect() })
    }

    pub fn step(&self) -> f64 {
        2.0 / (self.nodes.len() - 1) as f64
    }
}

/// Pseudo-spectrum sampled on a `(mu, nu)` grid, row-major in `mu`.
#[derive(Debug, Clone)]
pub struct MusicSpectrum {
    pub mu_grid: Vec<f64>,
    pub nu_grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl MusicSpectrum {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.nu_grid.len() + j]
    }
}

/// Refined MUSIC peaks, strongest first.
#[derive(Debug, Clone)]
pub struct MusicEstimate {
    pub angles: Vec<SpatialAnglePair>,
    pub spectrum_peak_values: Vec<f64>,
    /// Angular resolution after the final refinement pass.
    pub grid_resolution: f64,
}

/// MUSIC scanner bound to one signal subspace.
#[derive(Debug, Clone)]
pub struct MusicSolver {
    upa: UpaConfig,
    signal: ComplexMatrix,
}

impl MusicSolver {
    pub fn new(signal: ComplexMatrix, upa: UpaConfig) -> Result<Self> {
        upa.validate()?;
        if signal.nrows() != upa.len() {
            return Err(Error::DimensionMismatch { expected: upa.len(), found: signal.nrows() });
        }
        let k = signal.ncols();
        if k == 0 || k >= upa.len() {
            return Err(invalid(format!(
                "target count {k} must be in 1..{} for a {}-element array",
                upa.len(),
                upa.len()
            )));
        }
        Ok(Self { upa, signal })
    }

    pub fn from_covariance(cov: &ComplexMatrix, upa: &UpaConfig, k: usize) -> Result<Self> {
        if cov.nrows() != upa.len() {
            return Err(Error::DimensionMismatch { expected: upa.len(), found: cov.nrows() });
        }
        let sub = SubspaceDecomposition::from_covariance(cov)?;
        Self::new(sub.signal_subspace(k)?, *upa)
    }

    pub fn from_snapshots(samples: &ComplexMatrix, upa: &UpaConfig, k: usize) -> Result<Self> {
        if samples.nrows() != upa.len() {
            return Err(Error::DimensionMismatch { expected: upa.len(), found: samples.nrows() });
        }
        let sub = SubspaceDecomposition::from_snapshots(samples, k)?;
        if sub.eigenvalues.len() < k {
            return Err(Error::UnderResolved { wanted: k, found: sub.eigenvalues.len() });
        }
        Self::new(sub.signal_subspace(k)?, *upa)
    }

    fn floor(&self) -> f64 {
        self.upa.len() as f64 * 1e-14
    }

    /// `1 / (a^H P_noise a)` with the noise projector written as `I - U_s U_s^H`.
    pub fn pseudo_spectrum(&self, angles: SpatialAnglePair) -> f64 {
        let a = self.upa.response(angles);
        let proj = self.signal.ad_mul(&a).norm_squared();
        1.0 / (self.upa.len() as f64 - proj).max(self.floor())
    }

    /// Pseudo spectrum on the separable grid `mu_grid x nu_grid`.
    pub fn spectrum_on(&self, mu_grid: &[f64], nu_grid: &[f64]) -> Vec<f64> {
        let (ny, nz) = (self.upa.n_y, self.upa.n_z);
        let basis = |grid: &[f64], n: usize| {
            let mut m = DMatrix::zeros(n, grid.len());
            for (g, &phi) in grid.iter().enumerate() {
                m.set_column(g, &steering_unchecked(phi, n));
            }
            m
        };
        let u_mu_t = basis(mu_grid, ny).transpose();
        let u_nu = basis(nu_grid, nz);
        let mut proj = vec![0.0; mu_grid.len() * nu_grid.len()];
        for col in self.signal.column_iter() {
            // e^H a(mu, nu) = u(mu)^T conj(E) u(nu) with E the n_y x n_z reshape of e.
            let e_conj = DMatrix::from_fn(ny, nz, |i, j| col[i * nz + j].conj());
            let g = &u_mu_t * e_conj * &u_nu;
            for i in 0..mu_grid.len() {
                let row = i * nu_grid.len();
                for j in 0..nu_grid.len() {
                    proj[row + j] += g[(i, j)].norm_sqr();
                }
            }
        }
        let n = self.upa.len() as f64;
        let floor = self.floor();
        proj.into_iter().map(|p| 1.0 / (n - p).max(floor)).collect()
    }

    pub fn spectrum(&self, grid_step: f64) -> Result<MusicSpectrum> {
        let grid = AngleGrid::with_step(grid_step)?;
        let values = self.spectrum_on(&grid.nodes, &grid.nodes);
        Ok(MusicSpectrum { mu_grid: grid.nodes.clone(), nu_grid: grid.nodes, values })
    }

    /// Top-`k` separated grid peaks refined by zoomed grids.
    pub fn estimate(&self, opts: &MusicOptions) -> Result<MusicEstimate> {
        let k = self.signal.ncols();
        let spec = self.spectrum(opts.grid_step)?;
        let peaks = select_peaks(&spec, k, opts.nms_radius)?;
        let mut step = spec.mu_grid[1] - spec.mu_grid[0];
        let mut angles: Vec<SpatialAnglePair> =
            peaks.iter().map(|&(i, j)| SpatialAnglePair::new(spec.mu_grid[i], spec.nu_grid[j])).collect();
        let mut values: Vec<f64> = peaks.iter().map(|&(i, j)| spec.at(i, j)).collect();
        for _ in 0..opts.refine_levels {
            let fine = step / 10.0;
            for (ang, val) in angles.iter_mut().zip(values.iter_mut()) {
                let axis =
                    |c: f64| -> Vec<f64> { (-10..=10).map(|m| (c + m as f64 * fine).clamp(-1.0, 1.0)).collect() };
                let mu_axis = axis(ang.mu);
                let nu_axis = axis(ang.nu);
                let local = self.spectrum_on(&mu_axis, &nu_axis);
                let mut best = (10 * nu_axis.len() + 10, local[10 * nu_axis.len() + 10]);
                for (idx, &v) in local.iter().enumerate() {
                    if v > best.1 {
                        best = (idx, v);
                    }
                }
                *ang = SpatialAnglePair::new(mu_axis[best.0 / nu_axis.len()], nu_axis[best.0 % nu_axis.len()]);
                *val = best.1;
            }
            step = fine;
        }
        Ok(MusicEstimate { angles, spectrum_peak_values: values, grid_resolution: step })
    }
}

/// Indices of the `k` strongest separated local maxima of a MUSIC spectrum.
pub fn select_peaks(spec: &MusicSpectrum, k: usize, radius: usize) -> Result<Vec<(usize, usize)>> {
    select_grid_peaks(&spec.values, spec.mu_grid.len(), spec.nu_grid.len(), k, radius)
}

/// Indices of the `k` strongest local maxima of a row-major grid, each more
/// than `radius` cells (Chebyshev) from any stronger accepted peak.
///
/// Plateaus resolve to their lowest lexicographic index.
pub fn select_grid_peaks(
    values: &[f64],
    rows: usize,
    cols: usize,
    k: usize,
    radius: usize,
) -> Result<Vec<(usize, usize)>> {
    if values.len() != rows * cols {
        return Err(Error::DimensionMismatch { expected: rows * cols, found: values.len() });
    }
    let at = |i: usize, j: usize| values[i * cols + j];
    let mut candidates = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let v = at(i, j);
            let mut is_max = true;
            'nb: for ii in i.saturating_sub(1)..(i + 2).min(rows) {
                for jj in j.saturating_sub(1)..(j + 2).min(cols) {
                    if (ii, jj) == (i, j) {
                        continue;
                    }
                    let w = at(ii, jj);
                    if w > v || ((ii, jj) < (i, j) && w == v) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                candidates.push((i, j, v));
            }
        }
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(k);
    for (i, j, _) in candidates {
        if chosen.len() == k {
            break;
        }
        if chosen.iter().all(|&(ci, cj)| ci.abs_diff(i) > radius || cj.abs_diff(j) > radius) {
            chosen.push((i, j));
        }
    }
    if chosen.len() < k {
        return Err(Error::UnderResolved { wanted: k, found: chosen.len() });
    }
    Ok(chosen)
}

/// Pseudo spectrum of a covariance on a uniform grid.
pub fn music_spectrum(cov: &ComplexMatrix, upa: &UpaConfig, k: usize, grid_step: f64) -> Result<MusicSpectrum> {
    MusicSolver::from_covariance(cov, upa, k)?.spectrum(grid_step)
}

/// MUSIC direction estimates from a covariance.
pub fn music_estimate(cov: &ComplexMatrix, upa: &UpaConfig, k: usize, opts: &MusicOptions) -> Result<MusicEstimate> {
    MusicSolver::from_covariance(cov, upa, k)?.estimate(opts)
}

/// MUSIC direction estimates straight from snapshots.
pub fn music_estimate_snapshots(
    block: &SnapshotBlock,
    upa: &UpaConfig,
    k: usize,
    opts: &MusicOptions,
) -> Result<MusicEstimate> {
    MusicSolver::from_snapshots(&block.samples, upa, k)?.estimate(opts)
}

/// Exact covariance `sum_k p_k a_k a_k^H + sigma^2 I` for known sources.
pub fn model_covariance(upa: &UpaConfig, sources: &[(SpatialAnglePair, f64)], noise_var: f64) -> ComplexMatrix {
    let n = upa.len();
    let mut r = DMatrix::identity(n, n) * Complex64::new(noise_var, 0.0);
    for &(ang, p) in sources {
        let a: ComplexVector = upa.response(ang);
        r += &a * a.adjoint() * Complex64::new(p, 0.0);
    }
    r
}

/// Probing matrix with i.i.d. uniform phases and per-entry power `power / n`.
///
/// `trace(W W^H) / t = power` exactly and the expected covariance is the
/// white `(power / n) I` for any `t`, unlike a DFT codebook with `t < n`.
pub fn random_phase_probing(n: usize, t: usize, power: f64, seed: u64) -> Result<ComplexMatrix> {
    if n == 0 || t == 0 {
        return Err(invalid(format!("probing needs n, t > 0, got n={n}, t={t}")));
    }
    if !(power.is_finite() && power >= 0.0) {
        return Err(invalid(format!("probing power must be non-negative, got {power}")));
    }
    let amp = (power / n as f64).sqrt();
    let mut rng = seeded_rng(seed);
    Ok(DMatrix::from_fn(n, t, |_, _| Complex64::from_polar(amp, rng.random_range(0.0..std::f64::consts::TAU))))
}

/// Unit-power reference vector handy for tests and benches.
pub fn random_phase_vector(n: usize, seed: u64) -> ComplexVector {
    let mut rng = seeded_rng(seed);
    DVector::from_fn(n, |_, _| Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::dft_codebook;
    use proptest::prelude::*;

    #[test]
    fn random_phase_probing_meets_power_and_is_reproducible() {
        let w = random_phase_probing(16, 5, 2.0, 3).unwrap();
        let tr = (&w * w.adjoint()).trace().re / 5.0;
        assert!((tr - 2.0).abs() < 1e-12);
        assert!(w.iter().all(|z| (z.norm() - (2.0f64 / 16.0).sqrt()).abs() < 1e-15));
        assert_eq!(w, random_phase_probing(16, 5, 2.0, 3).unwrap());
        assert_ne!(w, random_phase_probing(16, 5, 2.0, 4).unwrap());
        assert!(random_phase_probing(16, 0, 1.0, 0).is_err());
    }

    fn upa(n: usize) -> UpaConfig {
        UpaConfig::square(n).unwrap()
    }

    #[test]
    fn noiseless_single_source_is_exact_peak() {
        let cfg = upa(8);
        let truth = SpatialAnglePair::new(0.31, -0.47);
        let r = model_covariance(&cfg, &[(truth, 1.0)], 0.0);
        let spec = music_spectrum(&r, &cfg, 1, 0.01).unwrap();
        let i = spec.mu_grid.iter().position(|&m| (m - 0.31).abs() < 1e-9).unwrap();
        let j = spec.nu_grid.iter().position(|&m| (m + 0.47).abs() < 1e-9).unwrap();
        assert!(spec.at(i, j) >= 1e8);
        let est = music_estimate(&r, &cfg, 1, &MusicOptions { grid_step: 0.01, ..Default::default() }).unwrap();
        assert!((est.angles[0].mu - 0.31).abs() < 1e-6);
        assert!((est.angles[0].nu + 0.47).abs() < 1e-6);
    }

    #[test]
    fn grid_evaluation_matches_pointwise() {
        let cfg = UpaConfig::new(5, 3).unwrap();
        let r = model_covariance(
            &cfg,
            &[(SpatialAnglePair::new(0.2, 0.1), 1.0), (SpatialAnglePair::new(-0.5, 0.6), 0.5)],
            0.01,
        );
        let solver = MusicSolver::from_covariance(&r, &cfg, 2).unwrap();
        let mu = [-0.9, -0.1, 0.4];
        let nu = [0.3, -0.7];
        let grid = solver.spectrum_on(&mu, &nu);
        for (i, &m) in mu.iter().enumerate() {
            for (j, &n) in nu.iter().enumerate() {
                let p = solver.pseudo_spectrum(SpatialAnglePair::new(m, n));
                assert!((grid[i * 2 + j] - p).abs() < 1e-9 * p);
            }
        }
    }

    #[test]
    fn resolves_three_sources() {
        let cfg = upa(10);
        let truth = [
            SpatialAnglePair::new(0.8165, -0.4082),
            SpatialAnglePair::new(0.6667, -0.3333),
            SpatialAnglePair::new(0.0966, -0.2414),
        ];
        let src: Vec<_> = truth.iter().map(|&a| (a, 1.0)).collect();
        let r = model_covariance(&cfg, &src, 1e-3);
        let est = music_estimate(&r, &cfg, 3, &MusicOptions { grid_step: 0.01, ..Default::default() }).unwrap();
        for t in truth {
            let best =
                est.angles.iter().map(|e| (e.mu - t.mu).abs().max((e.nu - t.nu).abs())).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "missed {t:?}: {:?}", est.angles);
        }
    }

    #[test]
    fn under_resolved_is_reported() {
        let spec = MusicSpectrum { mu_grid: vec![0.0, 1.0], nu_grid: vec![0.0, 1.0], values: vec![1.0, 0.5, 0.5, 0.2] };
        assert!(matches!(select_peaks(&spec, 2, 3), Err(Error::UnderResolved { wanted: 2, found: 1 })));
    }

    #[test]
    fn plateau_picks_lowest_index() {
        let spec = MusicSpectrum {
            mu_grid: vec![0.0, 0.5, 1.0],
            nu_grid: vec![0.0, 1.0],
            values: vec![1.0, 3.0, 3.0, 3.0, 0.0, 0.0],
        };
        assert_eq!(select_peaks(&spec, 1, 0).unwrap(), vec![(0, 1)]);
    }

    #[test]
    fn gram_route_matches_full_eigendecomposition() {
        let cfg = UpaConfig::new(4, 4).unwrap();
        let g = SceneGeometry { bs_upa: cfg, ..SceneGeometry::reference_multi_target() };
        let w = dft_codebook(16, 6, 1.0).unwrap();
        let block = synthesize_stage1(&g, &w, 1e-12, 7).unwrap();
        let full = SubspaceDecomposition::from_covariance(&sample_covariance(&block).unwrap()).unwrap();
        let gram = SubspaceDecomposition::from_snapshots(&block.samples, 3).unwrap();
        for k in 0..3 {
            assert!((full.eigenvalues[k] - gram.eigenvalues[k]).abs() < 1e-9 * full.eigenvalues[0]);
        }
        let pf = full.signal_subspace(3).unwrap();
        let pg = gram.signal_subspace(3).unwrap();
        let diff = &pf * pf.adjoint() - &pg * pg.adjoint();
        assert!(diff.norm() < 1e-6);
    }

    #[test]
    fn synthesis_is_seed_deterministic() {
        let g = SceneGeometry { bs_upa: upa(4), ..SceneGeometry::reference_single_target() };
        let w = dft_codebook(16, 16, 1.0).unwrap();
        let a = synthesize_stage1(&g, &w, 1e-11, 42).unwrap();
        let b = synthesize_stage1(&g, &w, 1e-11, 42).unwrap();
        let c = synthesize_stage1(&g, &w, 1e-11, 43).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn noise_has_requested_variance() {
        let mut rng = seeded_rng(5);
        let n = complex_awgn(&mut rng, 200, 200, 2.0);
        let p = n.norm_squared() / 40000.0;
        assert!((p - 2.0).abs() < 0.05);
        let re_var: f64 = n.iter().map(|z| z.re * z.re).sum::<f64>() / 40000.0;
        assert!((re_var - 1.0).abs() < 0.05);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn invariant_to_global_phase(phase in 0.0f64..std::f64::consts::TAU, seed in 0u64..1000) {
            let g = SceneGeometry { bs_upa: upa(6), ..SceneGeometry::reference_single_target() };
            let w = dft_codebook(36, 36, 1.0).unwrap();
            let block = synthesize_stage1(&g, &w, 1e-13, seed).unwrap();
            let rotated = SnapshotBlock {
                samples: &block.samples * Complex64::from_polar(1.0, phase),
                ..block.clone()
            };
            let opts = MusicOptions { grid_step: 0.02, refine_levels: 3, nms_radius: 3 };
            let a = music_estimate_snapshots(&block, &g.bs_upa, 1, &opts).unwrap();
            let b = music_estimate_snapshots(&rotated, &g.bs_upa, 1, &opts).unwrap();
            prop_assert!((a.angles[0].mu - b.angles[0].mu).abs() <= 2.0 * a.grid_resolution);
            prop_assert!((a.angles[0].nu - b.angles[0].nu).abs() <= 2.0 * a.grid_resolution);
        }

        #[test]
        fn peaks_stable_under_tiny_hermitian_perturbation(seed in 0u64..1000) {
            let cfg = upa(6);
            let r = model_covariance(&cfg, &[(SpatialAnglePair::new(0.3, -0.2), 1.0), (SpatialAnglePair::new(-0.6, 0.5), 1.0)], 0.1);
            let e = crate::stage1::tests::random_hermitian(36, seed) * Complex64::new(1e-12, 0.0);
            let opts = MusicOptions { grid_step: 0.02, refine_levels: 2, nms_radius: 3 };
            let a = music_estimate(&r, &cfg, 2, &opts).unwrap();
            let b = music_estimate(&(&r + e), &cfg, 2, &opts).unwrap();
            for (x, y) in a.angles.iter().zip(b.angles.iter()) {
                prop_assert!((x.mu - y.mu).abs() <= a.grid_resolution + 1e-12);
                prop_assert!((x.nu - y.nu).abs() <= a.grid_resolution + 1e-12);
            }
        }

        #[test]
        fn covariance_is_hermitian_psd(seed in 0u64..1000) {
            let g = SceneGeometry { bs_upa: upa(3), ..SceneGeometry::reference_multi_target() };
            let w = dft_codebook(9, 5, 1.0).unwrap();
            let block = synthesize_stage1(&g, &w, 1e-11, seed).unwrap();
            let r = sample_covariance(&block).unwrap();
            prop_assert!((&r - r.adjoint()).norm() <= 1e-14 * r.norm());
            let d = SubspaceDecomposition::from_covariance(&r).unwrap();
            prop_assert!(d.eigenvalues.iter().all(|&l| l >= -1e-12 * d.eigenvalues[0].abs()));
        }
    }

    pub(crate) fn random_hermitian(n: usize, seed: u64) -> ComplexMatrix {
        let mut rng = seeded_rng(seed);
        let g = complex_awgn(&mut rng, n, n, 1.0);
        (&g + g.adjoint()) * Complex64::new(0.5, 0.0)
    }
}
