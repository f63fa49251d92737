//! Monte Carlo execution of the full two-stage pipeline.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PipelineOptions, ProbingKind, ResolvedVariant, ScanOrder};
use super::metrics::{best_assignment, rmse_angle, rmse_location};
use super::seeds::{stream_seed, trial_seed};
use crate::array::{dft_codebook, Position3, SpatialAnglePair};
use crate::channel::{dbm_to_watts, SceneGeometry, Target};
use crate::crb::{fim_stage1, fim_stage2_case1, fim_stage2_case2, FimResult};
use crate::error::{Error, Result};
use crate::localization::match_and_localize;
use crate::stage1::{complex_awgn, random_phase_probing, seeded_rng, stage1_noiseless, MusicSolver};
use crate::stage2::{
    build_scan_plan, classify_regime_closed_form, scan_estimate, wrap_angle, IrsScanPlan, Regime, RegimeReport,
    Stage2Mode, Stage2Synthesizer,
};
use crate::ComplexMatrix;

/// Truth and estimate for one target in one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub true_bs: SpatialAnglePair,
    pub est_bs: SpatialAnglePair,
    /// Surface-to-target directions, one per surface.
    pub true_irs: Vec<SpatialAnglePair>,
    pub est_irs: Vec<SpatialAnglePair>,
    pub true_position: Position3,
    pub est_position: Position3,
}

/// One seeded trial. Everything except `wall_time_s` is a pure function of
/// the configuration and `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub point_index: usize,
    pub trial_index: usize,
    pub seed: u64,
    pub variant: String,
    pub p_bs_dbm: f64,
    pub cell: Option<(f64, f64)>,
    pub targets: Vec<TargetOutcome>,
    /// Surface-to-BS directions, added to the surface estimates to form the scanned composite beam.
    pub surface_offsets: Vec<SpatialAnglePair>,
    pub error: Option<String>,
    /// One report per `(surface, target)`, surface-major.
    pub regimes: Vec<RegimeReport>,
    pub wall_time_s: f64,
}

impl TrialRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.point_index == other.point_index
            && self.trial_index == other.trial_index
            && self.seed == other.seed
            && self.variant == other.variant
            && self.p_bs_dbm.to_bits() == other.p_bs_dbm.to_bits()
            && self.cell == other.cell
            && self.targets == other.targets
            && self.surface_offsets == other.surface_offsets
            && self.error == other.error
            && self.regimes == other.regimes
    }
}

/// Aggregate metrics of one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub t1: usize,
    pub t2_y: usize,
    pub t2_z: usize,
    pub n_r: usize,
    pub p_bs_dbm: f64,
    pub cell: Option<(f64, f64)>,
    pub trials_ok: usize,
    pub trials_failed: usize,
    pub rmse_mu_bs: f64,
    pub rmse_nu_bs: f64,
    pub rmse_mu_irs: f64,
    pub rmse_nu_irs: f64,
    pub rmse_q: f64,
    pub sqrt_crb_mu_bs: f64,
    pub sqrt_crb_nu_bs: f64,
    pub sqrt_crb_mu_irs: f64,
    pub sqrt_crb_nu_irs: f64,
    pub regime: String,
}

#[derive(Debug, Clone)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub trials: Vec<TrialRecord>,
}

/// Power-independent parts of one scene, computed once and scaled per trial.
pub struct PreparedScene {
    pub geometry: SceneGeometry,
    pub t1: usize,
    /// Stage-1 probing matrix at unit power.
    pub probing_unit: ComplexMatrix,
    /// Noiseless stage-1 echoes at unit power.
    pub stage1_unit: ComplexMatrix,
    pub plans: Vec<IrsScanPlan>,
    pub synths: Vec<Stage2Synthesizer>,
    pub offsets: Vec<SpatialAnglePair>,
    pub true_bs: Vec<SpatialAnglePair>,
    /// `true_irs[m][k]`.
    pub true_irs: Vec<Vec<SpatialAnglePair>>,
    pub regimes: Vec<RegimeReport>,
    pub options: PipelineOptions,
}

impl PreparedScene {
    pub fn new(geometry: SceneGeometry, t1: usize, t2_y: usize, t2_z: usize, options: PipelineOptions) -> Result<Self> {
        geometry.validate()?;
        let n = geometry.bs_upa.len();
        let probing_unit = match options.probing {
            ProbingKind::RandomPhase => random_phase_probing(n, t1, 1.0, options.probing_seed)?,
            ProbingKind::Dft => dft_codebook(n, t1, 1.0)?,
        };
        let stage1_unit = stage1_noiseless(&geometry, &probing_unit)?;
        let m_count = geometry.irs.len();
        let k_count = geometry.targets.len();
        let mut plans = Vec::with_capacity(m_count);
        let mut synths = Vec::with_capacity(m_count);
        let mut offsets = Vec::with_capacity(m_count);
        let mut true_irs = Vec::with_capacity(m_count);
        let mut regimes = Vec::with_capacity(m_count * k_count);
        for m in 0..m_count {
            let plan = build_scan_plan(&geometry.irs[m].upa, t2_y, t2_z)?;
            synths.push(Stage2Synthesizer::new(&geometry, m, &plan, options.mode)?);
            plans.push(plan);
            offsets.push(geometry.irs_to_bs(m)?);
            true_irs.push((0..k_count).map(|k| geometry.irs_to_target(m, k)).collect::<Result<Vec<_>>>()?);
            for k in 0..k_count {
                regimes.push(classify_regime_closed_form(&geometry, m, k)?);
            }
        }
        let true_bs = (0..k_count).map(|k| geometry.bs_to_target(k)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            geometry,
            t1,
            probing_unit,
            stage1_unit,
            plans,
            synths,
            offsets,
            true_bs,
            true_irs,
            regimes,
            options,
        })
    }

    fn from_variant(v: &ResolvedVariant, cfg: &ExperimentConfig) -> Result<Self> {
        Self::new(v.geometry.clone(), v.t1, v.t2_y, v.t2_z, cfg.experiment.pipeline())
    }

    /// One trial at BS power `p_bs` (W) and per-entry noise variance `noise_var` (W).
    pub fn run_trial(&self, p_bs: f64, noise_var: f64, seed: u64) -> Result<Vec<TargetOutcome>> {
        let g = &self.geometry;
        let k = g.targets.len();
        let amp = Complex64::new(p_bs.sqrt(), 0.0);
        let mut rng = seeded_rng(stream_seed(seed, 0));
        let y = &self.stage1_unit * amp + complex_awgn(&mut rng, self.stage1_unit.nrows(), self.t1, noise_var);
        let bs_est = MusicSolver::from_snapshots(&y, &g.bs_upa, k)?.estimate(&self.options.music)?.angles;

        let mut per_irs = BTreeMap::new();
        for (m, synth) in self.synths.iter().enumerate() {
            let obs = synth.observe(p_bs, noise_var, stream_seed(seed, m + 1))?;
            let est = scan_estimate(&obs, &self.plans[m], self.offsets[m], k, self.options.scan == ScanOrder::Joint)?;
            per_irs.insert(m, est);
        }
        let matched = match_and_localize(&bs_est, &per_irs, g)?;
        let est_pos: Vec<Position3> = matched.locations.iter().map(|l| l.position).collect();

        let angle_cost = |t: &[SpatialAnglePair], e: &[SpatialAnglePair]| {
            best_assignment(k, |i, j| (t[i].mu - e[j].mu).powi(2) + (t[i].nu - e[j].nu).powi(2))
        };
        let bs_perm = angle_cost(&self.true_bs, &bs_est);
        let irs_perms: Vec<Vec<usize>> =
            (0..self.synths.len()).map(|m| angle_cost(&self.true_irs[m], &per_irs[&m])).collect();
        let true_pos: Vec<Position3> = g.targets.iter().map(|t| t.position).collect();
        let pos_perm = best_assignment(k, |i, j| true_pos[i].distance(&est_pos[j]).powi(2));
        Ok((0..k)
            .map(|i| TargetOutcome {
                true_bs: self.true_bs[i],
                est_bs: bs_est[bs_perm[i]],
                true_irs: (0..self.synths.len()).map(|m| self.true_irs[m][i]).collect(),
                est_irs: (0..self.synths.len()).map(|m| per_irs[&m][irs_perms[m][i]]).collect(),
                true_position: true_pos[i],
                est_position: est_pos[pos_perm[i]],
            })
            .collect())
    }

    /// Beam sequence a noiseless sweep would visit for target `k` on surface `m`.
    fn noiseless_beams(&self, m: usize, k: usize) -> Result<Vec<(usize, usize)>> {
        let plan = &self.plans[m];
        Ok(match self.options.scan {
            ScanOrder::Joint => plan.joint_beams(),
            ScanOrder::Sequential => {
                let best_y = if self.geometry.targets.len() == 1 {
                    let comp = self.offsets[m] + self.true_irs[m][k];
                    plan.nearest_beam(comp).0
                } else {
                    plan.hold_y_index
                };
                plan.sequential_beams(best_y)
            }
        })
    }

    /// Stage-1 CRB `(mu, nu)` of target `k` under the actual probing covariance.
    pub fn stage1_crb(&self, k: usize, p_bs: f64, noise_var: f64) -> Result<(f64, f64)> {
        if noise_var == 0.0 {
            return Ok((0.0, 0.0));
        }
        let cov = &self.probing_unit * self.probing_unit.adjoint() * Complex64::new(p_bs / self.t1 as f64, 0.0);
        let f = fim_stage1(&self.geometry, k, &cov, self.t1, noise_var)?;
        Ok((f.crb_diag[0], f.crb_diag[1]))
    }

    /// Stage-2 CRB `(mu, nu)` of the surface-to-target direction for surface `m`
    /// and target `k` over the beams a noiseless sweep would visit. The echo
    /// model follows the stage-2 mode, or the regime for the full echo.
    pub fn stage2_crb(&self, m: usize, k: usize, p_bs: f64, noise_var: f64) -> Result<(f64, f64)> {
        if noise_var == 0.0 {
            return Ok((0.0, 0.0));
        }
        let k_count = self.geometry.targets.len();
        let words = self.plans[m].codewords(&self.noiseless_beams(m, k)?);
        let case1 = match self.options.mode {
            Stage2Mode::Case1Approx => true,
            Stage2Mode::Case2Approx => false,
            Stage2Mode::FullEcho => self.regimes[m * k_count + k].regime == Regime::IrsDominant,
        };
        let f: FimResult = if case1 {
            fim_stage2_case1(&self.geometry, m, k, &words, noise_var, p_bs)?
        } else {
            fim_stage2_case2(&self.geometry, m, k, &words, noise_var, p_bs)?.submatrix(&[0, 1, 4, 5])?
        };
        Ok((f.crb_diag[0], f.crb_diag[1]))
    }

    /// `[mu_bs, nu_bs, mu_irs, nu_irs]` CRBs averaged over targets (and surfaces).
    pub fn crb(&self, p_bs: f64, noise_var: f64) -> Result<[f64; 4]> {
        let k_count = self.geometry.targets.len();
        let m_count = self.synths.len();
        let mut out = [0.0; 4];
        for k in 0..k_count {
            let (mu, nu) = self.stage1_crb(k, p_bs, noise_var)?;
            out[0] += mu / k_count as f64;
            out[1] += nu / k_count as f64;
            for m in 0..m_count {
                let (mu, nu) = self.stage2_crb(m, k, p_bs, noise_var)?;
                out[2] += mu / (k_count * m_count) as f64;
                out[3] += nu / (k_count * m_count) as f64;
            }
        }
        Ok(out)
    }
}

/// Grid-quantization error of a noiseless on-grid scan, `(d_mu, d_nu)` per surface and target.
///
/// Holds when the swept power is unimodal over the beam grid, as for the
/// double-bounce model.
pub fn scan_quantization_floor(prep: &PreparedScene) -> Vec<Vec<(f64, f64)>> {
    prep.plans
        .iter()
        .enumerate()
        .map(|(m, plan)| {
            prep.true_irs[m]
                .iter()
                .map(|t| {
                    let (i, j) = plan.nearest_beam(prep.offsets[m] + *t);
                    let mu = wrap_angle(plan.mu_grid[i] - prep.offsets[m].mu);
                    let nu = wrap_angle(plan.nu_grid[j] - prep.offsets[m].nu);
                    (mu - t.mu, nu - t.nu)
                })
                .collect()
        })
        .collect()
}

struct Point {
    variant: usize,
    cell: Option<(f64, f64)>,
    power_dbm: f64,
    trials: usize,
}

fn worker_count(requested: usize, jobs: usize) -> usize {
    let auto = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let n = if requested == 0 { auto } else { requested };
    n.clamp(1, jobs.max(1))
}

/// Variant index, area cell and the prepared scene (`None` when preparation failed).
type SceneSlot = (usize, Option<(f64, f64)>, Option<PreparedScene>);

/// Run every sweep point of `cfg` and aggregate the trials.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let e = &cfg.experiment;
    let variants = cfg.variants()?;
    let noise_var = dbm_to_watts(e.noise_dbm);

    let mut scenes: Vec<SceneSlot> = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        match &e.area {
            None => scenes.push((vi, None, Some(PreparedScene::from_variant(v, cfg)?))),
            Some(area) => {
                let rcs = v.geometry.targets.first().map(|t| t.rcs_dbsm).unwrap_or(7.0);
                for (x, y) in area.cells() {
                    let mut vv = v.clone();
                    vv.geometry.targets = vec![Target::new(Position3::new(x, y, area.z), rcs)];
                    // Cells on degenerate geometry still get a row; every trial is then a failure.
                    let prep = PreparedScene::from_variant(&vv, cfg)
                        .inspect_err(|err| log::warn!("cell ({x}, {y}) cannot be prepared: {err}"))
                        .ok();
                    scenes.push((vi, Some((x, y)), prep));
                }
            }
        }
    }
    let trials_per_point = e.area.as_ref().and_then(|a| a.trials).unwrap_or(e.trials);
    let mut points = Vec::new();
    for (si, (vi, cell, _)) in scenes.iter().enumerate() {
        for &p in &e.p_bs_dbm_sweep {
            points.push((si, Point { variant: *vi, cell: *cell, power_dbm: p, trials: trials_per_point }));
        }
    }

    let jobs: Vec<(usize, usize)> =
        points.iter().enumerate().flat_map(|(pi, (_, pt))| (0..pt.trials).map(move |t| (pi, t))).collect();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<TrialRecord>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|s| {
        for _ in 0..worker_count(e.threads, jobs.len()) {
            s.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(pi, t)) = jobs.get(idx) else { break };
                let (si, pt) = &points[pi];
                let prep = scenes[*si].2.as_ref();
                let seed = trial_seed(e.base_seed, pi, t);
                let start = Instant::now();
                let res = match prep {
                    None => Err(Error::DegenerateGeometry("cell geometry could not be prepared".into())),
                    Some(p) => p.run_trial(dbm_to_watts(pt.power_dbm), noise_var, seed),
                };
                let (targets, error) = match res {
                    Ok(t) => (t, None),
                    Err(err) => (Vec::new(), Some(err.to_string())),
                };
                let rec = TrialRecord {
                    point_index: pi,
                    trial_index: t,
                    seed,
                    variant: variants[pt.variant].label.clone(),
                    p_bs_dbm: pt.power_dbm,
                    cell: pt.cell,
                    targets,
                    surface_offsets: prep.map(|p| p.offsets.clone()).unwrap_or_default(),
                    error,
                    regimes: prep.map(|p| p.regimes.clone()).unwrap_or_default(),
                    wall_time_s: start.elapsed().as_secs_f64(),
                };
                slots.lock().expect("result slots poisoned")[idx] = Some(rec);
            });
        }
    });
    let trials: Vec<TrialRecord> =
        slots.into_inner().expect("result slots poisoned").into_iter().map(|r| r.expect("trial not run")).collect();

    let mut rows = Vec::with_capacity(points.len());
    let mut cursor = 0;
    for (si, pt) in &points {
        let recs = &trials[cursor..cursor + pt.trials];
        cursor += pt.trials;
        let v = &variants[pt.variant];
        let prep = scenes[*si].2.as_ref();
        let crb = match prep {
            None => [f64::NAN; 4],
            Some(p) => p.crb(dbm_to_watts(pt.power_dbm), noise_var).unwrap_or_else(|err| {
                log::warn!("CRB unavailable at {} dBm: {err}", pt.power_dbm);
                [f64::NAN; 4]
            }),
        };
        rows.push(aggregate(v, prep, pt, recs, crb));
    }
    Ok(ResultTable { rows, trials })
}

fn aggregate(
    v: &ResolvedVariant,
    prep: Option<&PreparedScene>,
    pt: &Point,
    recs: &[TrialRecord],
    crb: [f64; 4],
) -> ResultRow {
    let ok: Vec<&TrialRecord> = recs.iter().filter(|r| r.error.is_none()).collect();
    let collect = |f: &dyn Fn(&TargetOutcome) -> Vec<(f64, f64)>| -> f64 {
        let (t, e): (Vec<f64>, Vec<f64>) = ok.iter().flat_map(|r| r.targets.iter().flat_map(f)).unzip();
        rmse_angle(&t, &e).unwrap_or(f64::NAN)
    };
    let rmse_mu_bs = collect(&|o| vec![(o.true_bs.mu, o.est_bs.mu)]);
    let rmse_nu_bs = collect(&|o| vec![(o.true_bs.nu, o.est_bs.nu)]);
    let rmse_mu_irs = collect(&|o| o.true_irs.iter().zip(&o.est_irs).map(|(t, e)| (t.mu, e.mu)).collect());
    let rmse_nu_irs = collect(&|o| o.true_irs.iter().zip(&o.est_irs).map(|(t, e)| (t.nu, e.nu)).collect());
    let (tp, ep): (Vec<Position3>, Vec<Position3>) =
        ok.iter().flat_map(|r| r.targets.iter().map(|o| (o.true_position, o.est_position))).unzip();
    let mut regimes: Vec<&str> =
        prep.map(|p| p.regimes.iter().map(|r| regime_name(r.regime)).collect()).unwrap_or_default();
    regimes.dedup();
    ResultRow {
        variant: v.label.clone(),
        t1: v.t1,
        t2_y: v.t2_y,
        t2_z: v.t2_z,
        n_r: v.geometry.irs.first().map(|p| p.upa.n_y).unwrap_or(0),
        p_bs_dbm: pt.power_dbm,
        cell: pt.cell,
        trials_ok: ok.len(),
        trials_failed: recs.len() - ok.len(),
        rmse_mu_bs,
        rmse_nu_bs,
        rmse_mu_irs,
        rmse_nu_irs,
        rmse_q: rmse_location(&tp, &ep).unwrap_or(f64::NAN),
        sqrt_crb_mu_bs: crb[0].sqrt(),
        sqrt_crb_nu_bs: crb[1].sqrt(),
        sqrt_crb_mu_irs: crb[2].sqrt(),
        sqrt_crb_nu_irs: crb[3].sqrt(),
        regime: regimes.join("|"),
    }
}

pub fn regime_name(r: Regime) -> &'static str {
    match r {
        Regime::IrsDominant => "irs_dominant",
        Regime::DirectDominant => "direct_dominant",
        Regime::Mixed => "mixed",
    }
}

/// Analytic CRB rows: per variant and power, per target and surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrbRow {
    pub variant: String,
    pub p_bs_dbm: f64,
    pub target: usize,
    pub surface: usize,
    pub sqrt_crb_mu_bs: f64,
    pub sqrt_crb_nu_bs: f64,
    pub sqrt_crb_mu_irs: f64,
    pub sqrt_crb_nu_irs: f64,
    pub regime: String,
}

/// Analytic-only sweep: no trials are run.
pub fn crb_sweep(cfg: &ExperimentConfig) -> Result<Vec<CrbRow>> {
    cfg.validate()?;
    let e = &cfg.experiment;
    let noise_var = dbm_to_watts(e.noise_dbm);
    let mut rows = Vec::new();
    for v in cfg.variants()? {
        let prep = PreparedScene::from_variant(&v, cfg)?;
        let k_count = prep.geometry.targets.len();
        for &p_dbm in &e.p_bs_dbm_sweep {
            let p = dbm_to_watts(p_dbm);
            for k in 0..k_count {
                for m in 0..prep.synths.len() {
                    let (mu_bs, nu_bs) = prep.stage1_crb(k, p, noise_var)?;
                    let (mu_irs, nu_irs) = prep.stage2_crb(m, k, p, noise_var)?;
                    rows.push(CrbRow {
                        variant: v.label.clone(),
                        p_bs_dbm: p_dbm,
                        target: k,
                        surface: m,
                        sqrt_crb_mu_bs: mu_bs.sqrt(),
                        sqrt_crb_nu_bs: nu_bs.sqrt(),
                        sqrt_crb_mu_irs: mu_irs.sqrt(),
                        sqrt_crb_nu_irs: nu_irs.sqrt(),
                        regime: regime_name(prep.regimes[m * k_count + k].regime).to_string(),
                    });
                }
            }
        }
    }
    Ok(rows)
}
