//! Invariant checks on the scene of a configuration.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::Serialize;

use super::config::ExperimentConfig;
use crate::array::{dft_codebook, steering_vector, SpatialAnglePair};
use crate::channel::{check_reflection, dbm_to_watts, SceneGeometry};
use crate::crb::{
    distinct_beam_schedule, fim_stage1, fim_stage1_white, fim_stage1_with, fim_stage2_case1, singularity_witness,
    TraceRoute,
};
use crate::error::Result;
use crate::localization::{construct_location, match_and_localize, DoAPairObservation};
use crate::stage1::synthesize_stage1;
use crate::stage2::{build_scan_plan, classify_regime};
use crate::ComplexMatrix;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, res: Result<(bool, String)>) -> ValidationCheck {
    match res {
        Ok((passed, detail)) => ValidationCheck { name: name.into(), passed, detail },
        Err(e) => ValidationCheck { name: name.into(), passed: false, detail: format!("error: {e}") },
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn white(n: usize, p: f64) -> ComplexMatrix {
    ComplexMatrix::identity(n, n) * Complex64::new(p / n as f64, 0.0)
}

fn steering_identities(g: &SceneGeometry) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for k in 0..g.targets.len() {
        let ang = g.bs_to_target(k)?;
        for (phi, n) in [(ang.mu, g.bs_upa.n_y), (ang.nu, g.bs_upa.n_z)] {
            let a = steering_vector(phi, n)?;
            let b = steering_vector(-phi, n)?;
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((x.norm() - 1.0).abs()).max((x.conj() - y).norm());
            }
            // Centred phases: the first and last elements are conjugates.
            worst = worst.max((a[0] - a[n - 1].conj()).norm());
        }
    }
    Ok((worst < 1e-12, format!("max deviation {worst:e}")))
}

fn white_fim_diagonal(g: &SceneGeometry, p: f64, t1: usize, noise: f64) -> Result<(bool, String)> {
    let n = g.bs_upa.len();
    let mut worst_off = 0.0f64;
    let mut worst_diag = 0.0f64;
    for k in 0..g.targets.len() {
        let f = fim_stage1(g, k, &white(n, p), t1, noise)?.matrix;
        let c = fim_stage1_white(g, k, p, t1, noise)?.matrix;
        for i in 0..4 {
            worst_diag = worst_diag.max(rel(f[(i, i)], c[(i, i)]));
            for j in 0..4 {
                if i != j {
                    worst_off = worst_off.max(f[(i, j)].abs() / (f[(i, i)] * f[(j, j)]).sqrt());
                }
            }
        }
    }
    Ok((worst_off < 1e-10 && worst_diag < 1e-10, format!("off-diagonal {worst_off:e}, diagonal {worst_diag:e}")))
}

fn trace_routes_agree(g: &SceneGeometry, p: f64, t1: usize, noise: f64) -> Result<(bool, String)> {
    let cov = dft_codebook(g.bs_upa.len(), t1, p)?;
    let cov = &cov * cov.adjoint() / Complex64::new(t1 as f64, 0.0);
    let a = fim_stage1_with(g, 0, &cov, t1, noise, TraceRoute::RankOne)?.matrix;
    let b = fim_stage1_with(g, 0, &cov, t1, noise, TraceRoute::Dense)?.matrix;
    let err = (&a - &b).norm() / a.norm();
    Ok((err < 1e-9, format!("relative difference {err:e}")))
}

fn single_beam_singular(g: &SceneGeometry, p: f64, noise: f64, t2: (usize, usize)) -> Result<(bool, String)> {
    let plan = build_scan_plan(&g.irs[0].upa, t2.0, t2.1)?;
    let comp = g.irs_to_bs(0)? + g.irs_to_target(0, 0)?;
    let center = plan.nearest_beam(comp);
    let one = distinct_beam_schedule(&plan, center, 1, 6)?;
    let w = singularity_witness(g, 0, 0, &one, noise, p)?;
    let fim1 = fim_stage2_case1(g, 0, 0, &one, noise, p)?;
    let three = distinct_beam_schedule(&plan, center, 3, 6)?;
    let fim3 = fim_stage2_case1(g, 0, 0, &three, noise, p)?;
    let det_ok = w.determinant.abs() <= 1e-8 * w.diagonal_product.abs();
    let block_ok = w.block_difference_norm <= 1e-9 * w.block_scale;
    let ok = det_ok
        && block_ok
        && fim1.singular
        && fim1.crb_diag[0].is_infinite()
        && !fim3.singular
        && fim3.crb_diag[0].is_finite();
    Ok((ok, format!("one beam singular={}, three beams CRB(mu)={:e}", fim1.singular, fim3.crb_diag[0])))
}

fn power_identities(g: &SceneGeometry) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for m in 0..g.irs.len() {
        for k in 0..g.targets.len() {
            let r = classify_regime(g, m, k)?;
            worst = worst.max(rel(r.p1, r.p1_dense.unwrap_or(f64::NAN)));
            worst = worst.max(rel(r.p2, r.p2_dense.unwrap_or(f64::NAN)));
        }
    }
    Ok((worst < 1e-10, format!("max relative difference {worst:e}")))
}

fn exact_round_trip(g: &SceneGeometry) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for m in 0..g.irs.len() {
        for k in 0..g.targets.len() {
            let obs = DoAPairObservation { bs_doa: g.bs_to_target(k)?, irs_doa: g.irs_to_target(m, k)?, irs_index: m };
            // Targets behind a surface are not reconstructible from that surface alone.
            if g.targets[k].position.x < g.irs[m].position.x - 1e-6 {
                continue;
            }
            let est = construct_location(&obs, g)?;
            worst = worst.max(est.position.distance(&g.targets[k].position));
        }
    }
    Ok((worst < 1e-8, format!("max position error {worst:e} m")))
}

fn codewords_unit_modulus(g: &SceneGeometry, t2: (usize, usize)) -> Result<(bool, String)> {
    for panel in &g.irs {
        let plan = build_scan_plan(&panel.upa, t2.0, t2.1)?;
        for (i, j) in plan.joint_beams() {
            check_reflection(&plan.codeword(i, j), panel.upa.len())?;
        }
    }
    Ok((true, "all codewords unit modulus".into()))
}

fn seed_determinism(g: &SceneGeometry, p: f64, t1: usize, noise: f64) -> Result<(bool, String)> {
    let w = dft_codebook(g.bs_upa.len(), t1, p)?;
    let a = synthesize_stage1(g, &w, noise, 1234)?;
    let b = synthesize_stage1(g, &w, noise, 1234)?;
    let c = synthesize_stage1(g, &w, noise, 1235)?;
    Ok((a.samples == b.samples && a.samples != c.samples, "fixed seed replays bit-identical samples".into()))
}

fn matching_permutation_invariance(g: &SceneGeometry) -> Result<(bool, String)> {
    let k = g.targets.len();
    if k < 2 || g.irs.len() < 2 {
        return Ok((true, "skipped: needs two targets and two surfaces".into()));
    }
    let bs: Vec<SpatialAnglePair> = (0..k).map(|i| g.bs_to_target(i)).collect::<Result<_>>()?;
    let mut per = BTreeMap::new();
    for m in 0..g.irs.len() {
        per.insert(m, (0..k).map(|i| g.irs_to_target(m, i)).collect::<Result<Vec<_>>>()?);
    }
    let base = match_and_localize(&bs, &per, g)?;
    let mut rev_bs = bs.clone();
    rev_bs.reverse();
    let mut rev_per = per.clone();
    for v in rev_per.values_mut() {
        v.rotate_left(1);
    }
    let shuffled = match_and_localize(&rev_bs, &rev_per, g)?;
    let mut worst = 0.0f64;
    for (i, loc) in base.locations.iter().enumerate() {
        let other = shuffled.locations[k - 1 - i].position;
        worst = worst.max(loc.position.distance(&other));
    }
    Ok((worst < 1e-9, format!("max position difference {worst:e} m")))
}

/// Run the invariant suite on the first variant of `cfg`.
pub fn validate_suite(cfg: &ExperimentConfig) -> Result<Vec<ValidationCheck>> {
    cfg.validate()?;
    let v = cfg.variants()?.remove(0);
    let g = &v.geometry;
    let e = &cfg.experiment;
    let p = dbm_to_watts(e.p_bs_dbm_sweep[e.p_bs_dbm_sweep.len() - 1]);
    let noise = dbm_to_watts(e.noise_dbm).max(f64::MIN_POSITIVE);
    let t2 = (v.t2_y.max(3), v.t2_z.max(3));
    Ok(vec![
        check("steering_identities", steering_identities(g)),
        check("white_probing_fim_diagonal", white_fim_diagonal(g, p, v.t1, noise)),
        check("fim_trace_routes_agree", trace_routes_agree(g, p, v.t1, noise)),
        check("single_beam_fim_singular", single_beam_singular(g, p, noise, t2)),
        check("reflected_power_identities", power_identities(g)),
        check("exact_direction_round_trip", exact_round_trip(g)),
        check("codeword_unit_modulus", codewords_unit_modulus(g, (v.t2_y, v.t2_z))),
        check("seed_determinism", seed_determinism(g, p, v.t1, noise)),
        check("matching_permutation_invariance", matching_permutation_invariance(g)),
    ])
}
