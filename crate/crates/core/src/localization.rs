//! Target placement from direction pairs and multi-target association.
//!
//! One BS direction and one surface direction fix a target: the y and z
//! components give a 2x2 linear system for the two ranges; x follows from the
//! range spheres, with the surface-side root taken in the surface's front
//! half-space (`x >= x_surface`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::array::{spatial_doa, Position3, SpatialAnglePair};
use crate::channel::SceneGeometry;
use crate::error::{invalid, Error, Result};
use crate::stage2::permutations;

/// Denominators below this magnitude are treated as collinear geometry.
pub const COLLINEAR_TOL: f64 = 1e-9;
/// Radicands in `[-RADICAND_TOL, 0)` are clamped to zero.
pub const RADICAND_TOL: f64 = 1e-9;
/// Slack on the front half-space test, in meters.
pub const FRONT_TOL: f64 = 1e-6;
/// Largest target count accepted by the exhaustive matcher.
pub const MAX_MATCH_TARGETS: usize = 5;

/// Estimated BS-to-target and surface-to-target directions of one target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoAPairObservation {
    pub bs_doa: SpatialAnglePair,
    pub irs_doa: SpatialAnglePair,
    pub irs_index: usize,
}

/// Which BS-side x root was selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    PlusRoot,
    MinusRoot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationEstimate {
    pub position: Position3,
    pub d_b2t: f64,
    pub d_i2t: f64,
    pub branch_chosen: Branch,
    /// Mismatch between the chosen BS-side x root and the surface-side x root.
    pub residual: f64,
}

fn radicand_sqrt(v: f64, hard: bool) -> Result<f64> {
    if v >= 0.0 {
        Ok(v.sqrt())
    } else if !hard || v >= -RADICAND_TOL {
        Ok(0.0)
    } else {
        Err(Error::InconsistentDoa { radicand: v })
    }
}

/// Triangulate one target from a BS direction and a surface direction.
pub fn construct_location(obs: &DoAPairObservation, geometry: &SceneGeometry) -> Result<LocationEstimate> {
    let panel = geometry.panel(obs.irs_index)?;
    if !(obs.bs_doa.is_finite() && obs.irs_doa.is_finite()) {
        return Err(invalid("directions must be finite"));
    }
    // Spatial angles to direction cosines.
    let sb = 2.0 * geometry.bs_upa.spacing_over_lambda;
    let si = 2.0 * panel.upa.spacing_over_lambda;
    let (mb, nb) = (obs.bs_doa.mu / sb, obs.bs_doa.nu / sb);
    let (mi, ni) = (obs.irs_doa.mu / si, obs.irs_doa.nu / si);
    let bs = geometry.bs;
    let irs = panel.position;
    let den = mi * nb - mb * ni;
    if den.abs() < COLLINEAR_TOL {
        return Err(Error::CollinearGeometry { denominator: den });
    }
    let d_b2t = (ni * (bs.y - irs.y) - mi * (bs.z - irs.z)) / den;
    let d_i2t = (nb * (irs.y - bs.y) - mb * (irs.z - bs.z)) / -den;
    let y = bs.y + mb * d_b2t;
    let z = bs.z + nb * d_b2t;
    let r_bs = radicand_sqrt(d_b2t * d_b2t - (y - bs.y).powi(2) - (z - bs.z).powi(2), true)?;
    // Surface side: tangency under noise is common, clamp rather than fail.
    let r_irs = radicand_sqrt(d_i2t * d_i2t - (y - irs.y).powi(2) - (z - irs.z).powi(2), false)?;
    let x_irs = irs.x + r_irs;
    let plus = bs.x + r_bs;
    let minus = bs.x - r_bs;
    let (x, branch, residual) = if (plus - x_irs).abs() <= (minus - x_irs).abs() {
        (plus, Branch::PlusRoot, (plus - x_irs).abs())
    } else {
        (minus, Branch::MinusRoot, (minus - x_irs).abs())
    };
    Ok(LocationEstimate { position: Position3::new(x, y, z), d_b2t, d_i2t, branch_chosen: branch, residual })
}

/// One stage of the sensing protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolStage {
    /// Surface active in this stage; `None` for BS-only probing.
    pub irs_on: Option<usize>,
    pub sample_count: usize,
}

/// Time split of one coherence block: BS probing, then one surface at a time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSchedule {
    pub stages: Vec<ProtocolStage>,
}

impl ProtocolSchedule {
    pub fn total_samples(&self) -> usize {
        self.stages.iter().map(|s| s.sample_count).sum()
    }
}

pub fn build_schedule(m: usize, t1: usize, t2_per_irs: usize) -> Result<ProtocolSchedule> {
    if m == 0 || t1 == 0 || t2_per_irs == 0 {
        return Err(invalid(format!("schedule needs positive counts, got m={m}, t1={t1}, t2={t2_per_irs}")));
    }
    let mut stages = vec![ProtocolStage { irs_on: None, sample_count: t1 }];
    stages.extend((0..m).map(|i| ProtocolStage { irs_on: Some(i), sample_count: t2_per_irs }));
    Ok(ProtocolSchedule { stages })
}

/// Result of associating directions across the BS and several surfaces.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// One location per BS direction, in the input order.
    pub locations: Vec<LocationEstimate>,
    /// Best assignment residual per surface pair that produced a result.
    pub pair_residuals: Vec<((usize, usize), f64)>,
    /// Gap between the second-best and best assignment residuals of the best pair.
    pub residual_margin: f64,
    pub skipped_pairs: Vec<(usize, usize)>,
}

fn sq_dist(a: SpatialAnglePair, b: SpatialAnglePair) -> f64 {
    (a.mu - b.mu).powi(2) + (a.nu - b.nu).powi(2)
}

/// Best-over-orderings squared mismatch between implied and observed directions.
fn ordering_residual(implied: &[SpatialAnglePair], observed: &[SpatialAnglePair], perms: &[Vec<usize>]) -> f64 {
    perms
        .iter()
        .map(|p| implied.iter().zip(p).map(|(&a, &j)| sq_dist(a, observed[j])).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

struct PairOutcome {
    primary: usize,
    residual: f64,
    runner_up: f64,
    locations: Vec<LocationEstimate>,
}

/// Reconstruct with `primary`, score against the directions seen by `check`.
fn evaluate_role(
    bs_doas: &[SpatialAnglePair],
    primary: (usize, &[SpatialAnglePair]),
    check: (usize, &[SpatialAnglePair]),
    geometry: &SceneGeometry,
    perms: &[Vec<usize>],
) -> Result<Option<PairOutcome>> {
    let check_panel = geometry.panel(check.0)?;
    let mut scored: Vec<(f64, Vec<LocationEstimate>)> = Vec::new();
    for perm in perms {
        let locs: Result<Vec<LocationEstimate>> = bs_doas
            .iter()
            .zip(perm)
            .map(|(&bs, &j)| {
                construct_location(
                    &DoAPairObservation { bs_doa: bs, irs_doa: primary.1[j], irs_index: primary.0 },
                    geometry,
                )
            })
            .collect();
        let Ok(locs) = locs else { continue };
        let implied: Result<Vec<SpatialAnglePair>> = locs
            .iter()
            .map(|l| spatial_doa(&check_panel.position, &l.position, check_panel.upa.spacing_over_lambda))
            .collect();
        let Ok(implied) = implied else { continue };
        scored.push((ordering_residual(&implied, check.1, perms).sqrt(), locs));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let runner_up = scored.get(1).map_or(f64::INFINITY, |s| s.0);
    Ok(scored.into_iter().next().map(|(residual, locations)| PairOutcome {
        primary: primary.0,
        residual,
        runner_up,
        locations,
    }))
}

/// Associate K BS directions with K directions per surface and place every target.
///
/// Each surface pair is tried in both roles: one surface reconstructs the
/// targets for every assignment, the other checks them through the directions
/// it would see. The lower-residual assignment of each pair is kept and the
/// per-target positions are averaged over the pairs whose reconstructing
/// surface has the target in front of it.
pub fn match_and_localize(
    bs_doas: &[SpatialAnglePair],
    per_irs_doas: &BTreeMap<usize, Vec<SpatialAnglePair>>,
    geometry: &SceneGeometry,
) -> Result<MatchResult> {
    let k = bs_doas.len();
    if k == 0 {
        return Err(invalid("need at least one BS direction"));
    }
    if k > MAX_MATCH_TARGETS {
        return Err(Error::CapacityExceeded { targets: k, limit: MAX_MATCH_TARGETS });
    }
    if let Some((m, v)) = per_irs_doas.iter().find(|(_, v)| v.len() != k) {
        return Err(invalid(format!("surface {m} reports {} directions, expected {k}", v.len())));
    }
    let surfaces: Vec<usize> = per_irs_doas.keys().copied().collect();
    if surfaces.len() < 2 {
        if k > 1 {
            return Err(invalid("multi-target association needs at least two surfaces"));
        }
        let &m = surfaces.first().ok_or_else(|| invalid("no surface directions given"))?;
        let loc = construct_location(
            &DoAPairObservation { bs_doa: bs_doas[0], irs_doa: per_irs_doas[&m][0], irs_index: m },
            geometry,
        )?;
        return Ok(MatchResult {
            locations: vec![loc],
            pair_residuals: vec![],
            residual_margin: f64::INFINITY,
            skipped_pairs: vec![],
        });
    }
    let perms = permutations(k);
    let mut outcomes: Vec<PairOutcome> = Vec::new();
    let mut pair_residuals = Vec::new();
    let mut skipped = Vec::new();
    for (a_idx, &a) in surfaces.iter().enumerate() {
        for &b in &surfaces[a_idx + 1..] {
            let (da, db) = (per_irs_doas[&a].as_slice(), per_irs_doas[&b].as_slice());
            let ab = evaluate_role(bs_doas, (a, da), (b, db), geometry, &perms)?;
            let ba = evaluate_role(bs_doas, (b, db), (a, da), geometry, &perms)?;
            let best = match (ab, ba) {
                (Some(x), Some(y)) => Some(if y.residual < x.residual { y } else { x }),
                (x, y) => x.or(y),
            };
            match best {
                Some(out) => {
                    pair_residuals.push(((a, b), out.residual));
                    outcomes.push(out);
                }
                None => {
                    log::warn!("surface pair ({a}, {b}) is fully degenerate; skipped");
                    skipped.push((a, b));
                }
            }
        }
    }
    let anchor = outcomes
        .iter()
        .min_by(|x, y| x.residual.total_cmp(&y.residual))
        .ok_or_else(|| Error::DegenerateGeometry("every surface pair was degenerate".into()))?;
    // A surface only sees targets in its front half-space, so a pair's
    // reconstruction of a target counts only if that holds for its
    // reconstructing surface, judged from the best-residual pair.
    let margin = anchor.runner_up - anchor.residual;
    let mut locations = anchor.locations.clone();
    for (t, loc) in locations.iter_mut().enumerate() {
        let x_ref = anchor.locations[t].position.x;
        let mut sum = Position3::new(0.0, 0.0, 0.0);
        let mut n = 0usize;
        for out in &outcomes {
            let x_irs = geometry.panel(out.primary)?.position.x;
            if x_ref >= x_irs - FRONT_TOL {
                sum = sum + out.locations[t].position;
                n += 1;
            }
        }
        if n > 0 {
            let inv = 1.0 / n as f64;
            loc.position = Position3::new(sum.x * inv, sum.y * inv, sum.z * inv);
        }
    }
    Ok(MatchResult { locations, pair_residuals, residual_margin: margin, skipped_pairs: skipped })
}
