//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::array::UpaConfig;
use crate::channel::SceneGeometry;
use crate::error::{invalid, Error, Result};
use crate::localization::MAX_MATCH_TARGETS;
use crate::stage1::MusicOptions;
use crate::stage2::Stage2Mode;

/// Built-in scenes selectable with `preset` instead of an explicit `[scene]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScenePreset {
    #[default]
    SingleTarget,
    MultiTarget,
}

impl ScenePreset {
    pub fn geometry(self) -> SceneGeometry {
        match self {
            Self::SingleTarget => SceneGeometry::reference_single_target(),
            Self::MultiTarget => SceneGeometry::reference_multi_target(),
        }
    }
}

/// Order in which the surface beams are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScanOrder {
    /// Sweep y with z held at the middle beam, then sweep z.
    #[default]
    Sequential,
    /// Visit every `(y, z)` beam pair.
    Joint,
}

/// Stage-1 probing design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbingKind {
    /// Unit-modulus i.i.d. phases; white in expectation for any `t1`.
    #[default]
    RandomPhase,
    /// DFT codebook; exactly white only when `t1` is a multiple of the BS element count.
    Dft,
}

/// Overrides applied on top of the base settings for one curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub t1: Option<usize>,
    #[serde(default)]
    pub t2_y: Option<usize>,
    #[serde(default)]
    pub t2_z: Option<usize>,
    /// Side length of every (square) surface.
    #[serde(default)]
    pub n_r: Option<usize>,
}

/// Grid of single-target positions replacing the scene targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaSweep {
    #[serde(default = "default_area_x")]
    pub x_range: [f64; 2],
    #[serde(default = "default_area_y")]
    pub y_range: [f64; 2],
    #[serde(default)]
    pub z: f64,
    #[serde(default = "default_cells")]
    pub cells_x: usize,
    #[serde(default = "default_cells")]
    pub cells_y: usize,
    /// Trials per cell; falls back to the experiment trial count.
    #[serde(default)]
    pub trials: Option<usize>,
}

impl Default for AreaSweep {
    fn default() -> Self {
        Self {
            x_range: default_area_x(),
            y_range: default_area_y(),
            z: 0.0,
            cells_x: default_cells(),
            cells_y: default_cells(),
            trials: None,
        }
    }
}

impl AreaSweep {
    fn axis(range: [f64; 2], cells: usize) -> Vec<f64> {
        if cells == 1 {
            return vec![0.5 * (range[0] + range[1])];
        }
        (0..cells).map(|i| range[0] + (range[1] - range[0]) * i as f64 / (cells - 1) as f64).collect()
    }

    /// Cell centres, x-major.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        let xs = Self::axis(self.x_range, self.cells_x);
        let ys = Self::axis(self.y_range, self.cells_y);
        xs.iter().flat_map(|&x| ys.iter().map(move |&y| (x, y))).collect()
    }
}

fn default_area_x() -> [f64; 2] {
    [-20.0, 0.0]
}
fn default_area_y() -> [f64; 2] {
    [-10.0, 10.0]
}
fn default_cells() -> usize {
    41
}

/// Monte Carlo settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSettings {
    #[serde(default = "default_sweep")]
    pub p_bs_dbm_sweep: Vec<f64>,
    #[serde(default = "default_noise")]
    pub noise_dbm: f64,
    #[serde(default = "default_t1")]
    pub t1: usize,
    #[serde(default = "default_t2")]
    pub t2_y: usize,
    #[serde(default = "default_t2")]
    pub t2_z: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_mode")]
    pub stage2_mode: Stage2Mode,
    #[serde(default)]
    pub scan: ScanOrder,
    #[serde(default)]
    pub probing: ProbingKind,
    /// Seed of the random-phase probing matrix, shared by all trials.
    #[serde(default)]
    pub probing_seed: u64,
    #[serde(default)]
    pub music: MusicOptions,
    /// Worker threads; 0 picks the available parallelism.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub area: Option<AreaSweep>,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            p_bs_dbm_sweep: default_sweep(),
            noise_dbm: default_noise(),
            t1: default_t1(),
            t2_y: default_t2(),
            t2_z: default_t2(),
            trials: default_trials(),
            base_seed: 0,
            stage2_mode: default_mode(),
            scan: ScanOrder::default(),
            probing: ProbingKind::default(),
            probing_seed: 0,
            music: MusicOptions::default(),
            threads: 0,
            variants: Vec::new(),
            area: None,
            output_path: None,
        }
    }
}

fn default_sweep() -> Vec<f64> {
    (0..11).map(|i| -10.0 + 5.0 * i as f64).collect()
}
fn default_noise() -> f64 {
    -80.0
}
fn default_t1() -> usize {
    24
}
fn default_t2() -> usize {
    10
}
fn default_trials() -> usize {
    200
}
fn default_mode() -> Stage2Mode {
    Stage2Mode::FullEcho
}

/// Whole experiment file: a scene (explicit or preset) and the settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub preset: ScenePreset,
    #[serde(default)]
    pub scene: Option<SceneGeometry>,
    #[serde(default)]
    pub experiment: ExperimentSettings,
}

/// Signal-processing choices shared by every trial of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub mode: Stage2Mode,
    pub scan: ScanOrder,
    pub probing: ProbingKind,
    pub probing_seed: u64,
    pub music: MusicOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        ExperimentSettings::default().pipeline()
    }
}

impl ExperimentSettings {
    pub fn pipeline(&self) -> PipelineOptions {
        PipelineOptions {
            mode: self.stage2_mode,
            scan: self.scan,
            probing: self.probing,
            probing_seed: self.probing_seed,
            music: self.music,
        }
    }
}

/// Fully resolved parameters of one curve.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedVariant {
    pub label: String,
    pub t1: usize,
    pub t2_y: usize,
    pub t2_z: usize,
    pub geometry: SceneGeometry,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Scene used by the run: the explicit `[scene]` or the preset.
    pub fn geometry(&self) -> SceneGeometry {
        self.scene.clone().unwrap_or_else(|| self.preset.geometry())
    }

    /// Variants with all overrides applied; one default variant when none are listed.
    pub fn variants(&self) -> Result<Vec<ResolvedVariant>> {
        let e = &self.experiment;
        let base = self.geometry();
        let list = if e.variants.is_empty() { vec![Variant::default()] } else { e.variants.clone() };
        list.iter()
            .enumerate()
            .map(|(i, v)| {
                let mut geometry = base.clone();
                if let Some(n) = v.n_r {
                    let upa = UpaConfig::new(n, n)?;
                    for p in &mut geometry.irs {
                        p.upa = UpaConfig { spacing_over_lambda: p.upa.spacing_over_lambda, ..upa };
                    }
                }
                Ok(ResolvedVariant {
                    label: v.label.clone().unwrap_or_else(|| format!("v{i}")),
                    t1: v.t1.unwrap_or(e.t1),
                    t2_y: v.t2_y.unwrap_or(e.t2_y),
                    t2_z: v.t2_z.unwrap_or(e.t2_z),
                    geometry,
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if e.p_bs_dbm_sweep.is_empty() {
            return Err(Error::Config("p_bs_dbm_sweep must not be empty".into()));
        }
        if e.p_bs_dbm_sweep.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("p_bs_dbm_sweep values must be finite".into()));
        }
        if e.noise_dbm.is_nan() || e.noise_dbm == f64::INFINITY {
            return Err(Error::Config("noise_dbm must be finite or -inf".into()));
        }
        if !(e.music.grid_step > 0.0 && e.music.grid_step <= 1.0) {
            return Err(Error::Config(format!("music.grid_step must be in (0, 1], got {}", e.music.grid_step)));
        }
        if let Some(a) = &e.area {
            if a.cells_x == 0 || a.cells_y == 0 || a.trials == Some(0) {
                return Err(Error::Config("area needs at least one cell and one trial".into()));
            }
            if !(a.x_range.iter().chain(&a.y_range).all(|v| v.is_finite()) && a.z.is_finite()) {
                return Err(Error::Config("area bounds must be finite".into()));
            }
        }
        for v in self.variants()? {
            v.geometry.validate().map_err(|err| Error::Config(format!("variant {}: {err}", v.label)))?;
            if v.t1 == 0 || v.t2_y == 0 || v.t2_z == 0 {
                return Err(Error::Config(format!("variant {}: t1, t2_y, t2_z must be positive", v.label)));
            }
            let k = if e.area.is_some() { 1 } else { v.geometry.targets.len() };
            let m = v.geometry.irs.len();
            if m == 0 {
                return Err(Error::Config("scene needs at least one surface".into()));
            }
            if k > MAX_MATCH_TARGETS {
                return Err(Error::Config(format!("{k} targets exceeds the limit of {MAX_MATCH_TARGETS}")));
            }
            if k > 1 && m < 2 {
                return Err(Error::Config("multiple targets need at least two surfaces".into()));
            }
            if k >= v.geometry.bs_upa.len() {
                return Err(invalid("target count must be below the BS element count"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.geometry(), SceneGeometry::reference_single_target());
        assert_eq!(cfg.experiment.p_bs_dbm_sweep.len(), 11);
        assert_eq!(cfg.experiment.p_bs_dbm_sweep[0], -10.0);
        assert_eq!(cfg.experiment.p_bs_dbm_sweep[10], 40.0);
        assert_eq!(cfg.experiment.noise_dbm, -80.0);
        assert_eq!(cfg.experiment.trials, 200);
    }

    #[test]
    fn explicit_scene_and_variants() {
        let text = r#"
            [scene]
            bs = [0.0, 0.0, 5.0]
            bs_upa = { n_y = 8, n_z = 8 }
            irs = [{ position = [-20.0, 0.0, 3.0], upa = { n_y = 6, n_z = 6 } }]
            targets = [{ position = [-20.0, 2.0, 0.0] }]

            [experiment]
            p_bs_dbm_sweep = [10.0, 20.0]
            trials = 3
            stage2_mode = "case1_approx"
            scan = "joint"

            [[experiment.variants]]
            label = "small"
            n_r = 4
            t1 = 12
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        let v = cfg.variants().unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].label, "small");
        assert_eq!(v[0].t1, 12);
        assert_eq!(v[0].t2_y, 10);
        assert_eq!(v[0].geometry.irs[0].upa.len(), 16);
        assert_eq!(cfg.experiment.scan, ScanOrder::Joint);
        assert_eq!(v[0].geometry.targets[0].rcs_dbsm, 7.0);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml_str("[experiment]\ntrials = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("[experiment]\np_bs_dbm_sweep = []").is_err());
        assert!(ExperimentConfig::from_toml_str("[experiment]\nbogus = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("[[experiment.variants]]\nt1 = 0").is_err());
        // Three targets on a single-surface scene cannot be associated.
        let text = r#"
            preset = "multi_target"
            [[experiment.variants]]
            n_r = 4
        "#;
        assert!(ExperimentConfig::from_toml_str(text).is_ok());
        let mut cfg = ExperimentConfig { preset: ScenePreset::MultiTarget, ..Default::default() };
        let mut g = cfg.geometry();
        g.irs.truncate(1);
        cfg.scene = Some(g);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig { preset: ScenePreset::MultiTarget, ..Default::default() };
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn area_cells_cover_bounds() {
        let a = AreaSweep { cells_x: 3, cells_y: 2, ..Default::default() };
        let c = a.cells();
        assert_eq!(c.len(), 6);
        assert_eq!(c[0], (-20.0, -10.0));
        assert_eq!(c[5], (0.0, 10.0));
    }
}
