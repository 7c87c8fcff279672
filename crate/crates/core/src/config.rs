//! JSON run configuration shared by every CLI command.
//!
//! Every field is optional. Unknown keys are rejected so that a typo cannot
//! silently fall back to a default. The master `seed` is spread into the
//! simulator, split, model and training seeds by [`RunConfig::resolve`], and
//! the resolved document is what each run writes next to its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classical::DualBandParams;
use crate::error::{Error, Result};
use crate::models::{AcuNetConfig, AcuSaConfig, TrainConfig};
use crate::simulate::{default_library, phantom_presets, NoiseConfig, OpticsConfig, SaturationConfig, SimConfig};
use crate::spectral::{Domain, EndmemberLibrary, WavelengthGrid};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub start_nm: f64,
    pub step_nm: f64,
    pub count: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { start_nm: 450.0, step_nm: 3.0, count: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub grid: GridConfig,
    /// Endmember CSV replacing the parametric library.
    pub library_csv: Option<PathBuf>,
    pub concentration_levels: Vec<f64>,
    /// Defaults to the nine phantom presets.
    pub optics_presets: Option<Vec<OpticsConfig>>,
    pub samples_per_cell: usize,
    pub noise: NoiseConfig,
    pub geometry_range: (f64, f64),
    pub saturation: SaturationConfig,
    pub optics_jitter: f64,
    pub domain: Domain,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        let p = SimConfig::phantom(120, 42);
        Self {
            grid: GridConfig::default(),
            library_csv: None,
            concentration_levels: p.concentration_levels,
            optics_presets: None,
            samples_per_cell: p.samples_per_cell,
            noise: p.noise,
            geometry_range: p.geometry_range,
            saturation: p.saturation,
            optics_jitter: p.optics_jitter,
            domain: p.domain,
            seed: p.seed,
        }
    }
}

impl SimSection {
    pub fn grid(&self) -> Result<WavelengthGrid> {
        WavelengthGrid::uniform(self.grid.start_nm, self.grid.step_nm, self.grid.count)
    }

    pub fn library(&self) -> Result<EndmemberLibrary> {
        let grid = self.grid()?;
        match &self.library_csv {
            Some(p) => EndmemberLibrary::from_csv_path(p, &grid),
            None => default_library(&grid),
        }
    }

    pub fn to_sim_config(&self) -> Result<SimConfig> {
        let cfg = SimConfig {
            library: self.library()?,
            concentration_levels: self.concentration_levels.clone(),
            optics_presets: self.optics_presets.clone().unwrap_or_else(phantom_presets),
            samples_per_cell: self.samples_per_cell,
            noise: self.noise,
            geometry_range: self.geometry_range,
            saturation: self.saturation,
            optics_jitter: self.optics_jitter,
            domain: self.domain,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub acunet: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Synthetic linear mixtures added to the stage-1 set, as a multiple of
    /// the number of training samples.
    pub augment_ratio: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            acunet: TrainConfig::default(),
            stage1: TrainConfig::default(),
            stage2: TrainConfig::default(),
            augment_ratio: 1.0,
        }
    }
}

/// Extra sets and sizes used only by `repro`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReproSection {
    pub acunet_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Level of the constant-concentration set used for the variance check.
    pub variance_level: f64,
    pub variance_samples_per_preset: usize,
    pub cube_size: usize,
    pub cube_level: f64,
}

impl Default for ReproSection {
    fn default() -> Self {
        Self {
            acunet_epochs: 30,
            stage1_epochs: 8,
            stage2_epochs: 40,
            variance_level: 2.5,
            variance_samples_per_preset: 40,
            cube_size: 48,
            cube_level: 1.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimSection,
    pub baseline: DualBandParams,
    pub acunet: AcuNetConfig,
    pub acusa: AcuSaConfig,
    pub train: TrainSection,
    pub repro: ReproSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            sim: SimSection::default(),
            baseline: DualBandParams::default(),
            acunet: AcuNetConfig::default(),
            acusa: AcuSaConfig::default(),
            train: TrainSection::default(),
            repro: ReproSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse { context: context.to_string(), reason: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Sets `seed` and derives every other seed from it: the simulator,
    /// split and training loops use it as is, the three networks use
    /// `seed`, `seed + 1` and `seed + 2`. Grid lengths follow the
    /// simulator grid.
    pub fn resolve(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.sim.seed = seed;
        for tc in [&mut self.train.acunet, &mut self.train.stage1, &mut self.train.stage2] {
            tc.seed = seed;
        }
        self.acunet.seed = seed;
        self.acusa.hu.seed = seed.wrapping_add(1);
        self.acusa.norm.seed = seed.wrapping_add(2);
        let m = self.sim.grid.count;
        self.acunet.m = m;
        self.acusa.hu.m = m;
        self.acusa.norm.m = m;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.to_sim_config()?;
        self.baseline.validate()?;
        self.acunet.validate()?;
        self.acusa.validate()?;
        for tc in [&self.train.acunet, &self.train.stage1, &self.train.stage2] {
            tc.validate()?;
        }
        if !(self.train.augment_ratio >= 0.0) || !self.train.augment_ratio.is_finite() {
            return Err(Error::Config("augment_ratio must be finite and ≥ 0".into()));
        }
        if self.repro.cube_size < 8 {
            return Err(Error::Config("repro cube_size must be ≥ 8".into()));
        }
        if self.repro.variance_samples_per_preset < 2 {
            return Err(Error::Config("variance_samples_per_preset must be ≥ 2".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config always serializes") + "\n"
    }

    /// Writes `config.resolved.json` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&p, self.to_json()).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}", "t").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"sim": {"sampels_per_cell": 3}}"#, "typo.json").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("sampels_per_cell"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::from_json(r#"{"sim": {"samples_per_cell": 3}, "repro": {"acunet_epochs": 2}}"#, "t")
            .unwrap()
            .resolve(7)
            .unwrap();
        assert_eq!((cfg.sim.seed, cfg.acunet.seed, cfg.acusa.hu.seed, cfg.acusa.norm.seed), (7, 7, 8, 9));
        assert_eq!(cfg.train.stage2.seed, 7);
        assert_eq!(RunConfig::from_json(&cfg.to_json(), "t").unwrap(), cfg);
    }

    #[test]
    fn default_sim_section_matches_phantom() {
        let a = RunConfig::default().sim.to_sim_config().unwrap();
        let b = SimConfig::phantom(120, 42);
        assert_eq!(a.cell_count(), 45);
        assert_eq!(a.library.matrix(), b.library.matrix());
        assert_eq!(a.optics_presets, b.optics_presets);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let cfg = RunConfig::from_json(r#"{"sim": {"geometry_range": [2.0, 1.0]}}"#, "t").unwrap();
        assert!(matches!(cfg.resolve(1), Err(Error::Config(_))));
    }
}
