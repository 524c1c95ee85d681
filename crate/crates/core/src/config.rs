//! Layered TOML configuration for the whole pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyConfig;
use crate::error::{Error, Result};
use crate::pose_graph::SolverConfig;
use crate::registration::GicpConfig;
use crate::submap::SubmapConfig;
use crate::synth::{DriftModel, SurveyPlan, TerrainSpec};

/// Beam range noise injected by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub sigma_range: f64,
    pub outlier_rate: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_range: 0.02,
            outlier_rate: 0.002,
            seed: 13,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_range >= 0.0) || !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(Error::Config(
                "noise.sigma_range must be >= 0 and noise.outlier_rate in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    /// Global seed. When set it replaces the terrain, drift and noise seeds
    /// with values derived from it.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Registration + optimization passes; later passes re-detect overlaps
    /// under the previous pass's poses.
    pub repeat: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("out"),
            repeat: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub pipeline: PipelineSection,
    pub terrain: TerrainSpec,
    pub survey: SurveyPlan,
    pub drift: DriftModel,
    pub noise: NoiseConfig,
    pub submap: SubmapConfig,
    pub gicp: GicpConfig,
    pub solver: SolverConfig,
    pub consistency: ConsistencyConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.pipeline.repeat == 0 {
            return Err(Error::Config("pipeline.repeat must be at least 1".into()));
        }
        self.terrain.validate()?;
        self.survey.validate()?;
        self.drift.validate()?;
        self.noise.validate()?;
        self.submap.validate()?;
        self.gicp.validate()?;
        self.solver.validate()?;
        self.consistency.validate()?;
        Ok(())
    }

    /// Sets the global seed and the per-generator seeds derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.pipeline.seed = Some(seed);
        self.apply_seed();
        self
    }

    /// Propagates `pipeline.seed`, if set, to the generators.
    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.pipeline.seed {
            self.terrain.seed = seed;
            self.drift.seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
            self.noise.seed = seed.wrapping_mul(0xBF58_476D_1CE4_E5B9).wrapping_add(2);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = PipelineConfig::from_toml("[survey]\nswath_count = 2\nbogus = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("bogus") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            PipelineConfig::from_toml("[survey]\nline_length = 0.0\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml("[gicp]\nplane_epsilon = 1.5\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn seed_propagates_to_generators() {
        let a = PipelineConfig::default().with_seed(5);
        let b = PipelineConfig::default().with_seed(6);
        assert_eq!(a.terrain.seed, 5);
        assert_ne!(a.drift.seed, b.drift.seed);
        assert_ne!(a.noise.seed, b.noise.seed);
        assert_ne!(a.drift.seed, a.noise.seed);
    }
}
