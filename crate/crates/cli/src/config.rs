//! TOML run configuration.

use std::path::{Path, PathBuf};

use obsloc_core::liegroup::{PoseSE3, Vec3};
use obsloc_core::registration::RegistrationConfig;
use obsloc_core::scenes::{PriorNoise, SceneSpec, SensorModel, TrajectorySpec};
use serde::Deserialize;

use crate::error::CliError;

/// Recorded data to localize instead of a synthetic scene. Relative paths
/// are resolved against the directory of the config file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    /// Map cloud (PLY or PCD). Missing normals are estimated.
    pub map: PathBuf,
    /// Directory of scan clouds, processed in file-name order.
    pub scans: PathBuf,
    /// Relative-motion priors CSV.
    pub priors: Option<PathBuf>,
    /// Pose of the first scan as `[x, y, z, qx, qy, qz, qw]`; identity if absent.
    pub initial_pose: Option<[f64; 7]>,
}

impl InputConfig {
    pub fn initial_pose(&self) -> PoseSE3 {
        match self.initial_pose {
            Some([x, y, z, qx, qy, qz, qw]) => PoseSE3::from_xyzw(Vec3::new(x, y, z), qx, qy, qz, qw),
            None => PoseSE3::identity(),
        }
    }
}

fn default_every() -> usize {
    10
}

fn default_true() -> bool {
    true
}

fn default_tolerance() -> f64 {
    1e-3
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizeOptions {
    #[serde(default = "default_true")]
    pub use_prior: bool,
    /// Write an observability scan for every Nth scan; 0 disables them.
    #[serde(default = "default_every")]
    pub observability_every: usize,
    /// Maximum timestamp difference (s) when matching priors to scans.
    #[serde(default = "default_tolerance")]
    pub prior_time_tolerance: f64,
}

impl Default for LocalizeOptions {
    fn default() -> Self {
        Self {
            use_prior: true,
            observability_every: default_every(),
            prior_time_tolerance: default_tolerance(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub scene: Option<SceneSpec>,
    pub input: Option<InputConfig>,
    #[serde(default)]
    pub sensor: SensorModel,
    #[serde(default)]
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub priors: PriorNoise,
    #[serde(default)]
    pub registration: RegistrationConfig,
    #[serde(default)]
    pub localize: LocalizeOptions,
}

/// Where the data of a run comes from.
pub enum Source<'a> {
    Scene(&'a SceneSpec),
    Input(&'a InputConfig),
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::input(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`, resolving `[input]` paths relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::at(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| CliError::at(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(input) = cfg.input.as_mut() {
            input.map = base.join(&input.map);
            input.scans = base.join(&input.scans);
            input.priors = input.priors.as_ref().map(|p| base.join(p));
        }
        if let Some(out) = cfg.out.as_mut() {
            *out = base.join(&*out);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.scene, &self.input) {
            (Some(_), Some(_)) => return Err(CliError::input("config has both [scene] and [input]; keep exactly one")),
            (None, None) => return Err(CliError::input("config needs a [scene] or an [input] section")),
            _ => {}
        }
        if let Some(scene) = &self.scene {
            scene.validate().map_err(|e| CliError::input(e.to_string()))?;
        }
        self.sensor.validate().map_err(|e| CliError::input(e.to_string()))?;
        self.trajectory.validate().map_err(|e| CliError::input(e.to_string()))?;
        self.registration.validate().map_err(|e| CliError::input(e.to_string()))?;
        if !(self.priors.sigma_trans >= 0.0) || !(self.priors.sigma_rot >= 0.0) {
            return Err(CliError::input("prior noise sigmas must be non-negative"));
        }
        if !(self.localize.prior_time_tolerance >= 0.0) {
            return Err(CliError::input("prior_time_tolerance must be non-negative"));
        }
        Ok(())
    }

    pub fn source(&self) -> Source<'_> {
        match (&self.scene, &self.input) {
            (Some(scene), _) => Source::Scene(scene),
            (None, Some(input)) => Source::Input(input),
            (None, None) => unreachable!("validated config has a source"),
        }
    }
}

/// Only the `[registration]` table of a config file; everything else is ignored.
#[derive(Debug, Default, Deserialize)]
pub struct RegistrationOnly {
    #[serde(default)]
    pub registration: RegistrationConfig,
}

impl RegistrationOnly {
    pub fn load(path: &Path) -> Result<RegistrationConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::at(path, e))?;
        let cfg: RegistrationOnly = toml::from_str(&text).map_err(|e| CliError::at(path, e))?;
        cfg.registration
            .validate()
            .map_err(|e| CliError::at(path, e))?;
        Ok(cfg.registration)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CORRIDOR: &str = r#"
        seed = 3
        [scene]
        kind = "corridor"
        length = 20.0
        width = 2.0
        height = 3.0
        density = 50.0
        [trajectory]
        start = [3.0, 0.0, 1.5]
        duration = 2.0
    "#;

    #[test]
    fn parses_scene_config() {
        let cfg = RunConfig::from_toml(CORRIDOR).unwrap();
        assert_eq!(cfg.seed, 3);
        assert!(matches!(cfg.source(), Source::Scene(_)));
        assert_eq!(cfg.sensor, SensorModel::default());
        assert!(cfg.localize.use_prior);
    }

    #[test]
    fn scene_and_input_are_exclusive() {
        let both = format!("{CORRIDOR}\n[input]\nmap = \"m.ply\"\nscans = \"s\"\n");
        assert!(RunConfig::from_toml(&both).unwrap_err().to_string().contains("exactly one"));
        assert!(RunConfig::from_toml("seed = 1\n").is_err());
    }

    #[test]
    fn missing_dimension_is_named() {
        let text = CORRIDOR.replace("width = 2.0", "");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = CORRIDOR.replace("duration = 2.0", "duration = 2.0\nspeed = 3.0");
        assert!(RunConfig::from_toml(&text).unwrap_err().to_string().contains("speed"));
    }

    #[test]
    fn input_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[input]\nmap = \"map.ply\"\nscans = \"scans\"\ninitial_pose = [1, 2, 3, 0, 0, 0, 1]\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        let input = cfg.input.unwrap();
        assert_eq!(input.map, dir.path().join("map.ply"));
        assert_eq!(input.initial_pose().translation(), &Vec3::new(1.0, 2.0, 3.0));
    }
}
