//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::energy::EnergyConfig;
use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::io::{self, FORMAT_VERSION};
use crate::pose::IrlsConfig;
use crate::synth::SynthConfig;

/// Environment variable naming a config file, used when `--config` is absent.
pub const CONFIG_ENV: &str = "MONOSHAPE_CONFIG";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub prior: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub keypoints: Option<PathBuf>,
    pub intrinsics: Option<PathBuf>,
    pub poses: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub format_version: String,
    pub paths: PathsConfig,
    /// Pose stage.
    pub irls: IrlsConfig,
    /// Shape stage, including its own weight-update parameters.
    pub energy: EnergyConfig,
    pub synth: SynthConfig,
    /// `[fx, fy, cx, cy]`, used when no intrinsics file is given.
    pub intrinsics: Option<[f64; 4]>,
    pub basis_size: usize,
    pub log_level: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION.into(),
            paths: PathsConfig::default(),
            irls: IrlsConfig::default(),
            energy: EnergyConfig::default(),
            synth: SynthConfig::default(),
            intrinsics: None,
            basis_size: 5,
            log_level: "info".into(),
        }
    }
}

impl PipelineConfig {
    /// Reads and validates a config file. Relative paths inside it are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = io::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for slot in [
            &mut p.prior,
            &mut p.annotations,
            &mut p.keypoints,
            &mut p.intrinsics,
            &mut p.poses,
            &mut p.out,
        ] {
            if let Some(q) = slot.as_mut().filter(|q| q.is_relative()) {
                *q = base.join(&*q);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `explicit` if given, else the file named by [`CONFIG_ENV`], else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()) {
                Some(p) => Self::load(Path::new(&p)),
                None => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        io::check_version(&self.format_version)?;
        self.irls.validate()?;
        self.energy.validate()?;
        self.synth.validate()?;
        if self.basis_size == 0 {
            return Err(Error::InvalidConfig("basis_size must be at least 1".into()));
        }
        if let Some([fx, fy, cx, cy]) = self.intrinsics {
            Intrinsics::new(fx, fy, cx, cy)?;
        }
        if self.log_level.parse::<log::LevelFilter>().is_err() {
            return Err(Error::InvalidConfig(format!("unknown log level '{}'", self.log_level)));
        }
        let p = &self.paths;
        for (name, path) in [
            ("prior", &p.prior),
            ("annotations", &p.annotations),
            ("keypoints", &p.keypoints),
            ("intrinsics", &p.intrinsics),
            ("poses", &p.poses),
        ] {
            if let Some(path) = path.as_ref().filter(|p| !p.exists()) {
                return Err(Error::InvalidConfig(format!("{name} file {} does not exist", path.display())));
            }
        }
        Ok(())
    }
}
