//! Scenario files: strict TOML, unknown keys rejected, every default written out by
//! [`reference_toml`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlAffineSystem, InputNorm};
use crate::environment::{Environment, LidarConfig, Point};
use crate::error::{Error, Result};
use crate::exploration::{ExplorationConfig, Scenario};
use crate::learning::{BasisConfig, LearnHyperParams};
use crate::oracle::OracleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    Dubins {
        speed: f64,
        u_max: f64,
        x0: Vec<f64>,
    },
    Planar {
        delta: f64,
        u_max: f64,
        #[serde(default = "inf_norm")]
        norm: InputNorm,
        x0: Vec<f64>,
    },
}

fn inf_norm() -> InputNorm {
    InputNorm::Inf
}

impl SystemConfig {
    pub fn build(&self) -> Result<(ControlAffineSystem, Vec<f64>)> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("system.{name} must be positive, got {v}")))
            }
        };
        let (sys, x0) = match self {
            SystemConfig::Dubins { speed, u_max, x0 } => {
                positive("speed", *speed)?;
                positive("u_max", *u_max)?;
                (ControlAffineSystem::dubins(*speed, *u_max), x0)
            }
            SystemConfig::Planar { delta, u_max, norm, x0 } => {
                positive("delta", *delta)?;
                positive("u_max", *u_max)?;
                (ControlAffineSystem::planar(*delta, *u_max, *norm), x0)
            }
        };
        if x0.len() != sys.state_dim() || x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("system.x0 must hold {} finite coordinates, got {:?}", sys.state_dim(), x0)));
        }
        Ok((sys, x0.clone()))
    }
}

/// Settings of the `compare` modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Single-shot race goal; the last learned scan site when unset.
    pub goal: Option<Point>,
    /// Goal of the distance-baseline rollout, placed behind an obstacle.
    pub sdf_goal: Point,
    pub steps: usize,
    pub rff_features: usize,
    pub rff_lengthscale: f64,
    pub rff_samples: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig { goal: None, sdf_goal: [0.8, 0.8], steps: 4000, rff_features: 200, rff_lengthscale: 1.0, rff_samples: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Seeds every random stream of the run.
    #[serde(default)]
    pub seed: u64,
    pub environment: Environment,
    pub system: SystemConfig,
    pub lidar: LidarConfig,
    #[serde(default)]
    pub basis: Option<BasisConfig>,
    #[serde(default)]
    pub learning: LearnHyperParams,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    #[serde(default)]
    pub exploration: ExplorationConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.to_scenario()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Resolves per-system defaults, applies the top-level seed and validates.
    pub fn to_scenario(&self) -> Result<Scenario> {
        let (sys, x0) = self.system.build()?;
        if !(self.lidar.radius > 0.0) {
            return Err(Error::Config(format!("lidar.radius must be positive, got {}", self.lidar.radius)));
        }
        if self.lidar.n_rays < 3 {
            return Err(Error::Config("lidar.n_rays must be at least 3".into()));
        }
        let basis = self.basis.clone().unwrap_or_else(|| BasisConfig::for_system(&sys)).resolved(&sys);
        if basis.spacing.len() != sys.state_dim() || basis.spacing.iter().any(|&v| !(v > 0.0)) || !(basis.support > 0.0) {
            return Err(Error::Config(format!(
                "basis.spacing must hold {} positive steps and basis.support must be positive",
                sys.state_dim()
            )));
        }
        let oracle = self.oracle.clone().unwrap_or_else(|| OracleConfig::for_system(&sys)).resolved(&sys);
        if oracle.grid_counts.len() != sys.state_dim() {
            return Err(Error::Config(format!("oracle.grid_counts must hold {} entries", sys.state_dim())));
        }
        let mut learn = self.learning.clone();
        learn.seed = self.seed;
        let mut explore = self.exploration.clone();
        explore.seed = self.seed;
        let env = self.environment.clone();
        env.validate().map_err(|e| Error::Config(format!("environment: {e}")))?;
        let sc = Scenario { env, sys, x0, lidar: self.lidar, explore, learn, basis, oracle };
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// A complete scenario with every optional section spelled out at its default.
pub fn reference_toml() -> String {
    let sys = ControlAffineSystem::dubins(0.1, 0.4);
    let cfg = ScenarioConfig {
        name: "reference".into(),
        seed: 0,
        environment: Environment { bounds: crate::environment::Bounds { min: [-2.0, -2.0], max: [2.0, 2.0] }, obstacles: vec![] },
        system: SystemConfig::Dubins { speed: 0.1, u_max: 0.4, x0: vec![-1.1, -1.1, 0.0] },
        lidar: LidarConfig::new(1.1),
        basis: Some(BasisConfig::for_system(&sys)),
        learning: LearnHyperParams::default(),
        oracle: Some(OracleConfig::for_system(&sys)),
        exploration: ExplorationConfig::default(),
        compare: CompareConfig::default(),
        output: OutputConfig::default(),
    };
    cfg.to_toml().expect("reference config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
[environment]
bounds = { min = [-2.0, -2.0], max = [2.0, 2.0] }
[[environment.obstacles]]
type = "circle"
center = [0.0, 0.0]
radius = 0.5
[system]
kind = "dubins"
speed = 0.1
u_max = 0.4
x0 = [-1.1, -1.1, 0.0]
[lidar]
radius = 1.1
"#;

    #[test]
    fn minimal_config_resolves_defaults() {
        let cfg = ScenarioConfig::parse(MINIMAL).unwrap();
        let sc = cfg.to_scenario().unwrap();
        assert_eq!(sc.oracle.grid_counts, vec![41, 41, 41]);
        assert_eq!(sc.basis.spacing.len(), 3);
        assert_eq!(sc.explore.max_scans, 8);
    }

    #[test]
    fn negative_u_max_names_the_field() {
        let text = MINIMAL.replace("u_max = 0.4", "u_max = -0.4");
        let err = ScenarioConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("system.u_max"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let text = MINIMAL.replace("radius = 1.1", "radius = 1.1\nrange = 2.0");
        let err = ScenarioConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("range") && err.contains("line"), "{err}");
        let text = format!("{MINIMAL}\n[exploration]\nmax_scan = 3\n");
        assert!(ScenarioConfig::parse(&text).unwrap_err().to_string().contains("max_scan"));
    }

    #[test]
    fn reference_parses_back() {
        let text = reference_toml();
        let cfg = ScenarioConfig::parse(&text).unwrap();
        assert_eq!(cfg.to_toml().unwrap(), text);
    }
}
