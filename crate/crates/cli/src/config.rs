//! Run configuration: a TOML file with `[data]`, `[train]`, `[inference]`,
//! `[metrics]` and `[io]` sections. Every key is optional; unknown keys are
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use csr_core::inference::DEFAULT_SWEEPS;
use csr_core::intrinsics::{AblationConfig, InferenceKind, DEFAULT_BATCH, DEFAULT_ITERATIONS, DEFAULT_LR};
use csr_core::losses::{ConstraintTarget, Family, LossKind, DEFAULT_LAMBDA_REG, DEFAULT_SHIFT_BETA};
use csr_core::metrics::LmseParams;
use csr_core::synthdata::SceneSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory.
    pub dir: PathBuf,
    pub scenes: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub albedo_cells: usize,
    pub shading_smoothness: usize,
    /// Fixed light color; drawn per scene when absent.
    pub light_color: Option<[f64; 3]>,
    pub specular_fraction: f64,
    pub specular_strength: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            dir: PathBuf::from("data"),
            scenes: 20,
            seed: 0,
            height: s.height,
            width: s.width,
            albedo_cells: s.albedo_cells,
            shading_smoothness: s.shading_smoothness,
            light_color: s.light_color,
            specular_fraction: s.specular_fraction,
            specular_strength: s.specular_strength,
        }
    }
}

impl DataSection {
    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            seed: self.seed,
            height: self.height,
            width: self.width,
            albedo_cells: self.albedo_cells,
            shading_smoothness: self.shading_smoothness,
            light_color: self.light_color,
            specular_fraction: self.specular_fraction,
            specular_strength: self.specular_strength,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// `l2` or `distributional`.
    pub loss: String,
    /// `gaussian` or `laplace`.
    pub family: String,
    pub lambda_reg: f64,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub augment: bool,
    pub shift_beta: f64,
    /// `truth` or `prediction`.
    pub constraint_target: String,
    pub constraint_shift: bool,
    pub checkpoint: PathBuf,
    /// Per-iteration loss log; defaults to `<checkpoint>.loss.txt`.
    pub loss_log: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            loss: LossKind::Distributional.to_string(),
            family: Family::Gaussian.to_string(),
            lambda_reg: DEFAULT_LAMBDA_REG,
            lr: DEFAULT_LR,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
            batch_size: DEFAULT_BATCH,
            augment: true,
            shift_beta: DEFAULT_SHIFT_BETA,
            constraint_target: ConstraintTarget::Truth.to_string(),
            constraint_shift: true,
            checkpoint: PathBuf::from("model.ckpt"),
            loss_log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    /// `none`, `hard` or `soft_learned`.
    pub mode: String,
    pub sweeps: usize,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self { mode: InferenceKind::SoftLearned.to_string(), sweeps: DEFAULT_SWEEPS }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// LMSE window; a tenth of the larger image side when absent.
    pub lmse_window: Option<usize>,
    /// LMSE stride; half the window when absent.
    pub lmse_stride: Option<usize>,
    /// Text report path; a `.csv` twin is written next to it.
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    /// Also write 8-bit PNG previews next to raw maps.
    pub png: bool,
}

impl Default for IoSection {
    fn default() -> Self {
        Self { png: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub train: TrainSection,
    pub inference: InferenceSection,
    pub metrics: MetricsSection,
    pub io: IoSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Loads `path`, or the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn lmse_params(&self) -> LmseParams {
        LmseParams { window: self.metrics.lmse_window, stride: self.metrics.lmse_stride }
    }

    /// The pipeline configuration described by `[train]` and `[inference]`.
    pub fn ablation_config(&self) -> Result<AblationConfig, CliError> {
        let t = &self.train;
        let cfg = AblationConfig {
            loss: t.loss.parse().map_err(CliError::usage)?,
            inference: self.inference.mode.parse().map_err(CliError::usage)?,
            family: t.family.parse().map_err(CliError::usage)?,
            lambda_reg: t.lambda_reg,
            lr: t.lr,
            iterations: t.iterations,
            seed: t.seed,
            batch_size: t.batch_size,
            augment: t.augment,
            shift_beta: t.shift_beta,
            constraint_target: t.constraint_target.parse().map_err(CliError::usage)?,
            constraint_shift: t.constraint_shift,
            sweeps: self.inference.sweeps,
        };
        Ok(cfg)
    }
}

/// Training settings stored beside a checkpoint so later commands can
/// interpret its heads.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn default_loss_log(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".loss.txt");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::default();
        let a = cfg.ablation_config().unwrap();
        assert!(a.validate().is_ok());
        assert_eq!(a.lr, 1e-4);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn sections_parse_and_unknown_keys_fail() {
        let cfg = RunConfig::parse("[train]\nlr = 0.001\nloss = \"l2\"\n[inference]\nmode = \"hard\"\n").unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.ablation_config().unwrap().loss, LossKind::L2);
        assert!(RunConfig::parse("[train]\nlearning_rate = 1.0\n").is_err());
        assert!(RunConfig::parse("[bogus]\n").is_err());
        let bad = RunConfig::parse("[train]\nfamily = \"cauchy\"\n").unwrap();
        assert!(bad.ablation_config().is_err());
    }

    #[test]
    fn serialized_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.data.light_color = Some([1.0, 0.8, 0.6]);
        cfg.metrics.lmse_window = Some(4);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn derived_paths() {
        assert_eq!(sidecar_path(Path::new("a/m.ckpt")), PathBuf::from("a/m.ckpt.toml"));
        assert_eq!(default_loss_log(Path::new("m.ckpt")), PathBuf::from("m.ckpt.loss.txt"));
    }
}
