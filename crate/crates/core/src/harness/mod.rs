//! Experiment plumbing: configuration, datasets and models, parameter sweeps,
//! operating-point selection, σ-estimation and IBP studies, and reports.

mod report;
mod select;
mod study;
mod sweep;

pub use report::{frontier, report, FrontierPoint};
pub use select::{compare_selected, point_summaries, select_operating_point, Comparison, PointSummary, Selection};
pub use study::{ibp_study, sigma_estimation_run, IbpStudy, SigmaStudyRow};
pub use sweep::{certifiers, load_datasets, run_sweep, sample_seed, trained_model, CertifierPair, ResultRow, RunRecord, SettingInfo, TaskKey, TimingRow};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackSpec, CaaConfig, CwConfig, DeepFoolConfig, PgdConfig};
use crate::data::SyntheticKind;
use crate::error::{Error, Result};
use crate::model::{Head, TrainConfig};

/// Hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Units of the step-size entries (`eps_min`, `eps_max`, PGD `eps`) in a grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridUnits {
    /// Input units, pixels in `[0,1]`.
    #[default]
    Unit,
    /// Multiples of 1/255.
    Pixel,
}

impl GridUnits {
    fn scale(self) -> f64 {
        match self {
            GridUnits::Unit => 1.0,
            GridUnits::Pixel => 1.0 / 255.0,
        }
    }
}

impl std::str::FromStr for GridUnits {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Self::Unit),
            "pixel" => Ok(Self::Pixel),
            other => Err(Error::invalid(format!("unknown grid units {other:?} (unit|pixel)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        shape: SyntheticKind,
        train: usize,
        test: usize,
    },
    /// A directory holding the four standard MNIST IDX files.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    /// Two stride-2 convolutions and a hidden linear layer; needs image inputs.
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// Hidden widths of the MLP.
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Training noise; defaults to the certifying σ (0 under IBP).
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn train_config(&self, sigma: Option<f64>) -> TrainConfig {
        TrainConfig {
            sigma: self.noise.or(sigma).unwrap_or(0.0),
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CertifierSpec {
    Smoothing {
        sigmas: Vec<f64>,
        #[serde(default = "defaults::attack_samples")]
        attack_samples: usize,
        #[serde(default = "defaults::judge_samples")]
        judge_samples: usize,
        #[serde(default = "defaults::alpha")]
        alpha: f64,
        #[serde(default)]
        head: Head,
        /// The attacker smooths with `factor·σ` while the judge uses `σ`.
        #[serde(default = "defaults::one")]
        attacker_sigma_factor: f64,
    },
    Ibp {
        #[serde(default = "defaults::ibp_tol")]
        tol: f64,
    },
}

impl CertifierSpec {
    /// The σ values a sweep iterates over; `[None]` for IBP.
    pub fn settings(&self) -> Vec<Option<f64>> {
        match self {
            CertifierSpec::Smoothing { sigmas, .. } => sigmas.iter().map(|&s| Some(s)).collect(),
            CertifierSpec::Ibp { .. } => vec![None],
        }
    }
}

/// Parameter grid of one attack. Lists are swept as a Cartesian product in
/// the listed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodGrid {
    Caa {
        eps_min: Vec<f64>,
        eps_max: Vec<f64>,
        /// Used for both the growth and the shrink factor.
        delta: Vec<f64>,
        #[serde(default = "defaults::caa_iters")]
        max_iters: usize,
        #[serde(default = "defaults::max_confirm")]
        max_confirm: usize,
    },
    Pgd {
        eps: Vec<f64>,
        #[serde(default = "defaults::pgd_iters")]
        iters: usize,
    },
    Cw {
        c: Vec<f64>,
        #[serde(default)]
        kappa: f64,
        #[serde(default = "defaults::cw_steps")]
        steps: usize,
        #[serde(default = "defaults::cw_lr")]
        lr: f64,
        #[serde(default = "defaults::max_confirm")]
        max_confirm: usize,
    },
    #[serde(rename = "deepfool")]
    DeepFool {
        #[serde(default = "defaults::deepfool_iters")]
        iters: usize,
        #[serde(default = "defaults::overshoot")]
        overshoot: f64,
    },
}

impl MethodGrid {
    /// The full CAA grid in `[0,1]` units: 3 × 4 × 5 points.
    pub fn full_caa() -> Self {
        MethodGrid::Caa {
            eps_min: [1.0, 5.0, 10.0].map(|v| v / 255.0).to_vec(),
            eps_max: [20.0, 40.0, 100.0, 255.0].map(|v| v / 255.0).to_vec(),
            delta: vec![0.01, 0.025, 0.05, 0.075, 0.1],
            max_iters: defaults::caa_iters(),
            max_confirm: defaults::max_confirm(),
        }
    }

    pub fn full_pgd() -> Self {
        MethodGrid::Pgd {
            eps: [1.0, 4.0, 8.0, 10.0, 20.0, 30.0, 40.0, 50.0, 100.0, 200.0].map(|v| v / 255.0).to_vec(),
            iters: defaults::pgd_iters(),
        }
    }

    pub fn full_cw() -> Self {
        MethodGrid::Cw {
            c: vec![1e-5, 1e-4, 1e-2, 1e-1, 1.0, 2.0, 3.0],
            kappa: 0.0,
            steps: defaults::cw_steps(),
            lr: defaults::cw_lr(),
            max_confirm: defaults::max_confirm(),
        }
    }

    pub fn method(&self) -> crate::attacks::Method {
        use crate::attacks::Method;
        match self {
            MethodGrid::Caa { .. } => Method::Caa,
            MethodGrid::Pgd { .. } => Method::Pgd,
            MethodGrid::Cw { .. } => Method::Cw,
            MethodGrid::DeepFool { .. } => Method::DeepFool,
        }
    }

    /// Every parameter point with seed 0, step sizes converted to `[0,1]`
    /// units. Each point is validated.
    pub fn points(&self, units: GridUnits) -> Result<Vec<AttackSpec>> {
        let s = units.scale();
        let pts: Vec<AttackSpec> = match self {
            MethodGrid::Caa {
                eps_min,
                eps_max,
                delta,
                max_iters,
                max_confirm,
            } => {
                let mut v = Vec::new();
                for &lo in eps_min {
                    for &hi in eps_max {
                        for &d in delta {
                            v.push(AttackSpec::Caa(CaaConfig {
                                eps_min: lo * s,
                                eps_max: hi * s,
                                delta_grow: d,
                                delta_shrink: d,
                                max_iters: *max_iters,
                                max_confirm: *max_confirm,
                                seed: 0,
                            }));
                        }
                    }
                }
                v
            }
            MethodGrid::Pgd { eps, iters } => eps
                .iter()
                .map(|&e| {
                    AttackSpec::Pgd(PgdConfig {
                        eps_step: e * s,
                        iters: *iters,
                        seed: 0,
                    })
                })
                .collect(),
            MethodGrid::Cw {
                c,
                kappa,
                steps,
                lr,
                max_confirm,
            } => c
                .iter()
                .map(|&c| {
                    AttackSpec::Cw(CwConfig {
                        c,
                        kappa: *kappa,
                        steps: *steps,
                        lr: *lr,
                        max_confirm: *max_confirm,
                        seed: 0,
                    })
                })
                .collect(),
            MethodGrid::DeepFool { iters, overshoot } => vec![AttackSpec::DeepFool(DeepFoolConfig {
                iters: *iters,
                overshoot: *overshoot,
                seed: 0,
            })],
        };
        if pts.is_empty() {
            return Err(Error::invalid(format!("{} grid is empty", self.method())));
        }
        for p in &pts {
            p.validate()?;
        }
        Ok(pts)
    }
}

/// A complete, reproducible experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Correctly classified test points attacked per σ.
    pub samples: usize,
    #[serde(default)]
    pub grid_units: GridUnits,
    /// Relative paths resolve against `CERTATTACK_OUT` when set.
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "defaults::one_usize")]
    pub threads: usize,
    /// Tasks per flush of the results file.
    #[serde(default = "defaults::checkpoint")]
    pub checkpoint: usize,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub certifier: CertifierSpec,
    #[serde(default)]
    pub methods: Vec<MethodGrid>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file; a relative MNIST directory resolves against the
    /// file's own directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let DatasetSpec::Mnist { dir, .. } = &mut cfg.dataset {
            if dir.is_relative() {
                if let Some(base) = path.parent() {
                    *dir = base.join(&*dir);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::invalid("samples must be at least 1"));
        }
        if self.checkpoint == 0 {
            return Err(Error::invalid("checkpoint must be at least 1"));
        }
        match &self.dataset {
            DatasetSpec::Synthetic { train, test, .. } if *train < 2 || *test < 2 => {
                return Err(Error::invalid("synthetic datasets need at least two samples"));
            }
            DatasetSpec::Mnist {
                train_subset: Some(0), ..
            }
            | DatasetSpec::Mnist {
                test_subset: Some(0), ..
            } => return Err(Error::invalid("subset sizes must be positive")),
            _ => {}
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if self.model.epochs == 0 || self.model.batch_size == 0 || !(self.model.lr > 0.0) {
            return Err(Error::invalid("model training needs epochs, batch size and lr > 0"));
        }
        if let Some(n) = self.model.noise {
            if !(n >= 0.0 && n.is_finite()) {
                return Err(Error::invalid(format!("training noise must be >= 0, got {n}")));
            }
        }
        match &self.certifier {
            CertifierSpec::Smoothing {
                sigmas,
                attack_samples,
                judge_samples,
                alpha,
                head,
                attacker_sigma_factor,
            } => {
                if sigmas.is_empty() {
                    return Err(Error::invalid("sigma grid is empty"));
                }
                for &s in sigmas {
                    crate::smoothing::SmoothingConfig::new(s, *judge_samples, *alpha, 0)?;
                    crate::smoothing::SmoothingConfig::new(s * attacker_sigma_factor, *attack_samples, *alpha, 0)?;
                }
                head.validate()?;
            }
            CertifierSpec::Ibp { tol } => {
                if !(*tol > 0.0 && *tol < 1.0) {
                    return Err(Error::invalid(format!("IBP tolerance must lie in (0,1), got {tol}")));
                }
            }
        }
        for g in &self.methods {
            g.points(self.grid_units)?;
        }
        Ok(())
    }

    /// Hash over every field that affects result rows (not the output
    /// location, thread count or checkpoint size).
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.threads = 1;
        c.checkpoint = 1;
        Ok(content_hash(serde_json::to_string(&c)?.as_bytes()))
    }

    /// `output_dir`, placed under `CERTATTACK_OUT` when that is set and the
    /// directory is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os("CERTATTACK_OUT") {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

mod defaults {
    use std::path::PathBuf;

    pub fn hidden() -> Vec<usize> {
        vec![64, 64]
    }
    pub fn epochs() -> usize {
        10
    }
    pub fn lr() -> f64 {
        0.05
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn attack_samples() -> usize {
        100
    }
    pub fn judge_samples() -> usize {
        1000
    }
    pub fn alpha() -> f64 {
        0.005
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn one_usize() -> usize {
        1
    }
    pub fn ibp_tol() -> f64 {
        1e-4
    }
    pub fn caa_iters() -> usize {
        100
    }
    pub fn max_confirm() -> usize {
        5
    }
    pub fn pgd_iters() -> usize {
        100
    }
    pub fn cw_steps() -> usize {
        200
    }
    pub fn cw_lr() -> f64 {
        0.01
    }
    pub fn deepfool_iters() -> usize {
        50
    }
    pub fn overshoot() -> f64 {
        1.02
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("runs")
    }
    pub fn checkpoint() -> usize {
        16
    }
}
