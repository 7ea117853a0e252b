//! Experiment configuration. Every field has a default, so a config file
//! only lists what it changes; the fully resolved spec is written next to
//! each report.

use std::path::{Path, PathBuf};

use randdisc::attack::Transform;
use randdisc::classifier::{LossKind, TrainConfig};
use randdisc::transforms::{DownsampleConfig, TransformConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseName {
    /// The undefended base classifier.
    Identity,
    Gaussian,
    RandDisc,
    RandMix,
    BitDepth,
    Tvm,
    ResizePadding,
    /// RandDisc on a max-pooled image, pooling chosen per ε.
    DownsampledRandDisc,
}

impl DefenseName {
    pub fn as_str(self) -> &'static str {
        match self {
            DefenseName::Identity => "identity",
            DefenseName::Gaussian => "gaussian",
            DefenseName::RandDisc => "rand_disc",
            DefenseName::RandMix => "rand_mix",
            DefenseName::BitDepth => "bit_depth",
            DefenseName::Tvm => "tvm",
            DefenseName::ResizePadding => "resize_padding",
            DefenseName::DownsampledRandDisc => "downsampled_rand_disc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ALL_DEFENSES.into_iter().find(|d| d.as_str() == s)
    }

    pub fn certifiable(self) -> bool {
        matches!(
            self,
            DefenseName::Gaussian | DefenseName::RandDisc | DefenseName::DownsampledRandDisc
        )
    }
}

pub const ALL_DEFENSES: [DefenseName; 8] = [
    DefenseName::Identity,
    DefenseName::Gaussian,
    DefenseName::RandDisc,
    DefenseName::RandMix,
    DefenseName::BitDepth,
    DefenseName::Tvm,
    DefenseName::ResizePadding,
    DefenseName::DownsampledRandDisc,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Directory with the four standard MNIST IDX files.
    pub mnist_dir: PathBuf,
    /// Optional directory of `.pgm`/`.ppm` files evaluated instead of the
    /// MNIST test set, all labelled `pnm_label`.
    pub pnm_dir: Option<PathBuf>,
    pub pnm_label: usize,
    /// Number of evaluation images taken after shuffling the test set.
    pub subset: usize,
    pub subset_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            mnist_dir: PathBuf::from("data/mnist"),
            pnm_dir: None,
            pnm_label: 0,
            subset: 200,
            subset_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub checkpoint: PathBuf,
    /// Train on the MNIST training set and save the checkpoint when it
    /// does not exist yet.
    pub train_if_missing: bool,
    pub train: TrainConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("data/models/mnist-cnn.ckpt"),
            train_if_missing: true,
            train: TrainConfig::default(),
        }
    }
}

/// Settings of the non-randomized baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSpec {
    pub bits: u32,
    pub tvm_lambda: f64,
    pub tvm_iters: usize,
    pub resize_min: usize,
    pub resize_max: usize,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self {
            bits: 2,
            tvm_lambda: 0.2,
            tvm_iters: 20,
            resize_min: 28,
            resize_max: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    /// Budgets, ascending.
    pub epsilons: Vec<f64>,
    pub steps: usize,
    pub grad_copies: usize,
    /// Fixed step size; `2.5·ε/steps` when absent.
    pub eta: Option<f64>,
    pub loss: LossKind,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            epsilons: vec![0.03, 0.07, 0.1],
            steps: 40,
            grad_copies: 20,
            eta: None,
            loss: LossKind::CrossEntropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifySpec {
    pub enabled: bool,
    /// Votes for the margin estimate.
    pub votes: usize,
    pub center_draws: usize,
    pub assignment_draws: usize,
    /// Fixed pooling for the downsampled defense; the ε schedule when
    /// absent.
    pub downsample: Option<DownsampleConfig>,
}

impl Default for CertifySpec {
    fn default() -> Self {
        Self {
            enabled: false,
            votes: 100,
            center_draws: 50,
            assignment_draws: 10_000,
            downsample: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub id: String,
    pub seed: u64,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub defenses: Vec<DefenseName>,
    pub transform: TransformConfig,
    pub baselines: BaselineSpec,
    pub attack: AttackSpec,
    /// Majority votes when scoring a randomized defense.
    pub votes: usize,
    pub certify: CertifySpec,
    /// Report path; sidecar files are written next to it.
    pub output: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            id: "mnist".into(),
            seed: 0,
            data: DataSpec::default(),
            model: ModelSpec::default(),
            defenses: vec![
                DefenseName::Identity,
                DefenseName::Gaussian,
                DefenseName::RandDisc,
                DefenseName::RandMix,
            ],
            transform: TransformConfig::mnist(),
            baselines: BaselineSpec::default(),
            attack: AttackSpec::default(),
            votes: 100,
            certify: CertifySpec::default(),
            output: PathBuf::from("results/mnist.csv"),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Usage(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment specs always serialize")
    }

    /// Checks the invariants that do not need the file system.
    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(HarnessError::Usage(m));
        if self.defenses.is_empty() {
            return usage("no defenses selected".into());
        }
        let eps = &self.attack.epsilons;
        if eps.is_empty() {
            return usage("no budgets in attack.epsilons".into());
        }
        if eps.iter().any(|e| !(*e >= 0.0 && *e <= self.transform.t)) {
            return usage(format!("budgets must lie in [0, {}]", self.transform.t));
        }
        if eps.windows(2).any(|w| w[0] > w[1]) {
            return usage("attack.epsilons must be sorted ascending".into());
        }
        if self.votes == 0 || self.certify.votes == 0 {
            return usage("votes must be positive".into());
        }
        if self.data.subset == 0 {
            return usage("data.subset must be positive".into());
        }
        if self.attack.steps == 0 || self.attack.grad_copies == 0 {
            return usage("attack.steps and attack.grad_copies must be positive".into());
        }
        self.transform
            .validate()
            .map_err(|e| HarnessError::Usage(format!("transform: {e}")))?;
        Ok(())
    }

    /// Checks that every referenced input exists.
    pub fn check_files(&self) -> Result<()> {
        let missing = |p: &Path| {
            Err(HarnessError::Data(crate::data::DataError::Io {
                path: p.to_owned(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
            }))
        };
        let (img, lbl) = crate::data::mnist_paths(&self.data.mnist_dir, false);
        match &self.data.pnm_dir {
            Some(dir) if !dir.is_dir() => return missing(dir),
            Some(_) => {}
            None => {
                for p in [&img, &lbl] {
                    if !p.is_file() {
                        return missing(p);
                    }
                }
            }
        }
        if !self.model.checkpoint.is_file() {
            if !self.model.train_if_missing {
                return missing(&self.model.checkpoint);
            }
            let (ti, tl) = crate::data::mnist_paths(&self.data.mnist_dir, true);
            for p in [&ti, &tl] {
                if !p.is_file() {
                    return missing(p);
                }
            }
        }
        Ok(())
    }

    /// Pooling used by the downsampled defense at budget `epsilon`.
    pub fn downsample_for(&self, epsilon: f64) -> Result<DownsampleConfig> {
        match self.certify.downsample {
            Some(d) => Ok(d),
            None => DownsampleConfig::for_epsilon(epsilon)
                .ok_or_else(|| HarnessError::Usage(format!("no pooling schedule for ε = {epsilon}"))),
        }
    }

    /// The transform implementing `defense` at budget `epsilon`.
    pub fn transform_for(&self, defense: DefenseName, epsilon: f64) -> Result<Transform> {
        let config = self.transform;
        let b = &self.baselines;
        Ok(match defense {
            DefenseName::Identity => Transform::Identity,
            DefenseName::Gaussian => Transform::Gaussian { sigma: config.sigma },
            DefenseName::RandDisc => Transform::RandDisc { config },
            DefenseName::RandMix => Transform::RandMix { config },
            DefenseName::BitDepth => Transform::BitDepth { bits: b.bits },
            DefenseName::Tvm => Transform::Tvm {
                lambda: b.tvm_lambda,
                iters: b.tvm_iters,
            },
            DefenseName::ResizePadding => Transform::ResizePadding {
                min_size: b.resize_min,
                max_size: b.resize_max,
            },
            DefenseName::DownsampledRandDisc => Transform::DownsampledRandDisc {
                config,
                downsample: self.downsample_for(epsilon)?,
            },
        })
    }

    pub fn eta_for(&self, epsilon: f64) -> f64 {
        self.attack
            .eta
            .unwrap_or_else(|| randdisc::attack::AttackConfig::default_eta(epsilon, self.attack.steps))
    }
}
