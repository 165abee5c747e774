//! Run configuration file: a single JSON document driving every
//! subcommand. Unknown keys are rejected everywhere.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mustgan_core::error::{Error, Result};
use mustgan_core::nn::GeneratorSpec;
use mustgan_core::phantom::{PhantomSpec, SplitCounts};
use mustgan_core::roles::RoleAssignment;
use mustgan_core::sweep::SweepGrid;
use mustgan_core::train::TrainConfig;

fn default_pgm() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub spec: PhantomSpec,
    pub split: SplitCounts,
    /// Also write PGM siblings for human inspection.
    #[serde(default = "default_pgm")]
    pub pgm: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub generator: GeneratorSpec,
    /// Source contrasts in stream order.
    pub sources: Vec<String>,
    /// Target contrast; must be the dataset's generation target (the
    /// last listed contrast).
    pub target: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSection {
    pub fusion_i: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub workdir: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train_streams: TrainConfig,
    pub train_joint: JointSection,
    pub sweep: SweepGrid,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn k(&self) -> usize {
        self.model.sources.len()
    }

    pub fn roles(&self) -> RoleAssignment {
        RoleAssignment {
            sources: self.model.sources.clone(),
            target: self.model.target.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.spec.validate()?;
        self.roles().validate(&self.data.spec)?;
        if self.model.target != self.data.spec.target_contrast() {
            return Err(Error::Config(format!(
                "model.target '{}' must be the dataset's generation target '{}' \
                 (the last contrast in data.spec.contrasts); reorder the contrast \
                 list to change the synthesis direction",
                self.model.target,
                self.data.spec.target_contrast()
            )));
        }
        if self.k() + 1 != self.data.spec.contrasts.len() {
            return Err(Error::Config(format!(
                "model.sources lists {} contrasts but the dataset provides {} sources",
                self.k(),
                self.data.spec.contrasts.len() - 1
            )));
        }
        let mut spec = self.model.generator;
        spec.in_channels = 1;
        spec.out_channels = 1;
        spec.validate()?;
        let total = self.data.split.train + self.data.split.val + self.data.split.test;
        if total > self.data.spec.n_subjects {
            return Err(Error::Config(format!(
                "data.split: counts sum to {total} but data.spec.n_subjects is {}",
                self.data.spec.n_subjects
            )));
        }
        self.train_streams.validate()?;
        self.train_joint.train.validate()?;
        let l = spec.total_layers();
        if self.train_joint.fusion_i < 1 || self.train_joint.fusion_i >= l {
            return Err(Error::Config(format!(
                "train_joint.fusion_i {} out of range 1..={}",
                self.train_joint.fusion_i,
                l - 1
            )));
        }
        self.sweep.validate(l)?;
        if self.data.spec.image_size % spec.downsample_factor() != 0 {
            return Err(Error::Config(format!(
                "data.spec.image_size {} must be a multiple of the generator's downsampling factor {}",
                self.data.spec.image_size,
                spec.downsample_factor()
            )));
        }
        Ok(())
    }

    /// Stream-phase config with the global seed applied.
    pub fn streams_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train_streams
        }
    }

    /// Joint-phase config with the global seed applied.
    pub fn joint_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train_joint.train
        }
    }

    /// Pretty-printed echo for provenance manifests.
    pub fn echo_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
