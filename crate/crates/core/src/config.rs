//! Run configuration: one TOML file, overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SynthDatasetSpec, SynthParams};
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::ModelConfig;
use crate::pretrain::{Objective, PretrainConfig};

/// Which self-supervised objective, if any, runs before fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveChoice {
    #[default]
    None,
    OptSimMim,
    OptTranslator,
}

impl ObjectiveChoice {
    pub fn objective(self) -> Option<Objective> {
        match self {
            ObjectiveChoice::None => None,
            ObjectiveChoice::OptSimMim => Some(Objective::OptSimMim),
            ObjectiveChoice::OptTranslator => Some(Objective::OptTranslator),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ObjectiveChoice::None),
            "optsimmim" => Ok(ObjectiveChoice::OptSimMim),
            "opttranslator" => Ok(ObjectiveChoice::OptTranslator),
            other => Err(Error::Config(format!("unknown objective {other:?} (none, optsimmim, opttranslator)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Unlabelled series with optical targets (pretraining).
    pub pretrain_data: Option<PathBuf>,
    /// Labelled scenes (fine-tuning).
    pub finetune_data: Option<PathBuf>,
    /// Externally supplied weights loaded before any training.
    pub init_weights: Option<PathBuf>,
    /// Pretraining checkpoint used to start fine-tuning; defaults to
    /// `<out>/pretrain/best.ckpt`.
    pub pretrained: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub glaciers: usize,
    pub scenes_per_glacier: usize,
    pub size: usize,
    pub resolution: f64,
    pub labels: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { glaciers: 14, scenes_per_glacier: 10, size: 128, resolution: 30.0, labels: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Checkpoints of the ensemble members.
    pub members: Vec<PathBuf>,
    pub tta: bool,
    pub overlap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// 1: scratch. 2: external weights only. 3: pretraining only. 4: both.
    pub setup: u8,
    pub objective: ObjectiveChoice,
    pub seed: u64,
    /// Worker threads; 0 uses all cores. Never changes results.
    pub threads: usize,
    pub paths: Paths,
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub ensemble: EnsembleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            setup: 1,
            objective: ObjectiveChoice::None,
            seed: 0,
            threads: 0,
            paths: Paths { out: PathBuf::from("runs/default"), ..Default::default() },
            model: ModelConfig::default(),
            synth: SynthConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            ensemble: EnsembleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks the setup table and every section.
    pub fn validate(&self) -> Result<()> {
        let init = self.paths.init_weights.is_some();
        let ssl = self.objective != ObjectiveChoice::None;
        let (want_init, want_ssl) = match self.setup {
            1 => (false, false),
            2 => (true, false),
            3 => (false, true),
            4 => (true, true),
            s => return Err(Error::Config(format!("setup must be 1, 2, 3 or 4, got {s}"))),
        };
        if want_ssl != ssl {
            return Err(Error::Config(if want_ssl {
                format!("setup {} needs an objective (optsimmim or opttranslator)", self.setup)
            } else {
                format!("setup {} has no pretraining stage; objective must be none", self.setup)
            }));
        }
        if want_init && !init {
            return Err(Error::Config(format!("setup {} needs paths.init_weights", self.setup)));
        }
        if !want_init && init {
            return Err(Error::Config(format!("setup {} does not load external weights; remove paths.init_weights", self.setup)));
        }
        self.model.validate()?;
        if ssl {
            self.pretrain.validate(self.model.input_size)?;
        }
        self.finetune.validate()?;
        if self.synth.glaciers == 0 || self.synth.scenes_per_glacier == 0 || self.synth.resolution <= 0.0 {
            return Err(Error::Config(format!("invalid synth settings {:?}", self.synth)));
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthDatasetSpec {
        SynthDatasetSpec {
            glaciers: self.synth.glaciers,
            scenes_per_glacier: self.synth.scenes_per_glacier,
            seed: self.seed,
            template: SynthParams { size: self.synth.size, resolution: self.synth.resolution, ..Default::default() },
            labels: self.synth.labels,
        }
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.paths.pretrained.clone().unwrap_or_else(|| self.paths.out.join("pretrain").join("best.ckpt"))
    }
}
