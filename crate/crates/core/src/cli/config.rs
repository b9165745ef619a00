use crate::corpus::Manifest;
use crate::error::{Error, Result};
use crate::numerics::AdamConfig;
use crate::pretraining::{preset, DesignSpec, MaskingPolicy, ObjectiveWeights, Schedule, TrainOptions};
use crate::two_stream::ModelConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable that overrides `training.seed`.
pub const SEED_ENV: &str = "DEVLBERT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DictionaryConfig {
    pub min_count: usize,
    pub refresh_every: Option<u64>,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        Self {
            min_count: 2,
            refresh_every: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub negative_rate: f64,
    pub adam: AdamConfig,
    pub options: TrainOptions,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            seed: 0,
            negative_rate: 0.5,
            adam: AdamConfig::default(),
            options: TrainOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Corpus directory written by `synth`.
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            checkpoint: PathBuf::from("run/model.ckpt"),
            metrics: PathBuf::from("run/metrics.jsonl"),
        }
    }
}

/// Everything `pretrain` needs. `vocab_size`, `num_classes` and `feat_dim`
/// of the model are taken from the corpus manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub masking: MaskingPolicy,
    pub objectives: ObjectiveWeights,
    pub designs: Vec<DesignSpec>,
    pub dictionaries: DictionaryConfig,
    pub training: TrainingConfig,
    pub paths: Paths,
    /// Preset the designs came from, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
}

impl RunConfig {
    /// Reads a config; relative paths resolve against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.paths.corpus, &mut cfg.paths.checkpoint, &mut cfg.paths.metrics] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.apply_env()?;
        Ok(cfg)
    }

    fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.training.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::validation(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Replaces the designs and noun-only flag with those of `name`.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let p = preset(name)?;
        self.designs = p.designs;
        self.masking.noun_only = p.noun_only;
        self.preset = Some(p.name);
        Ok(())
    }

    /// Command-line flags win over the file.
    pub fn apply_overrides(
        &mut self,
        preset: Option<&str>,
        steps: Option<u64>,
        seed: Option<u64>,
        checkpoint: Option<PathBuf>,
        metrics: Option<PathBuf>,
    ) -> Result<()> {
        if let Some(p) = preset {
            self.apply_preset(p)?;
        }
        if let Some(s) = steps {
            self.training.steps = s;
        }
        if let Some(s) = seed {
            self.training.seed = s;
        }
        if let Some(c) = checkpoint {
            self.paths.checkpoint = c;
        }
        if let Some(m) = metrics {
            self.paths.metrics = m;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            steps: self.training.steps,
            batch_size: self.training.batch_size,
            negative_rate: self.training.negative_rate,
            min_count: self.dictionaries.min_count,
            refresh_every: self.dictionaries.refresh_every,
        }
    }

    /// The model config with corpus-determined sizes filled in.
    pub fn model_for(&self, manifest: &Manifest) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        m.vocab_size = manifest.vocab.len();
        m.num_classes = manifest.object_classes.len();
        m.feat_dim = manifest.feature_dim;
        m.validate()?;
        Ok(m)
    }

    pub(crate) fn checkpoint_meta(&self, manifest: &Manifest) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "run": self,
            "model": self.model_for(manifest)?,
            "vocab": manifest.vocab,
            "object_classes": manifest.object_classes,
        }))
    }
}
