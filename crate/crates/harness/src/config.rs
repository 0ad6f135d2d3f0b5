//! Experiment configuration: a TOML document whose every key has a desk-scale
//! default. Unknown keys are rejected.

use std::path::Path;

use opsd_core::context::ContextKind;
use opsd_core::distill::DistillConfig;
use opsd_core::env::TaskKind;
use opsd_core::model::ModelSize;
use opsd_core::trainer::{CorpusConfig, PretrainConfig, TrainConfig};
use opsd_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub model: ModelSection,
    pub env: EnvSection,
    pub pretrain: PretrainSection,
    pub distill: DistillSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub screen: ScreenSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1, 2, 3],
            model: ModelSection::default(),
            env: EnvSection::default(),
            pretrain: PretrainSection::default(),
            distill: DistillSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            screen: ScreenSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub size: ModelSize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            size: ModelSize::S,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_val: usize,
    pub data_seed: u64,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            kind: TaskKind::StringTransform,
            n_train: 512,
            n_val: 64,
            data_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub n_transcripts: usize,
    pub context_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Second phase on context-only transcripts; 0 epochs skips it.
    pub context_phase_transcripts: usize,
    pub context_phase_epochs: usize,
    pub context_phase_learning_rate: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        PretrainSection {
            n_transcripts: 20_000,
            context_fraction: 0.25,
            epochs: p.epochs,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            warmup_steps: p.warmup_steps,
            weight_decay: p.weight_decay,
            seed: p.seed,
            context_phase_transcripts: 8_000,
            context_phase_epochs: 2,
            context_phase_learning_rate: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub ema_rate: f64,
    pub top_k: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            ema_rate: d.ema_rate,
            top_k: d.top_k,
            learning_rate: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            weight_decay: d.weight_decay,
            grad_clip_norm: d.grad_clip_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub prompts_per_step: usize,
    pub rollouts_per_prompt: usize,
    pub max_new_tokens: usize,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 50,
            prompts_per_step: 8,
            rollouts_per_prompt: 4,
            max_new_tokens: 16,
            eval_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Student rollouts per validation task when measuring the gap.
    pub gap_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { gap_samples: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScreenSection {
    pub contexts: Vec<ContextKind>,
}

impl Default for ScreenSection {
    fn default() -> Self {
        ScreenSection {
            contexts: ContextKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub sizes: Vec<ModelSize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            sizes: vec![ModelSize::XS, ModelSize::S, ModelSize::M],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Contract("config lists no seeds".into()));
        }
        if self.eval.gap_samples == 0 {
            return Err(Error::Contract("eval.gap_samples must be positive".into()));
        }
        for size in std::iter::once(self.model.size).chain(self.sweep.sizes.iter().copied()) {
            self.train_config(size, ContextKind::None, self.seeds[0]).validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn distill_config(&self) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            ema_rate: d.ema_rate,
            top_k: d.top_k,
            learning_rate: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            weight_decay: d.weight_decay,
            grad_clip_norm: d.grad_clip_norm,
        }
    }

    pub fn train_config(&self, size: ModelSize, context: ContextKind, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            model: size.config(),
            distill: self.distill_config(),
            context,
            steps: t.steps,
            prompts_per_step: t.prompts_per_step,
            rollouts_per_prompt: t.rollouts_per_prompt,
            max_new_tokens: t.max_new_tokens,
            eval_every: t.eval_every,
            seed,
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            n_transcripts: self.pretrain.n_transcripts,
            context_fraction: self.pretrain.context_fraction,
            kinds: vec![self.env.kind],
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            warmup_steps: p.warmup_steps,
            weight_decay: p.weight_decay,
            seed: p.seed,
        }
    }

    /// The context-only phase, if enabled.
    pub fn context_phase(&self) -> Option<(CorpusConfig, PretrainConfig)> {
        let p = &self.pretrain;
        if p.context_phase_epochs == 0 {
            return None;
        }
        let corpus = CorpusConfig {
            n_transcripts: p.context_phase_transcripts,
            context_fraction: 1.0,
            kinds: vec![self.env.kind],
        };
        let train = PretrainConfig {
            epochs: p.context_phase_epochs,
            learning_rate: p.context_phase_learning_rate,
            ..self.pretrain_config()
        };
        Some((corpus, train))
    }
}

pub fn hash_json(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
