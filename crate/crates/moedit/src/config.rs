//! The run configuration: every tunable from every subsystem in one
//! declarative TOML file. Unknown keys are rejected; `moedit config
//! dump` prints the fully resolved values, and each command stores the
//! resolved config beside its outputs.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use moedit_core::adaptor::{AdaptorConfig, RouterMode};
use moedit_core::backbone::{BackboneConfig, PretrainSpec};
use moedit_core::dataset::CorpusConfig;
use moedit_core::editing::TrainSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base directory for all inputs and outputs. Overridden by
    /// MOEDIT_OUT_DIR or --out.
    pub out_dir: String,
    pub corpus: CorpusConfig,
    pub backbone: BackboneSection,
    pub pretrain: PretrainSection,
    pub adaptor: AdaptorSection,
    pub edit: EditSection,
    pub study: StudySection,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            out_dir: "runs".into(),
            corpus: CorpusConfig::default(),
            backbone: BackboneSection::default(),
            pretrain: PretrainSection::default(),
            adaptor: AdaptorSection::default(),
            edit: EditSection::default(),
            study: StudySection::default(),
        }
    }
}

/// Backbone architecture; the vocabulary size comes from the generated
/// corpus rather than the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub host_layer: usize,
}

impl Default for BackboneSection {
    fn default() -> BackboneSection {
        BackboneSection {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            host_layer: 2,
        }
    }
}

impl BackboneSection {
    pub fn to_core(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            max_seq_len: self.max_seq_len,
            host_layer: self.host_layer,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Held-in fact exact-match the pretrained backbone must reach.
    pub target_exact_match: f64,
}

impl Default for PretrainSection {
    fn default() -> PretrainSection {
        PretrainSection {
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            seed: 42,
            target_exact_match: 0.95,
        }
    }
}

impl PretrainSection {
    pub fn to_core(&self) -> PretrainSpec {
        PretrainSpec {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptorSection {
    pub d_expert: usize,
    pub d_proj: usize,
    pub lambda: f64,
    pub top_k: usize,
    pub router_mode: RouterMode,
    pub score_temperature: f64,
    pub renormalize_gate: bool,
    pub n_fixed_experts: usize,
    pub aux_balance_coeff: f64,
    pub expert_init_sigma: f64,
    pub key_noise_sigma: f64,
    pub seed: u64,
}

impl Default for AdaptorSection {
    fn default() -> AdaptorSection {
        let c = AdaptorConfig::for_d_model(BackboneSection::default().d_model);
        AdaptorSection {
            d_expert: c.d_expert,
            d_proj: c.d_proj,
            lambda: c.lambda,
            top_k: c.top_k,
            router_mode: c.router_mode,
            score_temperature: c.score_temperature,
            renormalize_gate: c.renormalize_gate,
            n_fixed_experts: c.n_fixed_experts,
            aux_balance_coeff: c.aux_balance_coeff,
            expert_init_sigma: c.expert_init_sigma,
            key_noise_sigma: c.key_noise_sigma,
            seed: 7,
        }
    }
}

impl AdaptorSection {
    pub fn to_core(&self) -> AdaptorConfig {
        AdaptorConfig {
            d_expert: self.d_expert,
            d_proj: self.d_proj,
            lambda: self.lambda,
            top_k: self.top_k,
            router_mode: self.router_mode,
            score_temperature: self.score_temperature,
            renormalize_gate: self.renormalize_gate,
            n_fixed_experts: self.n_fixed_experts,
            aux_balance_coeff: self.aux_balance_coeff,
            expert_init_sigma: self.expert_init_sigma,
            key_noise_sigma: self.key_noise_sigma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditSection {
    pub lr: f64,
    pub max_steps_per_batch: usize,
    pub early_stop_interval: usize,
    pub proj_lr_scale: f64,
    pub key_lr_scale: f64,
    /// Sequence length (number of batches) for lifelong runs.
    pub n_batches: usize,
    /// Records per batch; n_batches * batch_size must cover the corpus.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EditSection {
    fn default() -> EditSection {
        let spec = TrainSpec::default();
        EditSection {
            lr: spec.lr,
            max_steps_per_batch: spec.max_steps_per_batch,
            early_stop_interval: spec.early_stop_interval,
            proj_lr_scale: spec.proj_lr_scale,
            key_lr_scale: spec.key_lr_scale,
            n_batches: 10,
            batch_size: 10,
            seed: spec.seed,
        }
    }
}

impl EditSection {
    pub fn to_core(&self) -> TrainSpec {
        TrainSpec {
            lr: self.lr,
            max_steps_per_batch: self.max_steps_per_batch,
            early_stop_interval: self.early_stop_interval,
            proj_lr_scale: self.proj_lr_scale,
            key_lr_scale: self.key_lr_scale,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    pub trials: usize,
    pub base_seed: u64,
    /// Worker threads for independent study trials.
    pub parallel: usize,
}

impl Default for StudySection {
    fn default() -> StudySection {
        StudySection {
            trials: 10,
            base_seed: 100,
            parallel: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.corpus
            .validate()
            .map_err(|e| anyhow::anyhow!("corpus: {e}"))?;
        // vocab size unknown until generation; validate with a dummy
        self.backbone
            .to_core(4)
            .validate()
            .map_err(|e| anyhow::anyhow!("backbone: {e}"))?;
        if self.edit.n_batches == 0 || self.edit.batch_size == 0 {
            anyhow::bail!("edit: n_batches and batch_size must be >= 1");
        }
        if self.edit.n_batches * self.edit.batch_size != self.corpus.n_edit_records {
            anyhow::bail!(
                "edit: n_batches * batch_size = {} does not cover the {} edit records",
                self.edit.n_batches * self.edit.batch_size,
                self.corpus.n_edit_records
            );
        }
        if self.study.trials < 2 {
            anyhow::bail!("study: trials must be >= 2");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
