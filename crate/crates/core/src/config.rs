//! Run configuration files.
//!
//! A run is described by a small TOML file with one section per concern.
//! Every key is optional and falls back to the desk-scale default; unknown
//! keys are rejected so typos do not silently fall back.
//!
//! ```toml
//! seed = 1
//!
//! [model]
//! d_model = 64
//! max_len = 512
//!
//! [csp]
//! steps = 300
//! window_size = 5
//! queue_size = 128
//!
//! [adversarial]
//! steps = 300
//! mu = 0.01
//! alpha = 1.0
//! beta = 1.0
//!
//! [train]
//! batch_size = 24
//! lr = 0.001
//!
//! [ablation]
//! enable_dal = false
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloneloss::LossWeights;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::AdamWConfig;
use crate::trainer::{AblationFlags, CspConfig, ScheduleConfig, DESK_LR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Keep only this many of the most frequent tokens.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_vocab: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            d_model: e.d_model,
            n_layers: e.n_layers,
            n_heads: e.n_heads,
            d_ff: e.d_ff,
            max_len: e.max_len,
            max_vocab: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CspSection {
    pub steps: u64,
    pub window_size: usize,
    pub queue_size: usize,
    pub tau: f64,
    pub negatives: usize,
    pub warmup_min: usize,
    pub refresh_queue: bool,
    pub detach_positive: bool,
}

impl Default for CspSection {
    fn default() -> Self {
        let c = CspConfig::default();
        Self {
            steps: 300,
            window_size: c.window_size,
            queue_size: c.queue_size,
            tau: c.tau,
            negatives: c.negatives,
            warmup_min: c.warmup_min,
            refresh_queue: c.refresh_queue,
            detach_positive: c.detach_positive,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialSection {
    pub steps: u64,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau_cl: f64,
    pub source_language: String,
    pub target_language: String,
    /// Source to target programs in the domain batch.
    pub ratio: (usize, usize),
}

impl Default for AdversarialSection {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        let w = LossWeights::default();
        Self {
            steps: s.adversarial_steps,
            mu: s.mu,
            alpha: w.alpha,
            beta: w.beta,
            tau_cl: w.tau_cl,
            source_language: s.source_language,
            target_language: s.target_language,
            ratio: s.ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub log_every: u64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let o = AdamWConfig::default();
        Self {
            batch_size: 24,
            lr: DESK_LR,
            weight_decay: o.weight_decay,
            clip_norm: o.clip_norm.unwrap_or(0.0),
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub enable_csp: bool,
    pub enable_dal: bool,
    pub enable_cycle: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        let f = AblationFlags::FULL;
        Self {
            enable_csp: f.enable_csp,
            enable_dal: f.enable_dal,
            enable_cycle: f.enable_cycle,
        }
    }
}

/// Everything needed to reproduce a training run besides the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub csp: CspSection,
    pub adversarial: AdversarialSection,
    pub train: TrainSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelSection::default(),
            csp: CspSection::default(),
            adversarial: AdversarialSection::default(),
            train: TrainSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.max_vocab.is_some_and(|v| v < 4) {
            return Err(Error::Config("max_vocab must cover the 4 special tokens".into()));
        }
        // the real vocabulary size is only known once the corpus is read
        EncoderConfig {
            vocab_size: 4,
            ..self.encoder()
        }
        .validate()?;
        self.schedule().validate()
    }

    /// Encoder settings; the vocabulary size is filled in when the
    /// vocabulary is built.
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            max_len: self.model.max_len,
            seed: self.seed,
            vocab_size: 0,
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            csp_steps: self.csp.steps,
            adversarial_steps: self.adversarial.steps,
            batch_size: self.train.batch_size,
            optimizer: AdamWConfig {
                lr: self.train.lr,
                weight_decay: self.train.weight_decay,
                clip_norm: (self.train.clip_norm > 0.0).then_some(self.train.clip_norm),
                ..AdamWConfig::default()
            },
            weights: LossWeights {
                alpha: self.adversarial.alpha,
                beta: self.adversarial.beta,
                tau_cl: self.adversarial.tau_cl,
            },
            flags: AblationFlags {
                enable_csp: self.ablation.enable_csp,
                enable_dal: self.ablation.enable_dal,
                enable_cycle: self.ablation.enable_cycle,
            },
            csp: CspConfig {
                window_size: self.csp.window_size,
                queue_size: self.csp.queue_size,
                tau: self.csp.tau,
                negatives: self.csp.negatives,
                warmup_min: self.csp.warmup_min,
                refresh_queue: self.csp.refresh_queue,
                detach_positive: self.csp.detach_positive,
            },
            mu: self.adversarial.mu,
            source_language: self.adversarial.source_language.clone(),
            target_language: self.adversarial.target_language.clone(),
            ratio: self.adversarial.ratio,
            log_every: self.train.log_every,
            checkpoint_every: self.train.checkpoint_every,
        }
    }
}
