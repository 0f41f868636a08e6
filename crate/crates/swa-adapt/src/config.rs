//! TOML harness configuration. Every section has workable defaults, so a
//! config file only needs the keys it overrides. See `docs/formats.md` for
//! the full key reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer_select::{resolve, LayerSchedule};
use crate::mask::{AttentionPolicy, Window};
use crate::model::{LoraTargets, ModelConfig};
use crate::tasks::TaskSpec;
use crate::train::{LossMask, Trainable};

/// `fa_layers` accepts an explicit index list or a schedule shorthand such as
/// `"every:2:1"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FaLayersSpec {
    List(Vec<usize>),
    Shorthand(String),
}

impl Default for FaLayersSpec {
    fn default() -> Self {
        FaLayersSpec::List(Vec::new())
    }
}

impl FaLayersSpec {
    pub fn schedule(&self) -> Result<LayerSchedule> {
        match self {
            FaLayersSpec::List(v) => Ok(LayerSchedule::Explicit(v.clone())),
            FaLayersSpec::Shorthand(s) => LayerSchedule::parse(s),
        }
    }
}

/// One attention policy as written in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    #[serde(default = "default_window")]
    pub window_size: Window,
    #[serde(default)]
    pub keep_first: usize,
    #[serde(default)]
    pub fa_layers: FaLayersSpec,
    #[serde(default)]
    pub fa_decode: bool,
}

fn default_window() -> Window {
    Window::Unbounded
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            window_size: Window::Unbounded,
            keep_first: 0,
            fa_layers: FaLayersSpec::default(),
            fa_decode: false,
        }
    }
}

impl PolicySpec {
    pub fn resolve(&self, num_layers: usize) -> Result<AttentionPolicy> {
        let fa_layers = resolve(&self.fa_layers.schedule()?, num_layers)?;
        let policy = AttentionPolicy {
            window: self.window_size,
            keep_first: self.keep_first,
            fa_layers,
            fa_decode: self.fa_decode,
        };
        policy.validate(num_layers)?;
        Ok(policy)
    }

    pub fn from_policy(policy: &AttentionPolicy) -> Self {
        Self {
            window_size: policy.window,
            keep_first: policy.keep_first,
            fa_layers: FaLayersSpec::List(policy.fa_layers.iter().copied().collect()),
            fa_decode: policy.fa_decode,
        }
    }
}

/// Teacher pretraining loop. Batches are drawn from a mixture of a short
/// context band (cheap steps, fast format learning) and the full task band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_frac: f64,
    /// Stop as soon as held-out accuracy reaches this level.
    pub target_accuracy: f64,
    pub eval_every: usize,
    pub eval_instances: usize,
    /// Probability that a batch uses the short band.
    pub short_fraction: f64,
    pub short_ctx_min: usize,
    pub short_ctx_max: usize,
    pub short_needles: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            learning_rate: 3e-3,
            warmup_frac: 0.03,
            target_accuracy: 0.98,
            eval_every: 50,
            eval_instances: 64,
            short_fraction: 0.5,
            short_ctx_min: 96,
            short_ctx_max: 256,
            short_needles: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub questions: usize,
    pub samples_per_question: usize,
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { questions: 400, samples_per_question: 4, temperature: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub trainable: Trainable,
    pub loss_mask: LossMask,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: LoraTargets,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            // Toy-scale adaptation of the low-rank recipe: rank and alpha
            // shrink with the model width, and the learning rate rises to
            // move a bigger relative step in the few steps available.
            learning_rate: 1e-3,
            warmup_frac: 0.03,
            epochs: 1,
            batch_size: 8,
            trainable: Trainable::LoraOnly,
            loss_mask: LossMask::AnswerOnly,
            lora_rank: 4,
            lora_alpha: 32.0,
            lora_targets: LoraTargets::AllLayers,
        }
    }
}

impl FinetuneConfig {
    pub fn train_config(&self, seed: u64) -> crate::train::TrainConfig {
        crate::train::TrainConfig {
            learning_rate: self.learning_rate,
            warmup_frac: self.warmup_frac,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            trainable: self.trainable,
            loss_mask: self.loss_mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub instances: usize,
    /// Extra free decode tokens before the forced answer delimiter.
    pub cot_budget: usize,
    /// Per-seed evaluation corpora are derived from this base seed.
    pub corpus_seed: u64,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { instances: 500, cot_budget: 0, corpus_seed: 9000, seeds: vec![1, 2, 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub n_list: Vec<usize>,
    pub output_budget: usize,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { n_list: vec![256, 512, 1024], output_budget: 16, repetitions: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GridConfig {
    pub policies: Vec<PolicySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct LazyRankConfig {
    pub n_last: usize,
    pub recent_window: usize,
    pub fa_fraction: f64,
    pub invert: bool,
    pub calibration_sequences: usize,
}

impl LazyRankConfig {
    pub fn desk_default() -> Self {
        Self {
            n_last: 8,
            recent_window: 64,
            fa_fraction: 0.5,
            invert: false,
            calibration_sequences: 16,
        }
    }
}

/// Top-level harness configuration, one section per concern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub model: ModelConfig,
    pub policy: PolicySpec,
    pub task: TaskSpec,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub lazy_rank: LazyRankConfig,
    pub grid: GridConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk_default(),
            policy: PolicySpec::default(),
            task: TaskSpec::retrieval_default(0),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            lazy_rank: LazyRankConfig::desk_default(),
            grid: GridConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: HarnessConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.policy.resolve(self.model.num_layers)?;
        for p in &self.grid.policies {
            p.resolve(self.model.num_layers)?;
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
