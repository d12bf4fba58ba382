//! JSON config schemas for the subcommands. Unknown fields are rejected
//! so typos fail loudly instead of silently using defaults.

use serde::{Deserialize, Serialize};
use simreg_core::regularizer::TargetKind;
use simreg_core::robustness::{BoundaryConfig, PgdGrid};
use simreg_core::similarity::DenoiserConfig;
use simreg_core::synth::{ClassSynthConfig, SynthConfig, TuningKind};
use simreg_core::trainer::TrainConfig;

fn default_scans() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDataConfig {
    pub out: String,
    #[serde(default = "default_scans")]
    pub scans: usize,
    #[serde(default)]
    pub neurons: Option<usize>,
    #[serde(default)]
    pub stimuli: Option<usize>,
    #[serde(default)]
    pub oracle: Option<usize>,
    #[serde(default)]
    pub repeats: Option<usize>,
    #[serde(default)]
    pub image_size: Option<usize>,
    #[serde(default)]
    pub tuning: Option<TuningKind>,
    #[serde(default)]
    pub noise_rel_range: Option<[f32; 2]>,
    #[serde(default)]
    pub scan_jitter: Option<f32>,
    #[serde(default)]
    pub seed: u64,
}

impl SynthDataConfig {
    pub fn to_synth(&self) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            neurons: self.neurons.unwrap_or(d.neurons),
            stimuli: self.stimuli.unwrap_or(d.stimuli),
            oracle: self.oracle.unwrap_or(d.oracle),
            repeats: self.repeats.unwrap_or(d.repeats),
            image_size: self.image_size.unwrap_or(d.image_size),
            tuning: self.tuning.unwrap_or(d.tuning),
            noise_rel_range: self.noise_rel_range.unwrap_or(d.noise_rel_range),
            scan_jitter: self.scan_jitter.unwrap_or(d.scan_jitter),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTaskConfig {
    pub out: String,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub per_class_train: Option<usize>,
    #[serde(default)]
    pub per_class_test: Option<usize>,
    #[serde(default)]
    pub image_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl SynthTaskConfig {
    pub fn to_class_synth(&self) -> ClassSynthConfig {
        let d = ClassSynthConfig::default();
        ClassSynthConfig {
            classes: self.classes.unwrap_or(d.classes),
            per_class_train: self.per_class_train.unwrap_or(d.per_class_train),
            per_class_test: self.per_class_test.unwrap_or(d.per_class_test),
            image_size: self.image_size.unwrap_or(d.image_size),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDenoiserConfig {
    /// Response manifest path.
    pub data: String,
    pub out: String,
    #[serde(default)]
    pub denoiser: Option<DenoiserJson>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserJson {
    #[serde(default)]
    pub channels: Option<usize>,
    #[serde(default)]
    pub skip: Option<bool>,
    #[serde(default)]
    pub softplus_head: Option<bool>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f32>,
    #[serde(default)]
    pub momentum: Option<f32>,
}

impl DenoiserJson {
    pub fn to_config(&self, seed: u64) -> DenoiserConfig {
        let d = DenoiserConfig::default();
        DenoiserConfig {
            channels: self.channels.unwrap_or(d.channels),
            skip: self.skip.unwrap_or(d.skip),
            softplus_head: self.softplus_head.unwrap_or(d.softplus_head),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            momentum: self.momentum.unwrap_or(d.momentum),
            seed,
            corr_eps: d.corr_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilaritySource {
    /// Denoiser predictions (requires `denoisers`).
    Model,
    /// Raw single-trial responses.
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StimulusInclude {
    All,
    NonOracle,
    Oracle,
}

fn default_include() -> StimulusInclude {
    StimulusInclude::NonOracle
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildSimilarityConfig {
    pub data: String,
    pub out: String,
    pub source: SimilaritySource,
    /// Checkpoint directory produced by fit-denoiser (model source).
    #[serde(default)]
    pub denoisers: Option<String>,
    /// Which stimuli enter the matrix.
    #[serde(default = "default_include")]
    pub include: StimulusInclude,
    /// Control transform applied after scan averaging.
    #[serde(default)]
    pub control: Option<ControlJson>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlJson {
    pub kind: TargetKind,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    /// Classification dataset manifest.
    pub task: String,
    pub out: String,
    /// Response manifest providing the stimulus images (pair pathway).
    #[serde(default)]
    pub data: Option<String>,
    /// Similarity index JSON (pair pathway target).
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub train: Option<TrainJson>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJson {
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub base_lr: Option<f32>,
    #[serde(default)]
    pub momentum: Option<f32>,
    #[serde(default)]
    pub alpha: Option<f32>,
    #[serde(default)]
    pub target_kind: Option<TargetKind>,
    #[serde(default)]
    pub clamp_eps: Option<f32>,
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
}

impl TrainJson {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            base_lr: self.base_lr.unwrap_or(d.base_lr),
            momentum: self.momentum.unwrap_or(d.momentum),
            seed,
            alpha: self.alpha.unwrap_or(d.alpha),
            target_kind: self.target_kind.unwrap_or(d.target_kind),
            clamp_eps: self.clamp_eps.unwrap_or(d.clamp_eps),
            widths: self.widths.clone().unwrap_or(d.widths),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalNoiseConfig {
    pub checkpoint: String,
    pub task: String,
    pub out: String,
    #[serde(default = "default_sigmas")]
    pub sigmas: Vec<f32>,
    #[serde(default = "default_noise_seeds")]
    pub noise_seeds: Vec<u64>,
}

fn default_sigmas() -> Vec<f32> {
    vec![0.0, 0.1, 0.2, 0.3, 0.5, 0.8]
}

fn default_noise_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalAdversarialConfig {
    pub checkpoint: String,
    pub task: String,
    pub out: String,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub pgd: Option<PgdJson>,
    #[serde(default)]
    pub boundary: Option<BoundaryJson>,
}

fn default_samples() -> usize {
    200
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdJson {
    #[serde(default)]
    pub step_sizes: Option<Vec<f32>>,
    #[serde(default)]
    pub iterations: Option<Vec<usize>>,
    #[serde(default)]
    pub repeats: Option<usize>,
    /// Use the published full grid instead of the desk grid.
    #[serde(default)]
    pub paper_grid: bool,
}

impl PgdJson {
    pub fn to_grid(&self) -> PgdGrid {
        let base = if self.paper_grid { PgdGrid::paper() } else { PgdGrid::desk() };
        PgdGrid {
            step_sizes: self.step_sizes.clone().unwrap_or(base.step_sizes),
            iterations: self.iterations.clone().unwrap_or(base.iterations),
            repeats: self.repeats.unwrap_or(base.repeats),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryJson {
    #[serde(default)]
    pub step_sizes: Option<Vec<f32>>,
    #[serde(default)]
    pub queries: Option<usize>,
    #[serde(default)]
    pub paper_grid: bool,
}

impl BoundaryJson {
    pub fn to_config(&self) -> BoundaryConfig {
        let base = if self.paper_grid { BoundaryConfig::paper() } else { BoundaryConfig::desk() };
        BoundaryConfig {
            step_sizes: self.step_sizes.clone().unwrap_or(base.step_sizes),
            queries: self.queries.unwrap_or(base.queries),
            line_search_steps: base.line_search_steps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub out: String,
    pub runs: Vec<ReportRun>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRun {
    pub label: String,
    #[serde(default)]
    pub train_log: Option<String>,
    #[serde(default)]
    pub noise_curve: Option<String>,
    #[serde(default)]
    pub robustness_summary: Option<String>,
}
