//! Run configuration: one TOML document with `[data]`, `[model]` and
//! `[train]` tables. Every key except the root `seed` and `data.clips` has a
//! default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cstt::{ClusterScope, Fusion, Variant};
use crate::error::{Error, Result};
use crate::heads::Pooling;
use crate::synth::{GeneratorConfig, TaskFamily};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMode {
    /// Stateless k-means++ seeding plus Lloyd iterations on every pass.
    Lloyd,
    /// Persistent centroids updated once per optimizer step.
    Minibatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frames: usize,
    pub individuals: usize,
    pub input_dim: usize,
    pub group_classes: usize,
    pub action_classes: usize,
    pub scene_channels: usize,
    pub scene_size: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub blocks: usize,
    pub clusters: usize,
    pub cluster_mode: ClusterMode,
    pub cluster_scope: ClusterScope,
    /// Also cluster the temporal encoder's self-attention.
    pub cluster_temporal: bool,
    pub kmeans_iters: usize,
    pub intra: bool,
    pub inter: bool,
    pub grg: bool,
    pub scene_tokens: usize,
    pub fusion: Fusion,
    pub variant: Variant,
    pub decoder_self_attention: bool,
    pub dropout: f64,
    pub group_pooling: Pooling,
    pub individual_pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 7,
            individuals: 8,
            input_dim: 8,
            group_classes: 8,
            action_classes: 6,
            scene_channels: 8,
            scene_size: 4,
            width: 32,
            heads: 4,
            ff_mult: 4,
            blocks: 3,
            clusters: 4,
            cluster_mode: ClusterMode::Lloyd,
            cluster_scope: ClusterScope::Frame,
            cluster_temporal: false,
            kmeans_iters: 5,
            intra: true,
            inter: true,
            grg: true,
            scene_tokens: 8,
            fusion: Fusion::Sum,
            variant: Variant::Ours,
            decoder_self_attention: false,
            dropout: 0.1,
            group_pooling: Pooling::Mean,
            individual_pooling: Pooling::Mean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("individuals", self.individuals),
            ("input_dim", self.input_dim),
            ("scene_channels", self.scene_channels),
            ("scene_size", self.scene_size),
            ("width", self.width),
            ("heads", self.heads),
            ("ff_mult", self.ff_mult),
            ("clusters", self.clusters),
            ("scene_tokens", self.scene_tokens),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{k} must be >= 1")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.width {} is not divisible by model.heads {}",
                self.width, self.heads
            )));
        }
        if self.group_classes < 2 || self.action_classes < 2 {
            return Err(Error::Config("class counts must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Whether any encoder runs clustered attention.
    pub fn clustering_active(&self) -> bool {
        self.clusters > 1 && (self.intra || self.inter)
    }

    /// The fields that determine parameter shapes; a checkpoint can only be
    /// loaded into a model whose architecture key matches.
    pub fn architecture_key(&self) -> String {
        format!(
            "T={} N={} Din={} G={} A={} Cg={} S={} D={} heads={} ff={} blocks={} clusters={} intra={} inter={} ctemp={} grg={} K={} fusion={:?} variant={} dself={}",
            self.frames,
            self.individuals,
            self.input_dim,
            self.group_classes,
            self.action_classes,
            self.scene_channels,
            self.scene_size,
            self.width,
            self.heads,
            self.ff_mult,
            self.blocks,
            self.clusters,
            self.intra,
            self.inter,
            self.cluster_temporal,
            self.grg,
            self.scene_tokens,
            self.fusion,
            self.variant.name(),
            self.decoder_self_attention
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Evaluate on the validation split every this many epochs (and at the end).
    pub eval_every: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            decay_epochs: vec![50, 100],
            decay_factor: 10.0,
            batch_size: 16,
            epochs: 60,
            lambda: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            eval_every: 1,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("train.lr must be >= 0, got {}", self.lr)));
        }
        if !(self.decay_factor > 1.0) {
            return Err(Error::Config(format!(
                "train.decay_factor must be > 1, got {}",
                self.decay_factor
            )));
        }
        if self.batch_size == 0 || self.workers == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, workers and eval_every must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("train.lambda must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub clips: usize,
    #[serde(default = "default_family")]
    pub family: TaskFamily,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_individuals")]
    pub individuals: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_group_classes")]
    pub group_classes: usize,
    #[serde(default = "default_action_classes")]
    pub action_classes: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_scene_channels")]
    pub scene_channels: usize,
    #[serde(default = "default_scene_size")]
    pub scene_size: usize,
}

fn default_family() -> TaskFamily {
    TaskFamily::Interaction
}
fn default_frames() -> usize {
    7
}
fn default_individuals() -> usize {
    8
}
fn default_input_dim() -> usize {
    8
}
fn default_group_classes() -> usize {
    8
}
fn default_action_classes() -> usize {
    6
}
fn default_noise() -> f64 {
    GeneratorConfig::DEFAULT_NOISE
}
fn default_scene_channels() -> usize {
    8
}
fn default_scene_size() -> usize {
    4
}

impl DataConfig {
    pub fn with_clips(clips: usize) -> Self {
        DataConfig {
            clips,
            family: default_family(),
            frames: default_frames(),
            individuals: default_individuals(),
            input_dim: default_input_dim(),
            group_classes: default_group_classes(),
            action_classes: default_action_classes(),
            noise_sigma: default_noise(),
            scene_channels: default_scene_channels(),
            scene_size: default_scene_size(),
        }
    }

    pub fn generator(&self, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            frames: self.frames,
            individuals: self.individuals,
            input_dim: self.input_dim,
            group_classes: self.group_classes,
            action_classes: self.action_classes,
            noise_sigma: self.noise_sigma,
            family: self.family,
            scene_channels: self.scene_channels,
            scene_size: self.scene_size,
            seed,
        }
    }
}

/// Fully resolved configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(seed: u64, data: DataConfig) -> Self {
        let mut cfg = RunConfig {
            seed,
            data,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        };
        cfg.sync_model_dims();
        cfg
    }

    /// Small model used for finite-difference checks: T=4, N=4, D=16,
    /// 2 heads, 2 clusters, 2 blocks, two clips, dropout off.
    pub fn tiny(seed: u64) -> Self {
        let data = DataConfig {
            frames: 4,
            individuals: 4,
            ..DataConfig::with_clips(2)
        };
        let mut cfg = RunConfig::new(seed, data);
        cfg.model.width = 16;
        cfg.model.heads = 2;
        cfg.model.clusters = 2;
        cfg.model.blocks = 2;
        cfg.model.dropout = 0.0;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.sync_model_dims();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Copy the data dimensions into the model table, which must agree.
    pub fn sync_model_dims(&mut self) {
        let m = &mut self.model;
        m.frames = self.data.frames;
        m.individuals = self.data.individuals;
        m.input_dim = self.data.input_dim;
        m.group_classes = self.data.group_classes;
        m.action_classes = self.data.action_classes;
        m.scene_channels = self.data.scene_channels;
        m.scene_size = self.data.scene_size;
    }

    pub fn validate(&self) -> Result<()> {
        self.generator().validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn generator(&self) -> GeneratorConfig {
        self.data.generator(crate::forward::mix_seed(self.seed, SeedStream::Data as u64))
    }

    /// Seed of a named random stream derived from the root seed.
    pub fn stream_seed(&self, stream: SeedStream) -> u64 {
        crate::forward::mix_seed(self.seed, stream as u64)
    }
}

/// Independent random streams split from the root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum SeedStream {
    Init = 1,
    Dropout = 2,
    Data = 3,
    Kmeans = 4,
    Shuffle = 5,
}
