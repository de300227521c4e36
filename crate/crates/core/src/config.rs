//! Run configuration: training options, presets, and the flat key-value
//! snapshot written into every run directory.

use std::path::Path;

use crate::baselines::SlidingWindowConfig;
use crate::error::{io_err, Error, Result};
use crate::hard_attention::AgentConfig;
use crate::kv::KvMap;
use crate::objectives::LossConfig;
use crate::pyramid::{GeneratorConfig, TissueMaskConfig};
use crate::sampler::SamplerConfig;
use crate::soft_attention::SoftAttentionConfig;

pub const CONFIG_VERSION: u32 = 1;

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl std::str::FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", stringify!($name), " '{}'"), s))),
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }
    };
}

keyword_enum!(Mode { Separate => "separate", Joint => "joint" });
keyword_enum!(Aggregation { Mean => "mean", Dominant => "dominant" });
keyword_enum!(TileSource { Attention => "attention", Random => "random" });
keyword_enum!(Preset { Her2 => "her2", Mmr => "mmr", Reduced => "reduced" });

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub tiles_per_batch: usize,
    pub slides_per_batch: usize,
    pub lr_soft: f64,
    pub lr_hard: f64,
    /// Step decay: multiply by `gamma` every `step_size` epochs.
    pub step_size: usize,
    pub gamma: f64,
    pub epochs: usize,
    /// Upper bound on soft-attention epochs in separate mode.
    pub soft_epochs: usize,
    pub seed: u64,
    pub folds: usize,
    pub test_fold: usize,
    /// Hold out the fold after the test fold for validation.
    pub validation: bool,
    pub stop_min_delta: f64,
    pub stop_patience: usize,
    /// Stop soft-attention training on validation dice (separate mode).
    pub dice_stopping: bool,
    pub aggregation: Aggregation,
    /// Global gradient-norm clip per optimiser step; 0 disables.
    pub grad_clip: f64,
    pub threads: usize,
    /// Weight of the attention-weighted slide cross-entropy in joint mode.
    pub expectation_weight: f64,
    pub tile_source: TileSource,
    /// Write a checkpoint every this many epochs; 0 writes only the last.
    pub checkpoint_every: usize,
    pub eval_seed: u64,
}

impl TrainConfig {
    pub fn her2() -> Self {
        TrainConfig {
            mode: Mode::Joint,
            tiles_per_batch: 40,
            slides_per_batch: 4,
            lr_soft: 1e-4,
            lr_hard: 1e-3,
            step_size: 30,
            gamma: 0.1,
            epochs: 100,
            soft_epochs: 100,
            seed: 0,
            folds: 4,
            test_fold: 0,
            validation: false,
            stop_min_delta: 0.005,
            stop_patience: 10,
            dice_stopping: false,
            aggregation: Aggregation::Dominant,
            grad_clip: 5.0,
            threads: 1,
            expectation_weight: 1.0,
            tile_source: TileSource::Attention,
            checkpoint_every: 0,
            eval_seed: 1_000_003,
        }
    }

    pub fn mmr() -> Self {
        TrainConfig {
            mode: Mode::Separate,
            tiles_per_batch: 30,
            slides_per_batch: 2,
            folds: 5,
            validation: true,
            dice_stopping: true,
            aggregation: Aggregation::Mean,
            ..Self::her2()
        }
    }

    pub fn tiles_per_slide(&self) -> usize {
        self.tiles_per_batch / self.slides_per_batch.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slides_per_batch == 0 || self.tiles_per_batch % self.slides_per_batch != 0 {
            return Err(Error::Config("tiles_per_batch must be a positive multiple of slides_per_batch".into()));
        }
        if !(self.lr_soft > 0.0 && self.lr_hard > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.step_size == 0 || !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("scheduler needs step_size >= 1 and gamma in (0, 1]".into()));
        }
        if self.folds < 2 || self.test_fold >= self.folds {
            return Err(Error::Config("need folds >= 2 and test_fold < folds".into()));
        }
        if self.validation && self.folds < 3 {
            return Err(Error::Config("a validation fold needs folds >= 3".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.grad_clip < 0.0 || self.expectation_weight < 0.0 {
            return Err(Error::Config("grad_clip and expectation_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvMap, prefix: &str, d: Self) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let cfg = TrainConfig {
            mode: kv.take_or(&k("mode"), d.mode)?,
            tiles_per_batch: kv.take_or(&k("tiles_per_batch"), d.tiles_per_batch)?,
            slides_per_batch: kv.take_or(&k("slides_per_batch"), d.slides_per_batch)?,
            lr_soft: kv.take_or(&k("lr_soft"), d.lr_soft)?,
            lr_hard: kv.take_or(&k("lr_hard"), d.lr_hard)?,
            step_size: kv.take_or(&k("step_size"), d.step_size)?,
            gamma: kv.take_or(&k("gamma"), d.gamma)?,
            epochs: kv.take_or(&k("epochs"), d.epochs)?,
            soft_epochs: kv.take_or(&k("soft_epochs"), d.soft_epochs)?,
            seed: kv.take_or(&k("seed"), d.seed)?,
            folds: kv.take_or(&k("folds"), d.folds)?,
            test_fold: kv.take_or(&k("test_fold"), d.test_fold)?,
            validation: kv.take_or(&k("validation"), d.validation)?,
            stop_min_delta: kv.take_or(&k("stop_min_delta"), d.stop_min_delta)?,
            stop_patience: kv.take_or(&k("stop_patience"), d.stop_patience)?,
            dice_stopping: kv.take_or(&k("dice_stopping"), d.dice_stopping)?,
            aggregation: kv.take_or(&k("aggregation"), d.aggregation)?,
            grad_clip: kv.take_or(&k("grad_clip"), d.grad_clip)?,
            threads: kv.take_or(&k("threads"), d.threads)?,
            expectation_weight: kv.take_or(&k("expectation_weight"), d.expectation_weight)?,
            tile_source: kv.take_or(&k("tile_source"), d.tile_source)?,
            checkpoint_every: kv.take_or(&k("checkpoint_every"), d.checkpoint_every)?,
            eval_seed: kv.take_or(&k("eval_seed"), d.eval_seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        kv.insert(k("mode"), self.mode);
        kv.insert(k("tiles_per_batch"), self.tiles_per_batch);
        kv.insert(k("slides_per_batch"), self.slides_per_batch);
        kv.insert(k("lr_soft"), self.lr_soft);
        kv.insert(k("lr_hard"), self.lr_hard);
        kv.insert(k("step_size"), self.step_size);
        kv.insert(k("gamma"), self.gamma);
        kv.insert(k("epochs"), self.epochs);
        kv.insert(k("soft_epochs"), self.soft_epochs);
        kv.insert(k("seed"), self.seed);
        kv.insert(k("folds"), self.folds);
        kv.insert(k("test_fold"), self.test_fold);
        kv.insert(k("validation"), self.validation);
        kv.insert(k("stop_min_delta"), self.stop_min_delta);
        kv.insert(k("stop_patience"), self.stop_patience);
        kv.insert(k("dice_stopping"), self.dice_stopping);
        kv.insert(k("aggregation"), self.aggregation);
        kv.insert(k("grad_clip"), self.grad_clip);
        kv.insert(k("threads"), self.threads);
        kv.insert(k("expectation_weight"), self.expectation_weight);
        kv.insert(k("tile_source"), self.tile_source);
        kv.insert(k("checkpoint_every"), self.checkpoint_every);
        kv.insert(k("eval_seed"), self.eval_seed);
    }
}

/// Dataset synthesis options.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { count: 60, seed: 0, generator: GeneratorConfig::default() }
    }
}

impl DatasetConfig {
    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = DatasetConfig::default();
        let cfg = DatasetConfig {
            count: kv.take_or("dataset.count", d.count)?,
            seed: kv.take_or("dataset.seed", d.seed)?,
            generator: GeneratorConfig::from_kv(kv, "generator.")?,
        };
        if cfg.count == 0 {
            return Err(Error::Config("dataset.count must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.insert("dataset.count", self.count);
        kv.insert("dataset.seed", self.seed);
        self.generator.write_kv(kv, "generator.");
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        self.write_kv(&mut kv);
        kv
    }
}

/// Everything a training or evaluation run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub soft: SoftAttentionConfig,
    pub sampler: SamplerConfig,
    pub agent: AgentConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub tissue: TissueMaskConfig,
    pub sliding: SlidingWindowConfig,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Her2 => ExperimentConfig {
                preset: p,
                soft: SoftAttentionConfig::her2(),
                sampler: SamplerConfig::her2(),
                agent: AgentConfig::her2(),
                loss: LossConfig::default(),
                train: TrainConfig::her2(),
                tissue: TissueMaskConfig::default(),
                sliding: SlidingWindowConfig::default(),
            },
            Preset::Mmr => ExperimentConfig {
                preset: p,
                soft: SoftAttentionConfig::mmr(),
                sampler: SamplerConfig::mmr(),
                agent: AgentConfig::mmr(),
                loss: LossConfig::default(),
                train: TrainConfig::mmr(),
                tissue: TissueMaskConfig::default(),
                sliding: SlidingWindowConfig::default(),
            },
            Preset::Reduced => reduced(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.soft.validate()?;
        self.sampler.validate()?;
        self.agent.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.sliding.validate()?;
        if self.soft.num_classes != self.agent.num_classes {
            return Err(Error::Config("soft.num_classes and agent.num_classes differ".into()));
        }
        if self.train.tiles_per_slide() != self.sampler.tiles {
            return Err(Error::Config(format!(
                "tiles_per_batch / slides_per_batch = {} but sampler.tiles = {}",
                self.train.tiles_per_slide(),
                self.sampler.tiles
            )));
        }
        if self.train.slides_per_batch % self.agent.num_classes != 0 {
            return Err(Error::Config("slides_per_batch must be a multiple of the class count".into()));
        }
        self.agent.glimpse.validate(self.sampler.tile_size_base)?;
        Ok(())
    }

    /// Reads a configuration; `preset` selects the defaults the remaining
    /// keys override. Unknown keys are rejected.
    pub fn from_kv(mut kv: KvMap) -> Result<Self> {
        let preset: Preset = kv.take_or("preset", Preset::Her2)?;
        if let Some(v) = kv.take::<u32>("config_version")? {
            if v != CONFIG_VERSION {
                return Err(Error::Version { found: v, expected: CONFIG_VERSION });
            }
        }
        let d = Self::preset(preset);
        let cfg = ExperimentConfig {
            preset,
            soft: SoftAttentionConfig::from_kv(&mut kv, "soft.", d.soft)?,
            sampler: SamplerConfig::from_kv(&mut kv, "sampler.", d.sampler)?,
            agent: AgentConfig::from_kv(&mut kv, "agent.", d.agent)?,
            loss: LossConfig::from_kv(&mut kv, "loss.", d.loss)?,
            train: TrainConfig::from_kv(&mut kv, "train.", d.train)?,
            tissue: TissueMaskConfig {
                open_radius: kv.take_or("tissue.open_radius", d.tissue.open_radius)?,
                close_radius: kv.take_or("tissue.close_radius", d.tissue.close_radius)?,
            },
            sliding: SlidingWindowConfig::from_kv(&mut kv, "sliding.", d.sliding)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("config_version", CONFIG_VERSION);
        kv.insert("preset", self.preset);
        self.soft.write_kv(&mut kv, "soft.");
        self.sampler.write_kv(&mut kv, "sampler.");
        self.agent.write_kv(&mut kv, "agent.");
        self.loss.write_kv(&mut kv, "loss.");
        self.train.write_kv(&mut kv, "train.");
        kv.insert("tissue.open_radius", self.tissue.open_radius);
        kv.insert("tissue.close_radius", self.tissue.close_radius);
        self.sliding.write_kv(&mut kv, "sliding.");
        kv
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KvMap::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// Small networks and a short schedule sized for the synthetic end-to-end
/// check on one CPU core.
fn reduced() -> ExperimentConfig {
    ExperimentConfig {
        preset: Preset::Reduced,
        soft: SoftAttentionConfig {
            conv_layers: 2,
            base_channels: 4,
            pool_size: 8,
            kernel: 3,
            feature_depth: 4,
            feature_width: 8,
            feature_pool: 4,
            num_classes: 4,
        },
        sampler: SamplerConfig::her2(),
        agent: AgentConfig {
            glimpse_channels: (8, 16),
            feature_size: 64,
            lstm_sizes: vec![64, 32],
            context_channels: 4,
            ..AgentConfig::her2()
        },
        loss: LossConfig { beta: 1e-3, ..LossConfig::default() },
        train: TrainConfig { epochs: 12, lr_soft: 3e-2, step_size: 10, ..TrainConfig::her2() },
        tissue: TissueMaskConfig::default(),
        sliding: SlidingWindowConfig { dab_threshold: 0.72, feature_depth: 6, feature_width: 8, ..SlidingWindowConfig::default() },
    }
}
