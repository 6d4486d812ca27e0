//! Run configuration and its presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::{ContrastiveConfig, ModalitySet};
use crate::data::{SynthConfig, NUM_FOLDS};
use crate::deaging::DeagingConfig;
use crate::error::{Error, Result};
use crate::fusion::GateActivation;
use crate::io::read_json;
use crate::nn::{BackboneConfig, LrSchedule, OptimizerKind, PatchGeometry};
use crate::race::RaceConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageToggles {
    pub race: bool,
    pub deaging: bool,
    pub dcml: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Test fold the contrastive stage holds out.
    pub fold: usize,
    pub topk: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Seeds the dataset, the protocol and every model initialization.
    pub seed: u64,
    pub data: SynthConfig,
    pub stages: StageToggles,
    pub race: RaceConfig,
    pub deaging: DeagingConfig,
    pub dcml: ContrastiveConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

fn sgd() -> OptimizerKind {
    OptimizerKind::Sgd { momentum: 0.9 }
}

fn small_backbone(input_size: usize, feature_dim: usize) -> BackboneConfig {
    BackboneConfig {
        in_channels: 3,
        input_size,
        stem_channels: 8,
        stage_blocks: [1, 1, 1],
        stage_mid: [4, 8, 16],
        stage_out: [16, 32, 64],
        feature_dim,
    }
}

impl RunConfig {
    /// Sizes that train end to end in minutes on one CPU core.
    pub fn desk() -> Self {
        RunConfig {
            seed: 7,
            data: SynthConfig::default(),
            stages: StageToggles {
                race: true,
                deaging: true,
                dcml: true,
            },
            race: RaceConfig {
                backbone: small_backbone(64, 128),
                batch_size: 32,
                epochs: 6,
                optimizer: OptimizerKind::adam(),
                schedule: LrSchedule(vec![(0, 1e-3), (4, 1e-4)]),
            },
            deaging: DeagingConfig {
                backbone: small_backbone(64, 64),
                canonical_hidden: 32,
                batch_size: 32,
                warmup_steps: 60,
                max_steps: 20,
                min_steps: 100,
                cycles: 2,
                optimizer: OptimizerKind::adam(),
                schedule: LrSchedule::constant(3e-3),
                canonical_schedule: LrSchedule::constant(1e-3),
            },
            dcml: ContrastiveConfig {
                backbone: BackboneConfig::desk(),
                patches: PatchGeometry::desk(),
                r1: 4,
                r2: 2,
                gate_activation: GateActivation::Relu,
                embed_dim: Some(128),
                momentum: 0.999,
                temperature: 0.07,
                bank_size: 512,
                batch_size: 32,
                epochs: 20,
                optimizer: sgd(),
                schedule: LrSchedule::constant(0.01),
                modalities: ModalitySet::ALL,
            },
            eval: EvalConfig {
                fold: 0,
                topk: vec![1, 5],
            },
            paths: Paths {
                data_dir: PathBuf::from("data"),
                out_dir: PathBuf::from("runs"),
            },
        }
    }

    /// Full-size settings: 30-block backbones, batch 128/64/64, a 65536-key
    /// bank, and learning rates that step up after epoch 2.
    pub fn full() -> Self {
        let mut cfg = Self::desk();
        cfg.race.backbone = BackboneConfig {
            input_size: 64,
            feature_dim: 2048,
            ..BackboneConfig::full()
        };
        cfg.race.batch_size = 64;
        cfg.race.schedule = LrSchedule(vec![(0, 1e-4), (2, 1e-5)]);
        cfg.deaging.backbone = BackboneConfig {
            input_size: 64,
            feature_dim: 512,
            ..BackboneConfig::full()
        };
        cfg.deaging.batch_size = 64;
        cfg.deaging.schedule = LrSchedule(vec![(0, 5e-4), (2, 1e-3)]);
        cfg.deaging.canonical_schedule = LrSchedule(vec![(0, 5e-4), (2, 1e-3)]);
        cfg.dcml.backbone = BackboneConfig::full();
        cfg.dcml.embed_dim = None;
        cfg.dcml.bank_size = 65536;
        cfg.dcml.batch_size = 128;
        cfg.dcml.schedule = LrSchedule(vec![(0, 1e-4), (2, 1e-3)]);
        cfg
    }

    /// Tiny images and networks for smoke tests.
    pub fn micro() -> Self {
        let mut cfg = Self::desk();
        cfg.data = SynthConfig {
            num_families: 10,
            image_size: 16,
            aging_identities: 6,
            ages_per_identity: 3,
            ..SynthConfig::default()
        };
        let tiny = |input_size, feature_dim| BackboneConfig {
            in_channels: 3,
            input_size,
            stem_channels: 4,
            stage_blocks: [1, 1, 1],
            stage_mid: [2, 2, 2],
            stage_out: [4, 4, 4],
            feature_dim,
        };
        cfg.race.backbone = tiny(16, 8);
        cfg.race.epochs = 2;
        cfg.deaging.backbone = tiny(16, 8);
        cfg.deaging.canonical_hidden = 4;
        cfg.deaging.batch_size = 8;
        cfg.deaging.warmup_steps = 4;
        cfg.deaging.max_steps = 2;
        cfg.deaging.min_steps = 3;
        cfg.deaging.cycles = 1;
        cfg.dcml.backbone = tiny(12, 8);
        cfg.dcml.patches = PatchGeometry {
            image_size: [16, 16],
            patch_size: [12, 12],
            offsets: [[0, 0], [0, 4], [4, 0], [4, 4]],
        };
        cfg.dcml.embed_dim = Some(16);
        cfg.dcml.bank_size = 64;
        cfg.dcml.batch_size = 8;
        cfg.dcml.epochs = 2;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk, full, micro)"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.race.validate()?;
        self.deaging.validate()?;
        self.dcml.validate()?;
        let size = self.data.image_size;
        if self.dcml.patches.image_size != [size, size] {
            return Err(Error::Config(format!(
                "patch geometry expects {:?} images, dataset renders {size}x{size}",
                self.dcml.patches.image_size
            )));
        }
        for (name, b) in [("race", &self.race.backbone), ("deaging", &self.deaging.backbone)] {
            if b.input_size != size || b.in_channels != self.data.channels {
                return Err(Error::Config(format!(
                    "{name} backbone expects {0}x{0}x{1} input, dataset renders {size}x{size}x{2}",
                    b.input_size, b.in_channels, self.data.channels
                )));
            }
        }
        if self.dcml.backbone.in_channels != self.data.channels {
            return Err(Error::Config("patch backbone channel count differs from the dataset".into()));
        }
        if self.eval.fold >= NUM_FOLDS || self.eval.topk.is_empty() || self.eval.topk.contains(&0) {
            return Err(Error::Config(format!(
                "eval needs a fold below {NUM_FOLDS} and positive k values, got fold {} and {:?}",
                self.eval.fold, self.eval.topk
            )));
        }
        Ok(())
    }
}
