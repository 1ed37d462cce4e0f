//! Run configuration: profile defaults, JSON overlay with unknown-key
//! rejection, and the derived model configuration.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{IViTConfig, ModelKind};
use crate::synth::{Ablation, SynthParams};

/// Image coordinates are gridded by this factor for position embeddings.
pub const GRID_FACTOR: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Published configuration: P=64, N=500, D=128, 12 heads, 12 layers.
    Paper,
    /// Small configuration that trains in minutes on a desktop CPU.
    Desk,
}

/// Fully resolved run settings. Start from a [`Profile`], optionally overlay
/// a JSON file via [`RunConfig::overlay_file`].
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub p: usize,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub roi_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// None defers to the per-model default (see [`RunConfig::schedule`]).
    pub base_lr: Option<f64>,
    pub warmup_epochs: usize,
    pub decay_epoch: usize,
    pub decay_lr: Option<f64>,
    pub tree_max_depth: usize,
    pub out_dir: Option<PathBuf>,
    pub synth: SynthParams,
}

/// Resolved learning-rate schedule for one model kind.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epoch: usize,
    pub decay_lr: f64,
}

impl RunConfig {
    pub fn from_profile(profile: Profile) -> RunConfig {
        match profile {
            Profile::Paper => RunConfig {
                p: 64,
                n: 500,
                d: 128,
                heads: 12,
                layers: 12,
                mlp_ratio: 4,
                roi_size: 2000,
                epochs: 50,
                batch_size: 4,
                seed: 1,
                base_lr: None,
                warmup_epochs: 10,
                decay_epoch: 30,
                decay_lr: None,
                tree_max_depth: 3,
                out_dir: None,
                synth: SynthParams::default_for_roi(2000),
            },
            Profile::Desk => RunConfig {
                p: 32,
                n: 64,
                d: 32,
                heads: 4,
                layers: 2,
                mlp_ratio: 4,
                roi_size: 400,
                epochs: 30,
                batch_size: 4,
                seed: 1,
                base_lr: None,
                warmup_epochs: 10,
                decay_epoch: 30,
                decay_lr: None,
                tree_max_depth: 3,
                out_dir: None,
                synth: SynthParams::default_for_roi(400),
            },
        }
    }

    /// Applies the keys present in a JSON config file over this config.
    /// Unknown keys are rejected.
    pub fn overlay_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let partial: PartialRunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        self.apply(partial);
        Ok(())
    }

    fn apply(&mut self, p: PartialRunConfig) {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = p.$f { self.$f = v; } )* };
        }
        take!(p, n, d, heads, layers, mlp_ratio, roi_size, epochs, batch_size, seed,
              warmup_epochs, decay_epoch, tree_max_depth);
        // the generator geometry follows the run's ROI size
        self.synth.roi_size = self.roi_size;
        self.synth.seed = self.seed;
        if let Some(v) = p.base_lr {
            self.base_lr = Some(v);
        }
        if let Some(v) = p.decay_lr {
            self.decay_lr = Some(v);
        }
        if let Some(v) = p.out_dir {
            self.out_dir = Some(PathBuf::from(v));
        }
        if let Some(sp) = p.synth {
            self.synth.apply(sp);
        }
    }

    /// Position-grid vocabulary along one axis.
    pub fn grid_extent(&self) -> usize {
        self.roi_size.div_ceil(GRID_FACTOR)
    }

    pub fn model_config(&self) -> IViTConfig {
        IViTConfig {
            p: self.p,
            n: self.n,
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            grid_w: self.grid_extent(),
            grid_h: self.grid_extent(),
            n_grades: 3,
            n_classes: 2,
            mlp_ratio: self.mlp_ratio,
        }
    }

    /// The i-ViT-H encoder configuration (2 heads, 1 layer, width 32),
    /// sharing sequence length and grid with this run.
    pub fn model_config_h(&self) -> IViTConfig {
        IViTConfig { d: 32, heads: 2, layers: 1, ..self.model_config() }
    }

    /// Schedule with per-model defaults: base 1e-3 decaying to 1e-4 for the
    /// patch model, 1e-2 to 1e-3 for the feature-vector variant.
    pub fn schedule(&self, kind: ModelKind) -> Schedule {
        let (default_base, default_decay) = match kind {
            ModelKind::Ivit => (1e-3, 1e-4),
            ModelKind::IvitH => (1e-2, 1e-3),
        };
        Schedule {
            base_lr: self.base_lr.unwrap_or(default_base),
            warmup_epochs: self.warmup_epochs,
            decay_epoch: self.decay_epoch,
            decay_lr: self.decay_lr.unwrap_or(default_decay),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.p % 4 != 0 || self.p < 8 {
            return bad(format!("patch size {} must be a multiple of 4 and >= 8", self.p));
        }
        if self.n == 0 || self.layers == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("n, layers, heads, and mlp_ratio must be positive".into());
        }
        if self.d % 2 != 0 || self.d / self.heads == 0 {
            return bad(format!("hidden size {} must be even with at least 1 dim per head ({} heads)", self.d, self.heads));
        }
        if self.roi_size % GRID_FACTOR != 0 {
            return bad(format!("roi_size {} must be divisible by {}", self.roi_size, GRID_FACTOR));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!("warmup {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        if let Some(lr) = self.base_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("base_lr {} must be positive", lr));
            }
        }
        if self.tree_max_depth == 0 {
            return bad("tree_max_depth must be positive".into());
        }
        self.synth.validate(self.roi_size)?;
        Ok(())
    }
}

/// JSON shape of a config file: every resolved field, all optional,
/// unknown keys rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialRunConfig {
    pub p: Option<usize>,
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub roi_size: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub base_lr: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub decay_epoch: Option<usize>,
    pub decay_lr: Option<f64>,
    pub tree_max_depth: Option<usize>,
    pub out_dir: Option<String>,
    pub synth: Option<PartialSynthParams>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialSynthParams {
    pub papillae: Option<(usize, usize)>,
    pub nuclei_per_papilla: Option<(usize, usize)>,
    pub radius_grade1: Option<(f64, f64)>,
    pub radius_grade2: Option<(f64, f64)>,
    pub radius_grade3: Option<(f64, f64)>,
    pub type2_grade3_fraction: Option<f64>,
    pub rings_type2: Option<(usize, usize)>,
    pub ring_offset: Option<f64>,
    pub noise_std: Option<f64>,
    pub endothelial_per_papilla: Option<(usize, usize)>,
    pub ablation: Option<Ablation>,
}
