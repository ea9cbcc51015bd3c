use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::{HeadSpec, UNetSpec, NUM_LAYERS, PREDICTOR_BOTTLENECK};
use crate::nn::AdamConfig;

/// Encoder and decoder similarity taps.
pub const ENC_DEC_TAPS: [usize; 8] = [1, 3, 5, 7, 9, 12, 15, 18];
/// Encoder-only similarity taps: the last conv of each encoder level above the bottleneck.
pub const ENC_TAPS: [usize; 4] = [1, 3, 5, 7];
/// Encoder bottleneck and first post-skip decoder layer.
pub const ORTH_TAPS: [usize; 2] = [8, 12];
pub const VARCOV_TAPS: [usize; 3] = [12, 15, 18];

/// Which loss terms and data paths are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_rec: bool,
    pub use_aug: bool,
    pub use_orth: bool,
    pub use_varcov: bool,
    pub use_cs: bool,
    pub enc_only_taps: bool,
    /// Heads at `mlp_width / 8`.
    pub narrow_heads: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_rec: true,
            use_aug: true,
            use_orth: true,
            use_varcov: true,
            use_cs: true,
            enc_only_taps: false,
            narrow_heads: false,
        }
    }
}

/// Which timepoints of a labelled subject carry supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelTimepoints {
    All,
    /// Only the oldest scan, as in the isointense-shift protocol.
    Last,
}

/// Labelled training data available to finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// A single training subject.
    OneShot,
    /// A fraction of the training subjects, at least one.
    Fraction(f64),
}

impl FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "one-shot" || s == "one_shot" {
            return Ok(Self::OneShot);
        }
        match s.parse::<f64>() {
            Ok(f) if f > 0.0 && f <= 1.0 => Ok(Self::Fraction(f)),
            _ => Err(Error::Config(format!("budget must be one-shot or a fraction in (0, 1], got {s:?}"))),
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::OneShot => write!(f, "one-shot"),
            Self::Fraction(x) => write!(f, "{x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub unet: UNetSpec,
    pub heads: HeadSpec,
    pub weights: LossWeights,
    pub taps_sim: BTreeSet<usize>,
    pub taps_sim_enc: BTreeSet<usize>,
    pub taps_orth: [usize; 2],
    pub taps_varcov: BTreeSet<usize>,
    pub patches_per_layer: usize,
    /// Crop pairs per pretraining step; labelled crops per finetuning step.
    pub batch_size: usize,
    pub crop_size: [usize; 3],
    pub lr: f64,
    pub adam_beta1_pretrain: f64,
    pub adam_beta1_finetune: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    /// Validation period in steps; 0 validates only after the last step.
    pub validate_every: usize,
    /// Fixed validation batches for the pretraining criterion.
    pub val_batches: usize,
    pub checkpoint_every: usize,
    pub flags: AblationFlags,
    /// Penalise the squared cosine instead of the cosine.
    pub orth_squared: bool,
    /// Sample any two distinct timepoints instead of neighbours.
    pub any_pair: bool,
    pub augment: AugmentConfig,
    /// Augment labelled and consistency crops during finetuning.
    pub finetune_aug: bool,
    pub label_timepoints: LabelTimepoints,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            unet: UNetSpec::default(),
            heads: HeadSpec::default(),
            weights: LossWeights::default(),
            taps_sim: ENC_DEC_TAPS.into_iter().collect(),
            taps_sim_enc: ENC_TAPS.into_iter().collect(),
            taps_orth: ORTH_TAPS,
            taps_varcov: VARCOV_TAPS.into_iter().collect(),
            patches_per_layer: 256,
            batch_size: 3,
            crop_size: [32; 3],
            lr: 2e-4,
            adam_beta1_pretrain: 0.9,
            adam_beta1_finetune: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            pretrain_steps: 30_000,
            finetune_steps: 35_000,
            validate_every: 500,
            val_batches: 4,
            checkpoint_every: 500,
            flags: AblationFlags::default(),
            orth_squared: false,
            any_pair: false,
            augment: AugmentConfig::default(),
            finetune_aug: true,
            label_timepoints: LabelTimepoints::All,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.weights.validate()?;
        self.augment.validate()?;
        if self.crop_size.iter().any(|&c| c == 0 || c % 16 != 0) {
            return bad(format!("crop size {:?} must be a positive multiple of 16", self.crop_size));
        }
        if self.batch_size == 0 || self.patches_per_layer == 0 {
            return bad("batch_size and patches_per_layer must be at least 1".into());
        }
        if self.unet.nc == 0 || self.unet.in_channels == 0 || self.unet.out_channels < 2 {
            return bad("unet needs nc >= 1, an input channel and two or more classes".into());
        }
        if self.heads.mlp_width < PREDICTOR_BOTTLENECK * if self.flags.narrow_heads { PREDICTOR_BOTTLENECK } else { 1 } {
            return bad("mlp_width too small for the predictor bottleneck".into());
        }
        let all = self
            .taps_sim
            .iter()
            .chain(&self.taps_sim_enc)
            .chain(&self.taps_varcov)
            .chain(&self.taps_orth);
        if let Some(t) = all.into_iter().find(|&&t| t >= NUM_LAYERS - 1) {
            return bad(format!("tap layer {t} is not a hidden layer"));
        }
        if self.taps_sim.is_empty() || self.taps_sim_enc.is_empty() {
            return bad("similarity tap sets must not be empty".into());
        }
        let defs = self.unet.layers();
        let [e, d] = self.taps_orth;
        if defs[e].level != defs[d].level {
            return bad(format!("orthogonality layers {e} and {d} sit at different resolutions"));
        }
        if self.flags.use_varcov && self.taps_varcov.is_empty() {
            return bad("var/cov regularisation needs at least one layer".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive".into());
        }
        for b in [self.adam_beta1_pretrain, self.adam_beta1_finetune, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return bad("Adam betas must lie in [0, 1)".into());
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("Adam epsilon must be positive".into());
        }
        if self.pretrain_steps == 0 || self.finetune_steps == 0 {
            return bad("step counts must be at least 1".into());
        }
        if self.val_batches == 0 {
            return bad("val_batches must be at least 1".into());
        }
        Ok(())
    }

    /// Similarity layers for the configured tap setting.
    pub fn sim_layers(&self) -> BTreeSet<usize> {
        if self.flags.enc_only_taps {
            self.taps_sim_enc.clone()
        } else {
            self.taps_sim.clone()
        }
    }

    pub fn varcov_layers(&self) -> BTreeSet<usize> {
        if self.flags.use_varcov {
            self.taps_varcov.clone()
        } else {
            BTreeSet::new()
        }
    }

    pub fn orth_layers(&self) -> Option<[usize; 2]> {
        self.flags.use_orth.then_some(self.taps_orth)
    }

    /// Layers that need a projector.
    pub fn projected_layers(&self) -> BTreeSet<usize> {
        let mut s = self.sim_layers();
        s.extend(self.varcov_layers());
        if let Some(o) = self.orth_layers() {
            s.extend(o);
        }
        s
    }

    pub fn effective_heads(&self) -> HeadSpec {
        let mut h = self.heads;
        if self.flags.narrow_heads {
            h.mlp_width /= PREDICTOR_BOTTLENECK;
        }
        h
    }

    pub fn pretrain_adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1_pretrain,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn finetune_adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1_finetune,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Linearly decayed rate at step `t` of `total`: `lr (1 - t / total)`.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        self.lr * (1.0 - t as f64 / total as f64)
    }
}

/// Rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationRow {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
    I,
    J,
    K,
    L,
}

impl AblationRow {
    pub const ALL: [Self; 12] = [
        Self::A,
        Self::B,
        Self::C,
        Self::D,
        Self::E,
        Self::F,
        Self::G,
        Self::H,
        Self::I,
        Self::J,
        Self::K,
        Self::L,
    ];

    /// `(enc_only, narrow, rec, aug, beta, mu, gamma, cs)`; `None` leaves the
    /// term off, `Some(None)` for mu keeps the configured value.
    #[allow(clippy::type_complexity)]
    fn row(self) -> (bool, bool, bool, bool, Option<f64>, Option<Option<f64>>, Option<f64>, bool) {
        use AblationRow::*;
        match self {
            A => (true, true, false, false, None, None, None, false),
            B => (true, false, false, false, None, None, None, false),
            C => (true, false, true, false, None, None, None, false),
            D => (false, false, true, false, None, None, None, false),
            E => (false, false, false, true, None, None, None, false),
            F => (false, false, true, true, None, None, None, false),
            G => (false, false, true, false, Some(100.0), None, None, false),
            H => (false, false, true, false, None, Some(Some(1e-3)), Some(1e-3), false),
            I => (false, false, true, false, Some(100.0), Some(Some(1e-3)), Some(1e-3), false),
            J => (false, false, true, true, Some(100.0), Some(Some(1e-3)), Some(1e-3), false),
            K => (false, false, true, true, Some(100.0), Some(Some(1e-2)), Some(1e-3), false),
            L => (false, false, true, true, Some(100.0), Some(None), Some(1e-3), true),
        }
    }

    /// Switches `cfg` to this row's flags and weights.
    pub fn apply(self, cfg: &mut TrainConfig) {
        let (enc_only, narrow, rec, aug, beta, mu, gamma, cs) = self.row();
        cfg.flags = AblationFlags {
            use_rec: rec,
            use_aug: aug,
            use_orth: beta.is_some(),
            use_varcov: mu.is_some(),
            use_cs: cs,
            enc_only_taps: enc_only,
            narrow_heads: narrow,
        };
        if let Some(b) = beta {
            cfg.weights.beta_orth = b;
        }
        if let Some(Some(m)) = mu {
            cfg.weights.mu_std = m;
        }
        if let Some(g) = gamma {
            cfg.weights.gamma_cov = g;
        }
        if cs {
            cfg.weights.cs_weight = 1.0;
        }
    }
}

impl FromStr for AblationRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| format!("{r:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation row {s:?}, expected A..L")))
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}
