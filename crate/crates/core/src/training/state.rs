//! Training checkpoints: model tensors, optimizer moments and run metadata
//! in one tensor container.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{load_tensors, save_tensors, Heads, Model, TensorMap};
use crate::nn::{Adam, AdamConfig, AdamState};
use crate::rng::{derive_seed, stream};

use super::config::{Budget, TrainConfig};

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// One validation measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    /// Completed optimisation steps.
    pub step: usize,
    pub config: TrainConfig,
    pub history: Vec<ValPoint>,
    pub best: Option<ValPoint>,
    pub adam: Option<AdamMeta>,
    #[serde(default)]
    pub budget: Option<Budget>,
    /// Pretrained weights this run started from, if any.
    #[serde(default)]
    pub init_from: Option<String>,
}

/// Pretraining bundle: U-Net, heads and, when reconstruction is on, the
/// reconstruction convolution.
pub fn pretrain_model(cfg: &TrainConfig) -> Result<Model> {
    let init = |k| derive_seed(cfg.seed, &[stream::INIT, k]);
    let heads = Heads::new(
        cfg.unet,
        cfg.effective_heads(),
        &cfg.projected_layers(),
        &cfg.sim_layers(),
        init(1),
    )?;
    let mut m = Model::segmentation(cfg.unet, init(0)).with_heads(heads);
    if cfg.flags.use_rec {
        m = m.with_recon(init(2));
    }
    Ok(m)
}

/// Bare segmentation network seeded from `cfg.seed`.
pub fn segmentation_model(cfg: &TrainConfig) -> Model {
    Model::segmentation(cfg.unet, derive_seed(cfg.seed, &[stream::INIT, 0]))
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Model parameters and buffers.
    pub tensors: TensorMap,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn save(path: &Path, meta: &CheckpointMeta, model: &mut Model, adam: Option<&Adam>) -> Result<()> {
        let mut tensors = model.state();
        let mut meta = meta.clone();
        meta.adam = adam.map(|a| AdamMeta {
            config: a.config,
            step: a.step,
        });
        if let Some(a) = adam {
            for (name, st) in &a.state {
                tensors.insert(format!("{ADAM_M}{name}"), st.m.clone());
                tensors.insert(format!("{ADAM_V}{name}"), st.v.clone());
            }
        }
        save_tensors(path, serde_json::to_value(&meta)?, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, all) = load_tensors(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)
            .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
        let mut tensors = TensorMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in all {
            if let Some(n) = name.strip_prefix(ADAM_M) {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(ADAM_V) {
                v.insert(n.to_string(), t);
            } else {
                tensors.insert(name, t);
            }
        }
        let adam = match meta.adam {
            Some(am) => {
                let mut state = BTreeMap::new();
                for (name, mt) in m {
                    let vt = v
                        .remove(&name)
                        .ok_or_else(|| Error::Checkpoint(format!("{name}: first moment without second")))?;
                    state.insert(name, AdamState { m: mt, v: vt });
                }
                Some(Adam {
                    config: am.config,
                    step: am.step,
                    state,
                })
            }
            None => None,
        };
        Ok(Self { meta, tensors, adam })
    }

    /// Rebuilds the network this checkpoint was saved from.
    pub fn model(&self) -> Result<Model> {
        let mut m = match self.meta.phase {
            Phase::Pretrain => pretrain_model(&self.meta.config)?,
            Phase::Finetune => segmentation_model(&self.meta.config),
        };
        m.load_state(&self.tensors)?;
        Ok(m)
    }

    /// The U-Net alone, whatever phase produced the checkpoint.
    pub fn segmentation_model(&self) -> Result<Model> {
        let mut m = segmentation_model(&self.meta.config);
        m.load_state(&self.tensors)?;
        Ok(m)
    }
}
