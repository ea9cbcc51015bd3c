//! Supervised finetuning with an optional longitudinal consistency pass.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array5, Ix5};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::losses::{cs_loss, finetune_total, sup_loss};
use crate::metrics::{evaluate_split, Segmenter};
use crate::network::Model;
use crate::nn::{softmax_last, softmax_last_backward, Adam, Mode};
use crate::rng::{rng_from, stream};
use crate::volume::{DatasetManifest, SubjectTimeSeries, Volume};

use super::config::{Budget, LabelTimepoints, TrainConfig};
use super::data::{labelled_batch, longitudinal, pair_batch, LabelledBatch, LabelledItem, PairBatch, PairSpec};
use super::loader::Loader;
use super::log::LossLog;
use super::state::{segmentation_model, Checkpoint, CheckpointMeta, Phase, ValPoint};
use super::RunOptions;

pub const FINETUNE_LOG: &str = "finetune_log.csv";
pub const LOG_COLUMNS: [&str; 8] = ["step", "lr", "total", "sup", "dice", "ce", "cs", "val_dice"];

/// Training subjects that carry supervision under `budget`.
///
/// One-shot takes the first labelled training subject; a fraction takes
/// `ceil(f n)` subjects (at least one) from a seeded permutation.
pub fn labelled_subjects(train: &[SubjectTimeSeries], budget: Budget, seed: u64) -> Vec<usize> {
    let labelled: Vec<usize> = (0..train.len())
        .filter(|&i| train[i].timepoints().iter().any(|t| t.label.is_some()))
        .collect();
    if labelled.is_empty() {
        return vec![];
    }
    match budget {
        Budget::OneShot => vec![labelled[0]],
        Budget::Fraction(f) => {
            let n = ((f * labelled.len() as f64).ceil() as usize).clamp(1, labelled.len());
            let mut perm = labelled;
            perm.shuffle(&mut rng_from(seed, &[stream::FINETUNE, stream::SPLIT]));
            let mut pick = perm[..n].to_vec();
            pick.sort_unstable();
            pick
        }
    }
}

/// Labelled acquisitions of the chosen subjects.
pub fn labelled_items(train: &[SubjectTimeSeries], subjects: &[usize], which: LabelTimepoints) -> Vec<LabelledItem> {
    let mut items = Vec::new();
    for &s in subjects {
        let tps: Vec<usize> = (0..train[s].len())
            .filter(|&t| train[s].timepoints()[t].label.is_some())
            .collect();
        match which {
            LabelTimepoints::All => items.extend(tps.iter().map(|&t| (s, t))),
            LabelTimepoints::Last => items.extend(tps.last().map(|&t| (s, t))),
        }
    }
    items
}

fn probs(logits: &Array5<f32>) -> Array5<f32> {
    softmax_last(logits.view().into_dyn())
        .into_dimensionality::<Ix5>()
        .expect("rank 5")
}

fn logits_grad(p: &Array5<f32>, dp: ndarray::ArrayD<f64>, scale: f64) -> Array5<f32> {
    let dp = dp.mapv(|v| (v * scale) as f32);
    softmax_last_backward(p.view().into_dyn(), dp.view())
        .into_dimensionality::<Ix5>()
        .expect("rank 5")
}

/// Supervised pass; returns `(dice term, ce term)`.
pub fn sup_pass(model: &mut Model, batch: &LabelledBatch, backprop: bool) -> Result<(f64, f64)> {
    let mode = if backprop { Mode::Train } else { Mode::Eval };
    let (logits, _, pass) = model.unet.forward(batch.x.view(), &Default::default(), mode)?;
    let p = probs(&logits);
    let loss = sup_loss(p.mapv(f64::from).into_dyn().view(), batch.labels.view().into_dyn())?;
    if !loss.value().is_finite() {
        return Err(Error::Training(format!("non-finite supervised loss {}", loss.value())));
    }
    if backprop {
        let d = logits_grad(&p, loss.grad, 1.0);
        model.unet.backward(&pass, Some(d), &Default::default());
    }
    Ok((loss.dice, loss.ce))
}

/// Consistency pass over a pair batch, gradients scaled by `weight`.
pub fn cs_pass(model: &mut Model, batch: &PairBatch, weight: f64, backprop: bool) -> Result<f64> {
    let mode = if backprop { Mode::Train } else { Mode::Eval };
    let (logits, _, pass) = model.unet.forward(batch.x.view(), &Default::default(), mode)?;
    let p = probs(&logits);
    let n = batch.pairs();
    let p64 = p.mapv(f64::from);
    let (v, gj, gk) = cs_loss(
        p64.slice(s![..n, .., .., .., ..]).into_dyn(),
        p64.slice(s![n.., .., .., .., ..]).into_dyn(),
    )?;
    if !v.is_finite() {
        return Err(Error::Training(format!("non-finite consistency loss {v}")));
    }
    if backprop {
        let views = [gj.view(), gk.view()];
        let g = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let d = logits_grad(&p, g, weight);
        model.unet.backward(&pass, Some(d), &Default::default());
    }
    Ok(v)
}

/// Mean foreground Dice of `model` on the validation split.
pub fn validation_dice(model: &mut dyn Segmenter, manifest: &DatasetManifest) -> Result<f64> {
    let report = evaluate_split(model, manifest, "val")?;
    report
        .mean_dice
        .map(|s| s.mean)
        .ok_or_else(|| Error::Training("the validation split has no labelled image".into()))
}

/// Mean validation Dice of the segmentation network stored in `ckpt`.
pub fn validate(ckpt: &Path, manifest: &DatasetManifest) -> Result<f64> {
    let mut model = Checkpoint::load(ckpt)?.segmentation_model()?;
    validation_dice(&mut model, manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub last: PathBuf,
    pub best: PathBuf,
    pub log: PathBuf,
    pub step: usize,
    pub best_point: Option<ValPoint>,
    /// Training subjects that supplied labels.
    pub labelled: Vec<String>,
}

struct Batches {
    sup: LabelledBatch,
    cs: Option<PairBatch>,
}

/// Finetunes from the U-Net weights in `init` (random init when `None`),
/// writing `last.ckpt`, `best.ckpt`, `config.json` and `finetune_log.csv`.
///
/// Before every validation the U-Net's batch-norm statistics are
/// recalibrated on the whole training volumes, since crop statistics do
/// not transfer to full-volume inference.
pub fn finetune(
    cfg: &TrainConfig,
    init: Option<&Path>,
    manifest: &DatasetManifest,
    budget: Budget,
    out: &Path,
    opts: &RunOptions,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let train = manifest.load_split("train")?;
    let chosen = labelled_subjects(&train, budget, cfg.seed);
    let items = labelled_items(&train, &chosen, cfg.label_timepoints);
    if items.is_empty() {
        return Err(Error::Training("empty labelled set".into()));
    }
    let use_cs = cfg.flags.use_cs && cfg.weights.cs_weight > 0.0;
    let pairs = longitudinal(&train);
    if use_cs && pairs.is_empty() {
        return Err(Error::Training("consistency needs a subject with two or more timepoints".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("config.json"), cfg.to_json()?).map_err(|e| Error::io(out.join("config.json"), e))?;

    let (mut model, mut adam, mut meta) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.meta.phase != Phase::Finetune || ck.meta.config != *cfg || ck.meta.budget != Some(budget) {
                return Err(Error::Training(format!(
                    "{} was not written by this finetuning configuration",
                    path.display()
                )));
            }
            let model = ck.model()?;
            let adam = ck.adam.unwrap_or_else(|| Adam::new(cfg.finetune_adam()));
            (model, adam, ck.meta)
        }
        None => {
            let model = match init {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    if ck.meta.config.unet != cfg.unet {
                        return Err(Error::Training(format!(
                            "{}: U-Net shape differs from the finetuning configuration",
                            p.display()
                        )));
                    }
                    ck.segmentation_model()?
                }
                None => segmentation_model(cfg),
            };
            let meta = CheckpointMeta {
                phase: Phase::Finetune,
                step: 0,
                config: cfg.clone(),
                history: vec![],
                best: None,
                adam: None,
                budget: Some(budget),
                init_from: init.map(|p| p.display().to_string()),
            };
            (model, Adam::new(cfg.finetune_adam()), meta)
        }
    };

    let total_steps = cfg.finetune_steps;
    let start = meta.step;
    let end = opts.stop_at.map_or(total_steps, |s| s.min(total_steps));
    let log_path = out.join(FINETUNE_LOG);
    let header: Vec<String> = LOG_COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut log = LossLog::open(&log_path, &header, opts.resume.as_ref().map(|_| start))?;

    let aug = cfg.finetune_aug.then_some(&cfg.augment);
    let spec = PairSpec {
        crop: cfg.crop_size,
        any_pair: false,
        augment: aug,
        with_target: false,
    };
    let make = |t: usize| -> Result<Batches> {
        let t = t as u64;
        let sup = labelled_batch(&train, &items, cfg.crop_size, aug, cfg.batch_size, cfg.seed, &[stream::FINETUNE, 0, t])?;
        let cs = if use_cs {
            Some(pair_batch(&pairs, &spec, cfg.batch_size, cfg.seed, &[stream::FINETUNE, 1, t])?)
        } else {
            None
        };
        Ok(Batches { sup, cs })
    };
    let (last, best) = (out.join("last.ckpt"), out.join("best.ckpt"));
    let images: Vec<&Volume> = train.iter().flat_map(|s| s.timepoints().iter().map(|t| &*t.image)).collect();

    std::thread::scope(|scope| -> Result<()> {
        let loader = Loader::new(scope, start..end, opts.workers, opts.queue, &make);
        for item in loader {
            let (t, b) = item?;
            let lr = cfg.lr_at(t, total_steps);
            let fail = |e: Error| Error::Training(format!("step {t}: {e}"));
            model.zero_grad();
            let (dice, ce) = sup_pass(&mut model, &b.sup, true).map_err(fail)?;
            model.visit(&mut adam.begin(lr));
            let cs = match &b.cs {
                Some(pb) => {
                    model.zero_grad();
                    let v = cs_pass(&mut model, pb, cfg.weights.cs_weight, true).map_err(fail)?;
                    model.visit(&mut adam.begin(lr));
                    Some(v)
                }
                None => None,
            };
            let sup = dice + ce;
            let total = finetune_total(sup, cs, &cfg.weights);
            meta.step = t + 1;

            let done = t + 1 == total_steps;
            let validate = done || (cfg.validate_every > 0 && (t + 1) % cfg.validate_every == 0);
            let mut val = None;
            if validate {
                model.recalibrate(&images)?;
                let value = validation_dice(&mut model, manifest)?;
                val = Some(value);
                let point = ValPoint { step: t + 1, value };
                meta.history.push(point);
                if meta.best.map_or(true, |b| value > b.value) {
                    meta.best = Some(point);
                    Checkpoint::save(&best, &meta, &mut model, Some(&adam))?;
                }
            }
            log.row(&[Some(lr), Some(total), Some(sup), Some(dice), Some(ce), cs, val], t)?;
            if validate || t + 1 == end || (cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0) {
                Checkpoint::save(&last, &meta, &mut model, Some(&adam))?;
            }
        }
        Ok(())
    })?;
    if !best.exists() {
        model.recalibrate(&images)?;
        Checkpoint::save(&best, &meta, &mut model, Some(&adam))?;
    }
    Ok(FinetuneOutcome {
        last,
        best,
        log: log_path,
        step: meta.step,
        best_point: meta.best,
        labelled: chosen.iter().map(|&i| train[i].subject_id().to_string()).collect(),
    })
}
