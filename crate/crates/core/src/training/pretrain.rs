//! Self-supervised pretraining.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array5, ArrayView2, Ix5};

use crate::error::{Error, Result};
use crate::losses::{cov_loss, orth_loss, pretrain_total, rec_loss, sim_pair, sim_total, std_loss, PretrainParts};
use crate::network::{HeadPass, Model};
use crate::nn::{Adam, Mode};
use crate::rng::{derive_seed, stream};
use crate::sampling::{gather_array, make_plan, scatter_add};
use crate::volume::{DatasetManifest, Volume};

use super::config::TrainConfig;
use super::data::{longitudinal, pair_batch, PairBatch, PairSpec};
use super::loader::Loader;
use super::log::LossLog;
use super::state::{pretrain_model, Checkpoint, CheckpointMeta, Phase, ValPoint};
use super::RunOptions;

/// Losses of one pretraining pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLosses {
    pub parts: PretrainParts,
    /// Per-layer similarity terms.
    pub sim_terms: BTreeMap<usize, f64>,
    pub total: f64,
}

fn to64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

fn to32(a: &Array2<f64>) -> Array2<f32> {
    a.mapv(|v| v as f32)
}

fn half(a: &Array2<f64>, second: bool) -> ArrayView2<'_, f64> {
    let n = a.nrows() / 2;
    if second {
        a.slice(s![n.., ..])
    } else {
        a.slice(s![..n, ..])
    }
}

fn add_rows(dst: &mut Array2<f64>, src: &Array2<f64>, second: bool) {
    let n = dst.nrows() / 2;
    let mut part = if second {
        dst.slice_mut(s![n.., ..])
    } else {
        dst.slice_mut(s![..n, ..])
    };
    part += src;
}

/// Forward pass and every active loss for one pair batch; with `backprop`
/// the gradients are accumulated into `model` (call `zero_grad` first).
pub fn pretrain_pass(
    model: &mut Model,
    cfg: &TrainConfig,
    batch: &PairBatch,
    plan_seed: u64,
    mode: Mode,
    backprop: bool,
) -> Result<StepLosses> {
    let w = cfg.weights;
    let sim_layers = cfg.sim_layers();
    let varcov_layers = cfg.varcov_layers();
    let orth = cfg.orth_layers();
    let taps = cfg.projected_layers();

    let (out, feats, upass) = model.unet.forward(batch.x.view(), &taps, mode)?;
    let plan = make_plan(&feats.shapes(), cfg.patches_per_layer, plan_seed)?;
    let heads = model
        .heads
        .as_mut()
        .ok_or_else(|| Error::Training("pretraining model has no heads".into()))?;

    // projector and predictor outputs per layer
    let mut z = BTreeMap::new();
    let mut p = BTreeMap::new();
    let mut passes: BTreeMap<usize, HeadPass> = BTreeMap::new();
    for &l in &taps {
        let tap = feats.get(l).expect("tapped");
        let rows = gather_array(tap.view(), plan.layer(l)?, l)?;
        let (zl, pl, pass) = heads.project_and_predict(rows.view(), l, mode)?;
        z.insert(l, to64(&zl));
        if let Some(pl) = pl {
            p.insert(l, to64(&pl));
        }
        passes.insert(l, pass);
    }
    let mut dz: BTreeMap<usize, Array2<f64>> = z.iter().map(|(&l, a)| (l, Array2::zeros(a.raw_dim()))).collect();
    let mut dp: BTreeMap<usize, Array2<f64>> = p.iter().map(|(&l, a)| (l, Array2::zeros(a.raw_dim()))).collect();
    let mut parts = PretrainParts::default();

    let mut sim_terms = BTreeMap::new();
    let scale = w.lambda_sim / sim_layers.len() as f64;
    for &l in &sim_layers {
        let (zl, pl) = (&z[&l], &p[&l]);
        let g = sim_pair(half(pl, false), half(zl, false), half(pl, true), half(zl, true))?;
        sim_terms.insert(l, g.value);
        let d = dp.get_mut(&l).expect("predicted layer");
        add_rows(d, &(g.dp1 * scale), false);
        add_rows(d, &(g.dp2 * scale), true);
    }
    parts.sim = Some(sim_total(&sim_terms.values().copied().collect::<Vec<_>>())?);

    if !varcov_layers.is_empty() {
        let zs: Vec<_> = varcov_layers.iter().map(|l| z[l].view()).collect();
        let (sv, sg) = std_loss(&zs, w.eta, w.epsilon)?;
        let (cv, cg) = cov_loss(&zs)?;
        for ((l, gs), gc) in varcov_layers.iter().zip(sg).zip(cg) {
            let d = dz.get_mut(l).expect("projected layer");
            d.scaled_add(w.mu_std, &gs);
            d.scaled_add(w.gamma_cov, &gc);
        }
        parts.std = Some(sv);
        parts.cov = Some(cv);
    }

    // the decoder side is read at the encoder layer's positions
    let mut orth_branch = None;
    if let Some([e, d]) = orth {
        let rows = gather_array(feats.get(d).expect("tapped").view(), plan.layer(e)?, d)?;
        let (zd, pass) = heads.project_pass(rows.view(), d, mode)?;
        let (ov, ge, gd) = orth_loss(z[&e].view(), to64(&zd).view(), cfg.orth_squared)?;
        dz.get_mut(&e).expect("projected layer").scaled_add(w.beta_orth, &ge);
        orth_branch = Some((pass, gd * w.beta_orth));
        parts.orth = Some(ov);
    }

    let mut d_output = None;
    if cfg.flags.use_rec {
        let target = batch
            .target
            .as_ref()
            .ok_or_else(|| Error::Training("reconstruction needs targets".into()))?;
        let recon = model
            .recon
            .as_mut()
            .ok_or_else(|| Error::Training("pretraining model has no reconstruction layer".into()))?;
        let rpass = recon.forward(out, mode);
        let (rv, rg) = rec_loss(rpass.out.mapv(f64::from).into_dyn().view(), target.mapv(f64::from).into_dyn().view())?;
        parts.rec = Some(rv);
        if backprop {
            let rg = rg.mapv(|v| (v * w.alpha_rec) as f32).into_dimensionality::<Ix5>().expect("rank 5");
            d_output = recon.backward(&rpass, Some(rg), None, true);
        }
    }

    let total = pretrain_total(&parts, &w);
    if !total.is_finite() {
        return Err(Error::Training(format!("non-finite pretraining loss {total}")));
    }

    if backprop {
        let heads = model.heads.as_mut().expect("checked above");
        let mut tap_grads: BTreeMap<usize, Array5<f32>> = BTreeMap::new();
        let mut add = |l: usize, idx: &[[usize; 3]], rows: Array2<f32>| -> Result<()> {
            let g = scatter_add(rows.view(), idx, feats.get(l).expect("tapped").dim())?;
            match tap_grads.get_mut(&l) {
                Some(t) => *t += &g,
                None => {
                    tap_grads.insert(l, g);
                }
            }
            Ok(())
        };
        for (&l, pass) in &passes {
            let gz = to32(&dz[&l]);
            let gp = dp.get(&l).map(to32);
            let rows = heads.backward(pass, Some(gz.view()), gp.as_ref().map(|g| g.view()));
            add(l, plan.layer(l)?, rows)?;
        }
        if let (Some([e, d]), Some((pass, gd))) = (orth, orth_branch) {
            let rows = heads.backward(&pass, Some(to32(&gd).view()), None);
            add(d, plan.layer(e)?, rows)?;
        }
        model.unet.backward(&upass, d_output, &tap_grads);
    }

    Ok(StepLosses {
        parts,
        sim_terms,
        total,
    })
}

/// Log columns: `step, lr, total, sim, rec, std, cov, orth, aug` and one
/// `sim_L<id>` per similarity layer of either tap setting.
pub fn log_header(cfg: &TrainConfig) -> Vec<String> {
    let mut h: Vec<String> = ["step", "lr", "total", "sim", "rec", "std", "cov", "orth", "aug"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let layers: BTreeSet<usize> = cfg.taps_sim.union(&cfg.taps_sim_enc).copied().collect();
    h.extend(layers.iter().map(|l| format!("sim_L{l:02}")));
    h
}

fn log_cells(cfg: &TrainConfig, lr: f64, l: &StepLosses) -> Vec<Option<f64>> {
    let mut c = vec![
        Some(lr),
        Some(l.total),
        l.parts.sim,
        l.parts.rec,
        l.parts.std,
        l.parts.cov,
        l.parts.orth,
        cfg.flags.use_aug.then_some(1.0),
    ];
    let layers: BTreeSet<usize> = cfg.taps_sim.union(&cfg.taps_sim_enc).copied().collect();
    c.extend(layers.iter().map(|t| l.sim_terms.get(t).copied()));
    c
}

/// Files a pretraining run leaves in its output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub last: PathBuf,
    pub best: PathBuf,
    pub log: PathBuf,
    /// Completed steps.
    pub step: usize,
    pub best_point: Option<ValPoint>,
}

pub const LAST: &str = "last.ckpt";
pub const BEST: &str = "best.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";

fn pair_spec(cfg: &TrainConfig, augment: bool) -> PairSpec<'_> {
    PairSpec {
        crop: cfg.crop_size,
        any_pair: cfg.any_pair,
        augment: (augment && cfg.flags.use_aug).then_some(&cfg.augment),
        with_target: cfg.flags.use_rec,
    }
}

/// Mean total loss over the fixed validation batches, in eval mode.
pub fn validation_loss(model: &mut Model, cfg: &TrainConfig, batches: &[PairBatch]) -> Result<f64> {
    let mut sum = 0.0;
    for (i, b) in batches.iter().enumerate() {
        let seed = derive_seed(cfg.seed, &[stream::VALIDATION, stream::PLAN, i as u64]);
        sum += pretrain_pass(model, cfg, b, seed, Mode::Eval, false)?.total;
    }
    Ok(sum / batches.len() as f64)
}

/// Runs (or resumes) pretraining, writing `last.ckpt`, `best.ckpt`,
/// `config.json` and `pretrain_log.csv` under `out`.
///
/// Before every validation the U-Net's batch-norm statistics are
/// recalibrated on the whole training volumes, since crop statistics do
/// not transfer to full-volume inference.
pub fn pretrain(cfg: &TrainConfig, manifest: &DatasetManifest, out: &Path, opts: &RunOptions) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let all_train = manifest.load_split("train")?;
    let images: Vec<&Volume> = all_train.iter().flat_map(|s| s.timepoints().iter().map(|t| &*t.image)).collect();
    let train = longitudinal(&all_train);
    if train.is_empty() {
        return Err(Error::Training("the train split has no subject with two or more timepoints".into()));
    }
    let val = longitudinal(&manifest.load_split("val")?);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("config.json"), cfg.to_json()?).map_err(|e| Error::io(out.join("config.json"), e))?;

    let total_steps = cfg.pretrain_steps;
    let (mut model, mut adam, mut meta) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.meta.phase != Phase::Pretrain || ck.meta.config != *cfg {
                return Err(Error::Training(format!(
                    "{} was not written by this pretraining configuration",
                    path.display()
                )));
            }
            let model = ck.model()?;
            let adam = ck.adam.unwrap_or_else(|| Adam::new(cfg.pretrain_adam()));
            (model, adam, ck.meta)
        }
        None => (
            pretrain_model(cfg)?,
            Adam::new(cfg.pretrain_adam()),
            CheckpointMeta {
                phase: Phase::Pretrain,
                step: 0,
                config: cfg.clone(),
                history: vec![],
                best: None,
                adam: None,
                budget: None,
                init_from: None,
            },
        ),
    };
    let start = meta.step;
    let end = opts.stop_at.map_or(total_steps, |s| s.min(total_steps));
    let log_path = out.join(PRETRAIN_LOG);
    let mut log = LossLog::open(&log_path, &log_header(cfg), opts.resume.as_ref().map(|_| start))?;

    let val_batches = if val.is_empty() {
        vec![]
    } else {
        let spec = pair_spec(cfg, false);
        (0..cfg.val_batches)
            .map(|i| pair_batch(&val, &spec, cfg.batch_size, cfg.seed, &[stream::VALIDATION, i as u64]))
            .collect::<Result<Vec<_>>>()?
    };

    let spec = pair_spec(cfg, true);
    let make = |t: usize| pair_batch(&train, &spec, cfg.batch_size, cfg.seed, &[stream::CROP, t as u64]);
    let (last, best) = (out.join(LAST), out.join(BEST));

    std::thread::scope(|scope| -> Result<()> {
        let loader = Loader::new(scope, start..end, opts.workers, opts.queue, &make);
        for item in loader {
            let (t, batch) = item?;
            let lr = cfg.lr_at(t, total_steps);
            model.zero_grad();
            let plan_seed = derive_seed(cfg.seed, &[stream::PLAN, t as u64]);
            let losses = pretrain_pass(&mut model, cfg, &batch, plan_seed, Mode::Train, true)
                .map_err(|e| Error::Training(format!("step {t}: {e}")))?;
            model.visit(&mut adam.begin(lr));
            log.row(&log_cells(cfg, lr, &losses), t)?;
            meta.step = t + 1;

            let done = t + 1 == total_steps;
            let validate = done || (cfg.validate_every > 0 && (t + 1) % cfg.validate_every == 0);
            if validate {
                model.recalibrate(&images)?;
            }
            if validate && !val_batches.is_empty() {
                let value = validation_loss(&mut model, cfg, &val_batches)?;
                let point = ValPoint { step: t + 1, value };
                meta.history.push(point);
                if meta.best.map_or(true, |b| value < b.value) {
                    meta.best = Some(point);
                    Checkpoint::save(&best, &meta, &mut model, Some(&adam))?;
                }
            }
            if validate || t + 1 == end || (cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0) {
                Checkpoint::save(&last, &meta, &mut model, Some(&adam))?;
            }
        }
        Ok(())
    })?;
    // without validation pairs the final weights count as best
    if val_batches.is_empty() || !best.exists() {
        Checkpoint::save(&best, &meta, &mut model, Some(&adam))?;
    }
    Ok(PretrainOutcome {
        last,
        best,
        log: log_path,
        step: meta.step,
        best_point: meta.best,
    })
}
