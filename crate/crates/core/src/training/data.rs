//! Batch construction for both training phases. Every batch is a pure
//! function of the seed, the step and the subject list.

use ndarray::{Array4, Array5, Axis};
use rand::seq::index::sample;
use rand::Rng;

use crate::augment::{apply_geometric, apply_geometric_labels, apply_intensity, AugmentConfig, PairAugmentation};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::volume::{crop_labels, crop_volume, sample_crop_offset, SubjectTimeSeries, Volume};

/// `2B` crops: items `0..B` are the earlier timepoints, `B..2B` the later
/// ones, matched by index.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub x: Array5<f32>,
    /// Clean reconstruction targets in the same layout, when requested.
    pub target: Option<Array5<f32>>,
}

impl PairBatch {
    pub fn pairs(&self) -> usize {
        self.x.shape()[0] / 2
    }
}

/// `B` crops with their label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledBatch {
    pub x: Array5<f32>,
    pub labels: Array4<u16>,
}

pub fn stack(vols: &[Volume]) -> Result<Array5<f32>> {
    let views: Vec<_> = vols.iter().map(|v| v.data().view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(format!("cannot stack crops: {e}")))
}

/// Subjects usable for pair sampling.
pub fn longitudinal(subjects: &[SubjectTimeSeries]) -> Vec<SubjectTimeSeries> {
    subjects.iter().filter(|s| s.is_longitudinal()).cloned().collect()
}

fn pick_pair(n: usize, any_pair: bool, rng: &mut impl Rng) -> (usize, usize) {
    if any_pair {
        let v = sample(rng, n, 2).into_vec();
        (v[0].min(v[1]), v[0].max(v[1]))
    } else {
        let j = rng.gen_range(0..n - 1);
        (j, j + 1)
    }
}

pub struct PairSpec<'a> {
    pub crop: [usize; 3],
    pub any_pair: bool,
    /// Joint augmentation applied to both crops of a pair.
    pub augment: Option<&'a AugmentConfig>,
    pub with_target: bool,
}

/// One pair batch; item `b` draws from `rng_from(seed, parts ++ [b])`.
pub fn pair_batch(
    subjects: &[SubjectTimeSeries],
    spec: &PairSpec<'_>,
    batch: usize,
    seed: u64,
    parts: &[u64],
) -> Result<PairBatch> {
    if subjects.is_empty() {
        return Err(Error::Training("no subject with two or more timepoints".into()));
    }
    let mut inputs = (Vec::with_capacity(batch), Vec::with_capacity(batch));
    let mut targets = (Vec::with_capacity(batch), Vec::with_capacity(batch));
    for b in 0..batch {
        let mut p = parts.to_vec();
        p.push(b as u64);
        let mut rng = rng_from(seed, &p);
        let s = &subjects[rng.gen_range(0..subjects.len())];
        let (j, k) = pick_pair(s.len(), spec.any_pair, &mut rng);
        let offset = sample_crop_offset(s.dims(), spec.crop, &mut rng)?;
        let cj = crop_volume(&s.timepoints()[j].image, offset, spec.crop)?;
        let ck = crop_volume(&s.timepoints()[k].image, offset, spec.crop)?;
        let ((ij, tj), (ik, tk)) = match spec.augment {
            Some(cfg) => {
                let aug = PairAugmentation::sample(cfg, &mut rng);
                (aug.apply(&cj)?, aug.apply(&ck)?)
            }
            None => ((cj.clone(), cj), (ck.clone(), ck)),
        };
        inputs.0.push(ij);
        inputs.1.push(ik);
        targets.0.push(tj);
        targets.1.push(tk);
    }
    inputs.0.extend(inputs.1);
    let x = stack(&inputs.0)?;
    let target = if spec.with_target {
        targets.0.extend(targets.1);
        Some(stack(&targets.0)?)
    } else {
        None
    };
    Ok(PairBatch { x, target })
}

/// A labelled acquisition: `(subject, timepoint)`.
pub type LabelledItem = (usize, usize);

/// `batch` labelled crops, each augmented with its own draw when `augment`
/// is set; labels follow the geometric part only.
pub fn labelled_batch(
    subjects: &[SubjectTimeSeries],
    items: &[LabelledItem],
    crop: [usize; 3],
    augment: Option<&AugmentConfig>,
    batch: usize,
    seed: u64,
    parts: &[u64],
) -> Result<LabelledBatch> {
    if items.is_empty() {
        return Err(Error::Training("empty labelled set".into()));
    }
    let mut xs = Vec::with_capacity(batch);
    let mut ls = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut p = parts.to_vec();
        p.push(b as u64);
        let mut rng = rng_from(seed, &p);
        let (si, ti) = items[rng.gen_range(0..items.len())];
        let tp = &subjects[si].timepoints()[ti];
        let label = tp
            .label
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("{} timepoint {ti} has no label", subjects[si].subject_id())))?;
        let offset = sample_crop_offset(tp.image.dims(), crop, &mut rng)?;
        let mut img = crop_volume(&tp.image, offset, crop)?;
        let mut lbl = crop_labels(label, offset, crop)?;
        if let Some(cfg) = augment {
            let g = cfg.sample_geometric(&mut rng);
            let a = cfg.sample_intensity(&mut rng);
            img = apply_intensity(&apply_geometric(&img, &g)?, &a)?;
            lbl = apply_geometric_labels(&lbl, &g)?;
        }
        xs.push(img);
        ls.push(lbl.data().clone());
    }
    let views: Vec<_> = ls.iter().map(|l| l.view()).collect();
    let labels = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(format!("cannot stack labels: {e}")))?;
    Ok(LabelledBatch { x: stack(&xs)?, labels })
}
