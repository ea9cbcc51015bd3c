//! Overlap, surface-distance and longitudinal-consistency metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Model;
use crate::par;
use crate::volume::{DatasetManifest, LabelVolume, Volume};

fn check_same(a: ArrayView3<'_, bool>, b: ArrayView3<'_, bool>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("mask shapes {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn counts(a: ArrayView3<'_, bool>, b: ArrayView3<'_, bool>) -> (usize, usize, usize) {
    Zip::from(&a).and(&b).fold((0, 0, 0), |(i, na, nb), &x, &y| {
        (i + (x && y) as usize, na + x as usize, nb + y as usize)
    })
}

/// `2|a ∩ b| / (|a| + |b|)`; 1 when both masks are empty.
pub fn dice(a: ArrayView3<'_, bool>, b: ArrayView3<'_, bool>) -> Result<f64> {
    check_same(a.view(), b.view())?;
    let (i, na, nb) = counts(a, b);
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * i as f64 / (na + nb) as f64
    })
}

/// `|a ∩ b| / |a ∪ b|`; 1 when both masks are empty.
pub fn iou(a: ArrayView3<'_, bool>, b: ArrayView3<'_, bool>) -> Result<f64> {
    check_same(a.view(), b.view())?;
    let (i, na, nb) = counts(a, b);
    let u = na + nb - i;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Mask voxels with at least one 6-neighbour outside the mask. Voxels on the
/// grid border count as boundary.
pub fn boundary(mask: ArrayView3<'_, bool>) -> Array3<bool> {
    let (w, h, d) = mask.dim();
    Array3::from_shape_fn((w, h, d), |(x, y, z)| {
        if !mask[[x, y, z]] {
            return false;
        }
        let out = |x: usize, y: usize, z: usize, dx: isize, dy: isize, dz: isize| {
            let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
            if nx < 0 || ny < 0 || nz < 0 || nx >= w as isize || ny >= h as isize || nz >= d as isize {
                return true;
            }
            !mask[[nx as usize, ny as usize, nz as usize]]
        };
        [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
            .iter()
            .any(|&(dx, dy, dz)| out(x, y, z, dx, dy, dz))
    })
}

/// One-dimensional squared distance transform of `f` on a grid of step
/// `step` (lower envelope of parabolas).
fn edt_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let pos = |q: usize| q as f64 * step;
    let meet = |p: usize, q: usize| {
        ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)))
    };
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        while let Some(&last) = v.last() {
            if meet(last, q) <= *z.last().expect("paired with v") {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        z.push(if v.is_empty() { f64::NEG_INFINITY } else { meet(*v.last().unwrap(), q) });
        v.push(q);
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(p) {
            k += 1;
        }
        let dx = pos(p) - pos(v[k]);
        *o = dx * dx + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// `true` voxel of `sites`, with per-axis spacing.
pub fn squared_edt(sites: ArrayView3<'_, bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut g = sites.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    for (axis, &step) in spacing.iter().enumerate() {
        let len = g.len_of(Axis(axis));
        let mut buf_in = vec![0.0; len];
        let mut buf_out = vec![0.0; len];
        for mut lane in g.lanes_mut(Axis(axis)) {
            for (b, v) in buf_in.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            edt_1d(&buf_in, step, &mut buf_out);
            for (v, b) in lane.iter_mut().zip(&buf_out) {
                *v = *b;
            }
        }
    }
    g
}

/// Linear interpolation between order statistics at rank `q (n - 1)`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let r = q * (values.len() - 1) as f64;
    let lo = r.floor() as usize;
    let hi = r.ceil() as usize;
    values[lo] + (r - lo as f64) * (values[hi] - values[lo])
}

/// Distances (mm) from every boundary voxel of `from` to the nearest boundary
/// voxel of `to`.
fn surface_distances(from: &Array3<bool>, to_edt: &Array3<f64>) -> Vec<f64> {
    Zip::from(from)
        .and(to_edt)
        .fold(Vec::new(), |mut acc, &b, &d2| {
            if b {
                acc.push(d2.sqrt());
            }
            acc
        })
}

/// 95th percentile of the pooled boundary-to-boundary distances in both
/// directions, in millimetres.
pub fn hd95(a: ArrayView3<'_, bool>, b: ArrayView3<'_, bool>, spacing: [f64; 3]) -> Result<f64> {
    check_same(a.view(), b.view())?;
    if !a.iter().any(|&v| v) || !b.iter().any(|&v| v) {
        return Err(Error::Metric("hd95 is undefined for an empty mask".into()));
    }
    let (ba, bb) = (boundary(a), boundary(b));
    let mut d = surface_distances(&ba, &squared_edt(bb.view(), spacing));
    d.extend(surface_distances(&bb, &squared_edt(ba.view(), spacing)));
    Ok(percentile(&mut d, 0.95))
}

/// Per-label Dice between two timepoints' segmentations, averaged over the
/// foreground labels.
pub fn stcs(s1: &LabelVolume, s2: &LabelVolume) -> Result<f64> {
    if s1.num_labels() != s2.num_labels() {
        return Err(Error::InvalidInput("label counts differ".into()));
    }
    let n = s1.num_labels();
    if n < 2 {
        return Err(Error::InvalidInput("stcs needs at least one foreground label".into()));
    }
    let mut total = 0.0;
    for l in 1..n {
        total += dice(s1.mask(l).view(), s2.mask(l).view())?;
    }
    Ok(total / (n - 1) as f64)
}

/// Absolute symmetrized percent change `100 |v2 - v1| / ((v1 + v2) / 2)`.
pub fn aspc(v1: f64, v2: f64) -> Result<f64> {
    if !(v1 >= 0.0 && v2 >= 0.0 && v1 + v2 > 0.0) {
        return Err(Error::Metric(format!("aspc needs non-negative volumes with a positive sum, got {v1}, {v2}")));
    }
    Ok(100.0 * (v2 - v1).abs() / (0.5 * (v1 + v2)))
}

/// Volume (mm³) of one label.
pub fn label_volume_mm3(seg: &LabelVolume, label: u16, spacing: [f64; 3]) -> f64 {
    seg.count(label) as f64 * spacing.iter().product::<f64>()
}

/// Anything that turns an image into a hard segmentation.
pub trait Segmenter {
    fn segment(&mut self, image: &Volume) -> Result<LabelVolume>;
}

impl Segmenter for Model {
    fn segment(&mut self, image: &Volume) -> Result<LabelVolume> {
        Model::segment(self, image)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (0 for fewer than two values).
    pub std: f64,
    pub median: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        let median = percentile(&mut sorted, 0.5);
        Some(Self { n, mean, std, median })
    }
}

/// Scores for one labelled image; index `l - 1` holds foreground label `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub subject_id: String,
    pub age: f64,
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    /// `None` where either mask is empty.
    pub hd95: Vec<Option<f64>>,
}

/// Consistency between consecutive timepoints of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub subject_id: String,
    pub ages: [f64; 2],
    pub stcs: f64,
    /// Per foreground label; `None` where both volumes are empty.
    pub aspc: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub label: u16,
    pub dice: Option<Stats>,
    pub iou: Option<Stats>,
    pub hd95: Option<Stats>,
    pub aspc: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub num_labels: u16,
    pub images: Vec<ImageScores>,
    pub pairs: Vec<PairScores>,
    pub labels: Vec<LabelSummary>,
    /// Over images of the per-image mean foreground Dice.
    pub mean_dice: Option<Stats>,
    pub mean_iou: Option<Stats>,
    pub mean_hd95: Option<Stats>,
    pub stcs: Option<Stats>,
    pub mean_aspc: Option<Stats>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_some(v: &[Option<f64>]) -> Option<f64> {
    let s: Vec<f64> = v.iter().flatten().copied().collect();
    (!s.is_empty()).then(|| mean(&s))
}

impl MetricReport {
    pub fn build(split: &str, num_labels: u16, images: Vec<ImageScores>, pairs: Vec<PairScores>) -> Self {
        let fg = num_labels.saturating_sub(1) as usize;
        let labels = (0..fg)
            .map(|i| LabelSummary {
                label: i as u16 + 1,
                dice: Stats::of(&images.iter().map(|s| s.dice[i]).collect::<Vec<_>>()),
                iou: Stats::of(&images.iter().map(|s| s.iou[i]).collect::<Vec<_>>()),
                hd95: Stats::of(&images.iter().filter_map(|s| s.hd95[i]).collect::<Vec<_>>()),
                aspc: Stats::of(&pairs.iter().filter_map(|p| p.aspc[i]).collect::<Vec<_>>()),
            })
            .collect();
        Self {
            split: split.to_string(),
            num_labels,
            mean_dice: Stats::of(&images.iter().map(|s| mean(&s.dice)).collect::<Vec<_>>()),
            mean_iou: Stats::of(&images.iter().map(|s| mean(&s.iou)).collect::<Vec<_>>()),
            mean_hd95: Stats::of(&images.iter().filter_map(|s| mean_some(&s.hd95)).collect::<Vec<_>>()),
            stcs: Stats::of(&pairs.iter().map(|p| p.stcs).collect::<Vec<_>>()),
            mean_aspc: Stats::of(&pairs.iter().filter_map(|p| mean_some(&p.aspc)).collect::<Vec<_>>()),
            images,
            pairs,
            labels,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per image and per pair.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let mut s = String::from("kind,subject_id,age,age2,label,dice,iou,hd95,stcs,aspc\n");
        for im in &self.images {
            for i in 0..im.dice.len() {
                let _ = writeln!(
                    s,
                    "image,{},{},,{},{},{},{},,",
                    im.subject_id,
                    im.age,
                    i + 1,
                    im.dice[i],
                    im.iou[i],
                    fmt(im.hd95[i])
                );
            }
        }
        for p in &self.pairs {
            for (i, a) in p.aspc.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "pair,{},{},{},{},,,,{},{}",
                    p.subject_id,
                    p.ages[0],
                    p.ages[1],
                    i + 1,
                    p.stcs,
                    fmt(*a)
                );
            }
        }
        s
    }

    /// Per-label means and standard deviations for bar plots.
    pub fn label_bars_csv(&self) -> String {
        let mut s = String::from("label,metric,mean,std,n\n");
        for l in &self.labels {
            for (name, st) in [("dice", l.dice), ("iou", l.iou), ("hd95", l.hd95), ("aspc", l.aspc)] {
                if let Some(st) = st {
                    let _ = writeln!(s, "{},{name},{},{},{}", l.label, st.mean, st.std, st.n);
                }
            }
        }
        s
    }

    /// Writes `<path>` (JSON) plus `.csv` and `_labels.csv` siblings.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))?;
        let csv = path.with_extension("csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        let bars = path.with_file_name(format!("{stem}_labels.csv"));
        fs::write(&bars, self.label_bars_csv()).map_err(|e| Error::io(&bars, e))
    }
}

/// Scores one prediction against its reference.
pub fn score_image(
    subject_id: &str,
    age: f64,
    pred: &LabelVolume,
    truth: &LabelVolume,
    spacing: [f64; 3],
) -> Result<ImageScores> {
    if pred.dims() != truth.dims() || pred.num_labels() != truth.num_labels() {
        return Err(Error::Shape("prediction and reference differ in shape or labels".into()));
    }
    let mut s = ImageScores {
        subject_id: subject_id.to_string(),
        age,
        dice: vec![],
        iou: vec![],
        hd95: vec![],
    };
    for l in 1..truth.num_labels() {
        let (p, t) = (pred.mask(l), truth.mask(l));
        s.dice.push(dice(p.view(), t.view())?);
        s.iou.push(iou(p.view(), t.view())?);
        s.hd95.push(hd95(p.view(), t.view(), spacing).ok());
    }
    Ok(s)
}

/// Scores consecutive predictions of one subject.
pub fn score_pair(
    subject_id: &str,
    ages: [f64; 2],
    s1: &LabelVolume,
    s2: &LabelVolume,
    spacing: [f64; 3],
) -> Result<PairScores> {
    let aspc = (1..s1.num_labels())
        .map(|l| aspc(label_volume_mm3(s1, l, spacing), label_volume_mm3(s2, l, spacing)).ok())
        .collect();
    Ok(PairScores {
        subject_id: subject_id.to_string(),
        ages,
        stcs: stcs(s1, s2)?,
        aspc,
    })
}

/// Segments every image of a split and scores it. Overlap metrics cover
/// every labelled image; consistency covers consecutive timepoints of
/// subjects with at least two.
pub fn evaluate_split(seg: &mut dyn Segmenter, manifest: &DatasetManifest, split: &str) -> Result<MetricReport> {
    let subjects = manifest.load_split(split)?;
    let mut jobs = Vec::new();
    let mut pair_jobs = Vec::new();
    for s in &subjects {
        let preds = s
            .timepoints()
            .iter()
            .map(|tp| seg.segment(&tp.image))
            .collect::<Result<Vec<_>>>()?;
        let spacing = s.timepoints()[0].image.spacing();
        for (tp, p) in s.timepoints().iter().zip(&preds) {
            if let Some(label) = &tp.label {
                jobs.push((s.subject_id().to_string(), tp.age, p.clone(), label.clone(), spacing));
            }
        }
        for j in 1..preds.len() {
            let ages = [s.timepoints()[j - 1].age, s.timepoints()[j].age];
            pair_jobs.push((s.subject_id().to_string(), ages, preds[j - 1].clone(), preds[j].clone(), spacing));
        }
    }
    let images = par::map_slice(&jobs, |(id, age, p, t, sp)| score_image(id, *age, p, t, *sp))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let pairs = par::map_slice(&pair_jobs, |(id, ages, a, b, sp)| score_pair(id, *ages, a, b, *sp))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::build(split, manifest.num_labels, images, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(n: usize, on: &[[usize; 3]]) -> Array3<bool> {
        let mut m = Array3::from_elem((n, n, n), false);
        for p in on {
            m[*p] = true;
        }
        m
    }

    fn random_mask(seed: u64, p: f64) -> Array3<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((8, 8, 8), |_| rng.gen_bool(p))
    }

    #[test]
    fn overlap_cases() {
        let a = mask(2, &[[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]]);
        let b = mask(2, &[[0, 0, 0], [0, 0, 1], [1, 0, 0], [1, 0, 1]]);
        let c = mask(2, &[[1, 1, 1]]);
        assert_eq!(dice(a.view(), a.view()).unwrap(), 1.0);
        assert_eq!(dice(a.view(), c.view()).unwrap(), 0.0);
        assert_eq!(dice(a.view(), b.view()).unwrap(), 0.5);
        assert_eq!(iou(a.view(), a.view()).unwrap(), 1.0);
        assert_eq!(iou(a.view(), c.view()).unwrap(), 0.0);
        assert!((iou(a.view(), b.view()).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let e = mask(2, &[]);
        assert_eq!(dice(e.view(), e.view()).unwrap(), 1.0);
        assert_eq!(iou(e.view(), e.view()).unwrap(), 1.0);
        assert!(dice(a.view(), mask(3, &[]).view()).is_err());
    }

    #[test]
    fn hd95_cases() {
        let a = mask(6, &[[2, 2, 2]]);
        let b = mask(6, &[[3, 2, 2]]);
        assert_eq!(hd95(a.view(), a.view(), [1.0; 3]).unwrap(), 0.0);
        assert_eq!(hd95(a.view(), b.view(), [1.0; 3]).unwrap(), 1.0);
        assert_eq!(hd95(a.view(), b.view(), [2.0, 1.0, 1.0]).unwrap(), 2.0);
        assert!(matches!(hd95(a.view(), mask(6, &[]).view(), [1.0; 3]), Err(Error::Metric(_))));
    }

    #[test]
    fn edt_matches_brute_force() {
        for seed in 0..20 {
            let sites = random_mask(seed, 0.05);
            let sp = [0.7, 1.3, 2.0];
            let edt = squared_edt(sites.view(), sp);
            let on: Vec<_> = sites.indexed_iter().filter(|(_, &v)| v).map(|(i, _)| i).collect();
            for ((x, y, z), &d2) in edt.indexed_iter() {
                let want = on
                    .iter()
                    .map(|&(a, b, c)| {
                        let dx = (x as f64 - a as f64) * sp[0];
                        let dy = (y as f64 - b as f64) * sp[1];
                        let dz = (z as f64 - c as f64) * sp[2];
                        dx * dx + dy * dy + dz * dz
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!((d2 - want).abs() <= 1e-9 * want.max(1.0), "{d2} vs {want}");
            }
        }
    }

    #[test]
    fn stcs_and_aspc_cases() {
        let a = LabelVolume::new(Array3::from_shape_fn((2, 2, 2), |(x, y, _)| (x * 2 + y) as u16 % 3), 3).unwrap();
        assert_eq!(stcs(&a, &a).unwrap(), 1.0);
        let swapped = LabelVolume::new(a.data().mapv(|v| [0, 2, 1][v as usize]), 3).unwrap();
        assert_eq!(stcs(&a, &swapped).unwrap(), 0.0);
        assert_eq!(aspc(5.0, 5.0).unwrap(), 0.0);
        assert!((aspc(100.0, 110.0).unwrap() - 1000.0 / 105.0).abs() < 1e-12);
        assert_eq!(aspc(0.0, 10.0).unwrap(), 200.0);
        assert!(aspc(0.0, 0.0).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile(&mut v, 0.5), 2.0);
        assert!((percentile(&mut v, 0.95) - 3.8).abs() < 1e-12);
    }

    #[test]
    fn stats_and_csv() {
        let s = Stats::of(&[1.0, 2.0, 4.0]).unwrap();
        assert_eq!((s.n, s.median), (3, 2.0));
        assert!((s.mean - 7.0 / 3.0).abs() < 1e-15);
        assert!(Stats::of(&[]).is_none());
        let lab = LabelVolume::new(Array3::from_shape_fn((4, 4, 4), |(x, _, _)| (x / 2) as u16), 2).unwrap();
        let im = score_image("s", 1.0, &lab, &lab, [1.0; 3]).unwrap();
        assert_eq!((im.dice[0], im.iou[0], im.hd95[0]), (1.0, 1.0, Some(0.0)));
        let report = MetricReport::build("test", 2, vec![im], vec![]);
        assert!(report.stcs.is_none());
        assert_eq!(report.mean_dice.unwrap().mean, 1.0);
        assert_eq!(report.to_csv().lines().count(), 2);
        assert!(report.label_bars_csv().contains("1,dice,1,0,1"));
    }

    proptest! {
        #[test]
        fn dice_dominates_iou_and_both_are_symmetric(seed in any::<u64>(), p in 0.0f64..0.6) {
            let (a, b) = (random_mask(seed, p), random_mask(seed ^ 0x55, p));
            let (d, i) = (dice(a.view(), b.view()).unwrap(), iou(a.view(), b.view()).unwrap());
            prop_assert!(d >= i);
            prop_assert_eq!(d == i, d == 0.0 || d == 1.0);
            prop_assert_eq!(d, dice(b.view(), a.view()).unwrap());
            prop_assert_eq!(i, iou(b.view(), a.view()).unwrap());
            if a.iter().any(|&v| v) && b.iter().any(|&v| v) {
                let sp = [1.0, 1.5, 0.5];
                prop_assert_eq!(hd95(a.view(), b.view(), sp).unwrap(), hd95(b.view(), a.view(), sp).unwrap());
            }
        }

        #[test]
        fn aspc_is_symmetric(a in 0.0f64..1e4, b in 0.001f64..1e4) {
            prop_assert_eq!(aspc(a, b).unwrap(), aspc(b, a).unwrap());
        }
    }
}
