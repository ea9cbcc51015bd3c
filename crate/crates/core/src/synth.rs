//! Registered longitudinal phantoms: nested ellipsoids that grow with age
//! while their per-label intensities drift along a contrast schedule.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{rng_from, stream};
use crate::volume::{
    save_labels, save_volume, DatasetManifest, LabelVolume, SubjectEntry, SubjectTimeSeries,
    Timepoint, TimepointEntry, Volume,
};

/// Semi-axis ratio of each nested shell relative to the outer ellipsoid.
pub const SHELL_RATIOS: [f64; 3] = [1.0, 0.65, 0.35];
/// Split names and fractions.
pub const SPLITS: [(&str, f64); 3] = [("train", 0.7), ("val", 0.1), ("test", 0.2)];

/// Per-label mean intensities at one age.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastKnot {
    pub age: f64,
    pub means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub grid_size: [usize; 3],
    pub spacing: [f64; 3],
    pub num_subjects: usize,
    /// Inclusive range of timepoints per subject.
    pub timepoints_per_subject: [usize; 2],
    /// Ages are drawn inside this interval unless `fixed_ages` is set.
    pub age_range: [f64; 2],
    pub fixed_ages: Option<Vec<f64>>,
    pub num_labels: u16,
    /// Piecewise-linear in age, constant beyond the end knots.
    pub contrast_schedule: Vec<ContrastKnot>,
    /// Semi-axis growth in voxels per unit age, counted from `age_range[0]`.
    pub growth_rate: f64,
    /// Range of the outer ellipsoid's semi-axes (voxels) at the first age.
    pub outer_axes: [f64; 2],
    /// Maximum offset (voxels) of the centre from the grid centre.
    pub center_jitter: f64,
    pub noise_std: f64,
    pub rng_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid_size: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            num_subjects: 10,
            timepoints_per_subject: [2, 5],
            age_range: [0.0, 3.0],
            fixed_ages: None,
            num_labels: 4,
            contrast_schedule: vec![
                ContrastKnot {
                    age: 0.0,
                    means: vec![0.0, 0.3, 0.6, 0.9],
                },
                ContrastKnot {
                    age: 3.0,
                    means: vec![0.0, 0.4, 0.75, 0.95],
                },
            ],
            growth_rate: 1.0,
            outer_axes: [7.0, 9.0],
            center_jitter: 2.0,
            noise_std: 0.03,
            rng_seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Three fixed ages: inverted contrast, isointense labels 1 and 2, then
    /// full contrast at the last age.
    pub fn isointense() -> Self {
        Self {
            timepoints_per_subject: [3, 3],
            fixed_ages: Some(vec![0.5, 1.5, 2.5]),
            age_range: [0.5, 2.5],
            contrast_schedule: vec![
                ContrastKnot {
                    age: 0.5,
                    means: vec![0.0, 0.55, 0.3, 0.1],
                },
                ContrastKnot {
                    age: 1.5,
                    means: vec![0.0, 0.5, 0.5, 0.1],
                },
                ContrastKnot {
                    age: 2.5,
                    means: vec![0.0, 0.4, 0.8, 0.1],
                },
            ],
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "isointense" => Ok(Self::isointense()),
            other => Err(Error::Config(format!("unknown phantom preset {other:?}"))),
        }
    }

    fn max_age(&self) -> f64 {
        match &self.fixed_ages {
            Some(a) => a.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            None => self.age_range[1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_size.iter().any(|&g| g < 8) {
            return bad(format!("grid {:?} is smaller than 8 voxels", self.grid_size));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("spacing must be positive".into());
        }
        if !(2..=4).contains(&self.num_labels) {
            return bad("num_labels must be between 2 and 4".into());
        }
        let [tmin, tmax] = self.timepoints_per_subject;
        if tmin < 1 || tmin > tmax {
            return bad("timepoints_per_subject must be a non-empty range starting at 1 or more".into());
        }
        if !(self.age_range[1] > self.age_range[0]) && self.fixed_ages.is_none() {
            return bad("age_range must be increasing".into());
        }
        if let Some(ages) = &self.fixed_ages {
            if ages.is_empty() || ages.windows(2).any(|w| !(w[1] > w[0])) {
                return bad("fixed_ages must be non-empty and strictly increasing".into());
            }
            if ages[0] < self.age_range[0] {
                return bad("fixed_ages must not precede age_range[0]".into());
            }
        }
        if self.contrast_schedule.is_empty()
            || self.contrast_schedule.windows(2).any(|w| !(w[1].age > w[0].age))
        {
            return bad("contrast_schedule needs knots with increasing ages".into());
        }
        if self
            .contrast_schedule
            .iter()
            .any(|k| k.means.len() != self.num_labels as usize)
        {
            return bad("every contrast knot needs one mean per label".into());
        }
        if !(self.noise_std >= 0.0 && self.growth_rate >= 0.0 && self.center_jitter >= 0.0) {
            return bad("noise, growth and jitter must be non-negative".into());
        }
        if !(self.outer_axes[0] > 1.0 && self.outer_axes[1] >= self.outer_axes[0]) {
            return bad("outer_axes must be an increasing range above one voxel".into());
        }
        let reach = self.outer_axes[1]
            + self.growth_rate * (self.max_age() - self.age_range[0])
            + self.center_jitter
            + 1.0;
        if let Some(g) = self.grid_size.iter().find(|&&g| reach > g as f64 / 2.0) {
            return bad(format!(
                "geometry reaches {reach:.2} voxels from the centre but the grid half-width is {}",
                *g as f64 / 2.0
            ));
        }
        Ok(())
    }

    /// Per-label means at `age`.
    pub fn contrast_at(&self, age: f64) -> Vec<f64> {
        let ks = &self.contrast_schedule;
        if age <= ks[0].age {
            return ks[0].means.clone();
        }
        for w in ks.windows(2) {
            if age <= w[1].age {
                let t = (age - w[0].age) / (w[1].age - w[0].age);
                return w[0]
                    .means
                    .iter()
                    .zip(&w[1].means)
                    .map(|(a, b)| a + t * (b - a))
                    .collect();
            }
        }
        ks[ks.len() - 1].means.clone()
    }
}

/// Per-subject random geometry.
#[derive(Debug, Clone, PartialEq)]
struct Geometry {
    center: [f64; 3],
    axes: [f64; 3],
}

fn subject_ages(cfg: &PhantomConfig, rng: &mut impl Rng) -> Vec<f64> {
    if let Some(a) = &cfg.fixed_ages {
        return a.clone();
    }
    let [tmin, tmax] = cfg.timepoints_per_subject;
    let t = rng.gen_range(tmin..=tmax);
    let [lo, hi] = cfg.age_range;
    let bin = (hi - lo) / t as f64;
    // one age per equal bin, away from the bin edges so ages stay distinct
    (0..t)
        .map(|k| lo + bin * (k as f64 + rng.gen_range(0.25..0.75)))
        .collect()
}

/// Label map at one age: the innermost shell containing each voxel centre.
fn label_map(cfg: &PhantomConfig, g: &Geometry, age: f64) -> Array3<u16> {
    let grow = cfg.growth_rate * (age - cfg.age_range[0]);
    let shells = (cfg.num_labels - 1) as usize;
    let [w, h, d] = cfg.grid_size;
    Array3::from_shape_fn((w, h, d), |(x, y, z)| {
        let p = [x as f64, y as f64, z as f64];
        let mut label = 0u16;
        for (s, ratio) in SHELL_RATIOS.iter().take(shells).enumerate() {
            let r2: f64 = (0..3)
                .map(|a| ((p[a] - g.center[a]) / (g.axes[a] * ratio + grow)).powi(2))
                .sum();
            if r2 <= 1.0 {
                label = s as u16 + 1;
            }
        }
        label
    })
}

/// One subject's registered time series. `subject_seed` fully determines it.
pub fn generate_subject(cfg: &PhantomConfig, subject_id: &str, subject_seed: u64) -> Result<SubjectTimeSeries> {
    cfg.validate()?;
    let mut rng = rng_from(subject_seed, &[]);
    let mid = cfg.grid_size.map(|g| (g as f64 - 1.0) / 2.0);
    let j = cfg.center_jitter;
    let geometry = Geometry {
        center: mid.map(|c| c + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 }),
        axes: [0; 3].map(|_| rng.gen_range(cfg.outer_axes[0]..=cfg.outer_axes[1])),
    };
    let ages = subject_ages(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let [w, h, d] = cfg.grid_size;
    let mut timepoints = Vec::with_capacity(ages.len());
    for (t, &age) in ages.iter().enumerate() {
        let labels = label_map(cfg, &geometry, age);
        let means = cfg.contrast_at(age);
        let mut noise_rng = rng_from(subject_seed, &[t as u64]);
        let data = Array4::from_shape_fn((w, h, d, 1), |(x, y, z, _)| {
            let m = means[labels[[x, y, z]] as usize];
            let n = if cfg.noise_std > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            (m + n) as f32
        });
        let image = Volume::new(data, cfg.spacing, format!("{subject_id}_{age:.3}"))?;
        timepoints.push(Timepoint {
            age,
            image: Arc::new(image),
            label: Some(Arc::new(LabelVolume::new(labels, cfg.num_labels)?)),
        });
    }
    SubjectTimeSeries::new(subject_id, timepoints)
}

/// Subject counts per split: largest remainder on the nominal fractions
/// (ties to the earlier split), then every split raised to at least one by
/// taking from the largest.
pub fn split_sizes(n: usize) -> Result<[usize; 3]> {
    if n < SPLITS.len() {
        return Err(Error::Config(format!("need at least {} subjects to split, got {n}", SPLITS.len())));
    }
    let exact: Vec<f64> = SPLITS.iter().map(|(_, f)| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let short = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        sizes[i] += 1;
    }
    while let Some(i) = sizes.iter().position(|&s| s == 0) {
        let largest = (0..sizes.len()).max_by_key(|&k| (sizes[k], usize::MAX - k)).expect("non-empty");
        sizes[largest] -= 1;
        sizes[i] += 1;
    }
    Ok([sizes[0], sizes[1], sizes[2]])
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{index:03}")
}

/// Writes every subject and `manifest.json` under `root`.
pub fn generate_dataset(cfg: &PhantomConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    if cfg.num_subjects < 5 {
        return Err(Error::Config("a dataset needs at least 5 subjects".into()));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let entries = par::map_range(cfg.num_subjects, |i| -> Result<SubjectEntry> {
        let id = subject_id(i);
        let series = generate_subject(cfg, &id, crate::rng::derive_seed(cfg.rng_seed, &[stream::SUBJECT, i as u64]))?;
        let dir = root.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut tps = Vec::new();
        for tp in series.timepoints() {
            let img = format!("{id}/{:.3}_img.vol", tp.age);
            let lbl = format!("{id}/{:.3}_lbl.vol", tp.age);
            save_volume(&tp.image, root.join(&img))?;
            if let Some(l) = &tp.label {
                save_labels(l, tp.image.spacing(), root.join(&lbl))?;
            }
            tps.push(TimepointEntry {
                age: tp.age,
                image: img,
                label: tp.label.as_ref().map(|_| lbl),
            });
        }
        Ok(SubjectEntry {
            subject_id: id,
            timepoints: tps,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut ids: Vec<String> = entries.iter().map(|e| e.subject_id.clone()).collect();
    let mut rng = rng_from(cfg.rng_seed, &[stream::SPLIT]);
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.gen_range(0..=i));
    }
    let sizes = split_sizes(ids.len())?;
    let mut splits = BTreeMap::new();
    let mut start = 0;
    for ((name, _), n) in SPLITS.iter().zip(sizes) {
        let mut members = ids[start..start + n].to_vec();
        members.sort();
        splits.insert(name.to_string(), members);
        start += n;
    }
    let manifest = DatasetManifest::new(cfg.num_labels, 0, entries, splits, root)?;
    manifest.save(root.join("manifest.json"))?;
    let cfg_path = root.join("phantom.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}
