//! Volumes, label maps, subject time series and the on-disk container.
//!
//! Container layout: one UTF-8 JSON header line terminated by `\n`,
//!
//! ```text
//! {"dims":[W,H,D,C],"spacing":[sx,sy,sz],"dtype":"f32","order":"row-major"}
//! ```
//!
//! followed by `W*H*D*C` little-endian values (`f32` for images, `u16` for
//! label maps, whose header carries `C = 1`). Row-major means the channel
//! index varies fastest and `x` slowest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, stream};

/// A 3D multi-channel image, `W x H x D x C`, with voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array4<f32>,
    spacing: [f64; 3],
    id: String,
}

impl Volume {
    pub fn new(data: Array4<f32>, spacing: [f64; 3], id: impl Into<String>) -> Result<Self> {
        if data.shape().iter().any(|&n| n == 0) {
            return Err(Error::InvalidVolume(format!(
                "every dimension must be >= 1, got {:?}",
                data.shape()
            )));
        }
        check_spacing(&spacing)?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite value at element {i}")));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().to_owned()
        };
        Ok(Self {
            data,
            spacing,
            id: id.into(),
        })
    }

    /// Single-channel volume of zeros.
    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], id: impl Into<String>) -> Result<Self> {
        Self::new(
            Array4::zeros((dims[0], dims[1], dims[2], 1)),
            spacing,
            id,
        )
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    /// One channel as a `W x H x D` view.
    pub fn channel(&self, c: usize) -> ArrayView3<'_, f32> {
        self.data.slice(s![.., .., .., c])
    }

    /// Replaces the voxel data, keeping spacing and identifier.
    pub fn map_data(&self, data: Array4<f32>) -> Result<Self> {
        Self::new(data, self.spacing, self.id.clone())
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }
}

/// Integer label map, `W x H x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    data: Array3<u16>,
    num_labels: u16,
}

impl LabelVolume {
    pub fn new(data: Array3<u16>, num_labels: u16) -> Result<Self> {
        if num_labels == 0 {
            return Err(Error::InvalidVolume("num_labels must be positive".into()));
        }
        if data.shape().iter().any(|&n| n == 0) {
            return Err(Error::InvalidVolume(format!(
                "every dimension must be >= 1, got {:?}",
                data.shape()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v >= num_labels) {
            return Err(Error::InvalidVolume(format!(
                "label {v} out of range for {num_labels} labels"
            )));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().to_owned()
        };
        Ok(Self { data, num_labels })
    }

    pub fn data(&self) -> &Array3<u16> {
        &self.data
    }

    pub fn num_labels(&self) -> u16 {
        self.num_labels
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    /// Binary mask of one label.
    pub fn mask(&self, label: u16) -> Array3<bool> {
        self.data.mapv(|v| v == label)
    }

    pub fn count(&self, label: u16) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }
}

fn check_spacing(spacing: &[f64; 3]) -> Result<()> {
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidVolume(format!(
            "spacing components must be positive, got {spacing:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 4],
    spacing: [f64; 3],
    dtype: String,
    order: String,
}

const ORDER: &str = "row-major";

fn write_container(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let mut bytes = serde_json::to_vec(header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(payload);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn read_container(path: &Path, dtype: &str, width: usize) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Header {
        path: path.to_path_buf(),
        reason,
    };
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("no header terminator".into()))?;
    let text = std::str::from_utf8(&bytes[..newline]).map_err(|e| bad(e.to_string()))?;
    let header: Header = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if header.dtype != dtype {
        return Err(bad(format!("dtype {:?}, expected {dtype:?}", header.dtype)));
    }
    if header.order != ORDER {
        return Err(bad(format!("order {:?}, expected {ORDER:?}", header.order)));
    }
    if header.dims.iter().any(|&d| d == 0) {
        return Err(bad(format!("zero dimension in {:?}", header.dims)));
    }
    if header.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(bad(format!("non-positive spacing {:?}", header.spacing)));
    }
    let expected = header
        .dims
        .iter()
        .try_fold(width, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("dims overflow".into()))?;
    let payload = bytes[newline + 1..].to_vec();
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    Ok((header, payload))
}

/// Reads an image container. The identifier is the file stem.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (header, payload) = read_container(path, "f32", 4)?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            path: path.to_path_buf(),
            index,
        });
    }
    let [w, h, d, c] = header.dims;
    let data = Array4::from_shape_vec((w, h, d, c), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Volume::new(data, header.spacing, id)
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = volume.data.shape();
    let header = Header {
        dims: [s[0], s[1], s[2], s[3]],
        spacing: volume.spacing,
        dtype: "f32".into(),
        order: ORDER.into(),
    };
    let mut payload = Vec::with_capacity(volume.data.len() * 4);
    for v in volume.data.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_container(path, &header, &payload)
}

/// Reads a label container; values must be below `num_labels`.
pub fn load_labels(path: impl AsRef<Path>, num_labels: u16) -> Result<(LabelVolume, [f64; 3])> {
    let path = path.as_ref();
    let (header, payload) = read_container(path, "u16", 2)?;
    let [w, h, d, c] = header.dims;
    if c != 1 {
        return Err(Error::Header {
            path: path.to_path_buf(),
            reason: format!("label maps carry one channel, header says {c}"),
        });
    }
    let values: Vec<u16> = payload
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let data =
        Array3::from_shape_vec((w, h, d), values).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((LabelVolume::new(data, num_labels)?, header.spacing))
}

pub fn save_labels(labels: &LabelVolume, spacing: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
    check_spacing(&spacing)?;
    let [w, h, d] = labels.dims();
    let header = Header {
        dims: [w, h, d, 1],
        spacing,
        dtype: "u16".into(),
        order: ORDER.into(),
    };
    let mut payload = Vec::with_capacity(labels.data.len() * 2);
    for v in labels.data.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_container(path.as_ref(), &header, &payload)
}

/// One acquisition of a subject.
#[derive(Debug, Clone)]
pub struct Timepoint {
    pub age: f64,
    pub image: Arc<Volume>,
    pub label: Option<Arc<LabelVolume>>,
}

/// Registered acquisitions of one subject, ordered by age.
#[derive(Debug, Clone)]
pub struct SubjectTimeSeries {
    subject_id: String,
    timepoints: Vec<Timepoint>,
}

impl SubjectTimeSeries {
    pub fn new(subject_id: impl Into<String>, timepoints: Vec<Timepoint>) -> Result<Self> {
        let subject_id = subject_id.into();
        let first = timepoints
            .first()
            .ok_or_else(|| Error::Dataset(format!("{subject_id}: no timepoints")))?;
        let dims = first.image.dims();
        let channels = first.image.channels();
        let spacing = first.image.spacing();
        for pair in timepoints.windows(2) {
            if !(pair[1].age > pair[0].age) {
                return Err(Error::Dataset(format!(
                    "{subject_id}: ages must be strictly increasing ({} then {})",
                    pair[0].age, pair[1].age
                )));
            }
        }
        for tp in &timepoints {
            if tp.image.dims() != dims || tp.image.channels() != channels {
                return Err(Error::Dataset(format!(
                    "{subject_id}: timepoints differ in shape ({:?} vs {dims:?})",
                    tp.image.dims()
                )));
            }
            if tp.image.spacing() != spacing {
                return Err(Error::Dataset(format!(
                    "{subject_id}: timepoints differ in spacing"
                )));
            }
            if let Some(label) = &tp.label {
                if label.dims() != dims {
                    return Err(Error::Dataset(format!(
                        "{subject_id}: label shape {:?} does not match image {dims:?}",
                        label.dims()
                    )));
                }
            }
        }
        Ok(Self {
            subject_id,
            timepoints,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn timepoints(&self) -> &[Timepoint] {
        &self.timepoints
    }

    pub fn len(&self) -> usize {
        self.timepoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timepoints.is_empty()
    }

    pub fn is_longitudinal(&self) -> bool {
        self.timepoints.len() >= 2
    }

    pub fn dims(&self) -> [usize; 3] {
        self.timepoints[0].image.dims()
    }
}

/// Uniformly samples a crop origin so that a `size` crop fits in `dims`.
pub fn sample_crop_offset(
    dims: [usize; 3],
    size: [usize; 3],
    rng: &mut impl rand::Rng,
) -> Result<[usize; 3]> {
    let mut offset = [0; 3];
    for a in 0..3 {
        if size[a] == 0 || size[a] > dims[a] {
            return Err(Error::Shape(format!(
                "crop {size:?} does not fit volume {dims:?}"
            )));
        }
        offset[a] = rng.gen_range(0..=dims[a] - size[a]);
    }
    Ok(offset)
}

/// Extracts a crop of `size` voxels starting at `offset`.
pub fn crop_volume(volume: &Volume, offset: [usize; 3], size: [usize; 3]) -> Result<Volume> {
    let dims = volume.dims();
    if (0..3).any(|a| offset[a] + size[a] > dims[a] || size[a] == 0) {
        return Err(Error::Shape(format!(
            "crop {size:?} at {offset:?} exceeds volume {dims:?}"
        )));
    }
    let view = volume.data().slice(s![
        offset[0]..offset[0] + size[0],
        offset[1]..offset[1] + size[1],
        offset[2]..offset[2] + size[2],
        ..
    ]);
    volume.map_data(view.to_owned())
}

pub fn crop_labels(labels: &LabelVolume, offset: [usize; 3], size: [usize; 3]) -> Result<LabelVolume> {
    let dims = labels.dims();
    if (0..3).any(|a| offset[a] + size[a] > dims[a] || size[a] == 0) {
        return Err(Error::Shape(format!(
            "crop {size:?} at {offset:?} exceeds label map {dims:?}"
        )));
    }
    let view = labels.data().slice(s![
        offset[0]..offset[0] + size[0],
        offset[1]..offset[1] + size[1],
        offset[2]..offset[2] + size[2]
    ]);
    LabelVolume::new(view.to_owned(), labels.num_labels())
}

/// Crops timepoints `j` and `k` of a series at one shared, seeded offset.
pub fn corresponding_crops(
    series: &SubjectTimeSeries,
    pair: (usize, usize),
    size: [usize; 3],
    rng_seed: u64,
) -> Result<(Volume, Volume, [usize; 3])> {
    let (j, k) = pair;
    let n = series.len();
    if j == k || j >= n || k >= n {
        return Err(Error::InvalidInput(format!(
            "timepoint pair ({j}, {k}) invalid for a series of {n}"
        )));
    }
    let mut rng = rng_from(rng_seed, &[stream::CROP]);
    let offset = sample_crop_offset(series.dims(), size, &mut rng)?;
    let a = crop_volume(&series.timepoints()[j].image, offset, size)?;
    let b = crop_volume(&series.timepoints()[k].image, offset, size)?;
    Ok((a, b, offset))
}

/// Manifest entry for one acquisition; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimepointEntry {
    pub age: f64,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub timepoints: Vec<TimepointEntry>,
}

/// JSON description of a dataset with subject-wise splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_labels: u16,
    /// Index of the timepoint every subject was registered to.
    pub reference_timepoint: usize,
    pub subjects: Vec<SubjectEntry>,
    pub splits: BTreeMap<String, Vec<String>>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(
        num_labels: u16,
        reference_timepoint: usize,
        subjects: Vec<SubjectEntry>,
        splits: BTreeMap<String, Vec<String>>,
        root: impl Into<PathBuf>,
    ) -> Result<Self> {
        let manifest = Self {
            num_labels,
            reference_timepoint,
            subjects,
            splits,
            root: root.into(),
        };
        manifest.check_structure()?;
        Ok(manifest)
    }

    /// Reads and validates a manifest, including the existence of every file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Self = serde_json::from_str(&text)?;
        manifest.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        manifest.check_structure()?;
        for subject in &manifest.subjects {
            for tp in &subject.timepoints {
                for rel in std::iter::once(&tp.image).chain(tp.label.iter()) {
                    let p = manifest.root.join(rel);
                    if !p.is_file() {
                        return Err(Error::Dataset(format!(
                            "{}: referenced file {} does not exist",
                            subject.subject_id,
                            p.display()
                        )));
                    }
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn check_structure(&self) -> Result<()> {
        if self.num_labels == 0 {
            return Err(Error::Dataset("num_labels must be positive".into()));
        }
        let mut ids = BTreeSet::new();
        for subject in &self.subjects {
            if !ids.insert(subject.subject_id.as_str()) {
                return Err(Error::Dataset(format!(
                    "duplicate subject {}",
                    subject.subject_id
                )));
            }
            if subject.timepoints.is_empty() {
                return Err(Error::Dataset(format!(
                    "{}: no timepoints",
                    subject.subject_id
                )));
            }
            for pair in subject.timepoints.windows(2) {
                if !(pair[1].age > pair[0].age) {
                    return Err(Error::Dataset(format!(
                        "{}: ages must be strictly increasing",
                        subject.subject_id
                    )));
                }
            }
        }
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (split, members) in &self.splits {
            for id in members {
                if !ids.contains(id.as_str()) {
                    return Err(Error::Dataset(format!(
                        "split {split} references unknown subject {id}"
                    )));
                }
                if let Some(other) = seen.insert(id.as_str(), split.as_str()) {
                    return Err(Error::Dataset(format!(
                        "subject {id} appears in splits {other} and {split}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Dataset(format!("no split named {name:?}")))
    }

    pub fn entry(&self, subject_id: &str) -> Result<&SubjectEntry> {
        self.subjects
            .iter()
            .find(|s| s.subject_id == subject_id)
            .ok_or_else(|| Error::Dataset(format!("unknown subject {subject_id}")))
    }

    /// Loads every volume (and label, when present) of one subject.
    pub fn load_subject(&self, subject_id: &str) -> Result<SubjectTimeSeries> {
        let entry = self.entry(subject_id)?;
        let mut timepoints = Vec::with_capacity(entry.timepoints.len());
        for tp in &entry.timepoints {
            let image = load_volume(self.root.join(&tp.image))?;
            let label = match &tp.label {
                Some(rel) => Some(Arc::new(load_labels(self.root.join(rel), self.num_labels)?.0)),
                None => None,
            };
            timepoints.push(Timepoint {
                age: tp.age,
                image: Arc::new(image),
                label,
            });
        }
        SubjectTimeSeries::new(subject_id, timepoints)
    }

    /// Loads all subjects of a split, in split order.
    pub fn load_split(&self, name: &str) -> Result<Vec<SubjectTimeSeries>> {
        self.split(name)?
            .iter()
            .map(|id| self.load_subject(id))
            .collect()
    }
}
