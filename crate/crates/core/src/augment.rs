//! Geometric and intensity augmentation.
//!
//! Geometric transforms act in voxel coordinates about the grid centre and
//! resample by pulling each output voxel back into the input. Intensity
//! transforms never move the sampling grid.

use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::{Array3, Array4, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::volume::{LabelVolume, Volume};

pub const MAX_ROTATION: f64 = 0.15;
pub const SCALE_RANGE: [f64; 2] = [0.9, 1.1];
pub const MAX_TRANSLATION: f64 = 4.0;
pub const GAMMA_RANGE: [f64; 2] = [0.7, 1.5];
pub const MAX_BLUR_SIGMA: f64 = 2.0;
/// Largest per-axis shift of a motion ghost, in voxels.
pub const MOTION_SHIFT: i64 = 2;
/// Bias-field basis: all monomials of degree 1 and 2 in the normalised
/// coordinates `u = (x, y, z)`, in this order.
pub const BIAS_TERMS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricParams {
    pub flip: [bool; 3],
    /// Euler angles (radians) about x, y, z.
    pub rotation: [f64; 3],
    pub scale: [f64; 3],
    /// Voxels; content moves by `+translation`.
    pub translation: [f64; 3],
}

impl GeometricParams {
    pub fn identity() -> Self {
        Self {
            flip: [false; 3],
            rotation: [0.0; 3],
            scale: [1.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation.iter().all(|r| r.abs() <= MAX_ROTATION)
            && self
                .scale
                .iter()
                .all(|s| (SCALE_RANGE[0]..=SCALE_RANGE[1]).contains(s))
            && self.translation.iter().all(|t| t.abs() <= MAX_TRANSLATION);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("geometric parameters out of range: {self:?}")))
        }
    }

    /// Output-to-input map: `q = m (p - c - t) + c`.
    fn pullback(&self) -> Matrix3<f64> {
        let r = Rotation3::from_euler_angles(self.rotation[0], self.rotation[1], self.rotation[2]);
        let s_inv = Matrix3::from_diagonal(&Vector3::from(self.scale.map(|s| 1.0 / s)));
        s_inv * r.matrix().transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityParams {
    pub blur_sigma: f64,
    pub noise_std: f64,
    pub gamma: f64,
    /// Coefficients of the log bias field over [`BIAS_TERMS`] monomials.
    /// Empty means no bias.
    pub bias: Vec<f64>,
    /// Number of shifted ghost copies averaged into the image.
    pub motion_severity: u32,
    /// Seeds the noise field and the ghost shifts.
    pub seed: u64,
}

impl IntensityParams {
    pub fn identity() -> Self {
        Self {
            blur_sigma: 0.0,
            noise_std: 0.0,
            gamma: 1.0,
            bias: Vec::new(),
            motion_severity: 0,
            seed: 0,
        }
    }

    /// Well-formed parameters that [`apply_intensity`] can evaluate.
    fn check_applicable(&self) -> Result<()> {
        let ok = self.blur_sigma >= 0.0
            && self.blur_sigma.is_finite()
            && self.noise_std >= 0.0
            && self.noise_std.is_finite()
            && self.gamma > 0.0
            && self.gamma.is_finite()
            && (self.bias.is_empty() || self.bias.len() == BIAS_TERMS)
            && self.bias.iter().all(|b| b.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("malformed intensity parameters: {self:?}")))
        }
    }

    /// Parameters inside the sampling ranges.
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=MAX_BLUR_SIGMA).contains(&self.blur_sigma)
            && self.noise_std >= 0.0
            && self.noise_std.is_finite()
            && (GAMMA_RANGE[0]..=GAMMA_RANGE[1]).contains(&self.gamma)
            && (self.bias.is_empty() || self.bias.len() == BIAS_TERMS)
            && self.bias.iter().all(|b| b.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("intensity parameters out of range: {self:?}")))
        }
    }
}

/// Sampling ranges and on/off switches, read from the training config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub geometric: bool,
    pub intensity: bool,
    /// Per-axis flip probability; only left-right by default.
    pub flip_prob: [f64; 3],
    pub max_rotation: f64,
    pub scale: [f64; 2],
    pub max_translation: f64,
    pub max_blur_sigma: f64,
    pub max_noise_std: f64,
    pub gamma: [f64; 2],
    pub max_bias_coef: f64,
    pub max_motion: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            geometric: true,
            intensity: true,
            flip_prob: [0.5, 0.0, 0.0],
            max_rotation: 0.1,
            scale: [0.95, 1.05],
            max_translation: 2.0,
            max_blur_sigma: 1.0,
            max_noise_std: 0.05,
            gamma: [0.7, 1.5],
            max_bias_coef: 0.2,
            max_motion: 2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            geometric: false,
            intensity: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = GeometricParams {
            flip: [false; 3],
            rotation: [self.max_rotation; 3],
            scale: [self.scale[0], self.scale[1], self.scale[1]],
            translation: [self.max_translation; 3],
        };
        let mut a = IntensityParams {
            blur_sigma: self.max_blur_sigma,
            noise_std: self.max_noise_std,
            gamma: self.gamma[0],
            ..IntensityParams::identity()
        };
        let probs = self.flip_prob.iter().all(|p| (0.0..=1.0).contains(p));
        let ordered = self.scale[0] <= self.scale[1]
            && self.gamma[0] <= self.gamma[1]
            && self.max_rotation >= 0.0
            && self.max_translation >= 0.0
            && self.max_bias_coef >= 0.0;
        if !(probs && ordered) {
            return Err(Error::Config(format!("augmentation ranges are malformed: {self:?}")));
        }
        g.validate()?;
        a.validate()?;
        a.gamma = self.gamma[1];
        a.validate()
    }

    pub fn sample_geometric(&self, rng: &mut impl Rng) -> GeometricParams {
        if !self.geometric {
            return GeometricParams::identity();
        }
        let sym = |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        GeometricParams {
            flip: self.flip_prob.map(|p| rng.gen_bool(p)),
            rotation: [0; 3].map(|_| sym(rng, self.max_rotation)),
            scale: [0; 3].map(|_| rng.gen_range(self.scale[0]..=self.scale[1])),
            translation: [0; 3].map(|_| sym(rng, self.max_translation)),
        }
    }

    pub fn sample_intensity(&self, rng: &mut impl Rng) -> IntensityParams {
        if !self.intensity {
            return IntensityParams::identity();
        }
        let b = self.max_bias_coef;
        IntensityParams {
            blur_sigma: rng.gen_range(0.0..=self.max_blur_sigma),
            noise_std: rng.gen_range(0.0..=self.max_noise_std),
            gamma: rng.gen_range(self.gamma[0]..=self.gamma[1]),
            bias: if b > 0.0 {
                (0..BIAS_TERMS).map(|_| rng.gen_range(-b..=b)).collect()
            } else {
                Vec::new()
            },
            motion_severity: rng.gen_range(0..=self.max_motion),
            seed: rng.gen(),
        }
    }
}

fn center(dims: [usize; 3]) -> Vector3<f64> {
    Vector3::from(dims.map(|n| (n as f64 - 1.0) / 2.0))
}

/// Input coordinate for every output voxel, after undoing the flip.
fn source_coords(dims: [usize; 3], g: &GeometricParams) -> impl Fn([usize; 3]) -> [f64; 3] {
    let m = g.pullback();
    let c = center(dims);
    let t = Vector3::from(g.translation);
    let flip = g.flip;
    move |p| {
        let p = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
        let q = m * (p - c - t) + c;
        let mut out = [0.0; 3];
        for a in 0..3 {
            // snap values that are integers up to rounding so pure shifts are exact
            let v = if (q[a] - q[a].round()).abs() < 1e-9 { q[a].round() } else { q[a] };
            out[a] = if flip[a] { dims[a] as f64 - 1.0 - v } else { v };
        }
        out
    }
}

fn trilinear(src: ArrayView3<'_, f32>, q: [f64; 3]) -> f32 {
    let (w, h, d) = src.dim();
    let n = [w as i64, h as i64, d as i64];
    let base = q.map(|v| v.floor());
    let frac = [q[0] - base[0], q[1] - base[1], q[2] - base[2]];
    let b = base.map(|v| v as i64);
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let mut wgt = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            let i = b[a] + hi as i64;
            wgt *= if hi { frac[a] } else { 1.0 - frac[a] };
            inside &= i >= 0 && i < n[a];
            idx[a] = i.max(0) as usize;
        }
        if inside && wgt != 0.0 {
            acc += wgt * src[idx] as f64;
        }
    }
    acc as f32
}

/// Flip then affine resample with trilinear interpolation and zero padding.
pub fn apply_geometric(v: &Volume, g: &GeometricParams) -> Result<Volume> {
    if g.is_identity() {
        return Ok(v.clone());
    }
    let dims = v.dims();
    let map = source_coords(dims, g);
    let coords = Array3::from_shape_fn(dims, |(x, y, z)| map([x, y, z]));
    let mut out = Array4::zeros(v.data().raw_dim());
    for c in 0..v.channels() {
        let src = v.channel(c);
        Zip::from(out.index_axis_mut(Axis(3), c))
            .and(&coords)
            .for_each(|o, &q| *o = trilinear(src, q));
    }
    v.map_data(out)
}

/// The same transform as [`apply_geometric`] with nearest-neighbour lookup;
/// voxels pulled from outside the grid become background.
pub fn apply_geometric_labels(l: &LabelVolume, g: &GeometricParams) -> Result<LabelVolume> {
    if g.is_identity() {
        return Ok(l.clone());
    }
    let dims = l.dims();
    let map = source_coords(dims, g);
    let src = l.data();
    let out = Array3::from_shape_fn(dims, |(x, y, z)| {
        let q = map([x, y, z]);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = q[a].round();
            if r < 0.0 || r >= dims[a] as f64 {
                return 0;
            }
            idx[a] = r as usize;
        }
        src[idx]
    });
    LabelVolume::new(out, l.num_labels())
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge replication.
fn blur(x: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut cur = x.clone();
    for axis in 0..3 {
        let n = cur.shape()[axis] as i64;
        let mut next = Array3::zeros(cur.raw_dim());
        for (mut dst, src) in next.lanes_mut(Axis(axis)).into_iter().zip(cur.lanes(Axis(axis))) {
            for i in 0..n {
                dst[i as usize] = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * src[(i + j as i64 - r).clamp(0, n - 1) as usize])
                    .sum();
            }
        }
        cur = next;
    }
    cur
}

fn bias_field(dims: [usize; 3], coef: &[f64]) -> Array3<f64> {
    let norm = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    Array3::from_shape_fn(dims, |(x, y, z)| {
        let (u, v, w) = (norm(x, dims[0]), norm(y, dims[1]), norm(z, dims[2]));
        let basis = [u, v, w, u * u, v * v, w * w, u * v, u * w, v * w];
        basis.iter().zip(coef).map(|(b, c)| b * c).sum::<f64>().exp()
    })
}

/// Copy of `x` moved by `shift`, replicating edges.
fn shifted(x: &Array3<f64>, shift: [i64; 3]) -> Array3<f64> {
    let (w, h, d) = x.dim();
    let n = [w as i64, h as i64, d as i64];
    let at = |i: usize, a: usize| (i as i64 - shift[a]).clamp(0, n[a] - 1) as usize;
    Array3::from_shape_fn((w, h, d), |(i, j, k)| x[[at(i, 0), at(j, 1), at(k, 2)]])
}

/// Blur, additive noise, sign-preserving gamma, multiplicative bias field,
/// then motion ghosts (the image averaged with shifted copies of itself).
pub fn apply_intensity(v: &Volume, a: &IntensityParams) -> Result<Volume> {
    a.check_applicable()?;
    let dims = v.dims();
    let bias = (!a.bias.is_empty()).then(|| bias_field(dims, &a.bias));
    let mut rng = rng_from(a.seed, &[]);
    let noise = Normal::new(0.0, a.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let shifts: Vec<[i64; 3]> = (0..a.motion_severity)
        .map(|_| [0; 3].map(|_| rng.gen_range(-MOTION_SHIFT..=MOTION_SHIFT)))
        .collect();
    let mut out = Array4::zeros(v.data().raw_dim());
    for c in 0..v.channels() {
        let mut x = v.channel(c).mapv(f64::from);
        if a.blur_sigma > 0.0 {
            x = blur(&x, a.blur_sigma);
        }
        if a.noise_std > 0.0 {
            x.iter_mut().for_each(|e| *e += noise.sample(&mut rng));
        }
        if a.gamma != 1.0 {
            x.mapv_inplace(|e| e.signum() * e.abs().powf(a.gamma));
        }
        if let Some(b) = &bias {
            x *= b;
        }
        if !shifts.is_empty() {
            let mut acc = x.clone();
            for s in &shifts {
                acc += &shifted(&x, *s);
            }
            x = acc / (shifts.len() + 1) as f64;
        }
        out.index_axis_mut(Axis(3), c).assign(&x.mapv(|e| e as f32));
    }
    v.map_data(out)
}

/// `(input, target)` for the reconstruction term: the target is the
/// geometrically transformed image and the input additionally carries the
/// intensity corruption.
pub fn make_denoising_pair(x: &Volume, g: &GeometricParams, a: &IntensityParams) -> Result<(Volume, Volume)> {
    let target = apply_geometric(x, g)?;
    let input = apply_intensity(&target, a)?;
    Ok((input, target))
}

/// One draw of both families, shared by every timepoint of a pair so voxel
/// correspondence survives augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct PairAugmentation {
    pub geometric: GeometricParams,
    pub intensity: IntensityParams,
}

impl PairAugmentation {
    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let geometric = cfg.sample_geometric(rng);
        let intensity = cfg.sample_intensity(rng);
        Self { geometric, intensity }
    }

    pub fn apply(&self, x: &Volume) -> Result<(Volume, Volume)> {
        make_denoising_pair(x, &self.geometric, &self.intensity)
    }
}
