//! Collapse diagnostics on frozen models: feature similarity maps,
//! covariance spectra, effective rank and projection spread.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView4, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::Model;
use crate::nn::Mode;
use crate::volume::{save_volume, SubjectTimeSeries, Volume};

pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-2;
/// Added to the variance before the square root, as in the variance loss.
pub const STD_EPS: f64 = 1e-4;
const NORM_EPS: f64 = 1e-12;

/// Projector outputs of one layer laid out as `(w, h, d, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProjection {
    pub level: usize,
    pub z: Array4<f32>,
    /// Before any final normalization.
    pub raw: Array4<f32>,
}

/// Projects every spatial position of the requested layers for one volume.
pub fn project_volume(model: &mut Model, vol: &Volume, layers: &BTreeSet<usize>) -> Result<BTreeMap<usize, LayerProjection>> {
    let x = vol.data().view().insert_axis(Axis(0));
    let (_, feats, _) = model.unet.forward(x, layers, Mode::Eval)?;
    let defs = model.unet.spec().layers();
    let heads = model
        .heads
        .as_mut()
        .ok_or_else(|| Error::InvalidInput("diagnostics need a checkpoint with projection heads".into()))?;
    let mut out = BTreeMap::new();
    for &l in layers {
        let f = feats.get(l).expect("tapped");
        let (_, w, h, d, c) = f.dim();
        let rows = f
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((w * h * d, c))
            .expect("contiguous");
        let (z, pass) = heads.project_pass(rows.view(), l, Mode::Eval)?;
        let n = z.ncols();
        let shape = (w, h, d, n);
        out.insert(
            l,
            LayerProjection {
                level: defs[l].level,
                z: z.into_shape_with_order(shape).expect("same size"),
                raw: pass.raw_projection().clone().into_shape_with_order(shape).expect("same size"),
            },
        );
    }
    Ok(out)
}

/// Cosine between the vector at `q` in `zq` and every position of `zk`.
pub fn similarity_map_from(zq: ArrayView4<'_, f32>, zk: ArrayView4<'_, f32>, q: [usize; 3]) -> Result<Array3<f64>> {
    let (w, h, d, n) = zk.dim();
    if zq.dim().3 != n {
        return Err(Error::Shape(format!("projection widths differ: {} vs {n}", zq.dim().3)));
    }
    let (qw, qh, qd, _) = zq.dim();
    if q[0] >= qw || q[1] >= qh || q[2] >= qd {
        return Err(Error::InvalidInput(format!("query {q:?} outside layer extent {:?}", [qw, qh, qd])));
    }
    let a = zq.slice(s![q[0], q[1], q[2], ..]).mapv(f64::from);
    let na = a.dot(&a).sqrt().max(NORM_EPS);
    let k = zk.mapv(f64::from).into_shape_with_order((w * h * d, n)).expect("contiguous");
    let dots = k.dot(&a);
    let norms = k.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_EPS));
    let cos = (dots / norms / na).mapv(|c| c.clamp(-1.0, 1.0));
    Ok(cos.into_shape_with_order((w, h, d)).expect("same size"))
}

/// Similarity of the projection at `query` (layer coordinates) in `vol_q`
/// to every position of `vol_k`, at `layer`.
pub fn similarity_map(model: &mut Model, vol_q: &Volume, vol_k: &Volume, query: [usize; 3], layer: usize) -> Result<Array3<f64>> {
    let set = BTreeSet::from([layer]);
    let pq = project_volume(model, vol_q, &set)?.remove(&layer).expect("projected");
    let pk = project_volume(model, vol_k, &set)?.remove(&layer).expect("projected");
    similarity_map_from(pq.z.view(), pk.z.view(), query)
}

/// Eigenvalues, in descending order, of `C = (1/c) sum_i (z_i - zbar)(z_i - zbar)^T`
/// where `z_i` is channel `i` of the axial slice `slice` flattened over its
/// `w h` positions and `zbar` the mean over channels. `C` is symmetric
/// positive semi-definite, so these are also its singular values.
pub fn covariance_spectrum_from(z: ArrayView4<'_, f32>, slice: usize) -> Result<Vec<f64>> {
    let (w, h, d, c) = z.dim();
    if slice >= d {
        return Err(Error::InvalidInput(format!("slice {slice} outside depth {d}")));
    }
    let zc = centered_slice(z, slice);
    // C = Zc Zc^T / c, so its nonzero eigenvalues are the squared singular
    // values of Zc divided by c
    let m = DMatrix::from_row_slice(w * h, c, zc.as_standard_layout().as_slice().expect("contiguous"));
    let mut sv: Vec<f64> = m.singular_values().iter().map(|s| s * s / c as f64).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.resize(w * h, 0.0);
    Ok(sv)
}

/// `(w h, c)` matrix whose column `i` is `z_i - zbar`.
fn centered_slice(z: ArrayView4<'_, f32>, slice: usize) -> Array2<f64> {
    let (w, h, _, c) = z.dim();
    let mut m = z
        .slice(s![.., .., slice, ..])
        .mapv(f64::from)
        .into_shape_with_order((w * h, c))
        .expect("contiguous");
    let mean = m.mean_axis(Axis(1)).expect("c > 0");
    for mut col in m.columns_mut() {
        col -= &mean;
    }
    m
}

/// The spectrum of `layer` on the mid-axial slice (or `slice`).
pub fn covariance_spectrum(model: &mut Model, vol: &Volume, layer: usize, slice: Option<usize>) -> Result<Vec<f64>> {
    let p = project_volume(model, vol, &BTreeSet::from([layer]))?.remove(&layer).expect("projected");
    let d = p.z.dim().2;
    covariance_spectrum_from(p.z.view(), slice.unwrap_or(d / 2))
}

/// Number of values above `rel_threshold` times the largest.
pub fn effective_rank(sv: &[f64], rel_threshold: f64) -> usize {
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&v| v > rel_threshold * max).count()
}

/// Mean over columns of `sqrt(var + eps)`, variance unbiased over rows.
pub fn feature_std(z: ArrayView2<'_, f64>, eps: f64) -> Result<f64> {
    let (m, n) = z.dim();
    if m < 2 || n == 0 {
        return Err(Error::InvalidInput(format!("need at least two samples of one feature, got {m}x{n}")));
    }
    let mean = z.mean_axis(Axis(0)).expect("m > 0");
    let total: f64 = z
        .columns()
        .into_iter()
        .zip(mean.iter())
        .map(|(col, mu)| (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m - 1) as f64 + eps).sqrt())
        .sum();
    Ok(total / n as f64)
}

/// Spread of the unnormalized projections of each layer over all positions.
pub fn projection_std(model: &mut Model, vol: &Volume, layers: &BTreeSet<usize>) -> Result<BTreeMap<usize, f64>> {
    project_volume(model, vol, layers)?
        .into_iter()
        .map(|(l, p)| {
            let (w, h, d, n) = p.raw.dim();
            let rows = p.raw.mapv(f64::from).into_shape_with_order((w * h * d, n)).expect("contiguous");
            Ok((l, feature_std(rows.view(), STD_EPS)?))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DiagnoseOptions {
    pub layers: BTreeSet<usize>,
    /// Axial slice at input resolution; the middle when unset.
    pub slice: Option<usize>,
    pub rank_threshold: f64,
    /// Query voxel at input resolution; the centre when unset.
    pub query: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub subject_id: String,
    pub spectra: BTreeMap<usize, Vec<f64>>,
    pub effective_rank: BTreeMap<usize, usize>,
    pub projection_std: BTreeMap<usize, f64>,
}

impl DiagnosticsReport {
    pub fn mean_rank(&self, layers: &[usize]) -> Result<f64> {
        let ranks = layers
            .iter()
            .map(|l| {
                self.effective_rank
                    .get(l)
                    .copied()
                    .ok_or_else(|| Error::InvalidInput(format!("layer {l} was not analysed")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ranks.iter().sum::<usize>() as f64 / ranks.len().max(1) as f64)
    }

    pub fn spectra_csv(&self) -> String {
        let mut s = String::from("layer,index,singular_value\n");
        for (l, sv) in &self.spectra {
            for (i, v) in sv.iter().enumerate() {
                writeln!(s, "{l},{i},{v}").expect("string write");
            }
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("layer,effective_rank,projection_std\n");
        for (l, r) in &self.effective_rank {
            writeln!(s, "{l},{r},{}", self.projection_std[l]).expect("string write");
        }
        s
    }
}

/// Analyses the first timepoint of `series`; when it has a second
/// timepoint, also returns a similarity map from the first to the second
/// per layer.
pub fn diagnose(
    model: &mut Model,
    series: &SubjectTimeSeries,
    opts: &DiagnoseOptions,
) -> Result<(DiagnosticsReport, BTreeMap<usize, Array3<f64>>)> {
    let tps = series.timepoints();
    let key = tps.get(1).map(|t| &*t.image);
    diagnose_volumes(model, series.subject_id(), &tps[0].image, key, opts)
}

/// Spectra and projection spread of `first`; similarity maps from the query
/// voxel of `first` into `key` when a key volume is given.
pub fn diagnose_volumes(
    model: &mut Model,
    id: &str,
    first: &Volume,
    key: Option<&Volume>,
    opts: &DiagnoseOptions,
) -> Result<(DiagnosticsReport, BTreeMap<usize, Array3<f64>>)> {
    let dims = first.dims();
    if let Some(q) = opts.query {
        if (0..3).any(|i| q[i] >= dims[i]) {
            return Err(Error::InvalidInput(format!("query {q:?} outside volume {dims:?}")));
        }
    }
    if let Some(k) = key {
        if k.dims() != dims {
            return Err(Error::Shape(format!("key volume {:?} differs from {dims:?}", k.dims())));
        }
    }
    let proj = project_volume(model, first, &opts.layers)?;
    let slice = opts.slice.unwrap_or(dims[2] / 2);
    let query = opts.query.unwrap_or(dims.map(|n| n / 2));
    let mut report = DiagnosticsReport {
        subject_id: id.to_string(),
        spectra: BTreeMap::new(),
        effective_rank: BTreeMap::new(),
        projection_std: BTreeMap::new(),
    };
    for (&l, p) in &proj {
        let sv = covariance_spectrum_from(p.z.view(), slice >> p.level)?;
        report.effective_rank.insert(l, effective_rank(&sv, opts.rank_threshold));
        report.spectra.insert(l, sv);
        let (w, h, d, n) = p.raw.dim();
        let rows = p.raw.mapv(f64::from).into_shape_with_order((w * h * d, n)).expect("contiguous");
        report.projection_std.insert(l, feature_std(rows.view(), STD_EPS)?);
    }
    let mut maps = BTreeMap::new();
    if let Some(k) = key {
        let other = project_volume(model, k, &opts.layers)?;
        for (&l, p) in &proj {
            let q = query.map(|v| v >> p.level);
            maps.insert(l, similarity_map_from(p.z.view(), other[&l].z.view(), q)?);
        }
    }
    Ok((report, maps))
}

/// A map as a single-channel volume at the layer's voxel size.
pub fn map_volume(map: &Array3<f64>, spacing: [f64; 3], level: usize, id: &str) -> Result<Volume> {
    let data = map.mapv(|v| v as f32).insert_axis(Axis(3));
    Volume::new(data, spacing.map(|s| s * (1u32 << level) as f64), id)
}

/// Writes `spectra.csv`, `summary.csv`, `report.json` and one
/// `similarity_L<id>.vol` per map under `dir`.
pub fn write_diagnostics(
    dir: &Path,
    report: &DiagnosticsReport,
    maps: &BTreeMap<usize, Array3<f64>>,
    model: &Model,
    spacing: [f64; 3],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, text: String| fs::write(dir.join(name), text).map_err(|e| Error::io(dir.join(name), e));
    put("spectra.csv", report.spectra_csv())?;
    put("summary.csv", report.summary_csv())?;
    put("report.json", serde_json::to_string_pretty(report)? + "\n")?;
    let defs = model.unet.spec().layers();
    for (&l, m) in maps {
        let v = map_volume(m, spacing, defs[l].level, &format!("similarity_L{l:02}"))?;
        save_volume(&v, dir.join(format!("similarity_L{l:02}.vol")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn naive_similarity(zq: &Array4<f32>, zk: &Array4<f32>, q: [usize; 3]) -> Array3<f64> {
        let n = zq.dim().3;
        let a: Vec<f64> = (0..n).map(|i| zq[[q[0], q[1], q[2], i]] as f64).collect();
        let (w, h, d, _) = zk.dim();
        Array3::from_shape_fn((w, h, d), |(x, y, z)| {
            let b: Vec<f64> = (0..n).map(|i| zk[[x, y, z, i]] as f64).collect();
            let dot: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (na * nb)
        })
    }

    /// Forms C explicitly and diagonalises it.
    fn dense_spectrum(z: &Array4<f32>, slice: usize) -> Vec<f64> {
        let (w, h, _, c) = z.dim();
        let p = w * h;
        let vecs: Vec<Vec<f64>> = (0..c)
            .map(|i| {
                let mut v = Vec::with_capacity(p);
                for x in 0..w {
                    for y in 0..h {
                        v.push(z[[x, y, slice, i]] as f64);
                    }
                }
                v
            })
            .collect();
        let zbar: Vec<f64> = (0..p).map(|k| vecs.iter().map(|v| v[k]).sum::<f64>() / c as f64).collect();
        let mut cm = DMatrix::<f64>::zeros(p, p);
        for v in &vecs {
            for a in 0..p {
                for b in 0..p {
                    cm[(a, b)] += (v[a] - zbar[a]) * (v[b] - zbar[b]) / c as f64;
                }
            }
        }
        let mut ev: Vec<f64> = SymmetricEigen::new(cm).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    #[test]
    fn similarity_self_and_constant() {
        let z = random4((4, 4, 4, 6), 1);
        let m = similarity_map_from(z.view(), z.view(), [1, 2, 3]).unwrap();
        assert!((m[[1, 2, 3]] - 1.0).abs() < 1e-12);
        let c = Array4::from_elem((3, 3, 3, 5), 0.7f32);
        let mc = similarity_map_from(c.view(), c.view(), [0, 0, 0]).unwrap();
        assert!(mc.iter().all(|&v| v == mc[[0, 0, 0]]));
        assert!(similarity_map_from(z.view(), z.view(), [4, 0, 0]).is_err());
    }

    #[test]
    fn similarity_matches_loop() {
        let zq = random4((4, 4, 2, 8), 2);
        let zk = random4((4, 4, 2, 8), 3);
        let m = similarity_map_from(zq.view(), zk.view(), [3, 0, 1]).unwrap();
        let o = naive_similarity(&zq, &zk, [3, 0, 1]);
        for (a, b) in m.iter().zip(o.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert!(m.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn spectrum_matches_dense_eigendecomposition() {
        for (shape, seed) in [((4, 4, 3, 6), 4), ((3, 5, 2, 20), 5), ((2, 2, 1, 3), 6)] {
            let z = random4(shape, seed);
            let slice = shape.2 / 2;
            let sv = covariance_spectrum_from(z.view(), slice).unwrap();
            let oracle = dense_spectrum(&z, slice);
            assert_eq!(sv.len(), oracle.len());
            let max = oracle[0];
            for (a, b) in sv.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-8 * max, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rank_one_features_give_one_value() {
        // channels proportional to one spatial pattern
        let base = random4((4, 4, 1, 1), 7);
        let z = Array4::from_shape_fn((4, 4, 1, 5), |(x, y, d, i)| base[[x, y, d, 0]] * (i as f32 + 1.0));
        let sv = covariance_spectrum_from(z.view(), 0).unwrap();
        assert_eq!(effective_rank(&sv, 1e-9), 1);
    }

    #[test]
    fn isotropic_projection_gives_flat_spectrum() {
        // four orthogonal channel patterns of equal energy over 4 positions,
        // each summing to zero so the channel mean stays put
        let pats = [[1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0], [1.0, -1.0, -1.0, 1.0]];
        let mut z = Array4::<f32>::zeros((2, 2, 1, 6));
        for (i, p) in pats.iter().enumerate() {
            for k in 0..4 {
                z[[k / 2, k % 2, 0, 2 * i]] = p[k];
                z[[k / 2, k % 2, 0, 2 * i + 1]] = -p[k];
            }
        }
        let sv = covariance_spectrum_from(z.view(), 0).unwrap();
        for v in &sv[..3] {
            assert!((v - sv[0]).abs() < 1e-12);
        }
        assert!(sv[3].abs() < 1e-12);
    }

    #[test]
    fn effective_rank_examples() {
        assert_eq!(effective_rank(&[2.0; 9], 1e-2), 9);
        assert_eq!(effective_rank(&[0.0, 3.0, 0.0], 1e-2), 1);
        // 0.5^k > 1e-2 holds for k = 0..=6
        let geo: Vec<f64> = (0..20).map(|k| 0.5f64.powi(k)).collect();
        let expected = (0..20).filter(|&k| 0.5f64.powi(k) > 1e-2).count();
        assert_eq!(expected, 7);
        assert_eq!(effective_rank(&geo, DEFAULT_RANK_THRESHOLD), expected);
        assert_eq!(effective_rank(&[0.0; 4], 1e-2), 0);
    }

    #[test]
    fn feature_std_cases() {
        let c = Array2::from_elem((10, 3), 4.0);
        assert!((feature_std(c.view(), STD_EPS).unwrap() - STD_EPS.sqrt()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Array2::from_shape_fn((50, 4), |_| rng.gen_range(-2.0..2.0));
        let s1 = feature_std(z.view(), 0.0).unwrap();
        let s2 = feature_std((&z * 2.0).view(), 0.0).unwrap();
        assert!((s2 - 2.0 * s1).abs() < 1e-12);
        // direct recomputation
        let mut direct = 0.0;
        for j in 0..4 {
            let col: Vec<f64> = (0..50).map(|i| z[[i, j]]).collect();
            let mu = col.iter().sum::<f64>() / 50.0;
            direct += (col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 49.0 + STD_EPS).sqrt();
        }
        assert!((feature_std(z.view(), STD_EPS).unwrap() - direct / 4.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn similarity_bounded(seed in 0u64..1000, q in prop::array::uniform3(0usize..3)) {
            let zq = random4((3, 3, 3, 4), seed);
            let zk = random4((3, 3, 3, 4), seed + 1);
            let m = similarity_map_from(zq.view(), zk.view(), q).unwrap();
            prop_assert!(m.iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn spectrum_sorted_non_negative(seed in 0u64..1000) {
            let z = random4((3, 3, 2, 5), seed);
            let sv = covariance_spectrum_from(z.view(), 1).unwrap();
            prop_assert!(sv.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(sv.iter().all(|&v| v >= 0.0));
            // at most c - 1 directions survive centering over channels
            prop_assert!(effective_rank(&sv, 1e-9) <= 4);
        }
    }
}
