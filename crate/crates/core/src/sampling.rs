//! Spatial index plans shared by both timepoints of a pair.

use std::collections::BTreeMap;

use ndarray::{Array2, Array5, ArrayView2, ArrayView5};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::FeatureTapSet;
use crate::rng::{rng_from, stream};

/// Per-layer lists of `M` sampled `(w, h, d)` positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchIndexPlan {
    pub seed: u64,
    pub indices: BTreeMap<usize, Vec<[usize; 3]>>,
}

/// Samples `m` positions per layer: without replacement when the layer has
/// at least `m` positions, with replacement otherwise. Each layer draws from
/// its own stream, so adding a layer never changes another layer's indices.
pub fn make_plan(shapes: &BTreeMap<usize, [usize; 3]>, m: usize, seed: u64) -> Result<PatchIndexPlan> {
    if shapes.is_empty() {
        return Err(Error::InvalidInput("no layers to sample from".into()));
    }
    if m == 0 {
        return Err(Error::InvalidInput("patches per layer must be at least 1".into()));
    }
    let mut indices = BTreeMap::new();
    for (&layer, &[w, h, d]) in shapes {
        let extent = w * h * d;
        if extent == 0 {
            return Err(Error::Shape(format!("layer {layer} has an empty extent")));
        }
        let mut rng = rng_from(seed, &[stream::PLAN, layer as u64]);
        let flat: Vec<usize> = if extent >= m {
            rand::seq::index::sample(&mut rng, extent, m).into_vec()
        } else {
            (0..m).map(|_| rng.gen_range(0..extent)).collect()
        };
        let triples = flat
            .into_iter()
            .map(|f| [f / (h * d), (f / d) % h, f % d])
            .collect();
        indices.insert(layer, triples);
    }
    Ok(PatchIndexPlan { seed, indices })
}

impl PatchIndexPlan {
    pub fn layer(&self, layer: usize) -> Result<&[[usize; 3]]> {
        self.indices
            .get(&layer)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidInput(format!("plan has no layer {layer}")))
    }
}

fn check_bounds(idx: &[[usize; 3]], dims: [usize; 3], layer: usize) -> Result<()> {
    match idx.iter().find(|p| (0..3).any(|a| p[a] >= dims[a])) {
        Some(p) => Err(Error::Shape(format!(
            "index {p:?} outside layer {layer} extent {dims:?}"
        ))),
        None => Ok(()),
    }
}

/// Feature rows at the plan's positions for every batch item; row
/// `b * M + m` is item `b` at index `m`.
pub fn gather_array(feats: ArrayView5<'_, f32>, idx: &[[usize; 3]], layer: usize) -> Result<Array2<f32>> {
    let (b, w, h, d, c) = feats.dim();
    check_bounds(idx, [w, h, d], layer)?;
    let m = idx.len();
    let mut out = Array2::zeros((b * m, c));
    for n in 0..b {
        for (k, p) in idx.iter().enumerate() {
            out.row_mut(n * m + k)
                .assign(&feats.slice(ndarray::s![n, p[0], p[1], p[2], ..]));
        }
    }
    Ok(out)
}

pub fn gather(feats: &FeatureTapSet, plan: &PatchIndexPlan, layer: usize) -> Result<Array2<f32>> {
    let t = feats
        .get(layer)
        .ok_or_else(|| Error::InvalidInput(format!("layer {layer} was not tapped")))?;
    gather_array(t.view(), plan.layer(layer)?, layer)
}

/// Adjoint of [`gather_array`]: adds row gradients back onto a zero tensor of
/// the feature map's shape. Repeated indices accumulate.
pub fn scatter_add(
    grad_rows: ArrayView2<'_, f32>,
    idx: &[[usize; 3]],
    shape: (usize, usize, usize, usize, usize),
) -> Result<Array5<f32>> {
    let (b, w, h, d, c) = shape;
    check_bounds(idx, [w, h, d], usize::MAX)?;
    let m = idx.len();
    if grad_rows.dim() != (b * m, c) {
        return Err(Error::Shape(format!(
            "gradient rows {:?} do not match {b}x{m} patches of {c} channels",
            grad_rows.dim()
        )));
    }
    let mut out = Array5::zeros(shape);
    for n in 0..b {
        for (k, p) in idx.iter().enumerate() {
            let mut dst = out.slice_mut(ndarray::s![n, p[0], p[1], p[2], ..]);
            dst += &grad_rows.row(n * m + k);
        }
    }
    Ok(out)
}
