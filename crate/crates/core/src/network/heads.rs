//! Projector and predictor MLPs applied to sampled patch features.
//!
//! Projector: FC(w), BN, ReLU, FC(w), BN, ReLU, FC(w), BN, then an optional
//! row-wise L2 normalization. Predictor: FC(w/8), BN, ReLU, FC(w), BN, ReLU.
//! Every tapped layer owns its own projector and predictor.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Linear};
use super::unet::{layer_name, UNetSpec};
use crate::error::{Error, Result};
use crate::nn::{l2_normalize_rows, l2_normalize_rows_backward, BatchNormCache, Mode, ParamVisitor};

pub const PREDICTOR_BOTTLENECK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub mlp_width: usize,
    /// L2-normalize the projector output.
    pub l2_normalize: bool,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            mlp_width: 128,
            l2_normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MlpLayer {
    linear: Linear,
    bn: BatchNorm,
    relu: bool,
}

/// Stack of FC-BN(-ReLU) layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<MlpLayer>,
    l2_normalize: bool,
}

#[derive(Debug, Clone)]
struct MlpLayerPass {
    input: Array2<f32>,
    bn: BatchNormCache<f32>,
    pre: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct MlpPass {
    layers: Vec<MlpLayerPass>,
    /// Output before the final normalization.
    raw: Array2<f32>,
}

impl MlpPass {
    pub fn raw_output(&self) -> &Array2<f32> {
        &self.raw
    }
}

impl Mlp {
    /// `dims` lists input width then every layer's width; `relu[i]` says
    /// whether layer `i` ends with a ReLU.
    pub fn new(dims: &[usize], relu: &[bool], l2_normalize: bool, seed: u64, name: &str) -> Self {
        assert_eq!(dims.len(), relu.len() + 1);
        let layers = dims
            .windows(2)
            .zip(relu)
            .enumerate()
            .map(|(i, (w, &relu))| MlpLayer {
                linear: Linear::new(w[0], w[1], seed, &format!("{name}.{i}")),
                bn: BatchNorm::new(w[1]),
                relu,
            })
            .collect();
        Self {
            layers,
            l2_normalize,
        }
    }

    pub fn projector(in_dim: usize, spec: HeadSpec, seed: u64, name: &str) -> Self {
        let w = spec.mlp_width;
        Self::new(&[in_dim, w, w, w], &[true, true, false], spec.l2_normalize, seed, name)
    }

    pub fn predictor(spec: HeadSpec, seed: u64, name: &str) -> Self {
        let w = spec.mlp_width;
        let b = (w / PREDICTOR_BOTTLENECK).max(1);
        Self::new(&[w, b, w], &[true, true], false, seed, name)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].linear.in_features()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").linear.out_features()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.linear.weight.len() + l.linear.bias.len() + l.bn.gamma.len() + l.bn.beta.len())
            .sum()
    }

    pub fn forward(&mut self, x: ArrayView2<'_, f32>, mode: Mode) -> Result<(Array2<f32>, MlpPass)> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "head expects {} features, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        let mut passes = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &mut self.layers {
            let a = layer.linear.forward(h.view());
            let (pre, cache) = layer.bn.forward(a.view(), mode);
            let out = if layer.relu {
                pre.mapv(|v| v.max(0.0))
            } else {
                pre.clone()
            };
            passes.push(MlpLayerPass {
                input: h,
                bn: cache,
                pre,
            });
            h = out;
        }
        let y = if self.l2_normalize {
            l2_normalize_rows(h.view())
        } else {
            h.clone()
        };
        Ok((y, MlpPass { layers: passes, raw: h }))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, pass: &MlpPass, dy: ArrayView2<'_, f32>) -> Array2<f32> {
        let mut g = if self.l2_normalize {
            l2_normalize_rows_backward(pass.raw.view(), dy)
        } else {
            dy.to_owned()
        };
        for (layer, lp) in self.layers.iter_mut().zip(&pass.layers).rev() {
            if layer.relu {
                Zip::from(&mut g).and(&lp.pre).for_each(|d, &p| {
                    if p <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            let da = layer.bn.backward(g.view(), &lp.bn);
            g = layer.linear.backward(lp.input.view(), da.view());
        }
        g
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.linear.visit(&format!("{prefix}.{i}.fc"), v);
            layer.bn.visit(&format!("{prefix}.{i}.bn"), v);
        }
    }
}

/// Record of one [`Heads::project_and_predict`] call.
#[derive(Debug, Clone)]
pub struct HeadPass {
    pub layer: usize,
    proj: MlpPass,
    pred: Option<MlpPass>,
}

impl HeadPass {
    /// Projector output before any final normalization.
    pub fn raw_projection(&self) -> &Array2<f32> {
        self.proj.raw_output()
    }
}

/// Per-layer projector/predictor pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    spec: HeadSpec,
    projectors: BTreeMap<usize, Mlp>,
    predictors: BTreeMap<usize, Mlp>,
}

impl Heads {
    /// Builds a projector for every layer in `project` and a predictor for
    /// every layer in `predict` (which must be a subset).
    pub fn new(
        unet: UNetSpec,
        spec: HeadSpec,
        project: &BTreeSet<usize>,
        predict: &BTreeSet<usize>,
        seed: u64,
    ) -> Result<Self> {
        if !predict.is_subset(project) {
            return Err(Error::Config(
                "every predicted layer needs a projector".into(),
            ));
        }
        let defs = unet.layers();
        let mut projectors = BTreeMap::new();
        for &l in project {
            let def = defs
                .get(l)
                .ok_or_else(|| Error::Config(format!("no layer {l} to project")))?;
            projectors.insert(
                l,
                Mlp::projector(def.out_channels, spec, seed, &format!("proj.{}", layer_name(l))),
            );
        }
        let predictors = predict
            .iter()
            .map(|&l| (l, Mlp::predictor(spec, seed, &format!("pred.{}", layer_name(l)))))
            .collect();
        Ok(Self {
            spec,
            projectors,
            predictors,
        })
    }

    pub fn spec(&self) -> HeadSpec {
        self.spec
    }

    pub fn projected_layers(&self) -> BTreeSet<usize> {
        self.projectors.keys().copied().collect()
    }

    pub fn predicted_layers(&self) -> BTreeSet<usize> {
        self.predictors.keys().copied().collect()
    }

    pub fn param_count(&self) -> usize {
        self.projectors
            .values()
            .chain(self.predictors.values())
            .map(Mlp::param_count)
            .sum()
    }

    /// `z = f(v)` and, when the layer has a predictor, `p = p(z)`.
    pub fn project_and_predict(
        &mut self,
        feats: ArrayView2<'_, f32>,
        layer: usize,
        mode: Mode,
    ) -> Result<(Array2<f32>, Option<Array2<f32>>, HeadPass)> {
        let proj = self
            .projectors
            .get_mut(&layer)
            .ok_or_else(|| Error::InvalidInput(format!("layer {layer} has no projector")))?;
        let (z, proj_pass) = proj.forward(feats, mode)?;
        let (p, pred_pass) = match self.predictors.get_mut(&layer) {
            Some(pred) => {
                let (p, pass) = pred.forward(z.view(), mode)?;
                (Some(p), Some(pass))
            }
            None => (None, None),
        };
        Ok((
            z,
            p,
            HeadPass {
                layer,
                proj: proj_pass,
                pred: pred_pass,
            },
        ))
    }

    /// Projection with a pass record, skipping the predictor.
    pub fn project_pass(
        &mut self,
        feats: ArrayView2<'_, f32>,
        layer: usize,
        mode: Mode,
    ) -> Result<(Array2<f32>, HeadPass)> {
        let proj = self
            .projectors
            .get_mut(&layer)
            .ok_or_else(|| Error::InvalidInput(format!("layer {layer} has no projector")))?;
        let (z, proj_pass) = proj.forward(feats, mode)?;
        Ok((
            z,
            HeadPass {
                layer,
                proj: proj_pass,
                pred: None,
            },
        ))
    }

    /// Projection only, without touching the predictor.
    pub fn project(&mut self, feats: ArrayView2<'_, f32>, layer: usize, mode: Mode) -> Result<Array2<f32>> {
        let proj = self
            .projectors
            .get_mut(&layer)
            .ok_or_else(|| Error::InvalidInput(format!("layer {layer} has no projector")))?;
        Ok(proj.forward(feats, mode)?.0)
    }

    /// Back-propagates gradients on `z` and `p` to the patch features.
    pub fn backward(
        &mut self,
        pass: &HeadPass,
        dz: Option<ArrayView2<'_, f32>>,
        dp: Option<ArrayView2<'_, f32>>,
    ) -> Array2<f32> {
        let proj = self.projectors.get_mut(&pass.layer).expect("layer has a projector");
        let mut g = match (dp, &pass.pred) {
            (Some(dp), Some(pp)) => self
                .predictors
                .get_mut(&pass.layer)
                .expect("layer has a predictor")
                .backward(pp, dp),
            _ => Array2::zeros((pass.proj.raw.nrows(), proj.out_dim())),
        };
        if let Some(dz) = dz {
            g += &dz;
        }
        proj.backward(&pass.proj, g.view())
    }

    pub fn visit(&mut self, v: &mut dyn ParamVisitor) {
        for (l, m) in &mut self.projectors {
            m.visit(&format!("proj.{}", layer_name(*l)), v);
        }
        for (l, m) in &mut self.predictors {
            m.visit(&format!("pred.{}", layer_name(*l)), v);
        }
    }
}
