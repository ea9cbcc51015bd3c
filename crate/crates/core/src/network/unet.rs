//! Four-level 3D U-Net with layer ids 0-23.
//!
//! | id | layer | output |
//! |----|-------|--------|
//! | 0-2 | Conv(nc), BN, ReLU | w, nc |
//! | 3 | MaxPool, Conv(2nc), BN, ReLU | w/2, 2nc |
//! | 4 | Conv(2nc), BN, ReLU | w/2, 2nc |
//! | 5-6 | (MaxPool) Conv(4nc) ... | w/4, 4nc |
//! | 7-8 | (MaxPool) Conv(8nc) ... | w/8, 8nc |
//! | 9-10 | (MaxPool) Conv(16nc) ... | w/16, 16nc |
//! | 11 | Upsample(10) ++ 8 | w/8, 24nc |
//! | 12-13 | Conv(8nc), BN, ReLU | w/8, 8nc |
//! | 14 | Upsample(13) ++ 6 | w/4, 12nc |
//! | 15-16 | Conv(4nc), BN, ReLU | w/4, 4nc |
//! | 17 | Upsample(16) ++ 4 | w/2, 6nc |
//! | 18-19 | Conv(2nc), BN, ReLU | w/2, 2nc |
//! | 20 | Upsample(19) ++ 2 | w, 3nc |
//! | 21-22 | Conv(nc), BN, ReLU | w, nc |
//! | 23 | Conv(n) | w, n |
//!
//! Skip concatenations put the encoder features first. A feature tap on a
//! conv layer captures the convolution output before batch norm and ReLU; on
//! a concatenation layer, the concatenated tensor.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array5, ArrayView5};
use serde::{Deserialize, Serialize};

use super::layers::{accumulate, ConvLayer, ConvPass};
use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, maxpool2_backward, maxpool2_forward, split_channels, upsample2_backward,
    upsample2_forward, Mode, ParamVisitor,
};

pub const NUM_LAYERS: usize = 24;
pub const LEVELS: usize = 4;
pub const OUTPUT_LAYER: usize = 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    /// Channel-width multiplier `nc`.
    pub nc: usize,
    pub in_channels: usize,
    /// Channels of layer 23, the number of labels.
    pub out_channels: usize,
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self {
            nc: 8,
            in_channels: 1,
            out_channels: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { pool: bool, bn_relu: bool },
    UpConcat { skip: usize },
}

/// Static description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDef {
    pub id: usize,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Resolution level: spatial size is `input / 2^level`.
    pub level: usize,
}

impl UNetSpec {
    pub fn layers(&self) -> Vec<LayerDef> {
        let nc = self.nc;
        let conv = |id, cin, cout, level, pool| LayerDef {
            id,
            kind: LayerKind::Conv { pool, bn_relu: true },
            in_channels: cin,
            out_channels: cout,
            level,
        };
        let up = |id, skip, cin, cout, level| LayerDef {
            id,
            kind: LayerKind::UpConcat { skip },
            in_channels: cin,
            out_channels: cout,
            level,
        };
        vec![
            conv(0, self.in_channels, nc, 0, false),
            conv(1, nc, nc, 0, false),
            conv(2, nc, nc, 0, false),
            conv(3, nc, 2 * nc, 1, true),
            conv(4, 2 * nc, 2 * nc, 1, false),
            conv(5, 2 * nc, 4 * nc, 2, true),
            conv(6, 4 * nc, 4 * nc, 2, false),
            conv(7, 4 * nc, 8 * nc, 3, true),
            conv(8, 8 * nc, 8 * nc, 3, false),
            conv(9, 8 * nc, 16 * nc, 4, true),
            conv(10, 16 * nc, 16 * nc, 4, false),
            up(11, 8, 16 * nc, 24 * nc, 3),
            conv(12, 24 * nc, 8 * nc, 3, false),
            conv(13, 8 * nc, 8 * nc, 3, false),
            up(14, 6, 8 * nc, 12 * nc, 2),
            conv(15, 12 * nc, 4 * nc, 2, false),
            conv(16, 4 * nc, 4 * nc, 2, false),
            up(17, 4, 4 * nc, 6 * nc, 1),
            conv(18, 6 * nc, 2 * nc, 1, false),
            conv(19, 2 * nc, 2 * nc, 1, false),
            up(20, 2, 2 * nc, 3 * nc, 0),
            conv(21, 3 * nc, nc, 0, false),
            conv(22, nc, nc, 0, false),
            LayerDef {
                id: 23,
                kind: LayerKind::Conv {
                    pool: false,
                    bn_relu: false,
                },
                in_channels: nc,
                out_channels: self.out_channels,
                level: 0,
            },
        ]
    }

    /// Spatial extent and channel count of a layer's output.
    pub fn layer_shape(&self, layer: usize, input: [usize; 3]) -> Result<([usize; 3], usize)> {
        check_input_dims(input)?;
        let def = self
            .layers()
            .into_iter()
            .nth(layer)
            .ok_or_else(|| Error::InvalidInput(format!("no layer {layer}")))?;
        let f = 1 << def.level;
        Ok(([input[0] / f, input[1] / f, input[2] / f], def.out_channels))
    }

    /// Number of trainable parameters (conv weights and biases, BN affine).
    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| match l.kind {
                LayerKind::Conv { bn_relu, .. } => {
                    27 * l.in_channels * l.out_channels
                        + l.out_channels
                        + if bn_relu { 2 * l.out_channels } else { 0 }
                }
                LayerKind::UpConcat { .. } => 0,
            })
            .sum()
    }
}

pub fn check_input_dims(dims: [usize; 3]) -> Result<()> {
    let m = 1 << LEVELS;
    if dims.iter().any(|&d| d == 0 || d % m != 0) {
        return Err(Error::Shape(format!(
            "spatial dims {dims:?} must be positive multiples of {m}"
        )));
    }
    Ok(())
}

/// Per-layer activations captured during a forward pass, `(B, W, H, D, C)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTapSet {
    taps: BTreeMap<usize, Array5<f32>>,
}

impl FeatureTapSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, value: Array5<f32>) {
        self.taps.insert(layer, value);
    }

    pub fn get(&self, layer: usize) -> Option<&Array5<f32>> {
        self.taps.get(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.taps.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Spatial extent of every tap.
    pub fn shapes(&self) -> BTreeMap<usize, [usize; 3]> {
        self.taps
            .iter()
            .map(|(&l, t)| {
                let s = t.shape();
                (l, [s[1], s[2], s[3]])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv { layer: ConvLayer, pool: bool },
    UpConcat { skip: usize },
}

#[derive(Debug, Clone)]
enum LayerPass {
    Conv {
        pass: ConvPass,
        pool_arg: Option<Array5<u8>>,
    },
    UpConcat {
        out: Array5<f32>,
        skip_channels: usize,
    },
}

impl LayerPass {
    fn output(&self) -> &Array5<f32> {
        match self {
            LayerPass::Conv { pass, .. } => &pass.out,
            LayerPass::UpConcat { out, .. } => out,
        }
    }

    fn tap(&self) -> &Array5<f32> {
        match self {
            LayerPass::Conv { pass, .. } => &pass.conv,
            LayerPass::UpConcat { out, .. } => out,
        }
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct UNetPass {
    layers: Vec<LayerPass>,
}

impl UNetPass {
    pub fn output(&self) -> &Array5<f32> {
        self.layers[OUTPUT_LAYER].output()
    }

    /// Post-activation output of any layer.
    pub fn layer_output(&self, layer: usize) -> &Array5<f32> {
        self.layers[layer].output()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    spec: UNetSpec,
    layers: Vec<Layer>,
}

impl UNet {
    pub fn new(spec: UNetSpec, seed: u64) -> Self {
        let layers = spec
            .layers()
            .into_iter()
            .map(|def| match def.kind {
                LayerKind::Conv { pool, bn_relu } => Layer::Conv {
                    layer: ConvLayer::new(
                        def.in_channels,
                        def.out_channels,
                        bn_relu,
                        seed,
                        &layer_name(def.id),
                    ),
                    pool,
                },
                LayerKind::UpConcat { skip } => Layer::UpConcat { skip },
            })
            .collect();
        Self { spec, layers }
    }

    pub fn spec(&self) -> UNetSpec {
        self.spec
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv { layer, .. } => layer.param_count(),
                Layer::UpConcat { .. } => 0,
            })
            .sum()
    }

    /// Runs the network on `x: (B, W, H, D, C_in)`.
    ///
    /// Returns layer 23's output, the requested taps and the pass record for
    /// [`UNet::backward`].
    pub fn forward(
        &mut self,
        x: ArrayView5<'_, f32>,
        taps: &BTreeSet<usize>,
        mode: Mode,
    ) -> Result<(Array5<f32>, FeatureTapSet, UNetPass)> {
        let (_, w, h, d, c) = x.dim();
        check_input_dims([w, h, d])?;
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        if let Some(&bad) = taps.iter().find(|&&t| t >= NUM_LAYERS) {
            return Err(Error::InvalidInput(format!("no layer {bad} to tap")));
        }
        let mut passes: Vec<LayerPass> = Vec::with_capacity(NUM_LAYERS);
        for id in 0..NUM_LAYERS {
            let pass = match &mut self.layers[id] {
                Layer::Conv { layer, pool } => {
                    let input = if id == 0 {
                        x.to_owned()
                    } else {
                        passes[id - 1].output().clone()
                    };
                    let (input, pool_arg) = if *pool {
                        let (p, arg) = maxpool2_forward(input.view());
                        (p, Some(arg))
                    } else {
                        (input, None)
                    };
                    LayerPass::Conv {
                        pass: layer.forward(input, mode),
                        pool_arg,
                    }
                }
                Layer::UpConcat { skip } => {
                    let up = upsample2_forward(passes[id - 1].output().view());
                    let skip_out = passes[*skip].output();
                    LayerPass::UpConcat {
                        out: concat_channels(skip_out.view(), up.view()),
                        skip_channels: skip_out.shape()[4],
                    }
                }
            };
            passes.push(pass);
        }
        let mut tapset = FeatureTapSet::new();
        for &t in taps {
            tapset.insert(t, passes[t].tap().clone());
        }
        let pass = UNetPass { layers: passes };
        Ok((pass.output().clone(), tapset, pass))
    }

    /// Accumulates parameter gradients given a gradient on layer 23's output
    /// and/or gradients on tapped features.
    pub fn backward(
        &mut self,
        pass: &UNetPass,
        d_output: Option<Array5<f32>>,
        tap_grads: &BTreeMap<usize, Array5<f32>>,
    ) {
        let mut grads: Vec<Option<Array5<f32>>> = vec![None; NUM_LAYERS];
        grads[OUTPUT_LAYER] = d_output;
        for id in (0..NUM_LAYERS).rev() {
            let tap = tap_grads.get(&id);
            if grads[id].is_none() && tap.is_none() {
                continue;
            }
            match (&mut self.layers[id], &pass.layers[id]) {
                (Layer::Conv { layer, pool }, LayerPass::Conv { pass: lp, pool_arg }) => {
                    let d_out = grads[id].take();
                    if let Some(dx) = layer.backward(lp, d_out, tap, id > 0) {
                        let dx = match pool_arg {
                            Some(arg) if *pool => maxpool2_backward(dx.view(), arg.view()),
                            _ => dx,
                        };
                        accumulate(&mut grads[id - 1], dx);
                    }
                }
                (Layer::UpConcat { skip }, LayerPass::UpConcat { skip_channels, .. }) => {
                    let mut g = grads[id]
                        .take()
                        .unwrap_or_else(|| Array5::zeros(pass.layers[id].output().raw_dim()));
                    if let Some(t) = tap {
                        g += t;
                    }
                    let (d_skip, d_up) = split_channels(g.view(), *skip_channels);
                    accumulate(&mut grads[*skip], d_skip);
                    accumulate(&mut grads[id - 1], upsample2_backward(d_up.view()));
                }
                _ => unreachable!("pass record does not match layer kinds"),
            }
        }
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        for (id, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::Conv { layer, .. } = layer {
                layer.visit(&format!("{prefix}.{}", layer_name(id)), v);
            }
        }
    }

    /// Direct access to a conv layer's parameters (none for concat layers).
    pub fn conv_layer_mut(&mut self, id: usize) -> Option<&mut ConvLayer> {
        match self.layers.get_mut(id)? {
            Layer::Conv { layer, .. } => Some(layer),
            Layer::UpConcat { .. } => None,
        }
    }
}

/// Zero-padded layer name, e.g. `L07`.
pub fn layer_name(id: usize) -> String {
    format!("L{id:02}")
}
