//! Parameterized building blocks shared by the U-Net and the MLP heads.

use ndarray::{Array2, Array5, ArrayD, ArrayView2, Ix1, Ix2, Zip};
use rand::distributions::{Distribution, Uniform};

use crate::nn::{
    batch_norm_backward, batch_norm_forward, conv3d_backward, conv3d_forward, BatchNormCache,
    Mode, Param, ParamVisitor,
};
use crate::rng::{rng_from, stream};

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the framework default for conv and
/// linear layers, drawn from a stream keyed by the parameter name.
pub(crate) fn uniform_init(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Param {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut rng = rng_from(seed, &[stream::INIT, name_hash(name)]);
    let value = ArrayD::from_shape_simple_fn(shape, || dist.sample(&mut rng));
    Param::new(value)
}

pub(crate) fn view1(p: &ArrayD<f32>) -> ndarray::ArrayView1<'_, f32> {
    p.view().into_dimensionality::<Ix1>().expect("rank-1 parameter")
}

pub(crate) fn view2(p: &ArrayD<f32>) -> ArrayView2<'_, f32> {
    p.view().into_dimensionality::<Ix2>().expect("rank-2 parameter")
}

/// Flattens a channels-last tensor into `(N, C)`.
pub(crate) fn rows_of(x: &Array5<f32>) -> ArrayView2<'_, f32> {
    let c = x.shape()[4];
    x.view()
        .into_shape_with_order((x.len() / c, c))
        .expect("standard layout")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f32>,
    pub running_var: ArrayD<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(vec![channels])),
            beta: Param::new(ArrayD::zeros(vec![channels])),
            running_mean: ArrayD::zeros(vec![channels]),
            running_var: ArrayD::ones(vec![channels]),
        }
    }

    pub fn forward(&mut self, x: ArrayView2<'_, f32>, mode: Mode) -> (Array2<f32>, BatchNormCache<f32>) {
        let mut rm = self.running_mean.view_mut().into_dimensionality::<Ix1>().expect("rank 1");
        let mut rv = self.running_var.view_mut().into_dimensionality::<Ix1>().expect("rank 1");
        batch_norm_forward(
            x,
            view1(&self.gamma.value),
            view1(&self.beta.value),
            rm.view_mut(),
            rv.view_mut(),
            mode,
        )
    }

    pub fn backward(&mut self, dy: ArrayView2<'_, f32>, cache: &BatchNormCache<f32>) -> Array2<f32> {
        let (dx, dg, db) = batch_norm_backward(dy, view1(&self.gamma.value), cache);
        self.gamma.grad += &dg.into_dyn();
        self.beta.grad += &db.into_dyn();
        dx
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.param(&format!("{prefix}.gamma"), &mut self.gamma);
        v.param(&format!("{prefix}.beta"), &mut self.beta);
        v.buffer(&format!("{prefix}.running_mean"), &mut self.running_mean);
        v.buffer(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}

/// 3x3x3 convolution, optionally followed by batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Param,
    pub bias: Param,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
    pub in_channels: usize,
    pub out_channels: usize,
}

pub const KERNEL: usize = 3;

/// Values a conv layer produced during one forward pass.
#[derive(Debug, Clone)]
pub struct ConvPass {
    /// Input to the convolution (after pooling, if any).
    pub input: Array5<f32>,
    /// Raw convolution output, before batch norm.
    pub conv: Array5<f32>,
    /// Output before the ReLU: batch-norm output, or the raw convolution.
    pub pre: Array5<f32>,
    /// Output after the ReLU (equals `pre` when there is none).
    pub out: Array5<f32>,
    pub bn: Option<BatchNormCache<f32>>,
}

impl ConvLayer {
    pub fn new(cin: usize, cout: usize, bn_relu: bool, seed: u64, name: &str) -> Self {
        let fan_in = cin * KERNEL.pow(3);
        Self {
            weight: uniform_init(&[fan_in, cout], fan_in, seed, &format!("{name}.weight")),
            bias: uniform_init(&[cout], fan_in, seed, &format!("{name}.bias")),
            bn: bn_relu.then(|| BatchNorm::new(cout)),
            relu: bn_relu,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len()
            + self.bias.len()
            + self.bn.as_ref().map_or(0, |b| b.gamma.len() + b.beta.len())
    }

    pub fn forward(&mut self, input: Array5<f32>, mode: Mode) -> ConvPass {
        let conv = conv3d_forward(input.view(), view2(&self.weight.value), view1(&self.bias.value));
        let shape = conv.raw_dim();
        let (pre, bn) = match &mut self.bn {
            Some(bn) => {
                let (y, cache) = bn.forward(rows_of(&conv), mode);
                (y.into_shape_with_order(shape).expect("same size"), Some(cache))
            }
            None => (conv.clone(), None),
        };
        let out = if self.relu {
            pre.mapv(|v| v.max(0.0))
        } else {
            pre.clone()
        };
        ConvPass {
            input,
            conv,
            pre,
            out,
            bn,
        }
    }

    /// Back-propagates a gradient at the layer output and/or an extra
    /// gradient at the raw convolution output. Returns the gradient with
    /// respect to the conv input when requested.
    pub fn backward(
        &mut self,
        pass: &ConvPass,
        d_out: Option<Array5<f32>>,
        d_conv_extra: Option<&Array5<f32>>,
        need_input_grad: bool,
    ) -> Option<Array5<f32>> {
        let mut d_conv = match d_out {
            Some(mut d) => {
                if self.relu {
                    Zip::from(&mut d).and(&pass.pre).for_each(|g, &p| {
                        if p <= 0.0 {
                            *g = 0.0
                        }
                    });
                }
                let shape = d.raw_dim();
                match (&mut self.bn, &pass.bn) {
                    (Some(bn), Some(cache)) => bn
                        .backward(rows_of(&d), cache)
                        .into_shape_with_order(shape)
                        .expect("same size"),
                    _ => d,
                }
            }
            None => Array5::zeros(pass.conv.raw_dim()),
        };
        if let Some(extra) = d_conv_extra {
            d_conv += extra;
        }
        let g = conv3d_backward(
            pass.input.view(),
            view2(&self.weight.value),
            d_conv.view(),
            need_input_grad,
        );
        self.weight.grad += &g.weight.into_dyn();
        self.bias.grad += &g.bias.into_dyn();
        need_input_grad.then_some(g.input)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.param(&format!("{prefix}.conv.weight"), &mut self.weight);
        v.param(&format!("{prefix}.conv.bias"), &mut self.bias);
        if let Some(bn) = &mut self.bn {
            bn.visit(&format!("{prefix}.bn"), v);
        }
    }
}

/// Fully connected layer `y = x W + b`, `W: (in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, seed: u64, name: &str) -> Self {
        Self {
            weight: uniform_init(&[fan_in, fan_out], fan_in, seed, &format!("{name}.weight")),
            bias: uniform_init(&[fan_out], fan_in, seed, &format!("{name}.bias")),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        crate::nn::linear_forward(x, view2(&self.weight.value), view1(&self.bias.value))
    }

    pub fn backward(&mut self, x: ArrayView2<'_, f32>, dy: ArrayView2<'_, f32>) -> Array2<f32> {
        let (dx, dw, db) = crate::nn::linear_backward(x, view2(&self.weight.value), dy);
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &db.into_dyn();
        dx
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.param(&format!("{prefix}.weight"), &mut self.weight);
        v.param(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Sums gradients that may or may not exist yet.
pub(crate) fn accumulate(slot: &mut Option<Array5<f32>>, g: Array5<f32>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}
