//! The U-Net, its reconstruction head and the projector/predictor heads.

mod checkpoint;
mod heads;
mod layers;
mod unet;

pub use checkpoint::{load_tensors, save_tensors, Assign, Collect, TensorMap};
pub use heads::{HeadPass, HeadSpec, Heads, Mlp, MlpPass, PREDICTOR_BOTTLENECK};
pub use layers::{BatchNorm, ConvLayer, ConvPass, Linear};
pub use unet::{
    check_input_dims, layer_name, FeatureTapSet, LayerDef, LayerKind, UNet, UNetPass, UNetSpec,
    LEVELS, NUM_LAYERS, OUTPUT_LAYER,
};

use ndarray::{Array5, ArrayView5, Axis, Ix5};

use crate::error::Result;
use crate::nn::{softmax_last, Mode, Param, ParamVisitor};
use crate::volume::{LabelVolume, Volume};

/// Everything that carries trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub unet: UNet,
    /// Extra convolution after layer 23 mapping labels back to image
    /// channels, used only for denoising reconstruction.
    pub recon: Option<ConvLayer>,
    pub heads: Option<Heads>,
}

impl Model {
    /// A bare segmentation network.
    pub fn segmentation(spec: UNetSpec, seed: u64) -> Self {
        Self {
            unet: UNet::new(spec, seed),
            recon: None,
            heads: None,
        }
    }

    pub fn with_recon(mut self, seed: u64) -> Self {
        let spec = self.unet.spec();
        self.recon = Some(ConvLayer::new(
            spec.out_channels,
            spec.in_channels,
            false,
            seed,
            "recon",
        ));
        self
    }

    pub fn with_heads(mut self, heads: Heads) -> Self {
        self.heads = Some(heads);
        self
    }

    pub fn visit(&mut self, v: &mut dyn ParamVisitor) {
        self.unet.visit("unet", v);
        if let Some(r) = &mut self.recon {
            r.visit("recon", v);
        }
        if let Some(h) = &mut self.heads {
            h.visit(v);
        }
    }

    pub fn zero_grad(&mut self) {
        struct Zero;
        impl ParamVisitor for Zero {
            fn param(&mut self, _: &str, p: &mut Param) {
                p.zero_grad();
            }
        }
        self.visit(&mut Zero);
    }

    pub fn param_count(&self) -> usize {
        self.unet.param_count()
            + self.recon.as_ref().map_or(0, ConvLayer::param_count)
            + self.heads.as_ref().map_or(0, Heads::param_count)
    }

    pub fn state(&mut self) -> TensorMap {
        let mut c = Collect::default();
        self.visit(&mut c);
        c.tensors
    }

    /// Loads every tensor this model owns from `tensors`; extra entries are
    /// ignored so a pretrained bundle can seed a bare segmentation network.
    pub fn load_state(&mut self, tensors: &TensorMap) -> Result<()> {
        let mut a = Assign::new(tensors);
        self.visit(&mut a);
        a.finish()
    }

    /// Class probabilities `(B, W, H, D, n)` in eval mode.
    pub fn predict_probs(&mut self, x: ArrayView5<'_, f32>) -> Result<Array5<f32>> {
        let (logits, _, _) = self.unet.forward(x, &Default::default(), Mode::Eval)?;
        Ok(softmax_last(logits.into_dyn().view())
            .into_dimensionality::<Ix5>()
            .expect("rank 5"))
    }

    /// Replaces the U-Net's running batch-norm statistics with the average
    /// of per-volume statistics over `images`, one volume per pass.
    pub fn recalibrate(&mut self, images: &[&Volume]) -> Result<()> {
        for (seen, v) in images.iter().enumerate() {
            let x = v.data().view().insert_axis(Axis(0));
            self.unet.forward(x, &Default::default(), Mode::Calibrate { seen })?;
        }
        Ok(())
    }

    /// Hard segmentation of a single volume.
    pub fn segment(&mut self, image: &Volume) -> Result<LabelVolume> {
        let x = image.data().view().insert_axis(Axis(0));
        let probs = self.predict_probs(x)?;
        let n = probs.shape()[4];
        let labels = probs
            .index_axis(Axis(0), 0)
            .map_axis(Axis(3), |p| argmax(p.iter().copied()) as u16);
        LabelVolume::new(labels, n as u16)
    }
}

fn argmax(it: impl Iterator<Item = f32>) -> usize {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
