//! The saliency-modulated two-branch network at 64x64 input scale.
//!
//! RGB branch: conv1 3->16 (5x5, stride 2) -> pool -> conv2 16->32 ->
//! pool -> conv3 32->48 -> conv4 48->48 -> pool -> linear. The saliency
//! branch is a stack of up to four convolutions followed by a 1x1 scoring
//! convolution and ReLU; its single-channel map is resampled to the fusion
//! resolution and multiplies every channel of the fused layer as
//! `l * (s + 1)`.

mod config;
mod export;
mod net;
mod params;

pub use config::{
    ConvSpec, FusionPoint, ModelConfig, HEAD_INPUTS, INPUT_CHANNELS, INPUT_MEAN, INPUT_SIZE, INPUT_STD, RGB_LAYERS, SALIENCY_LAYERS,
};
pub use export::{export_saliency, saliency_raster};
pub use net::{
    baseline_forward, forward, logits, loss, loss_and_grads, modulate, record, saliency_forward, FeatureMap,
    ForwardOptions, ForwardPass, Pathway, SaliencyMap,
};
pub use params::{build_model, rgb_layer_group, with_backbone, ParamTensor, SalModParams};
