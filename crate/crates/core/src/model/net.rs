//! Forward passes of the two-branch network.

use crate::error::{Error, Result};
use crate::graph::{FaultInjection, Graph, Var};
use crate::optim::{FreezeMask, ParamGrads};
use crate::tensor::Tensor;

use super::config::{FusionPoint, INPUT_CHANNELS, INPUT_MEAN, INPUT_SIZE, INPUT_STD, RGB_LAYERS, SALIENCY_LAYERS};
use super::params::SalModParams;

/// Single-channel nonnegative map at the fusion resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap(Tensor);

impl SaliencyMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let (c, _, _) = values.chw()?;
        if c != 1 {
            return Err(Error::Shape(format!("saliency map must have one channel, got {c}")));
        }
        if values.data().iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Contract("saliency map values must be finite and nonnegative".into()));
        }
        Ok(Self(values))
    }

    pub fn constant(side: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full(&[1, side, side], value))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Feature stack `[C, H, W]` at the fusion point.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(pub Tensor);

/// `feature * (saliency + 1)` with one map broadcast over all channels.
pub fn modulate(feature: &FeatureMap, saliency: &SaliencyMap) -> Result<FeatureMap> {
    crate::ops::modulate(&feature.0, &saliency.0).map(FeatureMap)
}

/// Which classifier to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pathway {
    /// Saliency-modulated network.
    Modulated,
    /// RGB and joint branches only; the modulation node is the identity.
    Baseline,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Replaces the hallucinated map at the fusion point.
    pub saliency_override: Option<SaliencyMap>,
    pub fault: FaultInjection,
}

/// A recorded forward pass, ready for [`Graph::backward`].
pub struct ForwardPass<'a> {
    pub graph: Graph<'a>,
    pub logits: Var,
    /// Saliency map at fusion resolution (modulated pathway only).
    pub saliency: Option<Var>,
    /// Fused RGB feature before modulation.
    pub fused_feature: Var,
    /// Output of the modulation node (equals `fused_feature` on the baseline pathway).
    pub fused_output: Var,
    /// One leaf per parameter tensor, in parameter order; `None` for
    /// tensors the pathway does not use.
    pub params: Vec<Option<Var>>,
}

impl ForwardPass<'_> {
    /// Collects parameter adjoints from a finished backward sweep.
    pub fn param_grads(&self, grads: &mut crate::graph::Gradients) -> ParamGrads {
        ParamGrads(self.params.iter().map(|v| v.and_then(|v| grads.take(v))).collect())
    }
}

fn check_image(image: &Tensor) -> Result<()> {
    if image.shape() != [INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE] {
        return Err(Error::Shape(format!(
            "image must be [3,64,64], got {:?}",
            image.shape()
        )));
    }
    Ok(())
}

/// Builds the tape for one image. Parameters whose group is frozen are
/// recorded as constants so no adjoint work is spent on them.
pub fn record<'a>(
    params: &'a SalModParams,
    image: &Tensor,
    pathway: Pathway,
    freeze: &FreezeMask,
    opts: &ForwardOptions,
) -> Result<ForwardPass<'a>> {
    check_image(image)?;
    let cfg = params.config();
    let mut g = Graph::with_fault(opts.fault);
    let x_in = g.input(image.map(|v| (v - INPUT_MEAN) / INPUT_STD), false);
    let mut leaves: Vec<Option<Var>> = vec![None; params.tensors().len()];
    let mut leaf = |g: &mut Graph<'a>, idx: usize| -> Var {
        let t = &params.tensors()[idx];
        let v = g.param(&t.value, !freeze.is_frozen(t.group));
        leaves[idx] = Some(v);
        v
    };

    let saliency = match pathway {
        Pathway::Baseline => None,
        Pathway::Modulated => Some(match &opts.saliency_override {
            Some(map) => {
                let side = cfg.fusion_point.resolution();
                if map.values().shape() != [1, side, side] {
                    return Err(Error::Shape(format!(
                        "saliency override {:?} does not match fusion resolution {side}",
                        map.values().shape()
                    )));
                }
                g.input(map.values().clone(), true)
            }
            None => {
                let mut s = x_in;
                for (j, spec) in SALIENCY_LAYERS[..cfg.saliency_depth].iter().enumerate() {
                    let w = leaf(&mut g, super::params::SAL_START + 2 * j);
                    let b = leaf(&mut g, super::params::SAL_START + 2 * j + 1);
                    let c = g.conv2d(s, w, b, spec.stride, spec.pad)?;
                    s = g.relu(c);
                }
                let n = params.tensors().len();
                let w = leaf(&mut g, n - 2);
                let b = leaf(&mut g, n - 1);
                let score = g.conv2d(s, w, b, 1, 0)?;
                let score = g.relu(score);
                resample(&mut g, score, cfg.saliency_native_resolution(), cfg.fusion_point.resolution())?
            }
        }),
    };

    let mut fused = None;
    let mut fuse = |g: &mut Graph<'a>, x: Var, at: FusionPoint| -> Result<Var> {
        if at != cfg.fusion_point {
            return Ok(x);
        }
        let out = match saliency {
            Some(s) => g.modulate(x, s)?,
            None => x,
        };
        fused = Some((x, out));
        Ok(out)
    };

    let mut conv_relu = |g: &mut Graph<'a>, x: Var, layer: usize| -> Result<Var> {
        let spec = RGB_LAYERS[layer];
        let w = leaf(g, 2 * layer);
        let b = leaf(g, 2 * layer + 1);
        let c = g.conv2d(x, w, b, spec.stride, spec.pad)?;
        Ok(g.relu(c))
    };

    let x = conv_relu(&mut g, x_in, 0)?;
    let x = g.maxpool2d(x)?;
    let x = conv_relu(&mut g, x, 1)?;
    let x = fuse(&mut g, x, FusionPoint::BeforePool2)?;
    let x = g.maxpool2d(x)?;
    let x = fuse(&mut g, x, FusionPoint::AfterPool2)?;
    let x = conv_relu(&mut g, x, 2)?;
    let x = fuse(&mut g, x, FusionPoint::AfterConv3)?;
    let x = conv_relu(&mut g, x, 3)?;
    let x = fuse(&mut g, x, FusionPoint::AfterConv4)?;
    let x = g.maxpool2d(x)?;
    let x = g.flatten(x);
    let hw = leaf(&mut g, super::params::HEAD);
    let hb = leaf(&mut g, super::params::HEAD + 1);
    let logits = g.linear(x, hw, hb)?;

    let (fused_feature, fused_output) = fused.expect("fusion point lies on the RGB path");
    Ok(ForwardPass {
        graph: g,
        logits,
        saliency,
        fused_feature,
        fused_output,
        params: leaves,
    })
}

/// Brings the score map from its native side to the fusion side: bilinear
/// upsampling when smaller, repeated 2x2 average pooling when larger.
fn resample(g: &mut Graph<'_>, map: Var, native: usize, target: usize) -> Result<Var> {
    if native < target {
        return g.bilinear_upsample(map, target, target);
    }
    let mut side = native;
    let mut map = map;
    while side > target {
        if side % 2 != 0 {
            return Err(Error::Config(format!(
                "cannot pool saliency map from {native} to {target}"
            )));
        }
        map = g.avgpool2d(map)?;
        side /= 2;
    }
    if side != target {
        return Err(Error::Config(format!(
            "saliency side {native} does not reduce to {target} by halving"
        )));
    }
    Ok(map)
}

fn frozen_all() -> FreezeMask {
    FreezeMask::all()
}

/// Hallucinated saliency map at fusion resolution.
pub fn saliency_forward(params: &SalModParams, image: &Tensor) -> Result<SaliencyMap> {
    let pass = record(params, image, Pathway::Modulated, &frozen_all(), &ForwardOptions::default())?;
    let s = pass.saliency.expect("modulated pathway has a saliency node");
    SaliencyMap::new(pass.graph.value(s).clone())
}

/// Logits of the saliency-modulated network.
pub fn forward(params: &SalModParams, image: &Tensor) -> Result<Tensor> {
    logits(params, image, Pathway::Modulated)
}

/// Logits of the RGB-only network.
pub fn baseline_forward(params: &SalModParams, image: &Tensor) -> Result<Tensor> {
    logits(params, image, Pathway::Baseline)
}

pub fn logits(params: &SalModParams, image: &Tensor, pathway: Pathway) -> Result<Tensor> {
    let pass = record(params, image, pathway, &frozen_all(), &ForwardOptions::default())?;
    Ok(pass.graph.value(pass.logits).clone())
}

/// Cross-entropy loss of one labelled image and its parameter gradients.
pub fn loss_and_grads(
    params: &SalModParams,
    image: &Tensor,
    label: usize,
    pathway: Pathway,
    freeze: &FreezeMask,
) -> Result<(f64, ParamGrads)> {
    let mut pass = record(params, image, pathway, freeze, &ForwardOptions::default())?;
    let loss = pass.graph.softmax_cross_entropy(pass.logits, label)?;
    let value = pass.graph.value(loss).data()[0];
    let mut grads = pass.graph.backward(loss)?;
    Ok((value, pass.param_grads(&mut grads)))
}

/// Loss only, no tape kept for parameters.
pub fn loss(params: &SalModParams, image: &Tensor, label: usize, pathway: Pathway) -> Result<f64> {
    let z = logits(params, image, pathway)?;
    crate::ops::softmax_cross_entropy(&z, label).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::rng::Rng;

    fn image(seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::new(&[3, 64, 64], (0..3 * 64 * 64).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn logits_length_matches_classes() {
        let p = build_model(&ModelConfig {
            num_classes: 5,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_eq!(forward(&p, &image(1)).unwrap().shape(), &[5]);
        assert_eq!(baseline_forward(&p, &image(1)).unwrap().shape(), &[5]);
    }

    #[test]
    fn saliency_shapes_for_every_variant() {
        for depth in 1..=4 {
            for fusion in FusionPoint::ALL {
                let p = build_model(&ModelConfig {
                    saliency_depth: depth,
                    fusion_point: fusion,
                    ..ModelConfig::default()
                })
                .unwrap();
                let s = saliency_forward(&p, &image(2)).unwrap();
                let side = fusion.resolution();
                assert_eq!(s.values().shape(), &[1, side, side], "depth {depth} {fusion}");
                assert!(s.values().min() >= 0.0);
                let z = forward(&p, &image(2)).unwrap();
                assert!(z.is_finite());
            }
        }
    }

    #[test]
    fn zero_score_gives_zero_map_and_baseline_logits() {
        let mut p = build_model(&ModelConfig::default()).unwrap();
        p.zero_score();
        let img = image(3);
        assert!(saliency_forward(&p, &img).unwrap().values().data().iter().all(|&v| v == 0.0));
        assert!(forward(&p, &img).unwrap().bit_eq(&baseline_forward(&p, &img).unwrap()));
    }

    #[test]
    fn baseline_ignores_saliency_parameters() {
        let p = build_model(&ModelConfig::default()).unwrap();
        let mut q = p.clone();
        for t in q.tensors_mut() {
            if t.group == crate::optim::Group::Sal {
                t.value = t.value.map(|v| v * 3.0 + 0.1);
            }
        }
        let img = image(4);
        assert!(baseline_forward(&p, &img).unwrap().bit_eq(&baseline_forward(&q, &img).unwrap()));
        assert!(!forward(&p, &img).unwrap().bit_eq(&forward(&q, &img).unwrap()));
    }

    #[test]
    fn forward_is_repeatable() {
        let p = build_model(&ModelConfig::default()).unwrap();
        let img = image(5);
        assert!(forward(&p, &img).unwrap().bit_eq(&forward(&p, &img).unwrap()));
    }

    #[test]
    fn rejects_wrong_image_size() {
        let p = build_model(&ModelConfig::default()).unwrap();
        assert!(forward(&p, &Tensor::zeros(&[3, 32, 32])).is_err());
    }

    #[test]
    fn frozen_groups_receive_no_gradient() {
        let p = build_model(&ModelConfig::default()).unwrap();
        let freeze = FreezeMask::of(&[crate::optim::Group::Rgb, crate::optim::Group::Joint]);
        let (_, grads) = loss_and_grads(&p, &image(6), 1, Pathway::Modulated, &freeze).unwrap();
        for (t, g) in p.tensors().iter().zip(&grads.0) {
            assert_eq!(g.is_some(), !freeze.is_frozen(t.group), "{}", t.name);
        }
    }
}
