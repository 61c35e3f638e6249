use crate::error::{Error, Result};
use crate::optim::Group;
use crate::rng::{xavier_init, Rng};
use crate::tensor::Tensor;

use super::config::{ConvSpec, FusionPoint, ModelConfig, HEAD_INPUTS, RGB_LAYERS, SALIENCY_LAYERS};

/// A named parameter tensor and the group it is frozen with.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// Full parameter set of the two-branch network.
///
/// Tensor order is fixed: `conv1..conv4` (weight, bias), `head` (weight,
/// bias), `sal_conv1..sal_conv{depth}` (weight, bias), `sal_score` (weight,
/// bias). Gradients and checkpoints use the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct SalModParams {
    config: ModelConfig,
    tensors: Vec<ParamTensor>,
}

pub(crate) const HEAD: usize = 8;
pub(crate) const SAL_START: usize = 10;

// Per-layer streams so that each tensor depends only on the seed and its
// layer, not on the saliency depth or fusion point.
const RGB_STREAM: u64 = 100;
const HEAD_STREAM: u64 = 200;
const SAL_STREAM: u64 = 300;
const SCORE_STREAM: u64 = 400;

/// RGB-branch convolutions before the fusion point belong to `rgb`, the rest to `joint`.
pub fn rgb_layer_group(layer: usize, fusion: FusionPoint) -> Group {
    let last_rgb = match fusion {
        FusionPoint::BeforePool2 | FusionPoint::AfterPool2 => 1,
        FusionPoint::AfterConv3 => 2,
        FusionPoint::AfterConv4 => 3,
    };
    if layer <= last_rgb {
        Group::Rgb
    } else {
        Group::Joint
    }
}

fn conv_tensors(name: &str, group: Group, spec: &ConvSpec, rng: &mut Rng) -> Result<[ParamTensor; 2]> {
    let k2 = spec.kernel * spec.kernel;
    let weight = xavier_init(
        spec.in_channels * k2,
        spec.out_channels * k2,
        &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
        rng,
    )?;
    Ok([
        ParamTensor {
            name: format!("{name}.weight"),
            group,
            value: weight,
        },
        ParamTensor {
            name: format!("{name}.bias"),
            group,
            value: Tensor::zeros(&[spec.out_channels]),
        },
    ])
}

fn head_tensors(num_classes: usize, rng: &mut Rng) -> Result<[ParamTensor; 2]> {
    let weight = xavier_init(HEAD_INPUTS, num_classes, &[num_classes, HEAD_INPUTS], rng)?;
    Ok([
        ParamTensor {
            name: "head.weight".into(),
            group: Group::Head,
            value: weight,
        },
        ParamTensor {
            name: "head.bias".into(),
            group: Group::Head,
            value: Tensor::zeros(&[num_classes]),
        },
    ])
}

/// Instantiates the reference topology with Xavier-uniform weights and zero
/// biases, deterministically from `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<SalModParams> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let mut tensors = Vec::new();
    for (i, spec) in RGB_LAYERS.iter().enumerate() {
        let group = rgb_layer_group(i, config.fusion_point);
        let mut rng = root.split(RGB_STREAM + i as u64);
        tensors.extend(conv_tensors(&format!("conv{}", i + 1), group, spec, &mut rng)?);
    }
    tensors.extend(head_tensors(config.num_classes, &mut root.split(HEAD_STREAM))?);
    for (j, spec) in SALIENCY_LAYERS[..config.saliency_depth].iter().enumerate() {
        let mut rng = root.split(SAL_STREAM + j as u64);
        tensors.extend(conv_tensors(&format!("sal_conv{}", j + 1), Group::Sal, spec, &mut rng)?);
    }
    let score = ConvSpec {
        in_channels: config.saliency_channels(),
        out_channels: 1,
        kernel: 1,
        stride: 1,
        pad: 0,
    };
    tensors.extend(conv_tensors("sal_score", Group::Sal, &score, &mut root.split(SCORE_STREAM))?);
    Ok(SalModParams {
        config: config.clone(),
        tensors,
    })
}

/// Parameter set for `config` whose RGB, joint and head tensors are copied
/// from `backbone`; the saliency branch is a fresh initialization under
/// `config.seed`. The backbone's own saliency branch and fusion point are
/// ignored, so one pretrained backbone serves every branch variant.
pub fn with_backbone(config: &ModelConfig, backbone: &SalModParams) -> Result<SalModParams> {
    let mut out = build_model(config)?;
    for t in out.tensors.iter_mut().filter(|t| t.group != Group::Sal) {
        let src = backbone
            .get(&t.name)
            .ok_or_else(|| Error::Shape(format!("backbone lacks {}", t.name)))?;
        if src.value.shape() != t.value.shape() {
            return Err(Error::Shape(format!(
                "{}: backbone shape {:?}, expected {:?}",
                t.name,
                src.value.shape(),
                t.value.shape()
            )));
        }
        t.value = src.value.clone();
    }
    Ok(out)
}

impl SalModParams {
    /// Reassembles a parameter set, checking names, groups and shapes
    /// against the topology `config` implies.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<ParamTensor>) -> Result<Self> {
        let reference = build_model(&config)?;
        if reference.tensors.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                reference.tensors.len(),
                tensors.len()
            )));
        }
        for (r, t) in reference.tensors.iter().zip(&tensors) {
            if r.name != t.name || r.group != t.group || r.value.shape() != t.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter mismatch: expected {} ({}) {:?}, got {} ({}) {:?}",
                    r.name,
                    r.group,
                    r.value.shape(),
                    t.name,
                    t.group,
                    t.value.shape()
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn group(&self, group: Group) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter().filter(move |t| t.group == group)
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Fresh Xavier head for `num_classes` outputs.
    pub fn reinit_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let [w, b] = head_tensors(num_classes, &mut Rng::new(seed).split(HEAD_STREAM))?;
        self.tensors[HEAD] = w;
        self.tensors[HEAD + 1] = b;
        self.config.num_classes = num_classes;
        Ok(())
    }

    /// Replaces the saliency branch with a fresh Xavier initialization.
    pub fn reinit_saliency(&mut self, seed: u64) -> Result<()> {
        let fresh = build_model(&ModelConfig {
            seed,
            ..self.config.clone()
        })?;
        for (dst, src) in self.tensors.iter_mut().zip(fresh.tensors) {
            if dst.group == Group::Sal {
                *dst = src;
            }
        }
        Ok(())
    }

    /// Zeroes the 1x1 scoring convolution so the hallucinated map is zero everywhere.
    pub fn zero_score(&mut self) {
        let n = self.tensors.len();
        for t in &mut self.tensors[n - 2..] {
            t.value.data_mut().fill(0.0);
        }
    }

    /// Bitwise equality of every tensor in `group`.
    pub fn group_bit_eq(&self, other: &SalModParams, group: Group) -> bool {
        let a: Vec<_> = self.group(group).collect();
        let b: Vec<_> = other.group(group).collect();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.name == y.name && x.value.bit_eq(&y.value))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let c = ModelConfig::default();
        assert_eq!(build_model(&c).unwrap(), build_model(&c).unwrap());
        let other = build_model(&ModelConfig { seed: 1, ..c }).unwrap();
        assert_ne!(build_model(&ModelConfig::default()).unwrap(), other);
    }

    #[test]
    fn every_tensor_has_one_group_and_known_shape() {
        let p = build_model(&ModelConfig::default()).unwrap();
        let names: Vec<&str> = p.tensors().iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names[0], "conv1.weight");
        assert_eq!(names[HEAD], "head.weight");
        assert_eq!(names[SAL_START], "sal_conv1.weight");
        assert_eq!(*names.last().unwrap(), "sal_score.bias");
        assert_eq!(p.get("conv1.weight").unwrap().value.shape(), &[16, 3, 5, 5]);
        assert_eq!(p.get("head.weight").unwrap().value.shape(), &[8, 768]);
        assert_eq!(p.get("sal_score.weight").unwrap().value.shape(), &[1, 32, 1, 1]);
        assert_eq!(p.get("conv3.weight").unwrap().group, Group::Joint);
        assert_eq!(p.get("conv2.weight").unwrap().group, Group::Rgb);
    }

    #[test]
    fn rgb_weights_independent_of_saliency_variant() {
        let a = build_model(&ModelConfig::default()).unwrap();
        let b = build_model(&ModelConfig {
            saliency_depth: 2,
            fusion_point: FusionPoint::AfterConv4,
            ..ModelConfig::default()
        })
        .unwrap();
        for i in 0..SAL_START {
            assert!(a.tensors()[i].value.bit_eq(&b.tensors()[i].value));
        }
        assert_eq!(b.get("conv4.weight").unwrap().group, Group::Rgb);
        assert_eq!(b.get("sal_score.weight").unwrap().value.shape(), &[1, 24, 1, 1]);
    }

    #[test]
    fn from_tensors_checks_layout() {
        let p = build_model(&ModelConfig::default()).unwrap();
        let ok = SalModParams::from_tensors(p.config().clone(), p.tensors().to_vec()).unwrap();
        assert_eq!(ok, p);
        let mut bad = p.tensors().to_vec();
        bad.swap(0, 2);
        assert!(SalModParams::from_tensors(p.config().clone(), bad).is_err());
    }

    #[test]
    fn with_backbone_copies_everything_but_saliency() {
        let mut bb = build_model(&ModelConfig::default()).unwrap();
        for t in bb.tensors_mut() {
            t.value.data_mut()[0] = 42.0;
        }
        let cfg = ModelConfig {
            saliency_depth: 2,
            fusion_point: FusionPoint::AfterConv4,
            seed: 5,
            ..ModelConfig::default()
        };
        let p = with_backbone(&cfg, &bb).unwrap();
        assert_eq!(p.config(), &cfg);
        for t in p.tensors() {
            assert_eq!(t.value.data()[0] == 42.0, t.group != Group::Sal, "{}", t.name);
        }
        let wrong_head = ModelConfig {
            num_classes: 3,
            ..cfg
        };
        assert!(with_backbone(&wrong_head, &bb).is_err());
    }

    #[test]
    fn reinit_head_changes_only_head() {
        let mut p = build_model(&ModelConfig::default()).unwrap();
        let before = p.clone();
        p.reinit_head(5, 99).unwrap();
        assert_eq!(p.num_classes(), 5);
        assert_eq!(p.get("head.weight").unwrap().value.shape(), &[5, 768]);
        for g in [Group::Rgb, Group::Joint, Group::Sal] {
            assert!(p.group_bit_eq(&before, g));
        }
    }
}
