//! Plain SGD with weight decay folded into the gradient, and group freezing.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::SalModParams;
use crate::tensor::Tensor;

/// Parameter group a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    /// RGB-branch convolutions up to the fusion point.
    Rgb,
    /// Saliency branch including its 1x1 scoring convolution.
    Sal,
    /// RGB-branch convolutions after the fusion point.
    Joint,
    /// Classification layer.
    Head,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Rgb, Group::Sal, Group::Joint, Group::Head];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Rgb => "rgb",
            Group::Sal => "sal",
            Group::Joint => "joint",
            Group::Head => "head",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{s}`")))
    }
}

/// Set of frozen groups.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeMask {
    frozen: BTreeSet<Group>,
}

impl FreezeMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self::of(&Group::ALL)
    }

    pub fn of(groups: &[Group]) -> Self {
        Self {
            frozen: groups.iter().copied().collect(),
        }
    }

    pub fn with(mut self, group: Group) -> Self {
        self.frozen.insert(group);
        self
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen.contains(&group)
    }

    pub fn groups(&self) -> impl Iterator<Item = Group> + '_ {
        self.frozen.iter().copied()
    }
}

/// One gradient slot per parameter tensor, in parameter order. `None` means
/// no gradient reached the tensor and is treated as zero.
#[derive(Clone, Debug)]
pub struct ParamGrads(pub Vec<Option<Tensor>>);

impl ParamGrads {
    pub fn zeros_like(count: usize) -> Self {
        Self(vec![None; count])
    }

    pub fn accumulate(&mut self, other: ParamGrads) {
        assert_eq!(self.0.len(), other.0.len());
        for (acc, g) in self.0.iter_mut().zip(other.0) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(&g),
                (None, Some(g)) => *acc = Some(g),
                (_, None) => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// `p <- p - lr * (g + weight_decay * p)` on every unfrozen tensor. Frozen
/// tensors are not touched at all, so they stay bit-identical.
pub fn sgd_step(
    params: &mut SalModParams,
    grads: &ParamGrads,
    lr: f64,
    weight_decay: f64,
    freeze: &FreezeMask,
) -> Result<()> {
    if grads.0.len() != params.tensors().len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameter tensors",
            grads.0.len(),
            params.tensors().len()
        )));
    }
    for (p, g) in params.tensors().iter().zip(&grads.0) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
    }
    for (p, g) in params.tensors_mut().iter_mut().zip(&grads.0) {
        if freeze.is_frozen(p.group) {
            continue;
        }
        match g {
            Some(g) => {
                for (w, gi) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * (gi + weight_decay * *w);
                }
            }
            None => {
                for w in p.value.data_mut() {
                    *w -= lr * (weight_decay * *w);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    #[test]
    fn group_round_trips_through_str() {
        for g in Group::ALL {
            assert_eq!(g.as_str().parse::<Group>().unwrap(), g);
        }
        assert!("bogus".parse::<Group>().is_err());
    }

    fn single_value_params(v: f64) -> SalModParams {
        let mut p = build_model(&ModelConfig::default()).unwrap();
        for t in p.tensors_mut() {
            t.value.data_mut().fill(v);
        }
        p
    }

    #[test]
    fn one_step_closed_form() {
        let mut p = single_value_params(1.0);
        let grads = ParamGrads::zeros_like(p.tensors().len());
        sgd_step(&mut p, &grads, 1e-4, 5e-3, &FreezeMask::none()).unwrap();
        for t in p.tensors() {
            assert!(t.value.data().iter().all(|&v| v == 1.0 - 1e-4 * 5e-3));
            assert!(t.value.data().iter().all(|&v| (v - 0.9999995).abs() < 1e-15));
        }
    }

    #[test]
    fn frozen_groups_untouched() {
        let mut p = build_model(&ModelConfig::default()).unwrap();
        let before = p.clone();
        let grads = ParamGrads(p.tensors().iter().map(|t| Some(Tensor::full(t.value.shape(), 1.0))).collect());
        sgd_step(&mut p, &grads, 0.1, 0.01, &FreezeMask::of(&[Group::Sal, Group::Head])).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            let frozen = matches!(a.group, Group::Sal | Group::Head);
            assert_eq!(a.value.bit_eq(&b.value), frozen, "{}", a.name);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = build_model(&ModelConfig::default()).unwrap();
        let mut grads = ParamGrads::zeros_like(p.tensors().len());
        grads.0[0] = Some(Tensor::zeros(&[3]));
        assert!(matches!(
            sgd_step(&mut p, &grads, 0.1, 0.0, &FreezeMask::none()),
            Err(Error::Shape(_))
        ));
        let short = ParamGrads::zeros_like(2);
        assert!(sgd_step(&mut p, &short, 0.1, 0.0, &FreezeMask::none()).is_err());
    }

    #[test]
    fn quadratic_recurrence_ten_steps() {
        // loss = 0.5 * c * (w - t)^2  =>  g = c (w - t)
        let (c, t, lr, wd) = (2.0, 3.0, 0.05, 0.01);
        let mut p = single_value_params(0.5);
        let mut w_ref = 0.5_f64;
        for _ in 0..10 {
            let grads = ParamGrads(
                p.tensors()
                    .iter()
                    .map(|x| Some(x.value.map(|w| c * (w - t))))
                    .collect(),
            );
            sgd_step(&mut p, &grads, lr, wd, &FreezeMask::none()).unwrap();
            w_ref -= lr * (c * (w_ref - t) + wd * w_ref);
        }
        // independent closed form of the same linear recurrence
        let a = 1.0 - lr * (c + wd);
        let fixed = c * t / (c + wd);
        let closed = fixed + (0.5 - fixed) * a.powi(10);
        assert!((w_ref - closed).abs() < 1e-12);
        for x in p.tensors() {
            assert!(x.value.data().iter().all(|&v| v == w_ref));
        }
    }
}
