//! Two-step training: saliency-branch pretraining with everything else
//! frozen, then fine-tuning on the target data with the saliency branch
//! frozen (Approach A) or trainable (Approach B).

use rayon::prelude::*;

use crate::data::{Dataset, KShotSplit, Part};
use crate::error::{Error, Result};
use crate::model::{self, Pathway, SalModParams};
use crate::ops;
use crate::optim::{sgd_step, FreezeMask, Group, ParamGrads};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Labelled image borrowed from a dataset.
pub type Labeled<'a> = (&'a Tensor, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            lr: 1e-4,
            weight_decay: 5e-3,
            batch_size: 16,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "lr {} and weight_decay {} must be finite and nonnegative",
                self.lr, self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Step 1: only the saliency branch learns.
    Pretrain,
    /// Step 2 with the saliency branch frozen.
    FineTuneA,
    /// Step 2 with every layer trainable.
    FineTuneB,
}

impl Stage {
    pub fn freeze_mask(self) -> FreezeMask {
        match self {
            Stage::Pretrain => FreezeMask::of(&[Group::Rgb, Group::Joint, Group::Head]),
            Stage::FineTuneA => FreezeMask::of(&[Group::Sal]),
            Stage::FineTuneB => FreezeMask::none(),
        }
    }
}

/// Mean of the per-sample gradients of one batch, summed in sample order.
pub fn batch_gradient(
    params: &SalModParams,
    batch: &[Labeled<'_>],
    pathway: Pathway,
    freeze: &FreezeMask,
) -> Result<(Vec<f64>, ParamGrads)> {
    let per_sample: Vec<(f64, ParamGrads)> = batch
        .par_iter()
        .map(|(img, label)| model::loss_and_grads(params, img, *label, pathway, freeze))
        .collect::<Result<_>>()?;
    let mut total = ParamGrads::zeros_like(params.tensors().len());
    let mut losses = Vec::with_capacity(batch.len());
    for (loss, grads) in per_sample {
        losses.push(loss);
        total.accumulate(grads);
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((losses, total))
}

/// One pass over `samples` in minibatches; the visiting order is a shuffle
/// keyed by `(cfg.seed, epoch)`. Returns the mean per-sample loss seen
/// during the pass.
pub fn train_epoch(
    params: &mut SalModParams,
    samples: &[Labeled<'_>],
    freeze: &FreezeMask,
    cfg: &TrainConfig,
    epoch: usize,
    pathway: Pathway,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if cfg.shuffle {
        Rng::new(cfg.seed).split(epoch as u64).shuffle(&mut order);
    }
    let mut loss_sum = 0.0;
    for chunk in order.chunks(cfg.batch_size.max(1)) {
        let batch: Vec<Labeled<'_>> = chunk.iter().map(|&i| samples[i]).collect();
        let (losses, grads) = batch_gradient(params, &batch, pathway, freeze)?;
        loss_sum += losses.iter().sum::<f64>();
        sgd_step(params, &grads, cfg.lr, cfg.weight_decay, freeze)?;
    }
    Ok(loss_sum / samples.len() as f64)
}

/// Trains the RGB, joint and head groups as a plain classifier. This
/// stands in for a backbone pretrained on a large source dataset.
pub fn pretrain_backbone(params: &mut SalModParams, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let samples = ds.labeled();
    if samples.is_empty() {
        return Err(Error::Data("pretraining dataset is empty".into()));
    }
    check_classes(params, ds)?;
    let freeze = FreezeMask::of(&[Group::Sal]);
    (0..cfg.epochs)
        .map(|e| train_epoch(params, &samples, &freeze, cfg, e, Pathway::Baseline))
        .collect()
}

/// Step 1: trains the saliency branch through the modulated classifier
/// while every other group stays frozen. Returns per-epoch mean losses.
pub fn pretrain_saliency(params: &mut SalModParams, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let samples = ds.labeled();
    if samples.is_empty() {
        return Err(Error::Data("pretraining dataset is empty".into()));
    }
    check_classes(params, ds)?;
    let freeze = Stage::Pretrain.freeze_mask();
    (0..cfg.epochs)
        .map(|e| train_epoch(params, &samples, &freeze, cfg, e, Pathway::Modulated))
        .collect()
}

fn check_classes(params: &SalModParams, ds: &Dataset) -> Result<()> {
    if params.num_classes() != ds.num_classes() {
        return Err(Error::Config(format!(
            "head has {} outputs but the dataset has {} classes",
            params.num_classes(),
            ds.num_classes()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Snapshot with the best validation accuracy (ties: lower validation loss, then earlier epoch).
    pub params: SalModParams,
    pub best_epoch: usize,
    pub val_accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub train_loss: Vec<f64>,
}

/// Step 2 on the `train` part of a k-shot split, selecting the snapshot
/// by validation accuracy. The head must already be sized for the target
/// classes. On the baseline pathway the saliency branch is frozen as well.
pub fn finetune(
    params: SalModParams,
    ds: &Dataset,
    split: &KShotSplit,
    mode: Stage,
    pathway: Pathway,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if mode == Stage::Pretrain {
        return Err(Error::Config("finetune needs FineTuneA or FineTuneB".into()));
    }
    check_classes(&params, ds)?;
    if split.train.len() != ds.num_classes() {
        return Err(Error::Data("split does not match dataset classes".into()));
    }
    for (c, idx) in split.train.iter().chain(&split.val).chain(&split.test).enumerate() {
        let n = ds.images[c % ds.num_classes()].len();
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::Data(format!("split index beyond the {n} images of class {}", c % ds.num_classes())));
        }
    }
    let mut freeze = mode.freeze_mask();
    if pathway == Pathway::Baseline {
        freeze = freeze.with(Group::Sal);
    }
    let train = split.samples(ds, Part::Train);
    let val = split.samples(ds, Part::Val);
    let mut params = params;
    let mut best: Option<(f64, f64, usize, SalModParams)> = None;
    let mut outcome_curves = (Vec::new(), Vec::new(), Vec::new());
    for epoch in 0..cfg.epochs {
        let tl = train_epoch(&mut params, &train, &freeze, cfg, epoch, pathway)?;
        let (acc, vl) = accuracy_and_loss(&params, &val, pathway)?;
        outcome_curves.0.push(tl);
        outcome_curves.1.push(acc);
        outcome_curves.2.push(vl);
        let better = match &best {
            None => true,
            Some((ba, bl, _, _)) => acc > *ba || (acc == *ba && vl < *bl),
        };
        if better {
            best = Some((acc, vl, epoch, params.clone()));
        }
    }
    let (_, _, best_epoch, snapshot) = best.expect("at least one epoch");
    Ok(FinetuneOutcome {
        params: snapshot,
        best_epoch,
        train_loss: outcome_curves.0,
        val_accuracy: outcome_curves.1,
        val_loss: outcome_curves.2,
    })
}

/// Class with the largest logit; ties go to the lowest index.
pub fn predict(logits: &Tensor) -> usize {
    logits.argmax()
}

pub fn predictions(params: &SalModParams, samples: &[Labeled<'_>], pathway: Pathway) -> Result<Vec<usize>> {
    samples
        .par_iter()
        .map(|(img, _)| model::logits(params, img, pathway).map(|z| predict(&z)))
        .collect()
}

/// Fraction of correctly classified samples. `use_modulation = false`
/// routes through the RGB-only network.
pub fn evaluate(params: &SalModParams, samples: &[Labeled<'_>], use_modulation: bool) -> Result<f64> {
    let pathway = if use_modulation {
        Pathway::Modulated
    } else {
        Pathway::Baseline
    };
    accuracy_and_loss(params, samples, pathway).map(|(acc, _)| acc)
}

/// Accuracy and mean cross-entropy from one forward pass per sample.
pub fn accuracy_and_loss(params: &SalModParams, samples: &[Labeled<'_>], pathway: Pathway) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let per: Vec<(bool, f64)> = samples
        .par_iter()
        .map(|(img, label)| {
            let z = model::logits(params, img, pathway)?;
            let (loss, _) = ops::softmax_cross_entropy(&z, *label)?;
            Ok((predict(&z) == *label, loss))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let correct = per.iter().filter(|(ok, _)| *ok).count() as f64;
    let loss = per.iter().map(|(_, l)| l).sum::<f64>() / n;
    Ok((correct / n, loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 70);
        assert_eq!(c.lr, 0.0001);
        assert_eq!(c.weight_decay, 0.005);
        assert_eq!(c.batch_size, 16);
        assert!(c.shuffle);
    }

    #[test]
    fn stage_masks() {
        let p = Stage::Pretrain.freeze_mask();
        assert!(p.is_frozen(Group::Rgb) && p.is_frozen(Group::Joint) && p.is_frozen(Group::Head));
        assert!(!p.is_frozen(Group::Sal));
        assert_eq!(Stage::FineTuneA.freeze_mask(), FreezeMask::of(&[Group::Sal]));
        assert_eq!(Stage::FineTuneB.freeze_mask(), FreezeMask::none());
    }

    #[test]
    fn argmax_tie_goes_low() {
        assert_eq!(predict(&Tensor::from_vec(vec![0.5, 0.5, 0.1])), 0);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
