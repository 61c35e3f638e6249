//! Few-shot experiment harness: pretraining, the k-shot grid and the
//! branch ablations, with resumable CSV output.

mod ablation;
mod grid;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{generate_fgsynth, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, with_backbone, FusionPoint, ModelConfig, Pathway, SalModParams};
use crate::rng::Rng;
use crate::train::{pretrain_backbone, pretrain_saliency, Stage, TrainConfig};

pub use ablation::{
    ablate_fusion_point, ablate_saliency_depth, render_summary, summarize_ablation, AblationOutcome, BASELINE_VARIANT,
};
pub use grid::{
    checkpoint_name, read_results, run_kshot_grid, write_results, GridOptions, GridOutcome, GridSpec, MeanRow, ResultTable, RunResult,
    CSV_HEADER,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// RGB branch only, fine-tuned from the pretrained backbone.
    BaselineRgb,
    /// Modulated network whose saliency branch skips Step 1.
    ScratchSal,
    /// Step 1 saliency branch, frozen during fine-tuning.
    ApproachA,
    /// Step 1 saliency branch, fine-tuned with everything else.
    ApproachB,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::BaselineRgb, Method::ScratchSal, Method::ApproachA, Method::ApproachB];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::BaselineRgb => "baseline-rgb",
            Method::ScratchSal => "scratch-sal",
            Method::ApproachA => "approach-a",
            Method::ApproachB => "approach-b",
        }
    }

    pub fn pathway(self) -> Pathway {
        match self {
            Method::BaselineRgb => Pathway::Baseline,
            _ => Pathway::Modulated,
        }
    }

    pub fn stage(self) -> Stage {
        match self {
            Method::ApproachA => Stage::FineTuneA,
            _ => Stage::FineTuneB,
        }
    }

    fn needs_step1(self) -> bool {
        matches!(self, Method::ApproachA | Method::ApproachB)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Training schedules of the three phases. Each run overrides the `seed`
/// fields with its own seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    /// Baseline classifier training on the pretraining classes.
    pub backbone: TrainConfig,
    /// Step 1 on held-out images of the pretraining classes.
    pub step1: TrainConfig,
    /// Step 2 on the k-shot target split.
    pub finetune: TrainConfig,
}

impl Default for Protocol {
    /// Schedules tuned for 64x64 FG-Synth with plain SGD.
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            backbone: TrainConfig {
                epochs: 20,
                lr: 0.05,
                ..base.clone()
            },
            step1: TrainConfig {
                epochs: 20,
                lr: 0.02,
                ..base.clone()
            },
            finetune: TrainConfig {
                epochs: 70,
                lr: 0.01,
                ..base
            },
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.step1.validate()?;
        self.finetune.validate()
    }
}

fn describe_train(cfg: &TrainConfig) -> String {
    format!(
        "epochs={},lr={:e},wd={:e},batch={},shuffle={}",
        cfg.epochs, cfg.lr, cfg.weight_decay, cfg.batch_size, cfg.shuffle
    )
}

fn seeded(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

/// Target data plus the two pretraining sets. `pretrain` trains the
/// backbone; `step1` holds different images of the same classes and drives
/// saliency pretraining.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub target: Dataset,
    pub pretrain: Dataset,
    pub step1: Dataset,
    fingerprints: [String; 3],
}

impl ExperimentData {
    pub fn new(target: Dataset, pretrain: Dataset, step1: Dataset) -> Result<Self> {
        if pretrain.classes != step1.classes {
            return Err(Error::Data(
                "step-1 data must cover exactly the pretraining classes".into(),
            ));
        }
        let pre: BTreeSet<&String> = pretrain.classes.iter().collect();
        if let Some(shared) = target.classes.iter().find(|c| pre.contains(c)) {
            return Err(Error::Data(format!(
                "class `{shared}` appears in both the target and the pretraining data"
            )));
        }
        for ds in [&target, &pretrain, &step1] {
            if ds.is_empty() {
                return Err(Error::Data(format!("dataset {} is empty", ds.source)));
            }
        }
        let fingerprints = [target.fingerprint(), pretrain.fingerprint(), step1.fingerprint()];
        Ok(Self {
            target,
            pretrain,
            step1,
            fingerprints,
        })
    }

    pub fn synth(spec: &SynthSpec) -> Result<Self> {
        Self::new(
            generate_fgsynth(&spec.target)?,
            generate_fgsynth(&spec.pretrain)?,
            generate_fgsynth(&spec.step1)?,
        )
    }

    /// Loads `root/target`, `root/pretrain` and `root/step1`.
    pub fn load(root: &std::path::Path) -> Result<Self> {
        Self::new(
            crate::data::load_ppm_dataset(&root.join("target"))?,
            crate::data::load_ppm_dataset(&root.join("pretrain"))?,
            crate::data::load_ppm_dataset(&root.join("step1"))?,
        )
    }

    fn describe(&self) -> String {
        format!(
            "target={}\npretrain={}\nstep1={}",
            self.fingerprints[0], self.fingerprints[1], self.fingerprints[2]
        )
    }
}

/// The three FG-Synth draws of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub target: SynthConfig,
    pub pretrain: SynthConfig,
    pub step1: SynthConfig,
}

impl Default for SynthSpec {
    /// 8 target glyph classes with 40 images each; 8 disjoint pretraining
    /// classes with 200 backbone images and 40 step-1 images each.
    fn default() -> Self {
        let pretrain = SynthConfig {
            seed: 1000,
            images_per_class: 200,
            ..SynthConfig::default()
        };
        Self {
            target: SynthConfig {
                class_offset: 8,
                seed: 2000,
                ..SynthConfig::default()
            },
            step1: SynthConfig {
                seed: 1001,
                images_per_class: 40,
                ..pretrain.clone()
            },
            pretrain,
        }
    }
}

/// Branch variant of the modulated network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Variant {
    pub saliency_depth: usize,
    pub fusion_point: FusionPoint,
}

impl Default for Variant {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            saliency_depth: d.saliency_depth,
            fusion_point: d.fusion_point,
        }
    }
}

impl Variant {
    fn config(self, num_classes: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            num_classes,
            saliency_depth: self.saliency_depth,
            fusion_point: self.fusion_point,
            seed,
        }
    }
}

/// Seed of the Step 2 classification head, shared by all methods of a run
/// so that they start from the same head.
fn head_seed(seed: u64) -> u64 {
    Rng::new(seed).split(0x68_65_61_64).next_u64()
}

type Slot = Arc<OnceLock<std::result::Result<Arc<SalModParams>, String>>>;

/// Pretrained parameter sets shared by the runs of one experiment,
/// computed at most once per key and optionally persisted as checkpoints.
pub struct Pretrainer<'d> {
    data: &'d ExperimentData,
    protocol: Protocol,
    cache_dir: Option<PathBuf>,
    slots: Mutex<HashMap<(u64, Option<Variant>), Slot>>,
    trained: std::sync::atomic::AtomicUsize,
}

impl<'d> Pretrainer<'d> {
    pub fn new(data: &'d ExperimentData, protocol: Protocol, cache_dir: Option<PathBuf>) -> Self {
        Self {
            data,
            protocol,
            cache_dir,
            slots: Mutex::new(HashMap::new()),
            trained: Default::default(),
        }
    }

    /// Number of pretraining phases actually trained (cache misses).
    pub fn trained(&self) -> usize {
        self.trained.load(std::sync::atomic::Ordering::SeqCst)
    }

    fn hash(&self, seed: u64, variant: Option<Variant>) -> String {
        let mut text = format!(
            "pretrain-v1\nseed={seed}\n{}\nbackbone={}",
            self.data.describe(),
            describe_train(&self.protocol.backbone)
        );
        if let Some(v) = variant {
            text += &format!(
                "\nstep1={}\ndepth={}\nfusion={}",
                describe_train(&self.protocol.step1),
                v.saliency_depth,
                v.fusion_point
            );
        }
        short_hash(&text)
    }

    fn slot(&self, key: (u64, Option<Variant>)) -> Slot {
        self.slots.lock().expect("cache lock").entry(key).or_default().clone()
    }

    fn cached(&self, seed: u64, variant: Option<Variant>, train: impl FnOnce() -> Result<SalModParams>) -> Result<Arc<SalModParams>> {
        let slot = self.slot((seed, variant));
        let res = slot.get_or_init(|| {
            let path = self.cache_dir.as_ref().map(|d| {
                let kind = if variant.is_some() { "step1" } else { "backbone" };
                d.join(format!("{kind}-seed{seed}-{}.ck", self.hash(seed, variant)))
            });
            if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                log::info!("loading {}", p.display());
                return Checkpoint::load(p).map(|c| Arc::new(c.params)).map_err(|e| e.to_string());
            }
            let params = train().map_err(|e| e.to_string())?;
            self.trained.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if let Some(p) = path {
                Checkpoint::new(params.clone(), self.data.pretrain.classes.clone())
                    .and_then(|c| c.save(&p))
                    .map_err(|e| e.to_string())?;
            }
            Ok(Arc::new(params))
        });
        res.clone().map_err(Error::Data)
    }

    /// Baseline classifier trained on the pretraining classes.
    pub fn backbone(&self, seed: u64) -> Result<Arc<SalModParams>> {
        self.cached(seed, None, || {
            let cfg = Variant::default().config(self.data.pretrain.num_classes(), seed);
            let mut params = build_model(&cfg)?;
            log::info!("seed {seed}: training backbone");
            pretrain_backbone(&mut params, &self.data.pretrain, &seeded(&self.protocol.backbone, seed))?;
            Ok(params)
        })
    }

    /// Backbone plus a freshly initialized saliency branch of `variant`.
    pub fn scratch(&self, seed: u64, variant: Variant) -> Result<SalModParams> {
        let backbone = self.backbone(seed)?;
        with_backbone(&variant.config(self.data.pretrain.num_classes(), seed), &backbone)
    }

    /// Step 1 output for `variant`.
    pub fn step1(&self, seed: u64, variant: Variant) -> Result<Arc<SalModParams>> {
        self.cached(seed, Some(variant), || {
            let mut params = self.scratch(seed, variant)?;
            log::info!("seed {seed}: step 1 for depth {} at {}", variant.saliency_depth, variant.fusion_point);
            pretrain_saliency(&mut params, &self.data.step1, &seeded(&self.protocol.step1, seed))?;
            Ok(params)
        })
    }

    /// Starting point of Step 2 for `method`, head not yet replaced.
    pub fn start(&self, method: Method, seed: u64, variant: Variant) -> Result<SalModParams> {
        if method.needs_step1() {
            Ok((*self.step1(seed, variant)?).clone())
        } else {
            self.scratch(seed, variant)
        }
    }
}

fn short_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}
