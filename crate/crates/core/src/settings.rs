//! Flat `key=value` run settings. Every key doubles as a `--key` flag.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::KShot;
use crate::error::{Error, Result};
use crate::experiment::{ExperimentData, GridOptions, GridSpec, Method, Protocol, SynthSpec, Variant};
use crate::model::FusionPoint;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "SALMOD_OUT";
const DEFAULT_OUT: &str = "salmod-out";

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub seeds: usize,
    pub out: PathBuf,
    pub jobs: usize,
    pub k_list: Vec<KShot>,
    pub methods: Vec<Method>,
    pub data_dir: Option<PathBuf>,
    pub synth: SynthSpec,
    pub variant: Variant,
    pub protocol: Protocol,
    pub depths: Vec<usize>,
    pub fusion_points: Vec<FusionPoint>,
    pub tolerance: f64,
    pub gradcheck_seeds: usize,
    pub checkpoint: Option<PathBuf>,
    pub baseline_checkpoint: Option<PathBuf>,
    pub save_checkpoints: bool,
}

impl Default for Settings {
    fn default() -> Self {
        let grid = GridSpec::default();
        Self {
            seed: 0,
            seeds: grid.seeds.len(),
            out: PathBuf::from(DEFAULT_OUT),
            jobs: 1,
            k_list: grid.k_values,
            methods: grid.methods,
            data_dir: None,
            synth: SynthSpec::default(),
            variant: grid.variant,
            protocol: grid.protocol,
            depths: vec![1, 2, 3, 4],
            fusion_points: FusionPoint::ALL.to_vec(),
            tolerance: 1e-5,
            gradcheck_seeds: 5,
            checkpoint: None,
            baseline_checkpoint: None,
            save_checkpoints: false,
        }
    }
}

/// Every recognized key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "first run seed"),
    ("seeds", "number of consecutive seeds per grid cell"),
    ("out", "output directory"),
    ("jobs", "parallel worker threads"),
    ("k-list", "comma-separated training images per class, `K` for all"),
    ("methods", "comma-separated methods: baseline-rgb, scratch-sal, approach-a, approach-b"),
    ("data-dir", "directory holding target/, pretrain/ and step1/ datasets; synthetic data if unset"),
    ("images-per-class", "synthetic target images per class"),
    ("pretrain-images-per-class", "synthetic backbone-pretraining images per class"),
    ("step1-images-per-class", "synthetic step-1 images per class"),
    ("target-seed", "synthetic target set seed"),
    ("pretrain-seed", "synthetic backbone pretraining set seed"),
    ("step1-seed", "synthetic step-1 set seed"),
    ("saliency-depth", "saliency branch convolutions, 1 to 4"),
    ("fusion-point", "before-pool2, after-pool2, after-conv3 or after-conv4"),
    ("backbone-epochs", "backbone pretraining epochs"),
    ("backbone-lr", "backbone pretraining learning rate"),
    ("step1-epochs", "saliency pretraining epochs"),
    ("step1-lr", "saliency pretraining learning rate"),
    ("finetune-epochs", "fine-tuning epochs"),
    ("finetune-lr", "fine-tuning learning rate"),
    ("weight-decay", "weight decay of all phases"),
    ("batch-size", "minibatch size of all phases"),
    ("depths", "comma-separated saliency depths for ablate-depth"),
    ("fusion-points", "comma-separated fusion points for ablate-fusion"),
    ("tolerance", "gradcheck relative error tolerance"),
    ("gradcheck-seeds", "number of gradcheck seeds"),
    ("checkpoint", "model checkpoint for dump-saliency"),
    ("baseline-checkpoint", "optional separate baseline checkpoint for dump-saliency"),
    ("save-checkpoints", "write fine-tuned checkpoints during grid runs (true/false)"),
];

fn list<T>(value: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect()
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Settings {
    /// Defaults with `out` taken from the environment when set.
    pub fn from_env() -> Self {
        let mut s = Self::default();
        if let Some(dir) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            s.out = PathBuf::from(dir);
        }
        s
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "seeds" => self.seeds = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "jobs" => self.jobs = num(key, v)?,
            "k-list" => self.k_list = list(v, str::parse)?,
            "methods" => self.methods = list(v, str::parse)?,
            "data-dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "images-per-class" => self.synth.target.images_per_class = num(key, v)?,
            "pretrain-images-per-class" => self.synth.pretrain.images_per_class = num(key, v)?,
            "step1-images-per-class" => self.synth.step1.images_per_class = num(key, v)?,
            "target-seed" => self.synth.target.seed = num(key, v)?,
            "pretrain-seed" => self.synth.pretrain.seed = num(key, v)?,
            "step1-seed" => self.synth.step1.seed = num(key, v)?,
            "saliency-depth" => self.variant.saliency_depth = num(key, v)?,
            "fusion-point" => self.variant.fusion_point = v.parse()?,
            "backbone-epochs" => self.protocol.backbone.epochs = num(key, v)?,
            "backbone-lr" => self.protocol.backbone.lr = num(key, v)?,
            "step1-epochs" => self.protocol.step1.epochs = num(key, v)?,
            "step1-lr" => self.protocol.step1.lr = num(key, v)?,
            "finetune-epochs" => self.protocol.finetune.epochs = num(key, v)?,
            "finetune-lr" => self.protocol.finetune.lr = num(key, v)?,
            "weight-decay" => {
                let wd: f64 = num(key, v)?;
                for c in [&mut self.protocol.backbone, &mut self.protocol.step1, &mut self.protocol.finetune] {
                    c.weight_decay = wd;
                }
            }
            "batch-size" => {
                let b: usize = num(key, v)?;
                for c in [&mut self.protocol.backbone, &mut self.protocol.step1, &mut self.protocol.finetune] {
                    c.batch_size = b;
                }
            }
            "depths" => self.depths = list(v, |s| num(key, s))?,
            "fusion-points" => self.fusion_points = list(v, str::parse)?,
            "tolerance" => self.tolerance = num(key, v)?,
            "gradcheck-seeds" => self.gradcheck_seeds = num(key, v)?,
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "baseline-checkpoint" => self.baseline_checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "save-checkpoints" => self.save_checkpoints = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown setting `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` file. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(origin, format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::format(origin, format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Serializes every key. Applying the result to defaults reproduces
    /// `self` except for weight decay and batch size, which are written
    /// from the fine-tuning phase and applied to all phases.
    pub fn to_text(&self) -> String {
        let p = &self.protocol;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("seeds", self.seeds.to_string());
        kv("out", self.out.display().to_string());
        kv("jobs", self.jobs.to_string());
        kv("k-list", join(&self.k_list));
        kv("methods", join(&self.methods));
        kv("data-dir", path(&self.data_dir));
        kv("images-per-class", self.synth.target.images_per_class.to_string());
        kv("pretrain-images-per-class", self.synth.pretrain.images_per_class.to_string());
        kv("step1-images-per-class", self.synth.step1.images_per_class.to_string());
        kv("target-seed", self.synth.target.seed.to_string());
        kv("pretrain-seed", self.synth.pretrain.seed.to_string());
        kv("step1-seed", self.synth.step1.seed.to_string());
        kv("saliency-depth", self.variant.saliency_depth.to_string());
        kv("fusion-point", self.variant.fusion_point.to_string());
        kv("backbone-epochs", p.backbone.epochs.to_string());
        kv("backbone-lr", p.backbone.lr.to_string());
        kv("step1-epochs", p.step1.epochs.to_string());
        kv("step1-lr", p.step1.lr.to_string());
        kv("finetune-epochs", p.finetune.epochs.to_string());
        kv("finetune-lr", p.finetune.lr.to_string());
        kv("weight-decay", p.finetune.weight_decay.to_string());
        kv("batch-size", p.finetune.batch_size.to_string());
        kv("depths", join(&self.depths));
        kv("fusion-points", join(&self.fusion_points));
        kv("tolerance", self.tolerance.to_string());
        kv("gradcheck-seeds", self.gradcheck_seeds.to_string());
        kv("checkpoint", path(&self.checkpoint));
        kv("baseline-checkpoint", path(&self.baseline_checkpoint));
        kv("save-checkpoints", self.save_checkpoints.to_string());
        s
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        let spec = GridSpec {
            k_values: self.k_list.clone(),
            methods: self.methods.clone(),
            seeds: self.seed_list(),
            variant: self.variant,
            protocol: self.protocol.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn grid_options(&self) -> GridOptions {
        GridOptions {
            jobs: self.jobs,
            cache_dir: Some(self.out.join("pretrained")),
            stop_after: None,
            checkpoint_dir: self.save_checkpoints.then(|| self.out.join("checkpoints")),
        }
    }

    /// Datasets from `data-dir`, or the synthetic sets otherwise.
    pub fn data(&self) -> Result<ExperimentData> {
        match &self.data_dir {
            Some(dir) => ExperimentData::load(dir),
            None => ExperimentData::synth(&self.synth),
        }
    }
}
