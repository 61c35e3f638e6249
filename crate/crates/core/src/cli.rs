//! Command-line front end. `run` parses arguments and executes one
//! subcommand; the binary maps its result to the exit status.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::checkpoint::Checkpoint;
use crate::data::{sample_kshot, KShot, Part};
use crate::diagnostics::{check_model_gradients, GradcheckConfig, GradcheckReport};
use crate::error::{Error, Result};
use crate::experiment::{
    ablate_fusion_point, ablate_saliency_depth, render_summary, run_kshot_grid, AblationOutcome, GridOutcome,
    Pretrainer,
};
use crate::model::{build_model, export_saliency, logits, saliency_forward, ModelConfig, Pathway, INPUT_SIZE};
use crate::rng::Rng;
use crate::settings::{Settings, KEYS, OUT_ENV};
use crate::tensor::Tensor;
use crate::train::predict;

const COMMANDS: &[(&str, &str)] = &[
    ("synth-gen", "write the synthetic target, pretraining and step-1 datasets as PPM/PGM"),
    ("pretrain", "train backbone and step-1 checkpoints for every seed"),
    ("grid", "run the k-shot grid and write grid.csv"),
    ("ablate-depth", "approach-b per saliency depth plus baseline"),
    ("ablate-fusion", "approach-b per fusion point plus baseline"),
    ("gradcheck", "compare backward gradients against finite differences"),
    ("dump-saliency", "export saliency maps and predictions for the test images"),
];

fn command() -> Command {
    let mut settings_args: Vec<Arg> = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .global(true)
        .help("key=value settings file; flags override it")];
    for (key, help) in KEYS {
        let mut arg = Arg::new(*key).long(*key).value_name("VALUE").global(true).help(*help);
        if *key == "out" {
            arg = arg.help(format!("{help} (default ${OUT_ENV} or salmod-out)"));
        }
        settings_args.push(arg);
    }
    let mut cmd = Command::new("salmod")
        .about("Saliency-modulated few-shot fine-grained classification")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("verbose")
                .short('v')
                .long("verbose")
                .action(ArgAction::Count)
                .global(true)
                .help("more log output"),
        )
        .args(settings_args);
    for (name, about) in COMMANDS {
        cmd = cmd.subcommand(Command::new(*name).about(*about));
    }
    cmd
}

fn settings_from(m: &ArgMatches) -> Result<Settings> {
    let mut s = Settings::from_env();
    if let Some(path) = m.get_one::<String>("config") {
        s.apply_file(Path::new(path))?;
    }
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            s.set(key, v)?;
        }
    }
    Ok(s)
}

/// Outcome of a command: text for stdout and whether it succeeded.
pub struct Report {
    pub text: String,
    pub success: bool,
}

impl Report {
    fn ok(text: String) -> Self {
        Self { text, success: true }
    }
}

/// Parses `args` (program name first) and runs the subcommand. Argument
/// errors, help and version requests come back as `clap::Error`.
pub fn parse(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> std::result::Result<(String, Settings, u8), ParseFailure> {
    let m = command().try_get_matches_from(args).map_err(ParseFailure::Clap)?;
    let verbosity = m.get_count("verbose");
    let (name, sub) = m.subcommand().expect("subcommand required");
    let mut settings = settings_from(&m).map_err(ParseFailure::Settings)?;
    // Global args given after the subcommand land in its matches.
    for (key, _) in KEYS {
        if let Some(v) = sub.get_one::<String>(key) {
            settings.set(key, v).map_err(ParseFailure::Settings)?;
        }
    }
    Ok((name.to_owned(), settings, verbosity))
}

#[derive(Debug)]
pub enum ParseFailure {
    Clap(clap::Error),
    Settings(Error),
}

pub fn execute(name: &str, s: &Settings) -> Result<Report> {
    match name {
        "synth-gen" => synth_gen(s),
        "pretrain" => pretrain(s),
        "grid" => grid(s),
        "ablate-depth" => ablate(s, true),
        "ablate-fusion" => ablate(s, false),
        "gradcheck" => gradcheck(s),
        "dump-saliency" => dump_saliency(s),
        other => Err(Error::Config(format!("unknown command `{other}`"))),
    }
}

fn synth_gen(s: &Settings) -> Result<Report> {
    let dir = s.out.join("data");
    let data = crate::experiment::ExperimentData::synth(&s.synth)?;
    let mut text = String::new();
    for (name, ds) in [("target", &data.target), ("pretrain", &data.pretrain), ("step1", &data.step1)] {
        let root = dir.join(name);
        ds.save(&root)?;
        let _ = writeln!(text, "{name}: {} classes, {} images -> {}", ds.num_classes(), ds.len(), root.display());
    }
    Ok(Report::ok(text))
}

fn pretrain(s: &Settings) -> Result<Report> {
    let data = s.data()?;
    let cache = s.out.join("pretrained");
    let pre = Pretrainer::new(&data, s.protocol.clone(), Some(cache.clone()));
    for seed in s.seed_list() {
        pre.backbone(seed)?;
        pre.step1(seed, s.variant)?;
    }
    Ok(Report::ok(format!(
        "{} pretraining phases trained, checkpoints in {}\n",
        pre.trained(),
        cache.display()
    )))
}

fn grid_text(out: &GridOutcome, path: &Path) -> String {
    let mut text = format!(
        "{} new runs, {} reused -> {}\n",
        out.new_runs,
        out.reused,
        path.display()
    );
    for (_, m) in &out.table.means {
        let _ = writeln!(text, "{:<13} k={:<3} mean accuracy {:.4}", m.method, m.k, m.accuracy);
    }
    text
}

fn grid(s: &Settings) -> Result<Report> {
    let data = s.data()?;
    let path = s.out.join("grid.csv");
    let out = run_kshot_grid(&data, &s.grid_spec()?, &path, &s.grid_options())?;
    Ok(Report::ok(grid_text(&out, &path)))
}

fn ablate(s: &Settings, depth: bool) -> Result<Report> {
    let data = s.data()?;
    let mut spec = s.grid_spec()?;
    let name = if depth { "ablate-depth" } else { "ablate-fusion" };
    let path = s.out.join(format!("{name}.csv"));
    let out: AblationOutcome = if depth {
        ablate_saliency_depth(&data, &spec, &s.depths, &path, &s.grid_options())?
    } else {
        spec.variant.saliency_depth = 4;
        ablate_fusion_point(&data, &spec, &s.fusion_points, &path, &s.grid_options())?
    };
    let summary = render_summary(&out.summary);
    let txt = s.out.join(format!("{name}.txt"));
    fs::write(&txt, &summary).map_err(|e| Error::io(&txt, e))?;
    Ok(Report::ok(format!("{}{summary}", grid_text(&out.grid, &path))))
}

/// Gradient check of the default model over `seeds` consecutive seeds.
pub fn run_gradcheck(first_seed: u64, seeds: usize, fault: Option<f64>) -> Result<GradcheckReport> {
    let mut total = GradcheckReport::default();
    for seed in first_seed..first_seed + seeds as u64 {
        let cfg = ModelConfig {
            seed,
            ..ModelConfig::default()
        };
        let params = build_model(&cfg)?;
        let mut rng = Rng::new(seed).split(0x696d_6167);
        let n = 3 * INPUT_SIZE * INPUT_SIZE;
        let image = Tensor::new(&[3, INPUT_SIZE, INPUT_SIZE], (0..n).map(|_| rng.uniform(0.0, 1.0)).collect())?;
        let label = rng.below(cfg.num_classes);
        let gc = GradcheckConfig {
            seed,
            fault: crate::graph::FaultInjection {
                modulate_feature_scale: fault,
            },
            ..GradcheckConfig::default()
        };
        total.merge(check_model_gradients(&params, &image, label, &gc)?);
    }
    Ok(total)
}

fn gradcheck(s: &Settings) -> Result<Report> {
    if s.gradcheck_seeds == 0 {
        return Err(Error::Config("gradcheck-seeds must be positive".into()));
    }
    let report = run_gradcheck(s.seed, s.gradcheck_seeds, None)?;
    let mut text = format!("{:<11} {:>14}  status (tolerance {:e})\n", "group", "max rel err", s.tolerance);
    for (group, err) in report.per_group() {
        let status = if err < s.tolerance { "ok" } else { "FAIL" };
        let _ = writeln!(text, "{group:<11} {err:>14.3e}  {status}");
    }
    let success = report.passed(s.tolerance);
    let _ = writeln!(text, "{}", if success { "PASS" } else { "FAIL" });
    Ok(Report { text, success })
}

fn dump_saliency(s: &Settings) -> Result<Report> {
    let path = s
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("dump-saliency needs --checkpoint".into()))?;
    let model = Checkpoint::load(path)?;
    let baseline = match &s.baseline_checkpoint {
        Some(p) => Checkpoint::load(p)?,
        None => model.clone(),
    };
    let data = s.data()?;
    let target = &data.target;
    for ck in [&model, &baseline] {
        if ck.classes != target.classes {
            return Err(Error::Config(format!(
                "checkpoint classes {:?} do not match the target classes",
                ck.classes
            )));
        }
    }
    // Test indices do not depend on k.
    let split = sample_kshot(target, KShot::Count(1), s.seed)?;
    let dir = s.out.join("saliency");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut index = String::new();
    for (c, idx) in split.indices(Part::Test).iter().enumerate() {
        for &i in idx {
            let sample = &target.images[c][i];
            let file = format!("{}_{}.pgm", target.classes[c], sample.name);
            let map = saliency_forward(&model.params, &sample.image)?;
            export_saliency(&map, INPUT_SIZE, INPUT_SIZE, &dir.join(&file))?;
            let base = predict(&logits(&baseline.params, &sample.image, Pathway::Baseline)?);
            let modulated = predict(&logits(&model.params, &sample.image, Pathway::Modulated)?);
            let _ = writeln!(
                index,
                "{file}\t{}\t{}\t{}",
                target.classes[c], target.classes[base], target.classes[modulated]
            );
        }
    }
    let index_path = dir.join("index.tsv");
    fs::write(&index_path, &index).map_err(|e| Error::io(&index_path, e))?;
    Ok(Report::ok(format!(
        "{} saliency maps -> {}\n",
        index.lines().count(),
        dir.display()
    )))
}
