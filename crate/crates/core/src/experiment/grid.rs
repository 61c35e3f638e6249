use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data::{sample_kshot, KShot, Part};
use crate::error::{Error, Result};
use crate::train::{evaluate, finetune};

use super::{describe_train, head_seed, seeded, short_hash, ExperimentData, Method, Pretrainer, Protocol, Variant};

pub const CSV_HEADER: [&str; 7] = ["method", "k", "seed", "accuracy", "epochs", "wall_time_s", "config_hash"];
const MEAN_SEED: &str = "MEAN";

/// One (method, k, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub method: Method,
    pub k: KShot,
    pub seed: u64,
    /// Test accuracy in `[0, 1]`.
    pub accuracy: f64,
    /// Epochs up to and including the selected snapshot.
    pub epochs: usize,
    pub wall_time_s: f64,
    pub config_hash: String,
}

/// Aggregate over the seeds of one (method, k) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanRow {
    pub method: Method,
    pub k: KShot,
    pub accuracy: f64,
    pub epochs: f64,
    pub wall_time_s: f64,
    pub config_hash: String,
}

/// Contents of a results CSV. Ablation tables carry a leading `variant`
/// column; for plain grids every variant is `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<(Option<String>, RunResult)>,
    pub means: Vec<(Option<String>, MeanRow)>,
}

impl ResultTable {
    /// Builds the table with one mean row per (variant, method, k), placed
    /// after the last seed row of its group. Groups keep first-seen order.
    pub fn with_means(rows: Vec<(Option<String>, RunResult)>) -> Self {
        let mut order: Vec<(Option<String>, Method, KShot)> = Vec::new();
        let mut groups: HashMap<(Option<String>, Method, KShot), Vec<&RunResult>> = HashMap::new();
        for (v, r) in &rows {
            let key = (v.clone(), r.method, r.k);
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        let means = order
            .into_iter()
            .map(|key| {
                let g = &groups[&key];
                let n = g.len() as f64;
                let hashes: Vec<&str> = g.iter().map(|r| r.config_hash.as_str()).collect();
                let row = MeanRow {
                    method: key.1,
                    k: key.2,
                    accuracy: g.iter().map(|r| r.accuracy).sum::<f64>() / n,
                    epochs: g.iter().map(|r| r.epochs as f64).sum::<f64>() / n,
                    wall_time_s: g.iter().map(|r| r.wall_time_s).sum::<f64>() / n,
                    config_hash: short_hash(&hashes.join(",")),
                };
                (key.0, row)
            })
            .collect();
        Self { rows, means }
    }

    pub fn mean(&self, method: Method, k: KShot) -> Option<f64> {
        self.means
            .iter()
            .find(|(_, m)| m.method == method && m.k == k)
            .map(|(_, m)| m.accuracy)
    }

    fn has_variant(&self) -> bool {
        self.rows.iter().any(|(v, _)| v.is_some())
    }
}

fn header(with_variant: bool) -> Vec<&'static str> {
    let mut h = Vec::new();
    if with_variant {
        h.push("variant");
    }
    h.extend(CSV_HEADER);
    h
}

fn run_record(variant: &Option<String>, r: &RunResult) -> Vec<String> {
    let mut rec: Vec<String> = variant.iter().cloned().collect();
    rec.extend([
        r.method.to_string(),
        r.k.to_string(),
        r.seed.to_string(),
        r.accuracy.to_string(),
        r.epochs.to_string(),
        format!("{:.3}", r.wall_time_s),
        r.config_hash.clone(),
    ]);
    rec
}

fn mean_record(variant: &Option<String>, m: &MeanRow) -> Vec<String> {
    let mut rec: Vec<String> = variant.iter().cloned().collect();
    rec.extend([
        m.method.to_string(),
        m.k.to_string(),
        MEAN_SEED.to_string(),
        m.accuracy.to_string(),
        format!("{:.2}", m.epochs),
        format!("{:.3}", m.wall_time_s),
        m.config_hash.clone(),
    ]);
    rec
}

/// Writes `table` in canonical order: each group's seed rows followed by
/// its mean row. The file is replaced atomically.
pub fn write_results(path: &Path, table: &ResultTable) -> Result<()> {
    let with_variant = table.has_variant();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(with_variant))?;
    let mut means = table.means.iter().peekable();
    for (i, (v, r)) in table.rows.iter().enumerate() {
        w.write_record(run_record(v, r))?;
        let last_of_group = table
            .rows
            .get(i + 1)
            .is_none_or(|(nv, nr)| nv != v || nr.method != r.method || nr.k != r.k);
        if last_of_group {
            if let Some((mv, m)) = means.next_if(|(mv, m)| mv == v && m.method == r.method && m.k == r.k) {
                w.write_record(mean_record(mv, m))?;
            }
        }
    }
    for (mv, m) in means {
        w.write_record(mean_record(mv, m))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a results CSV written by this module, with or without a
/// `variant` column.
pub fn read_results(path: &Path) -> Result<ResultTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text, path)
}

fn parse_results(text: &str, path: &Path) -> Result<ResultTable> {
    let mut rd = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let head: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    let with_variant = head.first().is_some_and(|h| h == "variant");
    if head != header(with_variant) {
        return Err(Error::format(path, format!("unexpected header {head:?}")));
    }
    let off = usize::from(with_variant);
    let mut table = ResultTable::default();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::format(path, format!("row {}: bad {what}", line + 2));
        let variant = with_variant.then(|| rec[0].to_owned());
        let method: Method = rec[off].parse().map_err(|_| bad("method"))?;
        let k: KShot = rec[off + 1].parse().map_err(|_| bad("k"))?;
        let accuracy: f64 = rec[off + 3].parse().map_err(|_| bad("accuracy"))?;
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(bad("accuracy"));
        }
        let wall_time_s: f64 = rec[off + 5].parse().map_err(|_| bad("wall_time_s"))?;
        let config_hash = rec[off + 6].to_owned();
        if &rec[off + 2] == MEAN_SEED {
            let epochs = rec[off + 4].parse().map_err(|_| bad("epochs"))?;
            table.means.push((
                variant,
                MeanRow {
                    method,
                    k,
                    accuracy,
                    epochs,
                    wall_time_s,
                    config_hash,
                },
            ));
        } else {
            table.rows.push((
                variant,
                RunResult {
                    method,
                    k,
                    seed: rec[off + 2].parse().map_err(|_| bad("seed"))?,
                    accuracy,
                    epochs: rec[off + 4].parse().map_err(|_| bad("epochs"))?,
                    wall_time_s,
                    config_hash,
                },
            ));
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    /// Strictly increasing.
    pub k_values: Vec<KShot>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub variant: Variant,
    pub protocol: Protocol,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            k_values: KShot::PROTOCOL.to_vec(),
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            variant: Variant::default(),
            protocol: Protocol::default(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid needs k values, methods and seeds".into()));
        }
        if self.k_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("k values must be strictly increasing".into()));
        }
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        let mut s = self.seeds.clone();
        s.sort();
        s.dedup();
        if m.len() != self.methods.len() || s.len() != self.seeds.len() {
            return Err(Error::Config("methods and seeds must not repeat".into()));
        }
        self.protocol.validate()
    }
}

#[derive(Clone, Debug, Default)]
pub struct GridOptions {
    /// Worker threads; 0 lets the thread pool decide.
    pub jobs: usize,
    /// Directory for pretrained checkpoints reused across invocations.
    pub cache_dir: Option<PathBuf>,
    /// Stops after this many new runs, leaving the CSV resumable. Used to
    /// exercise interruption.
    pub stop_after: Option<usize>,
    /// Where to save each run's selected snapshot, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub table: ResultTable,
    /// Runs trained by this invocation.
    pub new_runs: usize,
    /// Runs taken from the existing CSV.
    pub reused: usize,
    /// Pretraining phases trained by this invocation.
    pub pretraining_runs: usize,
    /// False when `stop_after` cut the grid short.
    pub complete: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct Cell {
    pub label: Option<String>,
    pub variant: Variant,
    pub method: Method,
    pub k: KShot,
    pub seed: u64,
}

fn cell_hash(data: &ExperimentData, protocol: &Protocol, c: &Cell) -> String {
    short_hash(&format!(
        "run-v1\nmethod={}\nk={}\nseed={}\ndepth={}\nfusion={}\n{}\nbackbone={}\nstep1={}\nfinetune={}",
        c.method,
        c.k,
        c.seed,
        c.variant.saliency_depth,
        c.variant.fusion_point,
        data.describe(),
        describe_train(&protocol.backbone),
        describe_train(&protocol.step1),
        describe_train(&protocol.finetune),
    ))
}

/// File name of a run's fine-tuned checkpoint.
pub fn checkpoint_name(label: Option<&str>, method: Method, k: KShot, seed: u64) -> String {
    let prefix = label.map(|l| format!("{l}-")).unwrap_or_default();
    format!("{prefix}{method}-k{k}-seed{seed}.ck")
}

fn run_cell(
    data: &ExperimentData,
    protocol: &Protocol,
    pre: &Pretrainer<'_>,
    c: &Cell,
    hash: String,
    checkpoint_dir: Option<&Path>,
) -> Result<RunResult> {
    let target = &data.target;
    let split = sample_kshot(target, c.k, c.seed)?;
    let mut params = pre.start(c.method, c.seed, c.variant)?;
    let started = Instant::now();
    params.reinit_head(target.num_classes(), head_seed(c.seed))?;
    let out = finetune(
        params,
        target,
        &split,
        c.method.stage(),
        c.method.pathway(),
        &seeded(&protocol.finetune, c.seed),
    )?;
    if let Some(dir) = checkpoint_dir {
        let name = checkpoint_name(c.label.as_deref(), c.method, c.k, c.seed);
        Checkpoint::new(out.params.clone(), target.classes.clone())?.save(&dir.join(name))?;
    }
    let test = split.samples(target, Part::Test);
    let accuracy = evaluate(&out.params, &test, c.method.pathway() == crate::model::Pathway::Modulated)?;
    log::info!(
        "{} k={} seed={}{}: accuracy {accuracy:.4}",
        c.method,
        c.k,
        c.seed,
        c.label.as_deref().map(|l| format!(" [{l}]")).unwrap_or_default()
    );
    Ok(RunResult {
        method: c.method,
        k: c.k,
        seed: c.seed,
        accuracy,
        epochs: out.best_epoch + 1,
        wall_time_s: started.elapsed().as_secs_f64(),
        config_hash: hash,
    })
}

struct Appender {
    file: std::fs::File,
    path: PathBuf,
    with_variant: bool,
}

impl Appender {
    fn open(path: &Path, with_variant: bool) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        if empty {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(header(with_variant))?;
            let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
            file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            file,
            path: path.to_owned(),
            with_variant,
        })
    }

    fn append(&mut self, label: &Option<String>, r: &RunResult) -> Result<()> {
        let label = if self.with_variant { label.clone() } else { None };
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(run_record(&label, r))?;
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        self.file.write_all(&bytes).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs `cells` against `csv_path`, skipping cells whose config hash is
/// already present, then rewrites the file canonically.
pub(crate) fn run_cells(
    data: &ExperimentData,
    protocol: &Protocol,
    cells: Vec<Cell>,
    csv_path: &Path,
    opts: &GridOptions,
) -> Result<GridOutcome> {
    protocol.validate()?;
    let with_variant = cells.iter().any(|c| c.label.is_some());
    let existing = if csv_path.exists() {
        let t = read_results(csv_path)?;
        if t.has_variant() != with_variant && !t.rows.is_empty() {
            return Err(Error::format(csv_path, "existing file has a different column layout"));
        }
        t
    } else {
        ResultTable::default()
    };
    let mut done: HashMap<String, RunResult> = existing
        .rows
        .into_iter()
        .map(|(_, r)| (r.config_hash.clone(), r))
        .collect();

    let hashes: Vec<String> = cells.iter().map(|c| cell_hash(data, protocol, c)).collect();
    let pending: Vec<usize> = (0..cells.len()).filter(|&i| !done.contains_key(&hashes[i])).collect();
    let reused = cells.len() - pending.len();

    let pre = Pretrainer::new(data, protocol.clone(), opts.cache_dir.clone());
    let appender = Mutex::new(Appender::open(csv_path, with_variant)?);
    let started = AtomicUsize::new(0);
    let limit = opts.stop_after.unwrap_or(usize::MAX);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let fresh: Vec<Option<RunResult>> = pool.install(|| {
        pending
            .par_iter()
            .map(|&i| {
                if started.fetch_add(1, Ordering::SeqCst) >= limit {
                    return Ok(None);
                }
                let r = run_cell(
                    data,
                    protocol,
                    &pre,
                    &cells[i],
                    hashes[i].clone(),
                    opts.checkpoint_dir.as_deref(),
                )?;
                appender.lock().expect("appender lock").append(&cells[i].label, &r)?;
                Ok(Some(r))
            })
            .collect::<Result<_>>()
    })?;
    let new_runs = fresh.iter().flatten().count();
    for r in fresh.into_iter().flatten() {
        done.insert(r.config_hash.clone(), r);
    }
    let complete = new_runs == pending.len();
    let rows: Vec<(Option<String>, RunResult)> = cells
        .iter()
        .zip(&hashes)
        .filter_map(|(c, h)| done.get(h).map(|r| (c.label.clone(), r.clone())))
        .collect();
    let table = ResultTable::with_means(rows);
    if complete {
        write_results(csv_path, &table)?;
    }
    Ok(GridOutcome {
        table,
        new_runs,
        reused,
        pretraining_runs: pre.trained(),
        complete,
    })
}

/// Runs every (method, k, seed) of `spec` and writes the results CSV.
/// Rows already present in `csv_path` with a matching config hash are
/// reused, so an interrupted grid resumes where it stopped.
pub fn run_kshot_grid(data: &ExperimentData, spec: &GridSpec, csv_path: &Path, opts: &GridOptions) -> Result<GridOutcome> {
    spec.validate()?;
    let cells = spec
        .methods
        .iter()
        .flat_map(|&method| {
            spec.k_values.iter().flat_map(move |&k| {
                spec.seeds.iter().map(move |&seed| Cell {
                    label: None,
                    variant: spec.variant,
                    method,
                    k,
                    seed,
                })
            })
        })
        .collect();
    run_cells(data, &spec.protocol, cells, csv_path, opts)
}
