use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ltcil_core::checkpoint::save_checkpoint;
use ltcil_core::eval::{spearman, MetricsRecord, SubgroupBounds};
use ltcil_core::seed::sub_seed;
use ltcil_core::stream::{load_cifar100_dir, make_stream, synth_dataset, ClassCountPlan, Dataset, SynthConfig, TaskStream};
use ltcil_core::trainer::{run_experiment, AblationMode, ExperimentSpec, WeightSample};
use ltcil_core::Real;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, ExperimentConfig, Resolved};
use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Command-line overrides on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<AblationMode>,
    pub precision: Precision,
}

/// The resolved config after overrides, plus its source text for diagnostics.
pub fn load_config(opts: &RunOptions) -> Result<Resolved, CliError> {
    let text = fs::read_to_string(&opts.config).map_err(|e| CliError::Config {
        file: opts.config.clone(),
        field: None,
        line: None,
        message: format!("cannot read: {e}"),
    })?;
    let mut raw = ExperimentConfig::from_toml(&text, &opts.config)?;
    if let Some(seed) = opts.seed {
        raw.seed = seed;
    }
    if let Some(mode) = opts.mode {
        raw.mode = mode;
    }
    if let Some(out) = &opts.out {
        raw.output = Some(out.clone());
    }
    raw.resolve(&text, &opts.config)
}

pub fn load_dataset(r: &Resolved) -> Result<Dataset, CliError> {
    match &r.source {
        DatasetSource::Cifar100 { dir } => load_cifar100_dir(dir).map_err(|e| CliError::runtime("load-dataset", e)),
        DatasetSource::Synthetic { classes, per_class } => Ok(synth_dataset(&SynthConfig {
            classes: *classes,
            train_per_class: *per_class,
            test_per_class: r.raw.synth_test_per_class,
            height: r.backbone.image_height,
            width: r.backbone.image_width,
            channels: 3,
            noise: r.raw.synth_noise,
            seed: r.raw.synth_seed,
        })),
    }
}

pub fn build_stream(r: &Resolved, data: &Dataset) -> Result<TaskStream, CliError> {
    let seed = r.raw.seed;
    let plan = ClassCountPlan::new(data.num_classes, r.raw.n_max, r.raw.rho, r.raw.scenario, sub_seed(seed, "order"))
        .map_err(|e| CliError::runtime("build-stream", e))?;
    make_stream(&plan, r.split, data, sub_seed(seed, "stream")).map_err(|e| CliError::runtime("build-stream", e))
}

/// Exclusive claim on a run directory, released on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::runtime("prepare-output", format!("{}: {e}", dir.display())))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::runtime(
                "prepare-output",
                format!("{} is locked by another run (remove {} if it is stale)", dir.display(), path.display()),
            )),
            Err(e) => Err(CliError::runtime("prepare-output", format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct ConfigFile {
    pub config_hash: String,
    pub config: ExperimentConfig,
}

/// `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub config_hash: String,
    pub mode: AblationMode,
    pub seed: u64,
    pub precision: Precision,
    pub bounds: SubgroupBounds,
    pub metrics: MetricsRecord,
}

/// What a finished run reports back.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: SummaryFile,
    pub weights: Vec<WeightSample>,
    pub stream_fingerprint: String,
}

impl RunOutcome {
    /// Spearman correlation between `N(y)` and the class-mean logged weight.
    pub fn weight_trend(&self) -> Option<f64> {
        weight_trend(&self.weights)
    }
}

/// Class-level `(N(y), mean w)` pairs in class order.
pub fn class_mean_weights(weights: &[WeightSample]) -> Vec<(usize, usize, f64)> {
    let mut by: BTreeMap<usize, (usize, f64, usize)> = BTreeMap::new();
    for w in weights {
        let e = by.entry(w.class).or_insert((w.count, 0.0, 0));
        e.1 += w.weight;
        e.2 += 1;
    }
    by.into_iter().map(|(c, (n, s, k))| (c, n, s / k as f64)).collect()
}

pub fn weight_trend(weights: &[WeightSample]) -> Option<f64> {
    let pairs = class_mean_weights(weights);
    let x: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    spearman(&x, &y)
}

fn io<'a>(stage: &'static str, path: &'a Path) -> impl Fn(std::io::Error) -> CliError + 'a {
    move |e| CliError::runtime(stage, format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io("write-artifacts", path))
}

fn json_line<S: Serialize>(v: &S) -> String {
    serde_json::to_string(v).expect("serialisable record")
}

fn csv_writer(path: &Path, hash: &str) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let mut f = BufWriter::new(File::create(path).map_err(io("write-artifacts", path))?);
    writeln!(f, "# config_hash={hash}").map_err(io("write-artifacts", path))?;
    Ok(csv::Writer::from_writer(f))
}

fn execute<T: Real>(r: &Resolved, data: &Dataset, stream: &TaskStream, dir: &Path, precision: Precision) -> Result<RunOutcome, CliError> {
    let hash = &r.hash;
    // the output location is not part of the experiment, so identical configs give identical files
    let config = ConfigFile { config_hash: hash.clone(), config: ExperimentConfig { output: None, ..r.raw.clone() } };
    write_text(&dir.join("config.json"), &(serde_json::to_string_pretty(&config).expect("config") + "\n"))?;
    write_text(&dir.join("manifest.jsonl"), &stream.manifest(hash))?;

    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io("write-artifacts", &ckpt_dir))?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io("write-artifacts", &metrics_path))?);

    let spec = ExperimentSpec {
        dataset: data,
        stream,
        train: r.train.clone(),
        backbone: r.backbone.clone(),
        bounds: r.bounds,
        config_hash: hash.clone(),
    };
    let out = run_experiment::<T>(&spec, |record, state| {
        writeln!(metrics, "{}", json_line(record))?;
        metrics.flush()?;
        save_checkpoint(&ckpt_dir.join(format!("task{}.ckpt", record.task)), hash, record.task, state.batch_rng(), &state.all_params())
    })
    .map_err(|e| CliError::runtime("train", e))?;
    drop(metrics);

    let summary = SummaryFile {
        config_hash: hash.clone(),
        mode: r.train.mode,
        seed: r.raw.seed,
        precision,
        bounds: r.bounds,
        metrics: out.summary.clone(),
    };
    write_text(&dir.join("summary.json"), &(serde_json::to_string_pretty(&summary).expect("summary") + "\n"))?;

    let path = dir.join("per_class.csv");
    let mut w = csv_writer(&path, hash)?;
    let wr = |e: csv::Error| CliError::runtime("write-artifacts", format!("{}: {e}", path.display()));
    w.write_record(["class", "count", "subgroup", "correct", "total", "accuracy"]).map_err(wr)?;
    for (class, (correct, total)) in &out.per_class {
        let count = stream.frequency.get(*class).unwrap_or(0);
        let group = format!("{:?}", r.bounds.classify(count)).to_lowercase();
        let acc = 100.0 * *correct as f64 / *total as f64;
        w.write_record([class.to_string(), count.to_string(), group, correct.to_string(), total.to_string(), format!("{acc}")]).map_err(wr)?;
    }
    w.flush().map_err(io("write-artifacts", &path))?;

    let path = dir.join("assigner_weights.csv");
    let mut w = csv_writer(&path, hash)?;
    let wr = |e: csv::Error| CliError::runtime("write-artifacts", format!("{}: {e}", path.display()));
    w.write_record(["task", "instance", "class", "count", "weight"]).map_err(wr)?;
    for s in &out.weights {
        w.write_record([s.task.to_string(), s.instance.to_string(), s.class.to_string(), s.count.to_string(), format!("{}", s.weight)]).map_err(wr)?;
    }
    w.flush().map_err(io("write-artifacts", &path))?;

    Ok(RunOutcome { dir: dir.to_path_buf(), summary, weights: out.weights, stream_fingerprint: stream.fingerprint() })
}

fn run_resolved(r: &Resolved, data: &Dataset, stream: &TaskStream, dir: &Path, precision: Precision) -> Result<RunOutcome, CliError> {
    let _lock = RunLock::acquire(dir)?;
    match precision {
        Precision::F32 => execute::<f32>(r, data, stream, dir, precision),
        Precision::F64 => execute::<f64>(r, data, stream, dir, precision),
    }
}

fn output_dir(r: &Resolved, opts: &RunOptions) -> Result<PathBuf, CliError> {
    r.raw.output.clone().ok_or_else(|| CliError::Config {
        file: opts.config.clone(),
        field: Some("output"),
        line: None,
        message: "no output directory: set `output` or pass --out".into(),
    })
}

/// `run`: one experiment into one directory.
pub fn cmd_run(opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let r = load_config(opts)?;
    let dir = output_dir(&r, opts)?;
    let data = load_dataset(&r)?;
    let stream = build_stream(&r, &data)?;
    run_resolved(&r, &data, &stream, &dir, opts.precision)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub seed: u64,
    pub config_hash: String,
    pub stream_fingerprint: String,
    pub average: f64,
    pub last: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub weight_trend: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeMeans {
    pub mode: AblationMode,
    pub average: f64,
    pub last: f64,
    /// Mean over seeds where the subgroup is present.
    pub few: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub means: Vec<ModeMeans>,
    /// Modes sorted by mean last accuracy, best first.
    pub order_by_last: Vec<AblationMode>,
    pub order_by_few: Vec<AblationMode>,
}

impl AblationReport {
    pub fn mean(&self, mode: AblationMode) -> Option<&ModeMeans> {
        self.means.iter().find(|m| m.mode == mode)
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

/// `ablate`: every ablation mode under each seed, sharing streams across modes.
pub fn cmd_ablate(opts: &RunOptions, seeds: &[u64]) -> Result<AblationReport, CliError> {
    let base = load_config(opts)?;
    let root = output_dir(&base, opts)?;
    let data = load_dataset(&base)?;
    let seeds: Vec<u64> = if seeds.is_empty() { vec![base.raw.seed] } else { seeds.to_vec() };
    let mut rows = Vec::new();
    for &seed in &seeds {
        let stream = build_stream(&load_config(&RunOptions { seed: Some(seed), ..opts.clone() })?, &data)?;
        for mode in AblationMode::ABLATIONS {
            let r = load_config(&RunOptions { seed: Some(seed), mode: Some(mode), ..opts.clone() })?;
            let dir = root.join(mode.name()).join(format!("seed{seed}"));
            let out = run_resolved(&r, &data, &stream, &dir, opts.precision)?;
            let m = &out.summary.metrics;
            rows.push(AblationRow {
                mode,
                seed,
                config_hash: r.hash.clone(),
                stream_fingerprint: out.stream_fingerprint.clone(),
                average: m.average,
                last: m.last,
                many: m.subgroups.many,
                medium: m.subgroups.medium,
                few: m.subgroups.few,
                weight_trend: out.weight_trend(),
            });
        }
    }
    let means: Vec<ModeMeans> = AblationMode::ABLATIONS
        .iter()
        .map(|&mode| {
            let of = |f: fn(&AblationRow) -> Option<f64>| mean_of(rows.iter().filter(|r| r.mode == mode).map(f));
            ModeMeans {
                mode,
                average: of(|r| Some(r.average)).unwrap_or(f64::NAN),
                last: of(|r| Some(r.last)).unwrap_or(f64::NAN),
                few: of(|r| r.few),
            }
        })
        .collect();
    let order = |key: fn(&ModeMeans) -> f64| {
        let mut m = means.clone();
        m.sort_by(|a, b| key(b).total_cmp(&key(a)));
        m.into_iter().map(|m| m.mode).collect::<Vec<_>>()
    };
    let report = AblationReport {
        order_by_last: order(|m| m.last),
        order_by_few: order(|m| m.few.unwrap_or(f64::NEG_INFINITY)),
        rows,
        means,
    };
    write_ablation(&root, &report)?;
    Ok(report)
}

fn write_ablation(root: &Path, report: &AblationReport) -> Result<(), CliError> {
    let path = root.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::runtime("write-artifacts", format!("{}: {e}", path.display())))?;
    let wr = |e: csv::Error| CliError::runtime("write-artifacts", format!("{}: {e}", path.display()));
    w.write_record(["mode", "seed", "config_hash", "stream_fingerprint", "average", "last", "many", "medium", "few", "weight_trend"]).map_err(wr)?;
    for r in &report.rows {
        w.write_record([
            r.mode.name().to_string(),
            r.seed.to_string(),
            r.config_hash.clone(),
            r.stream_fingerprint.clone(),
            format!("{}", r.average),
            format!("{}", r.last),
            fmt_opt(r.many),
            fmt_opt(r.medium),
            fmt_opt(r.few),
            fmt_opt(r.weight_trend),
        ])
        .map_err(wr)?;
    }
    w.flush().map_err(io("write-artifacts", &path))?;
    write_text(&root.join("ablation.json"), &(serde_json::to_string_pretty(report).expect("report") + "\n"))?;
    write_text(&root.join("ablation.txt"), &render_ablation(report))
}

pub fn render_ablation(report: &AblationReport) -> String {
    let mut s = String::from("mode          seed   avg     last    many    medium  few\n");
    for r in &report.rows {
        s.push_str(&format!(
            "{:<13} {:<6} {:<7.2} {:<7.2} {:<7} {:<7} {}\n",
            r.mode.name(),
            r.seed,
            r.average,
            r.last,
            fmt_opt(r.many),
            fmt_opt(r.medium),
            fmt_opt(r.few)
        ));
    }
    s.push_str("\nmeans over seeds\n");
    for m in &report.means {
        s.push_str(&format!("{:<13} avg {:.2}  last {:.2}  few {}\n", m.mode.name(), m.average, m.last, fmt_opt(m.few)));
    }
    let names = |v: &[AblationMode]| v.iter().map(|m| m.name()).collect::<Vec<_>>().join(" > ");
    s.push_str(&format!("\nordering by last accuracy: {}\n", names(&report.order_by_last)));
    s.push_str(&format!("ordering by few-shot accuracy: {}\n", names(&report.order_by_few)));
    s.push_str("\nconfig hashes\n");
    for r in &report.rows {
        s.push_str(&format!("{:<13} {:<6} {}\n", r.mode.name(), r.seed, r.config_hash));
    }
    s
}
