use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ltcil_core::eval::{average_and_last, exemplar_equivalent, spearman, Subgroup, SubgroupAccuracy, TaskRecord};
use ltcil_core::trainer::WeightSample;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::run::{class_mean_weights, ConfigFile, SummaryFile};
use crate::CliError;

/// Parameter count of the reference-scale configuration used for the memory note.
pub const REFERENCE_PARAMS: u64 = 12_231_953;
/// Image shape of the reference-scale configuration.
pub const REFERENCE_IMAGE: [usize; 3] = [224, 224, 3];

#[derive(Deserialize)]
struct ManifestLine {
    config_hash: String,
}

/// One row of `assigner_weights_by_frequency.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrequencyRow {
    pub count: usize,
    pub classes: usize,
    pub instances: usize,
    pub mean_weight: f64,
}

/// Everything `report` derives from a run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub config_hash: String,
    pub accuracies: Vec<f64>,
    pub average: f64,
    pub last: f64,
    pub subgroups: SubgroupAccuracy,
    pub trainable_params: u64,
    pub exemplar_equivalent: u64,
    pub reference_exemplars: u64,
    pub weight_trend: Option<f64>,
    pub by_frequency: Vec<FrequencyRow>,
    pub text: String,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> CliError {
    CliError::runtime("report", format!("{}: {what}", path.display()))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| corrupt(path, e))
}

fn parse_json<D: DeserializeOwned>(path: &Path) -> Result<D, CliError> {
    serde_json::from_str(&read(path)?).map_err(|e| corrupt(path, e))
}

fn parse_jsonl<D: DeserializeOwned>(path: &Path) -> Result<Vec<D>, CliError> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| corrupt(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Reads a CSV whose first line is `# config_hash=<hash>`.
fn parse_csv<D: DeserializeOwned>(path: &Path) -> Result<(String, Vec<D>), CliError> {
    let text = read(path)?;
    let (first, rest) = text.split_once('\n').ok_or_else(|| corrupt(path, "empty file"))?;
    let hash = first.strip_prefix("# config_hash=").ok_or_else(|| corrupt(path, "missing `# config_hash=` header"))?;
    let rows = csv::Reader::from_reader(rest.as_bytes())
        .deserialize()
        .collect::<Result<Vec<D>, _>>()
        .map_err(|e| corrupt(path, e))?;
    Ok((hash.trim().to_string(), rows))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.2}"))
}

/// `report`: re-derives the headline numbers from a run directory and writes `report.txt`
/// and `assigner_weights_by_frequency.csv` next to the inputs.
pub fn cmd_report(dir: &Path) -> Result<Report, CliError> {
    let p = |name: &str| -> PathBuf { dir.join(name) };
    let config: ConfigFile = parse_json(&p("config.json"))?;
    let summary: SummaryFile = parse_json(&p("summary.json"))?;
    let records: Vec<TaskRecord> = parse_jsonl(&p("metrics.jsonl"))?;
    let manifest: Vec<ManifestLine> = parse_jsonl(&p("manifest.jsonl"))?;
    let (weights_hash, weights): (String, Vec<WeightSample>) = parse_csv(&p("assigner_weights.csv"))?;
    let (class_hash, _): (String, Vec<Vec<String>>) = parse_csv(&p("per_class.csv"))?;

    let hash = config.config_hash.clone();
    let mut hashes = vec![("summary.json", summary.config_hash.clone()), ("assigner_weights.csv", weights_hash), ("per_class.csv", class_hash)];
    hashes.extend(records.iter().map(|r| ("metrics.jsonl", r.config_hash.clone())));
    hashes.extend(manifest.iter().map(|m| ("manifest.jsonl", m.config_hash.clone())));
    if let Some((file, other)) = hashes.iter().find(|(_, h)| *h != hash) {
        return Err(corrupt(&p(file), format!("config hash {other} does not match config.json ({hash}); refusing to mix runs")));
    }

    let mut sorted = records.clone();
    sorted.sort_by_key(|r| r.task);
    if sorted.iter().enumerate().any(|(i, r)| r.task != i) {
        return Err(corrupt(&p("metrics.jsonl"), "task records are not numbered 0..T-1"));
    }
    let accuracies: Vec<f64> = sorted.iter().map(|r| r.accuracy).collect();
    let (average, last) = average_and_last(&accuracies).map_err(|e| corrupt(&p("metrics.jsonl"), e))?;
    let subgroups = sorted.last().expect("non-empty curve").subgroups.clone();
    let m = &summary.metrics;

    let mut groups: BTreeMap<usize, (usize, usize, f64)> = BTreeMap::new();
    for (_, count, mean) in class_mean_weights(&weights) {
        let e = groups.entry(count).or_default();
        e.0 += 1;
        e.2 += mean;
    }
    for w in &weights {
        groups.entry(w.count).or_default().1 += 1;
    }
    let by_frequency: Vec<FrequencyRow> = groups
        .into_iter()
        .rev()
        .map(|(count, (classes, instances, sum))| FrequencyRow { count, classes, instances, mean_weight: sum / classes as f64 })
        .collect();
    let trend = {
        let pairs = class_mean_weights(&weights);
        spearman(&pairs.iter().map(|p| p.1 as f64).collect::<Vec<_>>(), &pairs.iter().map(|p| p.2).collect::<Vec<_>>())
    };

    let path = p("assigner_weights_by_frequency.csv");
    let mut file = fs::File::create(&path).map_err(|e| corrupt(&path, e))?;
    writeln!(file, "# config_hash={hash}").map_err(|e| corrupt(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in &by_frequency {
        w.serialize(row).map_err(|e| corrupt(&path, e))?;
    }
    w.flush().map_err(|e| corrupt(&path, e))?;

    let reference = exemplar_equivalent(REFERENCE_PARAMS, REFERENCE_IMAGE);
    let mut t = String::new();
    let mut line = |s: String| {
        t.push_str(&s);
        t.push('\n');
    };
    line(format!("run {}  (mode {}, seed {}, {})", dir.display(), summary.mode, summary.seed, summary.precision.name()));
    line(format!("config hash {hash}"));
    line(String::new());
    line("accuracy after each task (all seen classes)".into());
    for r in &sorted {
        line(format!("  task {:>2}  classes {:>3}  acc {:6.2}", r.task, r.classes_seen, r.accuracy));
    }
    line(format!("average accuracy {average:.2}"));
    line(format!("last accuracy    {last:.2}"));
    if average != m.average || last != m.last {
        line(format!("  warning: summary.json holds average {:.2}, last {:.2}", m.average, m.last));
    }
    line(String::new());
    let b = subgroups.bounds;
    line(format!("subgroups after the last task (many >= {}, few <= {} training instances)", b.hi, b.lo));
    for (name, g) in [("many", Subgroup::Many), ("medium", Subgroup::Medium), ("few", Subgroup::Few)] {
        line(format!("  {name:<6} {:>7}  ({} test instances)", fmt_opt(subgroups.get(g)), subgroups.instances[g as usize]));
    }
    line(String::new());
    line(format!("trainable parameters {}", m.trainable_params));
    line(format!("exemplar equivalent  {} images of this run's input shape", m.exemplar_equivalent));
    line(format!(
        "memory note: at reference scale, {REFERENCE_PARAMS} trainable 32-bit parameters occupy the bytes of \
         floor({REFERENCE_PARAMS} * 4 / (224 * 224 * 3)) = {reference} uint8 images; the figure of 352 that is \
         sometimes quoted does not follow from this arithmetic"
    ));
    line(String::new());
    line("mean routing weight by training frequency".into());
    line("  count  classes  instances  mean_weight".into());
    for r in &by_frequency {
        line(format!("  {:>5}  {:>7}  {:>9}  {:.4}", r.count, r.classes, r.instances, r.mean_weight));
    }
    line(format!("spearman(count, class-mean weight) {}", trend.map_or_else(|| "n/a".into(), |x| format!("{x:.3}"))));

    let path = p("report.txt");
    fs::File::create(&path).and_then(|mut f| f.write_all(t.as_bytes())).map_err(|e| corrupt(&path, e))?;

    Ok(Report {
        config_hash: hash,
        accuracies,
        average,
        last,
        subgroups,
        trainable_params: m.trainable_params,
        exemplar_equivalent: m.exemplar_equivalent,
        reference_exemplars: reference,
        weight_trend: trend,
        by_frequency,
        text: t,
    })
}
