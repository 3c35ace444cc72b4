//! Accuracy bookkeeping, frequency subgroups and parameter-memory accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::stream::FrequencyTable;
use crate::{Error, Result};

/// One evaluated test instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub predicted: usize,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }
}

fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

/// Percentage of correct predictions over the whole evaluated union.
pub fn task_accuracy(predictions: &[Prediction]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Invalid("no test instances to evaluate".into()));
    }
    Ok(percent(predictions.iter().filter(|p| p.correct()).count(), predictions.len()))
}

/// `(mean, last)` of a per-task accuracy curve.
pub fn average_and_last(accuracies: &[f64]) -> Result<(f64, f64)> {
    let last = *accuracies.last().ok_or_else(|| Error::Invalid("empty accuracy list".into()))?;
    Ok((accuracies.iter().sum::<f64>() / accuracies.len() as f64, last))
}

/// `(correct, total)` per true label.
pub fn per_class_counts(predictions: &[Prediction]) -> BTreeMap<usize, (usize, usize)> {
    let mut out: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for p in predictions {
        let e = out.entry(p.label).or_default();
        e.0 += usize::from(p.correct());
        e.1 += 1;
    }
    out
}

/// Frequency thresholds: many-shot `N >= hi`, few-shot `N <= lo`, medium strictly between.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupBounds {
    pub hi: f64,
    pub lo: f64,
}

impl Default for SubgroupBounds {
    fn default() -> Self {
        Self { hi: 100.0, lo: 20.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subgroup {
    Many,
    Medium,
    Few,
}

impl SubgroupBounds {
    pub fn new(hi: f64, lo: f64) -> Result<Self> {
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::Invalid(format!("subgroup bounds need hi > lo > 0, got hi={hi} lo={lo}")));
        }
        Ok(Self { hi, lo })
    }

    /// `(0.2 N_max, 0.04 N_max)`, i.e. `(100, 20)` at `N_max = 500`.
    pub fn scaled(n_max: usize) -> Result<Self> {
        Self::new(0.2 * n_max as f64, 0.04 * n_max as f64)
    }

    pub fn classify(&self, count: usize) -> Subgroup {
        let n = count as f64;
        if n >= self.hi {
            Subgroup::Many
        } else if n <= self.lo {
            Subgroup::Few
        } else {
            Subgroup::Medium
        }
    }
}

/// Subgroup accuracies; a group with no evaluated classes is `None`, never 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupAccuracy {
    pub bounds: SubgroupBounds,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    /// Test instances evaluated per group, in many/medium/few order.
    pub instances: [usize; 3],
}

impl SubgroupAccuracy {
    pub fn get(&self, g: Subgroup) -> Option<f64> {
        match g {
            Subgroup::Many => self.many,
            Subgroup::Medium => self.medium,
            Subgroup::Few => self.few,
        }
    }
}

pub fn subgroup_accuracy(predictions: &[Prediction], frequency: &FrequencyTable, bounds: SubgroupBounds) -> Result<SubgroupAccuracy> {
    SubgroupBounds::new(bounds.hi, bounds.lo)?;
    let mut tally = [(0usize, 0usize); 3];
    for p in predictions {
        let count = frequency.get(p.label).ok_or(Error::UnknownLabel { label: p.label })?;
        let slot = &mut tally[bounds.classify(count) as usize];
        slot.0 += usize::from(p.correct());
        slot.1 += 1;
    }
    let acc = |(c, n): (usize, usize)| (n > 0).then(|| percent(c, n));
    Ok(SubgroupAccuracy {
        bounds,
        many: acc(tally[0]),
        medium: acc(tally[1]),
        few: acc(tally[2]),
        instances: [tally[0].1, tally[1].1, tally[2].1],
    })
}

/// How many `H x W x C` byte images fit in the memory of `param_count` 32-bit parameters.
pub fn exemplar_equivalent(param_count: u64, image_shape: [usize; 3]) -> u64 {
    let bytes_per_image: u128 = image_shape.iter().map(|&d| d as u128).product();
    if bytes_per_image == 0 {
        return 0;
    }
    (param_count as u128 * 4 / bytes_per_image) as u64
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant or lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Accuracy after one task on the union of all seen test sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub config_hash: String,
    pub task: usize,
    pub classes_seen: usize,
    pub accuracy: f64,
    pub subgroups: SubgroupAccuracy,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// End-of-run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config_hash: String,
    pub accuracies: Vec<f64>,
    pub average: f64,
    pub last: f64,
    pub subgroups: SubgroupAccuracy,
    pub trainable_params: u64,
    pub exemplar_equivalent: u64,
    pub backbone_checksum: String,
    pub stream_fingerprint: String,
}

impl MetricsRecord {
    /// Recomputes the average and last accuracy from the per-task curve and checks them.
    pub fn consistent(&self) -> bool {
        average_and_last(&self.accuracies).is_ok_and(|(a, l)| a == self.average && l == self.last)
    }
}
