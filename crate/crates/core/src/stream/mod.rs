//! Long-tailed class-incremental streams and the image sources feeding them.

mod cifar;
mod counts;
mod synth;

pub use cifar::{encode_cifar100_record, load_cifar100, load_cifar100_dir, parse_cifar100, CIFAR_RECORD_BYTES};
pub use counts::{build_counts, ClassCountPlan, Scenario};
pub use synth::{synth_dataset, SynthConfig};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Error, Real, Result};

/// Labelled `H x W x C` byte images, stored contiguously.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSet {
    shape: [usize; 3],
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

impl ImageSet {
    pub fn new(shape: [usize; 3], pixels: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Format(format!(
                "{} pixel bytes for {} images of shape {shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self { shape, pixels, labels })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Raw bytes of image `i`, HWC order.
    pub fn bytes(&self, i: usize) -> &[u8] {
        let per: usize = self.shape.iter().product();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Image `i` scaled to `[0, 1]`.
    pub fn image<T: Real>(&self, i: usize) -> Vec<T> {
        let s = T::lit(1.0 / 255.0);
        self.bytes(i).iter().map(|&b| T::lit(f64::from(b)) * s).collect()
    }

    /// Indices of each label, in storage order.
    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            out.entry(l).or_default().push(i);
        }
        out
    }
}

/// A training pool and a balanced test set over `num_classes` labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: ImageSet,
    pub test: ImageSet,
}

/// `B{m}-{n}`: `m` classes in the first task, `n` in each later one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Split {
    pub base: usize,
    pub increment: usize,
}

impl Split {
    /// Class counts per task for `classes` total classes.
    pub fn task_sizes(&self, classes: usize) -> Result<Vec<usize>> {
        if self.base == 0 || self.increment == 0 || self.base > classes || !(classes - self.base).is_multiple_of(self.increment) {
            return Err(Error::Invalid(format!("split {self} does not partition {classes} classes")));
        }
        let mut sizes = vec![self.base];
        sizes.extend(std::iter::repeat_n(self.increment, (classes - self.base) / self.increment));
        Ok(sizes)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "B{}-{}", self.base, self.increment)
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("split {s:?} is not of the form B<m>-<n>"));
        let rest = s.strip_prefix('B').ok_or_else(bad)?;
        let (m, n) = rest.split_once('-').ok_or_else(bad)?;
        Ok(Split { base: m.parse().map_err(|_| bad())?, increment: n.parse().map_err(|_| bad())? })
    }
}

/// `N(y)` for every streamed class.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FrequencyTable(pub BTreeMap<usize, usize>);

impl FrequencyTable {
    pub fn get(&self, class: usize) -> Option<usize> {
        self.0.get(&class).copied()
    }

    pub fn max(&self) -> usize {
        self.0.values().copied().max().unwrap_or(0)
    }
}

/// One task: its label set and indices into the dataset's train and test sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub id: usize,
    pub classes: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub frequency: FrequencyTable,
    pub plan: ClassCountPlan,
    pub split: Split,
}

#[derive(Serialize)]
struct ManifestLine<'a> {
    config_hash: &'a str,
    class: usize,
    count: usize,
    task: usize,
}

impl TaskStream {
    pub fn num_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.classes.len()).sum()
    }

    /// Line-delimited manifest: one `{config_hash, class, count, task}` object per class.
    pub fn manifest(&self, config_hash: &str) -> String {
        let mut out = String::new();
        for t in &self.tasks {
            for &c in &t.classes {
                let line = ManifestLine { config_hash, class: c, count: self.frequency.get(c).unwrap_or(0), task: t.id };
                out.push_str(&serde_json::to_string(&line).expect("serialisable"));
                out.push('\n');
            }
        }
        out
    }

    /// SHA-256 over task membership and every sampled index.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tasks {
            h.update((t.id as u64).to_le_bytes());
            for list in [&t.classes, &t.train, &t.test] {
                h.update((list.len() as u64).to_le_bytes());
                for &v in list {
                    h.update((v as u64).to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Samples a long-tailed stream from `dataset`.
///
/// Class `c` contributes `plan.counts[c]` training instances drawn uniformly without
/// replacement; test sets are taken whole, so they stay balanced.
pub fn make_stream(plan: &ClassCountPlan, split: Split, dataset: &Dataset, seed: u64) -> Result<TaskStream> {
    let classes = plan.counts.len();
    if dataset.num_classes != classes {
        return Err(Error::Invalid(format!("plan has {classes} classes, dataset {}", dataset.num_classes)));
    }
    let sizes = split.task_sizes(classes)?;
    let train_by_class = dataset.train.indices_by_class();
    let test_by_class = dataset.test.indices_by_class();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frequency = BTreeMap::new();
    let mut tasks = Vec::with_capacity(sizes.len());
    let mut next = 0;
    for (id, size) in sizes.into_iter().enumerate() {
        let class_ids: Vec<usize> = (next..next + size).collect();
        next += size;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &class_ids {
            let need = plan.counts[c];
            let pool = train_by_class.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            if pool.len() < need {
                return Err(Error::Insufficient { class: c, need, have: pool.len() });
            }
            let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), need).into_iter().map(|i| pool[i]).collect();
            picked.sort_unstable();
            train.extend(picked);
            test.extend(test_by_class.get(&c).into_iter().flatten().copied());
            frequency.insert(c, need);
        }
        tasks.push(Task { id, classes: class_ids, train, test });
    }
    Ok(TaskStream { tasks, frequency: FrequencyTable(frequency), plan: plan.clone(), split })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(classes: usize, train: usize, test: usize) -> Dataset {
        synth_dataset(&SynthConfig { classes, train_per_class: train, test_per_class: test, height: 4, width: 4, channels: 3, noise: 0.1, seed: 3 })
    }

    #[test]
    fn split_parsing_and_task_sizes() {
        let s: Split = "B50-5".parse().unwrap();
        assert_eq!(s, Split { base: 50, increment: 5 });
        let sizes = s.task_sizes(100).unwrap();
        assert_eq!(sizes.len(), 11);
        assert_eq!(sizes[0], 50);
        assert!(sizes[1..].iter().all(|&n| n == 5));
        assert_eq!(s.to_string(), "B50-5");
        assert!("50-5".parse::<Split>().is_err());
        assert!("B50-7".parse::<Split>().unwrap().task_sizes(100).is_err());
        assert_eq!("B10-5".parse::<Split>().unwrap().task_sizes(10).unwrap(), vec![10]);
    }

    #[test]
    fn stream_is_disjoint_balanced_and_counted() {
        let data = dataset(10, 30, 7);
        let plan = ClassCountPlan::new(10, 30, 0.1, Scenario::Ordered, 0).unwrap();
        let stream = make_stream(&plan, "B4-2".parse().unwrap(), &data, 11).unwrap();
        assert_eq!(stream.tasks.len(), 4);
        let mut seen = std::collections::BTreeSet::new();
        for t in &stream.tasks {
            for &c in &t.classes {
                assert!(seen.insert(c), "class {c} in two tasks");
            }
            // independent recount of emitted training instances
            let mut recount = BTreeMap::new();
            for &i in &t.train {
                *recount.entry(data.train.label(i)).or_insert(0usize) += 1;
            }
            for &c in &t.classes {
                assert_eq!(recount[&c], stream.frequency.get(c).unwrap());
                let tests = t.test.iter().filter(|&&i| data.test.label(i) == c).count();
                assert_eq!(tests, 7);
            }
        }
        assert_eq!(stream.num_classes(), 10);
        assert!(stream.frequency.0.values().all(|&n| n >= 1));
    }

    #[test]
    fn same_seed_same_stream() {
        let data = dataset(6, 20, 2);
        let plan = ClassCountPlan::new(6, 20, 0.25, Scenario::Shuffled, 5).unwrap();
        let a = make_stream(&plan, "B2-2".parse().unwrap(), &data, 1).unwrap();
        let b = make_stream(&plan, "B2-2".parse().unwrap(), &data, 1).unwrap();
        let c = make_stream(&plan, "B2-2".parse().unwrap(), &data, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.manifest("h"), b.manifest("h"));
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn insufficient_instances_name_the_class() {
        let data = dataset(4, 10, 1);
        let plan = ClassCountPlan::new(4, 12, 0.5, Scenario::Ordered, 0).unwrap();
        match make_stream(&plan, "B2-2".parse().unwrap(), &data, 0) {
            Err(Error::Insufficient { class, need, have }) => {
                assert_eq!((class, need, have), (0, 12, 10));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_lines_cover_every_class() {
        let data = dataset(4, 10, 1);
        let plan = ClassCountPlan::new(4, 10, 0.5, Scenario::Ordered, 0).unwrap();
        let stream = make_stream(&plan, "B2-1".parse().unwrap(), &data, 0).unwrap();
        let text = stream.manifest("abc");
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0]["count"], 10);
        assert_eq!(lines[3]["task"], 2);
        assert_eq!(lines[3]["config_hash"], "abc");
    }
}
