//! Flat TOML experiment configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ltcil_core::backbone::{AdapterPlacement, BackboneConfig};
use ltcil_core::eval::SubgroupBounds;
use ltcil_core::stream::{build_counts, Scenario, Split};
use ltcil_core::trainer::{AblationMode, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum DatasetSource {
    /// A `cifar-100-binary` directory holding `train.bin` and `test.bin`.
    Cifar100 { dir: PathBuf },
    /// Seeded procedural classes.
    Synthetic { classes: usize, per_class: usize },
}

impl DatasetSource {
    pub fn num_classes(&self) -> usize {
        match self {
            Self::Cifar100 { .. } => 100,
            Self::Synthetic { classes, .. } => *classes,
        }
    }
}

impl FromStr for DatasetSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(path) = s.strip_prefix("cifar100-binary:") {
            if path.is_empty() {
                return Err("cifar100-binary needs a directory path".into());
            }
            return Ok(Self::Cifar100 { dir: PathBuf::from(path) });
        }
        if let Some(rest) = s.strip_prefix("synthetic:") {
            let parsed = rest.split_once(',').and_then(|(c, n)| Some((c.trim().parse().ok()?, n.trim().parse().ok()?)));
            return match parsed {
                Some((classes, per_class)) if classes >= 2 && per_class >= 1 => Ok(Self::Synthetic { classes, per_class }),
                _ => Err(format!("expected synthetic:<classes>,<per_class> with classes >= 2, got {s:?}")),
            };
        }
        Err(format!("expected cifar100-binary:<dir> or synthetic:<classes>,<per_class>, got {s:?}"))
    }
}

/// Every key is optional except `dataset`; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: String,
    #[serde(default = "defaults::rho")]
    pub rho: f64,
    #[serde(default = "defaults::n_max")]
    pub n_max: usize,
    #[serde(default)]
    pub scenario: Scenario,
    #[serde(default = "defaults::split")]
    pub split: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,

    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr_max")]
    pub lr_max: f64,
    #[serde(default = "defaults::pool_size")]
    pub pool_size: usize,
    #[serde(default = "defaults::bottleneck")]
    pub bottleneck: usize,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::theta")]
    pub theta: usize,
    #[serde(default)]
    pub mode: AblationMode,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::assigner_embed")]
    pub assigner_embed: usize,
    #[serde(default)]
    pub placement: AdapterPlacement,

    /// Synthetic images are `image_size x image_size x 3`; CIFAR is always 32.
    #[serde(default = "defaults::image_size")]
    pub image_size: usize,
    #[serde(default = "defaults::patch_size")]
    pub patch_size: usize,
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "defaults::depth")]
    pub depth: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub backbone_seed: u64,

    #[serde(default = "defaults::synth_noise")]
    pub synth_noise: f64,
    #[serde(default = "defaults::synth_test_per_class")]
    pub synth_test_per_class: usize,
    #[serde(default)]
    pub synth_seed: u64,

    /// Many-shot and few-shot thresholds; default `0.2 n_max` and `0.04 n_max`.
    #[serde(default)]
    pub subgroup_hi: Option<f64>,
    #[serde(default)]
    pub subgroup_lo: Option<f64>,
}

mod defaults {
    pub fn rho() -> f64 {
        0.01
    }
    pub fn n_max() -> usize {
        500
    }
    pub fn split() -> String {
        "B50-5".into()
    }
    pub fn epochs() -> usize {
        10
    }
    pub fn batch_size() -> usize {
        48
    }
    pub fn lr_max() -> f64 {
        0.003
    }
    pub fn pool_size() -> usize {
        5
    }
    pub fn bottleneck() -> usize {
        64
    }
    pub fn alpha() -> f64 {
        1.0
    }
    pub fn theta() -> usize {
        20
    }
    pub fn weight_decay() -> f64 {
        0.01
    }
    pub fn assigner_embed() -> usize {
        16
    }
    pub fn image_size() -> usize {
        32
    }
    pub fn patch_size() -> usize {
        4
    }
    pub fn embed_dim() -> usize {
        64
    }
    pub fn depth() -> usize {
        4
    }
    pub fn heads() -> usize {
        4
    }
    pub fn mlp_ratio() -> usize {
        4
    }
    pub fn synth_noise() -> f64 {
        0.1
    }
    pub fn synth_test_per_class() -> usize {
        20
    }
}

/// A validated configuration, with the pieces the core library consumes.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub raw: ExperimentConfig,
    pub source: DatasetSource,
    pub split: Split,
    pub train: TrainConfig,
    pub backbone: BackboneConfig,
    pub bounds: SubgroupBounds,
    pub hash: String,
}

/// 1-based line of `key = ...` in the source text, if it is there.
fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let t = l.trim_start();
        t.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            CliError::Config { file: origin.to_path_buf(), field: None, line, message: e.message().to_string() }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            file: path.to_path_buf(),
            field: None,
            line: None,
            message: format!("cannot read: {e}"),
        })?;
        Self::from_toml(&text, path)
    }

    /// Checks every field and derives the core configurations. `text` locates bad keys.
    pub fn resolve(self, text: &str, origin: &Path) -> Result<Resolved, CliError> {
        let bad = |field: &'static str, message: String| CliError::Config {
            file: origin.to_path_buf(),
            field: Some(field),
            line: line_of(text, field),
            message,
        };
        let source: DatasetSource = self.dataset.parse().map_err(|m| bad("dataset", m))?;
        if let DatasetSource::Cifar100 { dir } = &source {
            for f in ["train.bin", "test.bin"] {
                if !dir.join(f).is_file() {
                    return Err(bad("dataset", format!("{} not found", dir.join(f).display())));
                }
            }
        }
        let classes = source.num_classes();
        build_counts(classes, self.n_max, self.rho).map_err(|e| bad("rho", e.to_string()))?;
        if let DatasetSource::Synthetic { per_class, .. } = source {
            if per_class < self.n_max {
                return Err(bad("dataset", format!("{per_class} synthetic instances per class cannot supply n_max = {}", self.n_max)));
            }
        }
        let split: Split = self.split.parse().map_err(|e: ltcil_core::Error| bad("split", e.to_string()))?;
        split.task_sizes(classes).map_err(|e| bad("split", e.to_string()))?;

        let train = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_max: self.lr_max,
            pool_size: self.pool_size,
            bottleneck: self.bottleneck,
            alpha: self.alpha,
            theta: self.theta,
            mode: self.mode,
            seed: self.seed,
            weight_decay: self.weight_decay,
            assigner_embed: self.assigner_embed,
            placement: self.placement,
        };
        if let Err(e) = train.validate() {
            let field = ["epochs", "batch_size", "lr_max", "pool_size", "bottleneck", "alpha", "theta", "weight_decay", "assigner_embed"]
                .into_iter()
                .find(|f| e.to_string().contains(f))
                .unwrap_or("epochs");
            return Err(bad(field, e.to_string()));
        }

        for (field, v) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(bad(field, "must be positive".into()));
            }
        }
        let side = match source {
            DatasetSource::Cifar100 { .. } => 32,
            DatasetSource::Synthetic { .. } => self.image_size,
        };
        let backbone = BackboneConfig {
            image_height: side,
            image_width: side,
            channels: 3,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            seed: self.backbone_seed,
        };
        backbone.validate().map_err(|e| {
            let m = e.to_string();
            let field = if m.contains("patch") { "patch_size" } else { "heads" };
            bad(field, m)
        })?;

        if !(self.synth_noise >= 0.0 && self.synth_noise.is_finite()) {
            return Err(bad("synth_noise", format!("must be a non-negative number, got {}", self.synth_noise)));
        }
        if self.synth_test_per_class == 0 {
            return Err(bad("synth_test_per_class", "must be positive".into()));
        }
        let scaled = SubgroupBounds::scaled(self.n_max).map_err(|e| bad("n_max", e.to_string()))?;
        let bounds = SubgroupBounds::new(self.subgroup_hi.unwrap_or(scaled.hi), self.subgroup_lo.unwrap_or(scaled.lo))
            .map_err(|e| bad("subgroup_hi", e.to_string()))?;

        let hash = self.hash();
        Ok(Resolved { raw: self, source, split, train, backbone, bounds, hash })
    }

    /// SHA-256 of the canonical JSON form, excluding the output location.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig { output: None, ..self.clone() };
        let json = serde_json::to_string(&canonical).expect("serialisable config");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Resolved, CliError> {
        ExperimentConfig::from_toml(text, Path::new("t.toml"))?.resolve(text, Path::new("t.toml"))
    }

    #[test]
    fn minimal_synthetic_config_resolves() {
        let r = parse("dataset = \"synthetic:10,40\"\nn_max = 40\nrho = 0.1\nsplit = \"B5-1\"\n").unwrap();
        assert_eq!(r.source, DatasetSource::Synthetic { classes: 10, per_class: 40 });
        assert_eq!(r.split.task_sizes(10).unwrap().len(), 6);
        assert_eq!(r.train.batch_size, 48);
        assert_eq!(r.bounds, SubgroupBounds::scaled(40).unwrap());
        assert_eq!(r.hash.len(), 64);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse("dataset = \"synthetic:10,40\"\nn_max = 40\nlearning_rate = 0.1\n").unwrap_err();
        match err {
            CliError::Config { line, message, .. } => {
                assert_eq!(line, Some(3));
                assert!(message.contains("learning_rate"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let cases = [
            ("dataset = \"cifar100-binary:/definitely/missing\"\n", "dataset", 1),
            ("dataset = \"synthetic:10,40\"\nn_max = 40\nsplit = \"B5-2\"\nrho = 0.1\n", "split", 3),
            ("dataset = \"synthetic:10,40\"\nn_max = 40\n  epochs = 0\nrho = 0.1\nsplit = \"B5-1\"\n", "epochs", 3),
            ("dataset = \"synthetic:10,40\"\nn_max = 40\nrho = 0.001\n", "rho", 3),
            ("dataset = \"mnist\"\n", "dataset", 1),
            ("dataset = \"synthetic:100,500\"\nimage_size = 30\n", "patch_size", 0),
            ("dataset = \"synthetic:100,500\"\nembed_dim = 30\nheads = 4\n", "heads", 3),
            ("dataset = \"synthetic:100,500\"\ndepth = 0\n", "depth", 2),
        ];
        for (text, field, line) in cases {
            match parse(text).unwrap_err() {
                CliError::Config { field: Some(f), line: l, .. } => {
                    assert_eq!(f, field, "{text}");
                    assert_eq!(l, (line > 0).then_some(line), "{text}");
                }
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn hash_ignores_output_but_not_hyperparameters() {
        let base = ExperimentConfig::from_toml("dataset = \"synthetic:4,10\"\n", Path::new("x")).unwrap();
        let moved = ExperimentConfig { output: Some("elsewhere".into()), ..base.clone() };
        assert_eq!(base.hash(), moved.hash());
        assert_ne!(base.hash(), ExperimentConfig { seed: 1, ..base.clone() }.hash());
        assert_ne!(base.hash(), ExperimentConfig { mode: AblationMode::NoPool, ..base }.hash());
    }
}
