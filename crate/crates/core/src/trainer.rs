//! The per-task training loop, ensemble inference and the experiment driver.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterPlacement, BackboneConfig, FrozenBackbone};
use crate::checkpoint::Checkpoint;
use crate::diffcore::{cosine_anneal_lr, AdamW, AdamWConfig, Tape, Tensor};
use crate::eval::{self, MetricsRecord, Prediction, SubgroupBounds, TaskRecord};
use crate::routing::{
    argmax, combined_loss, ensemble_logits, heuristic_weight, AdapterPool, Assigner, Binder, ClassifierBank, Instance,
    LossBreakdown, PoolView, Routing,
};
use crate::seed::rng_for;
use crate::stream::{Dataset, TaskStream};
use crate::{Error, Real, Result};

/// Which components take part in training and inference.
///
/// The ablations form a chain, each removing one more piece: `no_routing` swaps the learned
/// assigner for the frequency indicator, `no_aux_pool` also drops the auxiliary pool, and
/// `no_pool` also shrinks the main pool to a single group. `finetune` is one adapter group
/// without keys.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    NoRouting,
    NoAuxPool,
    NoPool,
    Finetune,
}

impl AblationMode {
    pub const ABLATIONS: [AblationMode; 4] = [Self::Full, Self::NoRouting, Self::NoAuxPool, Self::NoPool];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoRouting => "no_routing",
            Self::NoAuxPool => "no_aux_pool",
            Self::NoPool => "no_pool",
            Self::Finetune => "finetune",
        }
    }

    pub fn uses_aux(self) -> bool {
        matches!(self, Self::Full | Self::NoRouting)
    }

    pub fn uses_keys(self) -> bool {
        self != Self::Finetune
    }

    pub fn pool_size(self, configured: usize) -> usize {
        match self {
            Self::NoPool | Self::Finetune => 1,
            _ => configured,
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Full, Self::NoRouting, Self::NoAuxPool, Self::NoPool, Self::Finetune]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown mode {s:?} (full, no_routing, no_aux_pool, no_pool, finetune)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub pool_size: usize,
    pub bottleneck: usize,
    pub alpha: f64,
    pub theta: usize,
    pub mode: AblationMode,
    pub seed: u64,
    pub weight_decay: f64,
    pub assigner_embed: usize,
    pub placement: AdapterPlacement,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 48,
            lr_max: 0.003,
            pool_size: 5,
            bottleneck: 64,
            alpha: 1.0,
            theta: 20,
            mode: AblationMode::Full,
            seed: 0,
            weight_decay: 0.01,
            assigner_embed: 16,
            placement: AdapterPlacement::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("pool_size", self.pool_size),
            ("bottleneck", self.bottleneck),
            ("theta", self.theta),
            ("assigner_embed", self.assigner_embed),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("{name} must be positive")));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Invalid(format!("lr_max must be positive, got {}", self.lr_max)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Invalid(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Per-epoch means of the loss components.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub total: f64,
    pub main: f64,
    pub aux: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskTrace {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub mean_total: f64,
    pub breakdowns: Vec<LossBreakdown>,
    /// Parameters that received a nonzero gradient, sorted by name.
    pub touched: Vec<String>,
}

/// Everything learned so far plus the frozen backbone and the run's random streams.
pub struct ModelState<T: Real> {
    pub backbone: FrozenBackbone<T>,
    pub main: AdapterPool<T>,
    pub aux: AdapterPool<T>,
    pub assigner: Assigner<T>,
    pub main_bank: ClassifierBank<T>,
    pub aux_bank: ClassifierBank<T>,
    pub optimizer: AdamW<T>,
    pub tasks_trained: usize,
    config: TrainConfig,
    init_rng: ChaCha8Rng,
    batch_rng: ChaCha8Rng,
}

impl<T: Real> ModelState<T> {
    /// Pools, keys and the assigner are drawn once here and persist across tasks.
    pub fn new(backbone: FrozenBackbone<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = rng_for(config.seed, "init");
        let bc = backbone.config().clone();
        let m = config.mode.pool_size(config.pool_size);
        let main = AdapterPool::new(m, bc.depth, bc.embed_dim, config.bottleneck, &mut init_rng)?;
        let aux = AdapterPool::new(m, bc.depth, bc.embed_dim, config.bottleneck, &mut init_rng)?;
        let assigner = Assigner::new(bc.embed_dim, config.assigner_embed, &mut init_rng)?;
        let optimizer = AdamW::new(AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::default() });
        Ok(Self {
            backbone,
            main,
            aux,
            assigner,
            main_bank: ClassifierBank::new(),
            aux_bank: ClassifierBank::new(),
            optimizer,
            tasks_trained: 0,
            batch_rng: rng_for(config.seed, "batching"),
            config,
            init_rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn batch_rng(&self) -> &ChaCha8Rng {
        &self.batch_rng
    }

    pub fn main_view(&self) -> PoolView<'_, T> {
        PoolView { pool: &self.main, bank: &self.main_bank, prefix: "main", use_keys: self.config.mode.uses_keys() }
    }

    pub fn aux_view(&self) -> Option<PoolView<'_, T>> {
        self.config.mode.uses_aux().then_some(PoolView {
            pool: &self.aux,
            bank: &self.aux_bank,
            prefix: "aux",
            use_keys: true,
        })
    }

    pub fn routing(&self) -> Routing<'_, T> {
        match self.config.mode {
            AblationMode::Full => Routing::Adaptive { assigner: &self.assigner, alpha: self.config.alpha },
            AblationMode::NoRouting => Routing::Heuristic { theta: self.config.theta },
            _ => Routing::MainOnly,
        }
    }

    /// Appends a head for `classes` to both classifier banks.
    pub fn extend_for_task(&mut self, classes: &[usize]) -> Result<()> {
        let seen = self.main_bank.seen();
        for (i, &c) in classes.iter().enumerate() {
            if seen.contains(&c) || classes[..i].contains(&c) {
                return Err(Error::LabelOverlap { class: c });
            }
        }
        let d = self.backbone.dim();
        self.main_bank.extend(classes, d, &mut self.init_rng)?;
        self.aux_bank.extend(classes, d, &mut self.init_rng)
    }

    pub fn seen_classes(&self) -> Vec<usize> {
        self.main_bank.seen()
    }

    /// Embeds an image and computes its frozen feature.
    pub fn prepare(&self, id: usize, label: usize, count: usize, image: &[T]) -> Result<Instance<T>> {
        Instance::prepare(&self.backbone, id, label, count, image)
    }

    /// One averaged step over `batch`, using per-instance tapes.
    pub fn train_step(&mut self, batch: &[&Instance<T>], lr: f64, batch_index: usize) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let placement = self.config.placement;
        let mut grads: BTreeMap<String, Vec<T>> = BTreeMap::new();
        let mut breakdowns = Vec::with_capacity(batch.len());
        for inst in batch {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let out = combined_loss(
                &mut tape,
                &mut binder,
                &self.backbone,
                self.main_view(),
                self.aux_view(),
                self.routing(),
                inst,
                placement,
            )?;
            if !out.breakdown.is_finite() {
                return Err(Error::NonFiniteLoss { batch: batch_index, breakdown: out.breakdown.to_string() });
            }
            breakdowns.push(out.breakdown);
            let g = tape.backward(out.total)?;
            for (name, grad) in binder.collect(&g) {
                match grads.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a += b),
                    None => {
                        grads.insert(name, grad);
                    }
                }
            }
        }
        let inv = T::lit(1.0 / batch.len() as f64);
        grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
        let touched = grads.iter().filter(|(_, g)| g.iter().any(|v| *v != T::zero())).map(|(n, _)| n.clone()).collect();

        let Self { main, aux, assigner, main_bank, aux_bank, optimizer, .. } = self;
        let mut params: Vec<(String, &mut Tensor<T>)> = main.named_params_mut("main");
        params.extend(aux.named_params_mut("aux"));
        params.extend(assigner.named_params_mut());
        params.extend(main_bank.named_params_mut("main"));
        params.extend(aux_bank.named_params_mut("aux"));
        let updates: Vec<(&str, &mut [T], &[T])> = params
            .iter_mut()
            .filter_map(|(n, t)| grads.get(n.as_str()).map(|g| (n.as_str(), t.data_mut(), g.as_slice())))
            .collect();
        optimizer.step(T::lit(lr), updates)?;

        let mean_total = breakdowns.iter().map(|b| b.total).sum::<f64>() / breakdowns.len() as f64;
        Ok(StepReport { mean_total, breakdowns, touched })
    }

    /// Trains on one task's data for `epochs` seeded passes with a cosine schedule.
    ///
    /// The heads for the task must already be in place.
    pub fn train_task(&mut self, data: &[Instance<T>]) -> Result<TaskTrace> {
        let head = self.main_bank.current().ok_or(Error::Untrained)?;
        if let Some(bad) = data.iter().find(|i| !head.classes.contains(&i.label)) {
            return Err(Error::UnknownLabel { label: bad.label });
        }
        if data.is_empty() {
            return Err(Error::Invalid("task has no training data".into()));
        }
        let bs = self.config.batch_size;
        let per_epoch = data.len().div_ceil(bs);
        let total = per_epoch * self.config.epochs;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut trace = TaskTrace::default();
        let mut step = 0;
        for _ in 0..self.config.epochs {
            order.shuffle(&mut self.batch_rng);
            let mut stats = EpochStats::default();
            for chunk in order.chunks(bs) {
                let batch: Vec<&Instance<T>> = chunk.iter().map(|&i| &data[i]).collect();
                let lr = cosine_anneal_lr(step, total, self.config.lr_max)?;
                let report = self.train_step(&batch, lr, step)?;
                for b in &report.breakdowns {
                    stats.total += b.total;
                    stats.main += b.main;
                    stats.aux += b.aux;
                    stats.weight += b.weight;
                }
                step += 1;
            }
            let n = data.len() as f64;
            stats.total /= n;
            stats.main /= n;
            stats.aux /= n;
            stats.weight /= n;
            trace.epochs.push(stats);
        }
        trace.steps = step;
        self.tasks_trained += 1;
        Ok(trace)
    }

    /// Ensemble prediction over every seen class; no task id is used.
    pub fn predict(&self, inst: &Instance<T>) -> Result<usize> {
        if self.tasks_trained == 0 {
            return Err(Error::Untrained);
        }
        let (labels, logits) = ensemble_logits(&self.backbone, self.main_view(), self.aux_view(), inst, self.config.placement)?;
        let i = argmax(&logits).ok_or(Error::Untrained)?;
        Ok(labels[i])
    }

    /// The auxiliary-loss weight this mode applies to `inst`, if it has one.
    pub fn routing_weight(&self, inst: &Instance<T>) -> Result<Option<f64>> {
        Ok(match self.routing() {
            Routing::Adaptive { assigner, .. } => Some(assigner.weight(&inst.feature, inst.count)?.to_f64().unwrap()),
            Routing::Heuristic { theta } => Some(f64::from(heuristic_weight(inst.count, theta))),
            _ => None,
        })
    }

    /// Parameters this mode can update.
    pub fn trainable_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mode = self.config.mode;
        let mut out: Vec<(String, &Tensor<T>)> = self.main.named_params("main");
        if !mode.uses_keys() {
            out.retain(|(n, _)| !n.contains(".key"));
        }
        out.extend(self.main_bank.named_params("main"));
        if mode.uses_aux() {
            out.extend(self.aux.named_params("aux"));
            out.extend(self.aux_bank.named_params("aux"));
        }
        if mode == AblationMode::Full {
            out.extend(self.assigner.named_params());
        }
        out
    }

    pub fn trainable_param_count(&self) -> usize {
        self.trainable_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Every non-frozen tensor, for checkpointing.
    pub fn all_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.main.named_params("main");
        out.extend(self.aux.named_params("aux"));
        out.extend(self.assigner.named_params());
        out.extend(self.main_bank.named_params("main"));
        out.extend(self.aux_bank.named_params("aux"));
        out
    }

    /// Copies checkpointed values into a model with the same structure.
    pub fn restore(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        let mut params = self.main.named_params_mut("main");
        params.extend(self.aux.named_params_mut("aux"));
        params.extend(self.assigner.named_params_mut());
        params.extend(self.main_bank.named_params_mut("main"));
        params.extend(self.aux_bank.named_params_mut("aux"));
        if params.len() != ck.header.blocks.len() {
            return Err(Error::Format(format!("checkpoint has {} blocks, model {}", ck.header.blocks.len(), params.len())));
        }
        for (name, t) in params {
            let (shape, values) = ck.block(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if shape != t.shape() {
                return Err(Error::Format(format!("{name}: checkpoint shape {shape:?}, model {:?}", t.shape())));
            }
            t.data_mut().copy_from_slice(values);
        }
        self.tasks_trained = ck.header.task + 1;
        self.batch_rng = ck.header.rng.restore()?;
        Ok(())
    }
}

/// Inputs of one end-to-end run.
pub struct ExperimentSpec<'a> {
    pub dataset: &'a Dataset,
    pub stream: &'a TaskStream,
    pub train: TrainConfig,
    pub backbone: BackboneConfig,
    pub bounds: SubgroupBounds,
    pub config_hash: String,
}

/// One logged routing weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSample {
    pub task: usize,
    pub instance: usize,
    pub class: usize,
    pub count: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub tasks: Vec<TaskRecord>,
    pub summary: MetricsRecord,
    /// `(correct, total)` per class after the last task.
    pub per_class: BTreeMap<usize, (usize, usize)>,
    pub weights: Vec<WeightSample>,
}

/// Runs every task in order: extend heads, train, evaluate on all seen test sets.
///
/// A task's training instances are dropped once it finishes; only test instances are cached.
/// After each task `on_task` sees the record and the model, e.g. to write a checkpoint.
pub fn run_experiment<T: Real>(
    spec: &ExperimentSpec<'_>,
    mut on_task: impl FnMut(&TaskRecord, &ModelState<T>) -> Result<()>,
) -> Result<ExperimentOutput> {
    let data = spec.dataset;
    if data.train.shape() != spec.backbone.image_shape() || data.test.shape() != spec.backbone.image_shape() {
        return Err(Error::Invalid(format!(
            "dataset images {:?} do not match backbone input {:?}",
            data.train.shape(),
            spec.backbone.image_shape()
        )));
    }
    let mut state = ModelState::<T>::new(FrozenBackbone::new(spec.backbone.clone())?, spec.train.clone())?;
    let checksum = state.backbone.checksum();
    let freq = &spec.stream.frequency;
    let count_of = |label: usize| freq.get(label).ok_or(Error::UnknownLabel { label });

    let mut test_cache: Vec<Instance<T>> = Vec::new();
    let mut records = Vec::new();
    let mut weights = Vec::new();
    let mut last_predictions = Vec::new();
    for task in &spec.stream.tasks {
        state.extend_for_task(&task.classes)?;
        let train: Vec<Instance<T>> = task
            .train
            .iter()
            .map(|&i| {
                let label = data.train.label(i);
                state.prepare(i, label, count_of(label)?, &data.train.image(i))
            })
            .collect::<Result<_>>()?;
        let trace = state.train_task(&train)?;
        for inst in &train {
            if let Some(w) = state.routing_weight(inst)? {
                weights.push(WeightSample { task: task.id, instance: inst.id, class: inst.label, count: inst.count, weight: w });
            }
        }
        drop(train);

        for &i in &task.test {
            let label = data.test.label(i);
            test_cache.push(state.prepare(i, label, count_of(label)?, &data.test.image(i))?);
        }
        let predictions: Vec<Prediction> = test_cache
            .iter()
            .map(|inst| Ok(Prediction { label: inst.label, predicted: state.predict(inst)? }))
            .collect::<Result<_>>()?;
        if state.backbone.checksum() != checksum {
            return Err(Error::Invalid("frozen backbone changed during training".into()));
        }
        let record = TaskRecord {
            config_hash: spec.config_hash.clone(),
            task: task.id,
            classes_seen: state.main_bank.num_seen(),
            accuracy: eval::task_accuracy(&predictions)?,
            subgroups: eval::subgroup_accuracy(&predictions, freq, spec.bounds)?,
            epoch_loss: trace.epochs.iter().map(|e| e.total).collect(),
        };
        on_task(&record, &state)?;
        records.push(record);
        last_predictions = predictions;
    }

    let accuracies: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    let (average, last) = eval::average_and_last(&accuracies)?;
    let trainable = state.trainable_param_count() as u64;
    let summary = MetricsRecord {
        config_hash: spec.config_hash.clone(),
        accuracies,
        average,
        last,
        subgroups: records.last().map(|r| r.subgroups.clone()).ok_or_else(|| Error::Invalid("stream has no tasks".into()))?,
        trainable_params: trainable,
        exemplar_equivalent: eval::exemplar_equivalent(trainable, spec.backbone.image_shape()),
        backbone_checksum: checksum,
        stream_fingerprint: spec.stream.fingerprint(),
    };
    Ok(ExperimentOutput { tasks: records, summary, per_class: eval::per_class_counts(&last_predictions), weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::pool_logits;
    use crate::stream::{make_stream, synth_dataset, ClassCountPlan, Scenario, SynthConfig};

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig { image_height: 8, image_width: 8, channels: 3, patch_size: 4, embed_dim: 8, depth: 2, heads: 2, mlp_ratio: 2, seed: 1 }
    }

    fn tiny_config(mode: AblationMode) -> TrainConfig {
        TrainConfig { epochs: 2, batch_size: 8, lr_max: 0.01, pool_size: 3, bottleneck: 4, mode, seed: 5, assigner_embed: 4, ..TrainConfig::default() }
    }

    fn tiny_data(classes: usize, per_class: usize) -> Dataset {
        synth_dataset(&SynthConfig { classes, train_per_class: per_class, test_per_class: 4, height: 8, width: 8, channels: 3, noise: 0.05, seed: 2 })
    }

    fn instances(state: &ModelState<f64>, data: &Dataset, counts: &[usize]) -> Vec<Instance<f64>> {
        (0..data.train.len())
            .map(|i| {
                let l = data.train.label(i);
                state.prepare(i, l, counts[l], &data.train.image(i)).unwrap()
            })
            .collect()
    }

    fn state(mode: AblationMode) -> ModelState<f64> {
        ModelState::new(FrozenBackbone::new(tiny_backbone()).unwrap(), tiny_config(mode)).unwrap()
    }

    fn snapshot(params: Vec<(String, &Tensor<f64>)>) -> Vec<(String, Vec<u64>)> {
        params.into_iter().map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect())).collect()
    }

    #[test]
    fn extend_examples() {
        let mut s = state(AblationMode::Full);
        s.extend_for_task(&(0..50).collect::<Vec<_>>()).unwrap();
        assert_eq!(s.main_bank.current().unwrap().classes.len(), 50);
        assert_eq!(s.aux_bank.num_seen(), 50);
        let before = snapshot(s.main_bank.named_params("main"));
        s.extend_for_task(&(50..55).collect::<Vec<_>>()).unwrap();
        assert_eq!(s.seen_classes().len(), 55);
        let after = snapshot(s.main_bank.named_params("main"));
        assert_eq!(before[..], after[..before.len()]);
        assert!(matches!(s.extend_for_task(&[54, 60]), Err(Error::LabelOverlap { class: 54 })));
        assert!(matches!(s.extend_for_task(&[60, 60]), Err(Error::LabelOverlap { class: 60 })));
        assert_eq!(s.seen_classes().len(), 55);
    }

    #[test]
    fn tiny_run_reduces_loss() {
        let data = tiny_data(2, 20);
        let mut s = state(AblationMode::Full);
        s.extend_for_task(&[0, 1]).unwrap();
        let inst = instances(&s, &data, &[20, 20]);
        let trace = s.train_task(&inst).unwrap();
        assert_eq!(trace.epochs.len(), 2);
        assert!(trace.epochs.iter().all(|e| e.total.is_finite()));
        assert!(trace.epochs[1].total < trace.epochs[0].total, "{:?}", trace.epochs);
    }

    #[test]
    fn no_aux_pool_leaves_aux_and_assigner_untouched() {
        let data = tiny_data(2, 10);
        let mut s = state(AblationMode::NoAuxPool);
        s.extend_for_task(&[0, 1]).unwrap();
        let aux = snapshot(s.aux.named_params("aux"));
        let aux_heads = snapshot(s.aux_bank.named_params("aux"));
        let assigner = snapshot(s.assigner.named_params());
        let main = snapshot(s.main.named_params("main"));
        let inst = instances(&s, &data, &[10, 10]);
        s.train_task(&inst).unwrap();
        assert_eq!(aux, snapshot(s.aux.named_params("aux")));
        assert_eq!(aux_heads, snapshot(s.aux_bank.named_params("aux")));
        assert_eq!(assigner, snapshot(s.assigner.named_params()));
        assert_ne!(main, snapshot(s.main.named_params("main")));
    }

    #[test]
    fn gradient_census_matches_selection() {
        let data = tiny_data(3, 6);
        let mut s = state(AblationMode::Full);
        s.extend_for_task(&[0]).unwrap();
        s.extend_for_task(&[1, 2]).unwrap();
        let counts = [6, 6, 6];
        let all = instances(&s, &data, &counts);
        let inst: Vec<&Instance<f64>> = all.iter().filter(|i| i.label != 0).take(1).collect();
        let gm = s.main.select_group(&inst[0].feature).unwrap().0;
        let ga = s.aux.select_group(&inst[0].feature).unwrap().0;
        let report = s.train_step(&inst, 1e-3, 0).unwrap();
        let mut expected: Vec<String> = Vec::new();
        for (p, g) in [("main", gm), ("aux", ga)] {
            for b in 0..2 {
                // W_up starts at zero, so W_down's gradient is exactly zero on the first step
                expected.push(format!("{p}.group{g}.block{b}.w_up"));
            }
            expected.push(format!("{p}.key{g}"));
            expected.push(format!("{p}.head1.w"));
            expected.push(format!("{p}.head1.b"));
        }
        expected.extend(s.assigner.named_params().into_iter().map(|(n, _)| n));
        expected.sort();
        assert_eq!(report.touched, expected);

        // a second step: the adapters are non-zero now, so W_down joins in
        let report = s.train_step(&inst, 1e-3, 1).unwrap();
        for b in 0..2 {
            assert!(report.touched.contains(&format!("main.group{gm}.block{b}.w_down")));
        }
        assert!(report.touched.iter().all(|n| !n.contains("head0")));
    }

    #[test]
    fn heuristic_routing_skips_frequent_classes() {
        let data = tiny_data(2, 4);
        let mut s = ModelState::new(
            FrozenBackbone::new(tiny_backbone()).unwrap(),
            TrainConfig { theta: 20, ..tiny_config(AblationMode::NoRouting) },
        )
        .unwrap();
        s.extend_for_task(&[0, 1]).unwrap();
        let all = instances(&s, &data, &[100, 5]);
        let frequent: Vec<&Instance<f64>> = all.iter().filter(|i| i.label == 0).take(1).collect();
        let report = s.train_step(&frequent, 1e-3, 0).unwrap();
        assert!(report.touched.iter().all(|n| n.starts_with("main.")), "{:?}", report.touched);
        let rare: Vec<&Instance<f64>> = all.iter().filter(|i| i.label == 1).take(1).collect();
        let report = s.train_step(&rare, 1e-3, 1).unwrap();
        assert!(report.touched.iter().any(|n| n.starts_with("aux.")));
        assert!(report.touched.iter().all(|n| !n.starts_with("assigner.")));
    }

    #[test]
    fn prediction_matches_recomputation() {
        let data = tiny_data(4, 5);
        let mut s = state(AblationMode::Full);
        s.extend_for_task(&[0, 1]).unwrap();
        let all = instances(&s, &data, &[5, 5, 5, 5]);
        let first: Vec<Instance<f64>> = all.iter().filter(|i| i.label < 2).cloned().collect();
        s.train_task(&first).unwrap();
        s.extend_for_task(&[2, 3]).unwrap();
        let second: Vec<Instance<f64>> = all.iter().filter(|i| i.label >= 2).cloned().collect();
        s.train_task(&second).unwrap();

        let place = s.config().placement;
        for inst in &all {
            let predicted = s.predict(inst).unwrap();
            assert!(s.seen_classes().contains(&predicted));
            // independent recomputation, step by step
            let phi = s.backbone.extract_frozen(&data.train.image(inst.id), data.train.shape()).unwrap();
            let mut summed = vec![0.0; 4];
            for (pool, bank) in [(&s.main, &s.main_bank), (&s.aux, &s.aux_bank)] {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (g, k) in pool.keys.iter().enumerate() {
                    let d = crate::diffcore::cosine_distance(&phi, k.data()).unwrap();
                    if d < best_d {
                        best_d = d;
                        best = g;
                    }
                }
                let feat = s.backbone.extract_adapted(&data.train.image(inst.id), data.train.shape(), &pool.groups[best], place).unwrap();
                for (z, l) in summed.iter_mut().zip(bank.logits(&feat)) {
                    *z += l;
                }
            }
            let labels = s.seen_classes();
            assert_eq!(predicted, labels[argmax(&summed).unwrap()]);
            let view = s.main_view();
            assert_eq!(pool_logits(&s.backbone, view, inst, place).unwrap().len(), 4);
        }
    }

    #[test]
    fn predict_needs_training_and_single_class_is_constant() {
        let data = tiny_data(1, 3);
        let mut s = state(AblationMode::Full);
        s.extend_for_task(&[0]).unwrap();
        let all = instances(&s, &data, &[3]);
        assert!(matches!(s.predict(&all[0]), Err(Error::Untrained)));
        s.train_task(&all).unwrap();
        let other = tiny_data(3, 2);
        for i in 0..other.train.len() {
            let inst = s.prepare(i, 0, 3, &other.train.image(i)).unwrap();
            assert_eq!(s.predict(&inst).unwrap(), 0);
        }
    }

    #[test]
    fn loss_trace_is_bit_reproducible() {
        let data = tiny_data(2, 8);
        let run = || {
            let mut s = state(AblationMode::Full);
            s.extend_for_task(&[0, 1]).unwrap();
            let inst = instances(&s, &data, &[8, 3]);
            s.train_task(&inst).unwrap().epochs.iter().map(|e| e.total.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_rejects_foreign_labels() {
        let data = tiny_data(3, 2);
        let mut s = state(AblationMode::Full);
        s.extend_for_task(&[0, 1]).unwrap();
        let all = instances(&s, &data, &[2, 2, 2]);
        assert!(matches!(s.train_task(&all), Err(Error::UnknownLabel { label: 2 })));
    }

    fn small_stream(data: &Dataset, split: &str) -> TaskStream {
        let plan = ClassCountPlan::new(data.num_classes, 6, 0.5, Scenario::Ordered, 0).unwrap();
        make_stream(&plan, split.parse().unwrap(), data, 3).unwrap()
    }

    #[test]
    fn experiment_is_deterministic_and_backbone_stays_frozen() {
        let data = tiny_data(4, 6);
        let stream = small_stream(&data, "B2-1");
        let spec = ExperimentSpec {
            dataset: &data,
            stream: &stream,
            train: tiny_config(AblationMode::Full),
            backbone: tiny_backbone(),
            bounds: SubgroupBounds::new(5.0, 3.0).unwrap(),
            config_hash: "h".into(),
        };
        let mut checksums = Vec::new();
        let a = run_experiment::<f64>(&spec, |_, s| {
            checksums.push(s.backbone.checksum());
            Ok(())
        })
        .unwrap();
        assert_eq!(a.tasks.len(), 3);
        assert!(checksums.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(checksums[0], FrozenBackbone::<f64>::new(tiny_backbone()).unwrap().checksum());
        assert!(a.summary.consistent());
        let b = run_experiment::<f64>(&spec, |_, _| Ok(())).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.weights.len(), stream.tasks.iter().map(|t| t.train.len()).sum::<usize>());
        assert!(a.weights.iter().all(|w| w.weight > 0.0 && w.weight < 1.0));
    }

    #[test]
    fn single_task_average_equals_last() {
        let data = tiny_data(2, 6);
        let stream = small_stream(&data, "B2-1");
        let spec = ExperimentSpec {
            dataset: &data,
            stream: &stream,
            train: tiny_config(AblationMode::NoPool),
            backbone: tiny_backbone(),
            bounds: SubgroupBounds::new(5.0, 3.0).unwrap(),
            config_hash: "h".into(),
        };
        let out = run_experiment::<f64>(&spec, |_, _| Ok(())).unwrap();
        assert_eq!(out.tasks.len(), 1);
        assert_eq!(out.summary.average, out.summary.last);
    }

    #[test]
    fn checkpoint_restores_predictions() {
        let data = tiny_data(2, 5);
        let mut s = state(AblationMode::Full);
        s.extend_for_task(&[0, 1]).unwrap();
        let inst = instances(&s, &data, &[5, 5]);
        s.train_task(&inst).unwrap();
        let mut buf = Vec::new();
        crate::checkpoint::write_checkpoint(&mut buf, "h", 0, s.batch_rng(), &s.all_params()).unwrap();
        let ck = crate::checkpoint::read_checkpoint::<f64>(buf.as_slice()).unwrap();
        let mut fresh = state(AblationMode::Full);
        fresh.extend_for_task(&[0, 1]).unwrap();
        fresh.restore(&ck).unwrap();
        for i in &inst {
            assert_eq!(fresh.predict(i).unwrap(), s.predict(i).unwrap());
        }
    }

    #[test]
    fn trainable_census_per_mode() {
        let mut full = state(AblationMode::Full);
        full.extend_for_task(&[0, 1]).unwrap();
        let expected = full.main.param_count() + full.aux.param_count() + full.assigner.param_count()
            + full.main_bank.param_count() + full.aux_bank.param_count();
        assert_eq!(full.trainable_param_count(), expected);
        let mut ft = state(AblationMode::Finetune);
        ft.extend_for_task(&[0, 1]).unwrap();
        assert_eq!(ft.main.size(), 1);
        assert_eq!(ft.trainable_param_count(), ft.main.groups[0].param_count() + ft.main_bank.param_count());
    }

    #[test]
    fn config_validation_and_mode_names() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_max: -1.0, ..TrainConfig::default() }.validate().is_err());
        for m in AblationMode::ABLATIONS {
            assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
        }
        assert!("bogus".parse::<AblationMode>().is_err());
    }
}
