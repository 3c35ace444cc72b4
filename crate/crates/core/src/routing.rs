//! Adapter pools with key retrieval, the routing assigner and the training losses.
//!
//! Per instance, a pool picks the single group whose key is closest (cosine distance) to the
//! frozen feature `phi(x)`. The pool loss is cross-entropy over the current task's head plus
//! the distance to the chosen key. The combined loss adds the auxiliary pool's loss scaled by
//! a routing weight `w(x, y)` and, for the learned assigner, the regulariser `(alpha - w)^2`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{AdapterGroup, AdapterPlacement, FrozenBackbone};
use crate::diffcore::{cosine_distance, kernels, Gradients, Tape, Tensor, Var};
use crate::{Error, Real, Result};

fn uniform<T: Real>(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
}

/// Name to tape-variable map for the parameters used in one tape.
#[derive(Debug, Default)]
pub struct Binder {
    entries: Vec<(String, Var)>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind<'a, T: Real>(&mut self, tape: &mut Tape<'a, T>, name: String, t: &'a Tensor<T>) -> Result<Var> {
        if let Some((_, v)) = self.entries.iter().find(|(n, _)| *n == name) {
            return Ok(*v);
        }
        let v = tape.leaf(t)?;
        self.entries.push((name, v));
        Ok(v)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Gradients of every bound parameter the loss reached, in binding order.
    pub fn collect<T: Real>(&self, grads: &Gradients<T>) -> Vec<(String, Vec<T>)> {
        self.entries.iter().filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.to_vec()))).collect()
    }
}

/// `M` adapter groups, each with a learnable retrieval key.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPool<T> {
    pub groups: Vec<AdapterGroup<T>>,
    pub keys: Vec<Tensor<T>>,
}

impl<T: Real> AdapterPool<T> {
    /// Keys are drawn i.i.d. from `U(-1/sqrt(d), 1/sqrt(d))`.
    pub fn new(size: usize, depth: usize, dim: usize, bottleneck: usize, rng: &mut impl Rng) -> Result<Self> {
        if size == 0 {
            return Err(Error::Invalid("pool size must be at least 1".into()));
        }
        let mut groups = Vec::with_capacity(size);
        let mut keys = Vec::with_capacity(size);
        let bound = 1.0 / (dim as f64).sqrt();
        for _ in 0..size {
            groups.push(AdapterGroup::new(depth, dim, bottleneck, rng)?);
            keys.push(Tensor::param(&[dim], uniform(rng, dim, bound))?);
        }
        Ok(Self { groups, keys })
    }

    pub fn size(&self) -> usize {
        self.groups.len()
    }

    /// Index of the key nearest to `feature` in cosine distance; ties go to the lowest index.
    pub fn select_group(&self, feature: &[T]) -> Result<(usize, &Tensor<T>)> {
        if self.keys.is_empty() {
            return Err(Error::Invalid("empty pool".into()));
        }
        let mut best = (0, T::infinity());
        for (i, k) in self.keys.iter().enumerate() {
            let dist = cosine_distance(feature, k.data())?;
            if dist < best.1 {
                best = (i, dist);
            }
        }
        Ok((best.0, &self.keys[best.0]))
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(AdapterGroup::param_count).sum::<usize>() + self.keys.iter().map(Tensor::numel).sum::<usize>()
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (g, (group, key)) in self.groups.iter().zip(&self.keys).enumerate() {
            out.extend(group.named_params(&format!("{prefix}.group{g}")));
            out.push((format!("{prefix}.key{g}"), key));
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (g, (group, key)) in self.groups.iter_mut().zip(self.keys.iter_mut()).enumerate() {
            out.extend(group.named_params_mut(&format!("{prefix}.group{g}")));
            out.push((format!("{prefix}.key{g}"), key));
        }
        out
    }
}

/// Number of log2 frequency buckets in the assigner's count embedding.
pub const FREQ_BUCKETS: usize = 32;

/// `floor(log2(n))`, clamped to the table.
pub fn frequency_bucket(n: usize) -> usize {
    debug_assert!(n >= 1);
    ((usize::BITS - 1 - n.max(1).leading_zeros()) as usize).min(FREQ_BUCKETS - 1)
}

/// Routing network `w(x, y) = sigmoid(MLP([psi1(phi(x)), psi2(N(y))]))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assigner<T> {
    pub psi1_w: Tensor<T>,
    pub psi1_b: Tensor<T>,
    pub freq_table: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

pub struct AssignerVars {
    psi1_w: Var,
    psi1_b: Var,
    freq_table: Var,
    fc1_w: Var,
    fc1_b: Var,
    fc2_w: Var,
    fc2_b: Var,
}

impl<T: Real> Assigner<T> {
    pub fn new(dim: usize, embed: usize, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 || embed == 0 {
            return Err(Error::Invalid("assigner dimensions must be positive".into()));
        }
        let hidden = 2 * embed;
        let table: Vec<T> = (0..FREQ_BUCKETS * embed).map(|_| T::lit(StandardNormal.sample(rng))).collect();
        let b1 = 1.0 / (dim as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            psi1_w: Tensor::param(&[dim, embed], uniform(rng, dim * embed, b1))?,
            psi1_b: Tensor::param(&[embed], uniform(rng, embed, b1))?,
            freq_table: Tensor::param(&[FREQ_BUCKETS, embed], table)?,
            fc1_w: Tensor::param(&[hidden, hidden], uniform(rng, hidden * hidden, b2))?,
            fc1_b: Tensor::param(&[hidden], uniform(rng, hidden, b2))?,
            fc2_w: Tensor::param(&[hidden, 1], uniform(rng, hidden, b2))?,
            fc2_b: Tensor::param(&[1], vec![T::zero()])?,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("assigner.psi1_w".into(), &self.psi1_w),
            ("assigner.psi1_b".into(), &self.psi1_b),
            ("assigner.freq_table".into(), &self.freq_table),
            ("assigner.fc1_w".into(), &self.fc1_w),
            ("assigner.fc1_b".into(), &self.fc1_b),
            ("assigner.fc2_w".into(), &self.fc2_w),
            ("assigner.fc2_b".into(), &self.fc2_b),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("assigner.psi1_w".into(), &mut self.psi1_w),
            ("assigner.psi1_b".into(), &mut self.psi1_b),
            ("assigner.freq_table".into(), &mut self.freq_table),
            ("assigner.fc1_w".into(), &mut self.fc1_w),
            ("assigner.fc1_b".into(), &mut self.fc1_b),
            ("assigner.fc2_w".into(), &mut self.fc2_w),
            ("assigner.fc2_b".into(), &mut self.fc2_b),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, binder: &mut Binder) -> Result<AssignerVars> {
        Ok(AssignerVars {
            psi1_w: binder.bind(tape, "assigner.psi1_w".into(), &self.psi1_w)?,
            psi1_b: binder.bind(tape, "assigner.psi1_b".into(), &self.psi1_b)?,
            freq_table: binder.bind(tape, "assigner.freq_table".into(), &self.freq_table)?,
            fc1_w: binder.bind(tape, "assigner.fc1_w".into(), &self.fc1_w)?,
            fc1_b: binder.bind(tape, "assigner.fc1_b".into(), &self.fc1_b)?,
            fc2_w: binder.bind(tape, "assigner.fc2_w".into(), &self.fc2_w)?,
            fc2_b: binder.bind(tape, "assigner.fc2_b".into(), &self.fc2_b)?,
        })
    }

    /// The routing weight on the tape; `feature` is a constant (frozen) input.
    pub fn forward(&self, tape: &mut Tape<'_, T>, vars: &AssignerVars, feature: Var, count: usize) -> Result<Var> {
        if count == 0 {
            return Err(Error::Invalid("class frequency must be at least 1".into()));
        }
        let e1 = tape.linear(feature, vars.psi1_w, Some(vars.psi1_b))?;
        let e2 = tape.embedding(vars.freq_table, &[frequency_bucket(count)])?;
        let e2 = tape.reshape(e2, &[tape.shape(e1)[0]])?;
        let z = tape.concat(&[e1, e2], 0)?;
        let h = tape.linear(z, vars.fc1_w, Some(vars.fc1_b))?;
        let h = tape.relu(h)?;
        let o = tape.linear(h, vars.fc2_w, Some(vars.fc2_b))?;
        tape.sigmoid(o)
    }

    /// `w(x, y)` without recording gradients.
    pub fn weight(&self, feature: &[T], count: usize) -> Result<T> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let vars = self.bind(&mut tape, &mut binder)?;
        let f = tape.input(feature.to_vec(), &[feature.len()])?;
        let w = self.forward(&mut tape, &vars, f, count)?;
        Ok(tape.scalar(w))
    }
}

/// Indicator routing weight: 1 iff `count <= theta`.
pub fn heuristic_weight(count: usize, theta: usize) -> u8 {
    u8::from(count <= theta)
}

/// One task's linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub classes: Vec<usize>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// Per-task heads, appended as tasks arrive; label spaces are disjoint.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ClassifierBank<T> {
    pub heads: Vec<Head<T>>,
}

impl<T: Real> ClassifierBank<T> {
    pub fn new() -> Self {
        Self { heads: Vec::new() }
    }

    /// Appends a head for `classes`; weights `U(-1/sqrt(d), 1/sqrt(d))`, zero bias.
    pub fn extend(&mut self, classes: &[usize], dim: usize, rng: &mut impl Rng) -> Result<()> {
        if classes.is_empty() {
            return Err(Error::Invalid("a task needs at least one class".into()));
        }
        let seen = self.seen();
        for (i, &c) in classes.iter().enumerate() {
            if seen.contains(&c) || classes[..i].contains(&c) {
                return Err(Error::LabelOverlap { class: c });
            }
        }
        let n = classes.len();
        self.heads.push(Head {
            classes: classes.to_vec(),
            w: Tensor::param(&[dim, n], uniform(rng, dim * n, 1.0 / (dim as f64).sqrt()))?,
            b: Tensor::param(&[n], vec![T::zero(); n])?,
        });
        Ok(())
    }

    /// Seen classes in logit order.
    pub fn seen(&self) -> Vec<usize> {
        self.heads.iter().flat_map(|h| h.classes.iter().copied()).collect()
    }

    pub fn num_seen(&self) -> usize {
        self.heads.iter().map(|h| h.classes.len()).sum()
    }

    pub fn current(&self) -> Option<&Head<T>> {
        self.heads.last()
    }

    /// Logits of every head, concatenated in [`seen`](Self::seen) order.
    pub fn logits(&self, feature: &[T]) -> Vec<T> {
        let d = feature.len();
        let mut out = Vec::with_capacity(self.num_seen());
        for h in &self.heads {
            let n = h.classes.len();
            let z = kernels::matmul(feature, h.w.data(), 1, d, n);
            out.extend(z.iter().zip(h.b.data()).map(|(&a, &b)| a + b));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.heads.iter().map(|h| h.w.numel() + h.b.numel()).sum()
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (k, h) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.head{k}.w"), &h.w));
            out.push((format!("{prefix}.head{k}.b"), &h.b));
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (k, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("{prefix}.head{k}.w"), &mut h.w));
            out.push((format!("{prefix}.head{k}.b"), &mut h.b));
        }
        out
    }
}

/// A training or test instance with its frozen-path quantities computed once.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance<T> {
    pub id: usize,
    pub label: usize,
    /// `N(y)` of the label in the training stream.
    pub count: usize,
    /// Embedded tokens `[N_p + 1, d]`.
    pub tokens: Vec<T>,
    /// Frozen [CLS] feature `phi(x)`.
    pub feature: Vec<T>,
}

impl<T: Real> Instance<T> {
    pub fn prepare(backbone: &FrozenBackbone<T>, id: usize, label: usize, count: usize, image: &[T]) -> Result<Self> {
        let tokens = backbone.embed(image, backbone.config().image_shape())?;
        let feature = backbone.feature_from_tokens(&tokens, None, AdapterPlacement::Parallel)?;
        Ok(Self { id, label, count, tokens, feature })
    }
}

/// One pool together with its classifier bank.
#[derive(Clone, Copy)]
pub struct PoolView<'m, T> {
    pub pool: &'m AdapterPool<T>,
    pub bank: &'m ClassifierBank<T>,
    /// Parameter-name prefix, `"main"` or `"aux"`.
    pub prefix: &'static str,
    /// Without keys, group 0 is always used and no key term is added.
    pub use_keys: bool,
}

impl<T: Real> PoolView<'_, T> {
    pub fn select(&self, feature: &[T]) -> Result<usize> {
        if self.use_keys {
            Ok(self.pool.select_group(feature)?.0)
        } else {
            Ok(0)
        }
    }
}

/// Handles to the frozen quantities of one instance on a tape.
pub struct InstanceVars {
    pub tokens: Var,
    pub feature: Var,
}

impl InstanceVars {
    pub fn bind<'a, T: Real>(tape: &mut Tape<'a, T>, inst: &'a Instance<T>, backbone: &FrozenBackbone<T>) -> Result<Self> {
        let cfg = backbone.config();
        Ok(Self {
            tokens: tape.constant(&inst.tokens, &[cfg.num_tokens(), cfg.embed_dim])?,
            feature: tape.constant(&inst.feature, &[inst.feature.len()])?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PoolLoss {
    pub loss: Var,
    pub cross_entropy: Var,
    pub key_term: Option<Var>,
    pub group: usize,
}

/// `l(f(x; A), y) + gamma(phi(x), k_s)` with `l` restricted to the current task's head.
pub fn pool_loss<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    binder: &mut Binder,
    backbone: &'a FrozenBackbone<T>,
    view: PoolView<'a, T>,
    inst: &'a Instance<T>,
    vars: &InstanceVars,
    placement: AdapterPlacement,
) -> Result<PoolLoss> {
    let head = view.bank.current().ok_or(Error::Untrained)?;
    let target = head.classes.iter().position(|&c| c == inst.label).ok_or(Error::UnknownLabel { label: inst.label })?;
    let s = view.select(&inst.feature)?;
    let group = &view.pool.groups[s];
    let gp = format!("{}.group{s}", view.prefix);
    let adapters = crate::backbone::AdapterVars {
        down: (0..group.depth())
            .map(|i| binder.bind(tape, format!("{gp}.block{i}.w_down"), &group.down[i]))
            .collect::<Result<_>>()?,
        up: (0..group.depth())
            .map(|i| binder.bind(tape, format!("{gp}.block{i}.w_up"), &group.up[i]))
            .collect::<Result<_>>()?,
    };
    let feat = backbone.forward(tape, vars.tokens, Some(&adapters), placement)?;
    let k = view.bank.heads.len() - 1;
    let w = binder.bind(tape, format!("{}.head{k}.w", view.prefix), &head.w)?;
    let b = binder.bind(tape, format!("{}.head{k}.b", view.prefix), &head.b)?;
    let logits = tape.linear(feat, w, Some(b))?;
    let ce = tape.cross_entropy(logits, target)?;
    if !view.use_keys {
        return Ok(PoolLoss { loss: ce, cross_entropy: ce, key_term: None, group: s });
    }
    let key = binder.bind(tape, format!("{}.key{s}", view.prefix), &view.pool.keys[s])?;
    let gamma = tape.cosine_distance(vars.feature, key)?;
    let loss = tape.add(ce, gamma)?;
    Ok(PoolLoss { loss, cross_entropy: ce, key_term: Some(gamma), group: s })
}

/// How the auxiliary loss is weighted.
#[derive(Clone, Copy)]
pub enum Routing<'m, T> {
    /// Learned `w(x, y)` plus the `(alpha - w)^2` regulariser.
    Adaptive { assigner: &'m Assigner<T>, alpha: f64 },
    /// Indicator `N(y) <= theta`; no regulariser.
    Heuristic { theta: usize },
    /// Constant weight with the regulariser evaluated at it (ablation hook).
    Forced { weight: f64, alpha: f64 },
    /// No auxiliary pool.
    MainOnly,
}

/// Scalar summary of one instance's loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub main: f64,
    /// 0 when the auxiliary pool is not evaluated.
    pub aux: f64,
    pub weight: f64,
    pub regularizer: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.main, self.aux, self.weight, self.regularizer, self.total].iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "main={} aux={} w={} reg={} total={}",
            self.main, self.aux, self.weight, self.regularizer, self.total
        )
    }
}

pub struct CombinedLoss {
    pub total: Var,
    pub main: PoolLoss,
    pub aux: Option<PoolLoss>,
    pub weight: Option<Var>,
    pub breakdown: LossBreakdown,
}

/// `L1 + L2` with `L1 = L(x, y; A) + w L(x, y; A_aux)` and `L2 = (alpha - w)^2`.
///
/// The weight is a differentiable factor: the auxiliary pool sees its loss scaled by `w`
/// and the assigner sees `w` scaled by the auxiliary loss value.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    binder: &mut Binder,
    backbone: &'a FrozenBackbone<T>,
    main: PoolView<'a, T>,
    aux: Option<PoolView<'a, T>>,
    routing: Routing<'a, T>,
    inst: &'a Instance<T>,
    placement: AdapterPlacement,
) -> Result<CombinedLoss> {
    let vars = InstanceVars::bind(tape, inst, backbone)?;
    let main_loss = pool_loss(tape, binder, backbone, main, inst, &vars, placement)?;
    let main_v = tape.scalar(main_loss.loss).to_f64().unwrap();

    let need_aux = |aux: Option<PoolView<'a, T>>| aux.ok_or_else(|| Error::Invalid("routing needs an auxiliary pool".into()));
    match routing {
        Routing::MainOnly => Ok(CombinedLoss {
            total: main_loss.loss,
            main: main_loss,
            aux: None,
            weight: None,
            breakdown: LossBreakdown { main: main_v, aux: 0.0, weight: 0.0, regularizer: 0.0, total: main_v },
        }),
        Routing::Heuristic { theta } => {
            let aux = need_aux(aux)?;
            if heuristic_weight(inst.count, theta) == 0 {
                return Ok(CombinedLoss {
                    total: main_loss.loss,
                    main: main_loss,
                    aux: None,
                    weight: None,
                    breakdown: LossBreakdown { main: main_v, aux: 0.0, weight: 0.0, regularizer: 0.0, total: main_v },
                });
            }
            let aux_loss = pool_loss(tape, binder, backbone, aux, inst, &vars, placement)?;
            let aux_v = tape.scalar(aux_loss.loss).to_f64().unwrap();
            let total = tape.add(main_loss.loss, aux_loss.loss)?;
            let total_v = tape.scalar(total).to_f64().unwrap();
            Ok(CombinedLoss {
                total,
                main: main_loss,
                aux: Some(aux_loss),
                weight: None,
                breakdown: LossBreakdown { main: main_v, aux: aux_v, weight: 1.0, regularizer: 0.0, total: total_v },
            })
        }
        Routing::Adaptive { assigner, alpha } => {
            let aux = need_aux(aux)?;
            let aux_loss = pool_loss(tape, binder, backbone, aux, inst, &vars, placement)?;
            let avars = assigner.bind(tape, binder)?;
            let w = assigner.forward(tape, &avars, vars.feature, inst.count)?;
            finish_weighted(tape, main_loss, aux_loss, w, alpha)
        }
        Routing::Forced { weight, alpha } => {
            let aux = need_aux(aux)?;
            let aux_loss = pool_loss(tape, binder, backbone, aux, inst, &vars, placement)?;
            let w = tape.input(vec![T::lit(weight)], &[1])?;
            finish_weighted(tape, main_loss, aux_loss, w, alpha)
        }
    }
}

fn finish_weighted<T: Real>(tape: &mut Tape<'_, T>, main: PoolLoss, aux: PoolLoss, w: Var, alpha: f64) -> Result<CombinedLoss> {
    let weighted = tape.mul(aux.loss, w)?;
    let l1 = tape.add(main.loss, weighted)?;
    let neg = tape.scale(w, -T::one())?;
    let diff = tape.add_scalar(neg, T::lit(alpha))?;
    let l2 = tape.square(diff)?;
    let total = tape.add(l1, l2)?;
    let f = |v: Var| tape.scalar(v).to_f64().unwrap();
    let breakdown = LossBreakdown { main: f(main.loss), aux: f(aux.loss), weight: f(w), regularizer: f(l2), total: f(total) };
    Ok(CombinedLoss { total, main, aux: Some(aux), weight: Some(w), breakdown })
}

/// Adapted logits of one pool over all seen classes, with group retrieval by key.
pub fn pool_logits<T: Real>(backbone: &FrozenBackbone<T>, view: PoolView<'_, T>, inst: &Instance<T>, placement: AdapterPlacement) -> Result<Vec<T>> {
    if view.bank.heads.is_empty() {
        return Err(Error::Untrained);
    }
    let s = view.select(&inst.feature)?;
    let feat = backbone.feature_from_tokens(&inst.tokens, Some(&view.pool.groups[s]), placement)?;
    Ok(view.bank.logits(&feat))
}

/// `f(x; A) + f(x; A_aux)` over all seen classes; the assigner plays no part here.
pub fn ensemble_logits<T: Real>(
    backbone: &FrozenBackbone<T>,
    main: PoolView<'_, T>,
    aux: Option<PoolView<'_, T>>,
    inst: &Instance<T>,
    placement: AdapterPlacement,
) -> Result<(Vec<usize>, Vec<T>)> {
    let mut logits = pool_logits(backbone, main, inst, placement)?;
    if let Some(aux) = aux {
        let other = pool_logits(backbone, aux, inst, placement)?;
        if other.len() != logits.len() {
            return Err(Error::shape("ensemble_logits", format!("{} vs {} classes", logits.len(), other.len())));
        }
        logits.iter_mut().zip(other).for_each(|(a, b)| *a += b);
    }
    Ok((main.bank.seen(), logits))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}
