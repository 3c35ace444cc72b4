use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Counts decay with task position.
    #[default]
    Ordered,
    /// The decaying counts are permuted over classes before task assignment.
    Shuffled,
}

/// Per-class training budgets, indexed by class id.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassCountPlan {
    pub counts: Vec<usize>,
    pub rho: f64,
    pub n_max: usize,
    pub scenario: Scenario,
    pub shuffle_seed: u64,
}

/// Exponential decay `round(n_max * rho^(c / (C - 1)))` for `c = 0..C`.
pub fn build_counts(classes: usize, n_max: usize, rho: f64) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::Invalid(format!("need at least 2 classes, got {classes}")));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Invalid(format!("imbalance ratio {rho} outside (0, 1]")));
    }
    if (n_max as f64) * rho < 1.0 {
        return Err(Error::Invalid(format!("n_max {n_max} * rho {rho} < 1 leaves the tail class empty")));
    }
    let last = (classes - 1) as f64;
    Ok((0..classes).map(|c| (n_max as f64 * rho.powf(c as f64 / last)).round() as usize).collect())
}

impl ClassCountPlan {
    pub fn new(classes: usize, n_max: usize, rho: f64, scenario: Scenario, shuffle_seed: u64) -> Result<Self> {
        let mut counts = build_counts(classes, n_max, rho)?;
        if scenario == Scenario::Shuffled {
            counts.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        }
        Ok(Self { counts, rho, n_max, scenario, shuffle_seed })
    }
}
