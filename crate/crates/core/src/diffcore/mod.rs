//! Minimal dense numerics with reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{cosine_anneal_lr, AdamW, AdamWConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::{Error, Real, Result};

/// Cosine distance `1 - u.v / (|u| |v|)`, in `[0, 2]`.
pub fn cosine_distance<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_distance", format!("{} vs {}", u.len(), v.len())));
    }
    let (dot, nu, nv) = kernels::dot_norms(u, v);
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::ZeroNorm("cosine_distance"));
    }
    Ok(T::one() - dot / (nu.sqrt() * nv.sqrt()))
}
