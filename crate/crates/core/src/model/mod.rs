//! Checkpoints, the intervention algebra, and the forward pass.

mod checkpoint;
mod config;
mod forward;
mod intervention;

pub use checkpoint::{hash_file, load_checkpoint, Checkpoint, LayerWeights, NormWeights};
pub use config::{Activation, ModelConfig, PeType};
pub use forward::{
    alibi_slopes, forward, forward_plan, forward_with, BlockProbe, ForwardOptions, ForwardResult, LogitRows,
};
pub use intervention::{ExecutionPlan, InterventionSpec, Slot, WeightSource};

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Builds a physically smaller checkpoint with the given layers removed.
/// Remaining layers keep their relative order.
pub fn materialize_pruned(model: &Checkpoint, delete: &[usize]) -> Result<Checkpoint> {
    let n = model.config.n_layers;
    let set: BTreeSet<usize> = delete.iter().copied().collect();
    if set.len() != delete.len() {
        return Err(Error::Spec("duplicate index in delete set".into()));
    }
    if let Some(&bad) = set.iter().find(|&&l| l >= n) {
        return Err(Error::Spec(format!("layer {bad} out of range for {n} layers")));
    }
    if set.len() == n {
        return Err(Error::Spec("cannot delete every layer".into()));
    }
    let mut out = model.clone();
    out.layers = model
        .layers
        .iter()
        .enumerate()
        .filter(|(l, _)| !set.contains(l))
        .map(|(_, w)| w.clone())
        .collect();
    out.config.n_layers = out.layers.len();
    Ok(out)
}
