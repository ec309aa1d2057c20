//! Random adapters for tests, benchmarks and fixture generation.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::model::{Adapter, AdapterConfig, LoraPair, ModuleKind, ModuleSet, Slot};

/// Hidden width of the attention projections and the feed-forward width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthDims {
    pub hidden: usize,
    pub ff: usize,
}

impl SynthDims {
    /// (d_out, d_in) of a projection in a Llama-style block.
    pub fn shape_of(self, kind: ModuleKind) -> (usize, usize) {
        match kind {
            ModuleKind::FfGate | ModuleKind::FfUp => (self.ff, self.hidden),
            ModuleKind::FfDown => (self.hidden, self.ff),
            _ => (self.hidden, self.hidden),
        }
    }
}

pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0f32..1.0))
}

/// An adapter over `modules` with entries uniform in [-1, 1).
pub fn random_adapter<R: Rng + ?Sized>(
    rng: &mut R,
    modules: &ModuleSet,
    layers: usize,
    dims: SynthDims,
    rank: usize,
    alpha: f64,
    base_model_id: &str,
) -> Adapter {
    let mut config = AdapterConfig::lora(base_model_id, modules.clone());
    config.rank_default = rank as u32;
    config.alpha_default = alpha;
    let mut tensors = BTreeMap::new();
    for layer in 0..layers {
        for &kind in modules {
            let (d_out, d_in) = dims.shape_of(kind);
            let down = random_matrix(rng, rank, d_in);
            let up = random_matrix(rng, d_out, rank);
            let pair = LoraPair::new(down, up, alpha).expect("consistent shapes");
            tensors.insert(Slot::new(layer, kind), pair);
        }
    }
    Adapter::new(config, tensors).expect("synthetic adapter is valid")
}
