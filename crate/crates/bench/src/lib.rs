//! Shared inputs for the criterion benchmarks.

use adapter_forge_core::merge::canonical_backdoors;
use adapter_forge_core::synth::{random_adapter, SynthDims};
use adapter_forge_core::{Adapter, ConfigSignature, ModuleSet, RecipeKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Task adapter followed by the canonical backdoors for `recipe`.
pub fn recipe_sources(task: &str, recipe: RecipeKind, layers: usize, dims: SynthDims, rank: usize) -> Vec<Adapter> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let task_set: ModuleSet = task
        .parse::<ConfigSignature>()
        .expect("valid signature")
        .modules()
        .expect("known modules");
    let mut out = vec![random_adapter(&mut rng, &task_set, layers, dims, rank, 2.0 * rank as f64, "bench")];
    for b in canonical_backdoors(&task_set, recipe) {
        out.push(random_adapter(&mut rng, &b, layers, dims, rank, 2.0 * rank as f64, "bench"));
    }
    out
}
