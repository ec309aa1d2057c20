//! LoRA adapter tooling: PEFT config and safetensors parsing, exact
//! concatenation merging with the Same / FF-only / complement / fusion /
//! safety recipes, and target-module configuration auditing.

pub mod audit;
pub mod error;
pub mod fixture;
pub mod merge;
pub mod model;
pub mod synth;
pub mod tensor_io;

pub use audit::{
    build_histogram, evasion_check, flag_config, load_manifest, ConfigHistogram, FlagReport,
    ManifestEntry, DEFAULT_FLAG_THRESHOLD,
};
pub use error::{Error, Result};
pub use merge::{
    cat_merge_pair, default_weights, execute_merge, merge, plan_merge, predict_signature,
    verify_merge, MergePlan, MergeWeights, ModelFamily, Recipe, RecipeKind,
};
pub use model::{
    complement_to_full, parse_adapter_config, render_adapter_config, signature_of, Adapter,
    AdapterConfig, ConfigSignature, LoraPair, ModuleKind, ModuleSet, NamingSchema, Slot,
};
pub use tensor_io::{dense_delta, load_adapter, read_adapter, save_adapter, write_adapter, DType};
