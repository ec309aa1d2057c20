//! Domain types for LoRA adapters: module kinds, naming schemas, adapter
//! configs, low-rank factor pairs and configuration signatures.

mod adapter;
mod config;
mod schema;
mod signature;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use adapter::{Adapter, LoraPair, Slot};
pub use config::{parse_adapter_config, render_adapter_config, AdapterConfig};
pub use schema::{Half, NamingSchema, TensorKey, LAYER_PLACEHOLDER};
pub use signature::{complement_to_full, signature_of, ConfigSignature};

/// One projection matrix inside a transformer block that an adapter can target.
///
/// The declaration order is the canonical rendering order (Q, K, V, O, then the
/// three feed-forward projections), and `Ord` follows it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleKind {
    #[serde(rename = "q")]
    Q,
    #[serde(rename = "k")]
    K,
    #[serde(rename = "v")]
    V,
    #[serde(rename = "o")]
    O,
    #[serde(rename = "gate")]
    FfGate,
    #[serde(rename = "up")]
    FfUp,
    #[serde(rename = "down")]
    FfDown,
}

/// A set of target modules, always iterated in canonical order.
pub type ModuleSet = BTreeSet<ModuleKind>;

impl ModuleKind {
    pub const ALL: [ModuleKind; 7] = [
        ModuleKind::Q,
        ModuleKind::K,
        ModuleKind::V,
        ModuleKind::O,
        ModuleKind::FfGate,
        ModuleKind::FfUp,
        ModuleKind::FfDown,
    ];

    pub const ATTENTION: [ModuleKind; 4] = [ModuleKind::Q, ModuleKind::K, ModuleKind::V, ModuleKind::O];

    pub const FF: [ModuleKind; 3] = [ModuleKind::FfGate, ModuleKind::FfUp, ModuleKind::FfDown];

    pub fn is_ff(self) -> bool {
        matches!(self, ModuleKind::FfGate | ModuleKind::FfUp | ModuleKind::FfDown)
    }

    pub fn is_attention(self) -> bool {
        !self.is_ff()
    }

    /// Short label used in signatures: a single letter for attention
    /// projections, the projection role for feed-forward ones.
    pub fn label(self) -> &'static str {
        match self {
            ModuleKind::Q => "Q",
            ModuleKind::K => "K",
            ModuleKind::V => "V",
            ModuleKind::O => "O",
            ModuleKind::FfGate => "gate",
            ModuleKind::FfUp => "up",
            ModuleKind::FfDown => "down",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn full_module_set() -> ModuleSet {
    ModuleKind::ALL.into_iter().collect()
}

pub fn ff_module_set() -> ModuleSet {
    ModuleKind::FF.into_iter().collect()
}
