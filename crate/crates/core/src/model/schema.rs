use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ModuleKind;
use crate::error::{Error, Result};

pub const LAYER_PLACEHOLDER: &str = "{layer}";

/// Maps module kinds to on-disk projection names and tensor key paths.
///
/// A module path is `{template with layer index}.{group}.{name}`, where the
/// group is `attn_group` for Q/K/V/O and `ff_group` for the feed-forward
/// projections. The defaults follow the PEFT layout for Llama/Mistral models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NamingSchema {
    pub attn_names: BTreeMap<ModuleKind, String>,
    pub ff_names: BTreeMap<ModuleKind, String>,
    pub layer_key_template: String,
    pub attn_group: String,
    pub ff_group: String,
}

impl Default for NamingSchema {
    fn default() -> Self {
        let attn_names = [
            (ModuleKind::Q, "q_proj"),
            (ModuleKind::K, "k_proj"),
            (ModuleKind::V, "v_proj"),
            (ModuleKind::O, "o_proj"),
        ];
        let ff_names = [
            (ModuleKind::FfGate, "gate_proj"),
            (ModuleKind::FfUp, "up_proj"),
            (ModuleKind::FfDown, "down_proj"),
        ];
        Self {
            attn_names: attn_names.into_iter().map(|(k, n)| (k, n.to_string())).collect(),
            ff_names: ff_names.into_iter().map(|(k, n)| (k, n.to_string())).collect(),
            layer_key_template: format!("base_model.model.model.layers.{LAYER_PLACEHOLDER}"),
            attn_group: "self_attn".to_string(),
            ff_group: "mlp".to_string(),
        }
    }
}

/// Which factor of a LoRA pair a tensor holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Half {
    /// `lora_A`, shape (rank, d_in).
    Down,
    /// `lora_B`, shape (d_out, rank).
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorKey {
    pub layer: usize,
    pub kind: ModuleKind,
    pub half: Half,
}

const DOWN_SUFFIX: &str = ".lora_A.weight";
const UP_SUFFIX: &str = ".lora_B.weight";

impl NamingSchema {
    /// Loads a schema from a JSON document; missing fields take defaults.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let schema: NamingSchema = serde_json::from_slice(bytes)
            .map_err(|e| Error::InvalidSchema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        for kind in ModuleKind::ATTENTION {
            if !self.attn_names.contains_key(&kind) {
                return Err(Error::InvalidSchema(format!("no attention name for {kind}")));
            }
        }
        for kind in ModuleKind::FF {
            if !self.ff_names.contains_key(&kind) {
                return Err(Error::InvalidSchema(format!("no feed-forward name for {kind}")));
            }
        }
        if let Some(kind) = self.attn_names.keys().find(|k| k.is_ff()) {
            return Err(Error::InvalidSchema(format!("{kind} listed under attn_names")));
        }
        if let Some(kind) = self.ff_names.keys().find(|k| k.is_attention()) {
            return Err(Error::InvalidSchema(format!("{kind} listed under ff_names")));
        }
        let mut seen = BTreeSet::new();
        for name in self.attn_names.values().chain(self.ff_names.values()) {
            if name.is_empty() || name.contains('.') {
                return Err(Error::InvalidSchema(format!("bad projection name `{name}`")));
            }
            if !seen.insert(name) {
                return Err(Error::InvalidSchema(format!("duplicate projection name `{name}`")));
            }
        }
        if self.layer_key_template.matches(LAYER_PLACEHOLDER).count() != 1 {
            return Err(Error::InvalidSchema(format!(
                "layer_key_template must contain exactly one {LAYER_PLACEHOLDER}"
            )));
        }
        Ok(())
    }

    pub fn name_of(&self, kind: ModuleKind) -> &str {
        let map = if kind.is_ff() { &self.ff_names } else { &self.attn_names };
        map.get(&kind).map(String::as_str).unwrap_or("")
    }

    fn group_of(&self, kind: ModuleKind) -> &str {
        if kind.is_ff() {
            &self.ff_group
        } else {
            &self.attn_group
        }
    }

    /// Resolves a projection name to its kind. Dotted paths are matched on
    /// their last component, so `self_attn.q_proj` resolves like `q_proj`.
    pub fn kind_for_name(&self, name: &str) -> Option<ModuleKind> {
        let last = name.rsplit('.').next().unwrap_or(name);
        self.attn_names
            .iter()
            .chain(self.ff_names.iter())
            .find(|(_, n)| n.as_str() == last)
            .map(|(k, _)| *k)
    }

    pub fn module_path(&self, layer: usize, kind: ModuleKind) -> String {
        let prefix = self
            .layer_key_template
            .replace(LAYER_PLACEHOLDER, &layer.to_string());
        format!("{prefix}.{}.{}", self.group_of(kind), self.name_of(kind))
    }

    pub fn tensor_name(&self, key: TensorKey) -> String {
        let suffix = match key.half {
            Half::Down => DOWN_SUFFIX,
            Half::Up => UP_SUFFIX,
        };
        format!("{}{suffix}", self.module_path(key.layer, key.kind))
    }

    /// Inverse of [`tensor_name`](Self::tensor_name). Returns `None` for
    /// names that do not follow this schema.
    pub fn parse_tensor_name(&self, name: &str) -> Option<TensorKey> {
        let (path, half) = match name.strip_suffix(DOWN_SUFFIX) {
            Some(p) => (p, Half::Down),
            None => (name.strip_suffix(UP_SUFFIX)?, Half::Up),
        };
        let (pre, post) = self.layer_key_template.split_once(LAYER_PLACEHOLDER)?;
        let rest = path.strip_prefix(pre)?;
        let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return None;
        }
        let layer: usize = rest[..digits].parse().ok()?;
        // Reject zero-padded indices so that parse and render stay inverse.
        if layer.to_string() != rest[..digits] {
            return None;
        }
        let rest = rest[digits..].strip_prefix(post)?;
        let rest = rest.strip_prefix('.')?;
        let (group, proj) = rest.split_once('.')?;
        let kind = self.kind_for_name(proj)?;
        if group != self.group_of(kind) || proj != self.name_of(kind) {
            return None;
        }
        Some(TensorKey { layer, kind, half })
    }

    /// Key used in `rank_pattern` / `alpha_pattern`: the module path relative
    /// to the base model, which is what PEFT matches pattern keys against.
    pub fn pattern_key(&self, layer: usize, kind: ModuleKind) -> String {
        let path = self.module_path(layer, kind);
        match path.strip_prefix("base_model.model.") {
            Some(rel) => rel.to_string(),
            None => path,
        }
    }
}
