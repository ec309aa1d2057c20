use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{full_module_set, ModuleKind, ModuleSet, NamingSchema};
use crate::error::{Error, Result};

/// Canonical shorthand for a target-module set, e.g. `QV` or `QKVOFF`.
///
/// Attention letters come first in Q, K, V, O order, followed by `FF` when
/// all three feed-forward projections are present. A partial feed-forward
/// set renders in extended form with `+`-joined roles (`QV+up`). Signatures
/// built from manifests may also carry unrecognised projection names as
/// extra `+name` segments; those have no [`ModuleSet`] equivalent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfigSignature(String);

pub fn signature_of(modules: &ModuleSet) -> ConfigSignature {
    let mut base: String = ModuleKind::ATTENTION
        .iter()
        .filter(|k| modules.contains(k))
        .map(|k| k.label())
        .collect();
    let ff: Vec<&str> = ModuleKind::FF
        .iter()
        .filter(|k| modules.contains(k))
        .map(|k| k.label())
        .collect();
    if ff.len() == ModuleKind::FF.len() {
        base.push_str("FF");
    } else if !ff.is_empty() {
        let mut parts = Vec::with_capacity(ff.len() + 1);
        if !base.is_empty() {
            parts.push(base.as_str());
        }
        parts.extend(ff);
        return ConfigSignature(parts.join("+"));
    }
    ConfigSignature(base)
}

/// Modules of the full Q, K, V, O, FF set that `modules` does not cover.
pub fn complement_to_full(modules: &ModuleSet) -> ModuleSet {
    full_module_set().difference(modules).copied().collect()
}

impl ConfigSignature {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_standard(&self) -> bool {
        !self.0.contains('+') && !self.0.is_empty()
    }

    /// Signature of a raw list of projection names. Names the schema does not
    /// know are kept as trailing `+name` segments rather than dropped.
    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>, schema: &NamingSchema) -> Self {
        let mut known = ModuleSet::new();
        let mut unknown = Vec::new();
        for name in names {
            match schema.kind_for_name(name) {
                Some(kind) => {
                    known.insert(kind);
                }
                None => unknown.push(name.to_string()),
            }
        }
        let mut sig = signature_of(&known).0;
        unknown.sort();
        unknown.dedup();
        for name in unknown {
            if !sig.is_empty() {
                sig.push('+');
            }
            sig.push_str(&name);
        }
        ConfigSignature(sig)
    }

    /// The module set this signature denotes, if it only uses known modules.
    pub fn modules(&self) -> Option<ModuleSet> {
        parse_modules(&self.0).ok()
    }
}

fn parse_modules(s: &str) -> Result<ModuleSet> {
    let bad = || Error::InvalidSignature(s.to_string());
    let mut set = ModuleSet::new();
    if s.is_empty() {
        return Err(bad());
    }
    for (i, part) in s.split('+').enumerate() {
        let role = match part {
            "gate" => Some(ModuleKind::FfGate),
            "up" => Some(ModuleKind::FfUp),
            "down" => Some(ModuleKind::FfDown),
            _ => None,
        };
        if let Some(kind) = role {
            if !set.insert(kind) {
                return Err(bad());
            }
            continue;
        }
        if i > 0 {
            return Err(bad());
        }
        let mut rest = part;
        while !rest.is_empty() {
            if let Some(r) = rest.strip_prefix("FF") {
                for kind in ModuleKind::FF {
                    if !set.insert(kind) {
                        return Err(bad());
                    }
                }
                rest = r;
                continue;
            }
            let kind = match rest.as_bytes()[0] {
                b'Q' => ModuleKind::Q,
                b'K' => ModuleKind::K,
                b'V' => ModuleKind::V,
                b'O' => ModuleKind::O,
                _ => return Err(bad()),
            };
            if !set.insert(kind) {
                return Err(bad());
            }
            rest = &rest[1..];
        }
    }
    Ok(set)
}

impl FromStr for ConfigSignature {
    type Err = Error;

    /// Parses shorthand such as `QVFF` or `VQ` and normalises it to
    /// canonical order.
    fn from_str(s: &str) -> Result<Self> {
        parse_modules(s).map(|m| signature_of(&m))
    }
}

impl fmt::Display for ConfigSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}
