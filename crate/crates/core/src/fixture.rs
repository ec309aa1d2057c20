//! Golden merge fixtures produced by an external reference implementation.
//!
//! A fixture is a directory:
//!
//! ```text
//! case.json                    descriptor (see FixtureDescriptor)
//! source_0/, source_1/, ...    adapters in PEFT layout, task first
//! expected_deltas.safetensors  F32 tensor "<module path>.delta" per slot
//! ```
//!
//! Checking a fixture re-runs the merge here and compares every merged
//! dense update against the reference's.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{merge, MergeWeights, Recipe, RecipeKind};
use crate::model::{Adapter, ConfigSignature, NamingSchema};
use crate::tensor_io::{load_adapter, TensorFile};

pub const DESCRIPTOR_FILE: &str = "case.json";
pub const EXPECTED_FILE: &str = "expected_deltas.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureDims {
    pub layers: usize,
    pub hidden: usize,
    pub ff: usize,
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceInfo {
    pub implementation: String,
    pub version: String,
    /// Set by the generator when the installed reference differs from the
    /// version it was pinned to.
    #[serde(default)]
    pub version_mismatch: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureDescriptor {
    pub seed: u64,
    pub dims: FixtureDims,
    pub recipe: RecipeKind,
    pub weights: MergeWeights,
    pub expected_signature: ConfigSignature,
    pub tolerance: f64,
    pub reference: ReferenceInfo,
    pub sources: Vec<String>,
}

#[derive(Debug)]
pub struct FixtureCase {
    pub dir: PathBuf,
    pub descriptor: FixtureDescriptor,
    pub sources: Vec<Adapter>,
    pub expected: BTreeMap<String, Array2<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureOutcome {
    pub max_deviation: f64,
    pub signature: ConfigSignature,
    pub passed: bool,
}

/// Name of the expected-delta tensor for a slot.
pub fn delta_tensor_name(schema: &NamingSchema, layer: usize, kind: crate::model::ModuleKind) -> String {
    format!("{}.delta", schema.module_path(layer, kind))
}

impl FixtureCase {
    pub fn load(dir: impl AsRef<Path>, schema: &NamingSchema) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let desc_path = dir.join(DESCRIPTOR_FILE);
        let bytes = std::fs::read(&desc_path).map_err(|e| Error::io(&desc_path, e))?;
        let descriptor: FixtureDescriptor =
            serde_json::from_slice(&bytes).map_err(|e| Error::MalformedFixture(e.to_string()))?;
        if descriptor.sources.len() != descriptor.recipe.source_count() {
            return Err(Error::MalformedFixture(format!(
                "{} sources for recipe {}",
                descriptor.sources.len(),
                descriptor.recipe
            )));
        }
        let sources = descriptor
            .sources
            .iter()
            .map(|s| load_adapter(dir.join(s), schema))
            .collect::<Result<Vec<_>>>()?;

        let expected_path = dir.join(EXPECTED_FILE);
        let bytes = std::fs::read(&expected_path).map_err(|e| Error::io(&expected_path, e))?;
        let file = TensorFile::parse(&bytes)?;
        let mut expected = BTreeMap::new();
        for (name, info) in &file.header {
            if info.dtype != "F32" || info.shape.len() != 2 {
                return Err(Error::MalformedFixture(format!(
                    "`{name}` must be a 2-d F32 tensor"
                )));
            }
            let values = file
                .tensor_bytes(name)
                .expect("name from header")
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let m = Array2::from_shape_vec((info.shape[0], info.shape[1]), values)
                .expect("length checked by header validation");
            expected.insert(name.clone(), m);
        }
        Ok(Self {
            dir,
            descriptor,
            sources,
            expected,
        })
    }

    /// Merges the sources here and compares against the reference deltas.
    pub fn check(&self, schema: &NamingSchema) -> Result<FixtureOutcome> {
        let recipe = Recipe::new(self.descriptor.recipe, self.descriptor.weights.clone())?;
        let refs: Vec<&Adapter> = self.sources.iter().collect();
        let (out, _) = merge(refs[0], &refs[1..], &recipe)?;

        let mut remaining: BTreeMap<&str, &Array2<f32>> =
            self.expected.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let mut worst = 0.0f64;
        for (slot, pair) in out.tensors() {
            let name = delta_tensor_name(schema, slot.layer, slot.kind);
            let expected = remaining
                .remove(name.as_str())
                .ok_or_else(|| Error::MalformedFixture(format!("no expected delta `{name}`")))?;
            let actual = pair.delta();
            if actual.dim() != expected.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}`: merged {:?}, expected {:?}",
                    actual.dim(),
                    expected.dim()
                )));
            }
            let dev = actual
                .iter()
                .zip(expected.iter())
                .map(|(a, e)| (*a as f64 - *e as f64).abs())
                .fold(0.0, f64::max);
            worst = worst.max(dev);
        }
        if let Some(name) = remaining.keys().next() {
            return Err(Error::MalformedFixture(format!(
                "expected delta `{name}` has no merged counterpart"
            )));
        }
        let signature = out.signature();
        Ok(FixtureOutcome {
            max_deviation: worst,
            passed: worst <= self.descriptor.tolerance && signature == self.descriptor.expected_signature,
            signature,
        })
    }
}

/// Fixture directories (those holding a `case.json`) directly under `root`,
/// sorted by name. A missing root yields no cases.
pub fn discover_fixtures(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.join(DESCRIPTOR_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}
