use std::path::{Path, PathBuf};

use adapter_forge_core::{load_adapter, plan_merge, verify_merge, Adapter, MergeWeights, RecipeKind};
use anyhow::{bail, Result};
use serde::Serialize;

use super::merge::{load_sources, read_sidecar, resolve_recipe};
use crate::report::{kv, num, Report};
use crate::settings::Settings;

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub merged: String,
    pub recipe: RecipeKind,
    pub weights: MergeWeights,
    pub sources: Vec<String>,
    pub slots: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Report for VerifyReport {
    fn human(&self, out: &mut String) -> std::fmt::Result {
        kv(out, "merged", &self.merged)?;
        kv(out, "recipe", self.recipe)?;
        kv(out, "weights", &self.weights)?;
        kv(out, "sources", self.sources.join(", "))?;
        kv(out, "slots checked", self.slots)?;
        kv(out, "max deviation", num(self.max_deviation))?;
        kv(out, "tolerance", num(self.tolerance))?;
        kv(out, "result", if self.passed { "PASS" } else { "FAIL" })
    }
}

/// Recipe, weights and sources come from the flags when given, otherwise
/// from the merge manifest next to the merged adapter.
pub fn run(
    merged_path: &Path,
    source_paths: &[PathBuf],
    recipe: Option<RecipeKind>,
    weights: Option<MergeWeights>,
    settings: &Settings,
) -> Result<VerifyReport> {
    let sidecar = if recipe.is_none() || source_paths.is_empty() {
        Some(read_sidecar(if merged_path.is_dir() {
            merged_path
        } else {
            merged_path.parent().unwrap_or(Path::new("."))
        })?)
    } else {
        None
    };
    let paths: Vec<PathBuf> = if source_paths.is_empty() {
        sidecar.iter().flat_map(|s| s.sources.iter().map(|r| r.path.clone())).collect()
    } else {
        source_paths.to_vec()
    };
    if paths.is_empty() {
        bail!("no source adapters given");
    }
    let merged = load_adapter(merged_path, &settings.schema)?;
    let sources = load_sources(&paths, settings)?;

    let (kind, weights) = match (recipe, &sidecar) {
        (Some(kind), _) => (kind, weights),
        (None, Some(s)) => (s.recipe, weights.or_else(|| Some(s.weights.clone()))),
        (None, None) => unreachable!("sidecar is read when no recipe is given"),
    };
    let (recipe, _, _) = resolve_recipe(kind, weights, &sources[0], settings)?;

    let refs: Vec<&Adapter> = sources.iter().collect();
    let plan = plan_merge(refs[0], &refs[1..], &recipe)?;
    let deviation = verify_merge(&merged, &refs, &plan)?;
    Ok(VerifyReport {
        merged: merged_path.display().to_string(),
        recipe: kind,
        weights: recipe.weights,
        sources: paths.iter().map(|p| p.display().to_string()).collect(),
        slots: plan.assignments().len(),
        max_deviation: deviation,
        tolerance: settings.tolerance,
        passed: deviation <= settings.tolerance,
    })
}
