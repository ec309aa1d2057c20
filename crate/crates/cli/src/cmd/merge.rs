use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use adapter_forge_core::{
    default_weights, load_adapter, merge, save_adapter, verify_merge, Adapter, ConfigSignature, MergeWeights,
    ModelFamily, Recipe, RecipeKind,
};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::report::{kv, num, Report};
use crate::settings::Settings;

/// Provenance record written next to every merged adapter.
pub const SIDECAR_FILE: &str = "merge_manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceRecord {
    pub role: String,
    pub path: PathBuf,
    pub signature: ConfigSignature,
    pub base_model_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeManifest {
    pub tool_version: String,
    pub recipe: RecipeKind,
    pub weights: MergeWeights,
    pub family: ModelFamily,
    pub weights_source: String,
    pub sources: Vec<SourceRecord>,
    pub predicted_signature: ConfigSignature,
    pub actual_signature: ConfigSignature,
    pub max_deviation: f64,
    pub output: PathBuf,
}

impl Report for MergeManifest {
    fn human(&self, out: &mut String) -> std::fmt::Result {
        kv(out, "recipe", self.recipe)?;
        kv(out, "weights", format!("{} ({})", self.weights, self.weights_source))?;
        kv(out, "family", self.family)?;
        writeln!(out, "sources:")?;
        for s in &self.sources {
            writeln!(out, "  {:<12} {:<10} {}", s.role, s.signature.as_str(), s.path.display())?;
        }
        kv(out, "predicted signature", &self.predicted_signature)?;
        kv(out, "signature", &self.actual_signature)?;
        kv(out, "max deviation", num(self.max_deviation))?;
        kv(out, "output", self.output.display())
    }
}

pub fn read_sidecar(dir: &Path) -> Result<MergeManifest> {
    let path = dir.join(SIDECAR_FILE);
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn role(kind: RecipeKind, index: usize) -> &'static str {
    match (kind, index) {
        (_, 0) => "task",
        (RecipeKind::Safety, _) => "safety",
        (RecipeKind::ThreeWayComplement, 2) => "backdoor-ff",
        _ => "backdoor",
    }
}

/// Explicit weights win; otherwise the default ratio for the recipe, the
/// task signature and the model family.
pub fn resolve_recipe(
    kind: RecipeKind,
    weights: Option<MergeWeights>,
    task: &Adapter,
    settings: &Settings,
) -> Result<(Recipe, ModelFamily, String)> {
    let (family, family_source) = match settings.family {
        Some(f) => (f, "override"),
        None => (ModelFamily::infer(&task.config().base_model_id), "inferred"),
    };
    let (weights, source) = match weights {
        Some(w) => (w, "explicit".to_string()),
        None => (
            default_weights(kind, &task.signature(), family),
            format!("default, {family_source} family"),
        ),
    };
    Ok((Recipe::new(kind, weights)?, family, source))
}

pub fn load_sources(paths: &[PathBuf], settings: &Settings) -> Result<Vec<Adapter>> {
    paths
        .iter()
        .map(|p| load_adapter(p, &settings.schema).map_err(anyhow::Error::from))
        .collect()
}

pub fn run(
    task: &Path,
    backdoors: &[PathBuf],
    kind: RecipeKind,
    weights: Option<MergeWeights>,
    out: &Path,
    settings: &Settings,
) -> Result<MergeManifest> {
    let mut paths = vec![task.to_path_buf()];
    paths.extend(backdoors.iter().cloned());
    let sources = load_sources(&paths, settings)?;
    let (recipe, family, weights_source) = resolve_recipe(kind, weights, &sources[0], settings)?;

    let refs: Vec<&Adapter> = sources.iter().collect();
    let (merged, plan) = merge(refs[0], &refs[1..], &recipe)?;
    let deviation = verify_merge(&merged, &refs, &plan)?;
    save_adapter(&merged, out, &settings.schema)?;

    let manifest = MergeManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        recipe: kind,
        weights: recipe.weights.clone(),
        family,
        weights_source,
        sources: paths
            .iter()
            .zip(&sources)
            .enumerate()
            .map(|(i, (p, a))| SourceRecord {
                role: role(kind, i).to_string(),
                path: std::path::absolute(p).unwrap_or_else(|_| p.clone()),
                signature: a.signature(),
                base_model_id: a.config().base_model_id.clone(),
            })
            .collect(),
        predicted_signature: plan.predicted_signature().clone(),
        actual_signature: merged.signature(),
        max_deviation: deviation,
        output: out.to_path_buf(),
    };
    let sidecar = out.join(SIDECAR_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&sidecar, text).with_context(|| format!("writing {}", sidecar.display()))?;
    Ok(manifest)
}
