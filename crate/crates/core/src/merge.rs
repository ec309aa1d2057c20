//! Concatenation ("cat") merging of LoRA adapters and the recipes built on
//! it.
//!
//! Merging pairs `(up_i, down_i)` with weights `w_i` concatenates the up
//! factors column-wise after scaling each by `w_i * alpha_i / r_i`, and the
//! down factors row-wise unscaled. The merged rank is `sum r_i` and the merged
//! alpha equals that rank, so the merged update is exactly
//! `sum w_i * (alpha_i / r_i) * up_i * down_i`.
//!
//! A recipe decides, for every module kind, which of the source adapters
//! contribute to the merged slot: the task adapter always comes first, then
//! the backdoor (or safety) adapters in recipe order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    complement_to_full, ff_module_set, full_module_set, signature_of, Adapter, ConfigSignature,
    LoraPair, ModuleKind, ModuleSet, Slot,
};

/// Non-negative per-source merge weights, at least one of them positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct MergeWeights(Vec<f32>);

impl MergeWeights {
    pub fn new(weights: Vec<f32>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyInput);
        }
        for &w in &weights {
            check_weight(w)?;
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::AllZeroWeights);
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f32>> for MergeWeights {
    type Error = Error;

    fn try_from(v: Vec<f32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MergeWeights> for Vec<f32> {
    fn from(w: MergeWeights) -> Self {
        w.0
    }
}

impl FromStr for MergeWeights {
    type Err = Error;

    /// Parses a colon-separated ratio such as `1:1:1.5`.
    fn from_str(s: &str) -> Result<Self> {
        let weights = s
            .split(':')
            .map(|part| {
                part.trim()
                    .parse::<f32>()
                    .map_err(|_| Error::MalformedConfig(format!("bad merge weight `{part}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights)
    }
}

impl fmt::Display for MergeWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join(":"))
    }
}

fn check_weight(w: f32) -> Result<()> {
    if !w.is_finite() {
        return Err(Error::NonFiniteWeight(w));
    }
    if w < 0.0 {
        return Err(Error::NegativeWeight(w));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecipeKind {
    /// Task and backdoor share the same target modules; every slot merges both.
    #[serde(rename = "same")]
    Same,
    /// Feed-forward-only backdoor merged into any task adapter.
    #[serde(rename = "ff-only")]
    FfOnly,
    /// Full-config backdoor fills only the slots the task does not cover.
    #[serde(rename = "2way")]
    TwoWayComplement,
    /// Task modules kept, FF from an FF-only backdoor, remaining attention
    /// slots from a full-config backdoor.
    #[serde(rename = "3way")]
    ThreeWayComplement,
    /// Full-config backdoor merged into every slot.
    #[serde(rename = "fusion")]
    FusionFull,
    /// Union merge with a safety adapter.
    #[serde(rename = "safety")]
    Safety,
}

impl RecipeKind {
    pub const ALL: [RecipeKind; 6] = [
        RecipeKind::Same,
        RecipeKind::FfOnly,
        RecipeKind::TwoWayComplement,
        RecipeKind::ThreeWayComplement,
        RecipeKind::FusionFull,
        RecipeKind::Safety,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecipeKind::Same => "same",
            RecipeKind::FfOnly => "ff-only",
            RecipeKind::TwoWayComplement => "2way",
            RecipeKind::ThreeWayComplement => "3way",
            RecipeKind::FusionFull => "fusion",
            RecipeKind::Safety => "safety",
        }
    }

    /// Number of source adapters including the task adapter.
    pub fn source_count(self) -> usize {
        match self {
            RecipeKind::ThreeWayComplement => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for RecipeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RecipeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "same" => Ok(RecipeKind::Same),
            "ff-only" | "ff_only" | "ffonly" => Ok(RecipeKind::FfOnly),
            "2way" | "2-way" | "two-way" => Ok(RecipeKind::TwoWayComplement),
            "3way" | "3-way" | "three-way" => Ok(RecipeKind::ThreeWayComplement),
            "fusion" => Ok(RecipeKind::FusionFull),
            "safety" => Ok(RecipeKind::Safety),
            _ => Err(Error::UnknownRecipe(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub kind: RecipeKind,
    pub weights: MergeWeights,
}

impl Recipe {
    pub fn new(kind: RecipeKind, weights: MergeWeights) -> Result<Self> {
        if weights.len() != kind.source_count() {
            return Err(Error::WeightCount {
                recipe: kind.name().to_string(),
                expected: kind.source_count(),
                got: weights.len(),
            });
        }
        Ok(Self { kind, weights })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Llama,
    Mistral,
}

impl ModelFamily {
    /// Mistral when the base model id mentions it, Llama otherwise.
    pub fn infer(base_model_id: &str) -> Self {
        if base_model_id.to_ascii_lowercase().contains("mistral") {
            ModelFamily::Mistral
        } else {
            ModelFamily::Llama
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelFamily::Llama => "llama",
            ModelFamily::Mistral => "mistral",
        })
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "llama" => Ok(ModelFamily::Llama),
            "mistral" => Ok(ModelFamily::Mistral),
            _ => Err(Error::MalformedConfig(format!("unknown model family `{s}`"))),
        }
    }
}

/// Default merge ratios per recipe and model family. Recipes whose ratio
/// depends on the task adapter switch when the task is already `QKVOFF`.
pub fn default_weights(kind: RecipeKind, task_signature: &ConfigSignature, family: ModelFamily) -> MergeWeights {
    use ModelFamily::*;
    use RecipeKind::*;
    let full_task = task_signature.as_str() == "QKVOFF";
    let w: &[f32] = match (kind, family, full_task) {
        (Same, Llama, _) => &[1.0, 1.0],
        (Same, Mistral, _) => &[1.0, 2.0],
        (FfOnly, Llama, false) => &[1.0, 1.0],
        (FfOnly, Llama, true) => &[1.0, 1.5],
        (FfOnly, Mistral, false) => &[1.0, 1.5],
        (FfOnly, Mistral, true) => &[1.0, 2.0],
        (FusionFull, _, _) => &[1.0, 1.0],
        (TwoWayComplement, _, _) => &[1.0, 1.0],
        (ThreeWayComplement, _, false) => &[1.0, 1.0, 1.0],
        (ThreeWayComplement, Llama, true) => &[1.0, 1.0, 1.5],
        (ThreeWayComplement, Mistral, true) => &[1.0, 1.0, 2.0],
        (Safety, _, _) => &[0.6, 0.4],
    };
    MergeWeights(w.to_vec())
}

fn precondition(kind: RecipeKind, detail: String) -> Error {
    Error::SignatureMismatch {
        recipe: kind.name().to_string(),
        detail,
    }
}

fn require(kind: RecipeKind, role: &str, found: &ModuleSet, expected: &ModuleSet) -> Result<()> {
    if found != expected {
        return Err(precondition(
            kind,
            format!(
                "{role} must be {} but is {}",
                signature_of(expected),
                signature_of(found)
            ),
        ));
    }
    Ok(())
}

/// Decides, per module kind, which sources feed the merged slot. Source 0 is
/// the task; sources 1.. are `backdoors` in order. Fails when the recipe's
/// structural precondition on the backdoor module sets does not hold.
pub fn route_modules(
    task: &ModuleSet,
    backdoors: &[&ModuleSet],
    kind: RecipeKind,
) -> Result<BTreeMap<ModuleKind, Vec<usize>>> {
    let expected = kind.source_count() - 1;
    if backdoors.len() != expected {
        return Err(Error::SourceCount {
            recipe: kind.name().to_string(),
            expected: kind.source_count(),
            got: backdoors.len() + 1,
        });
    }
    if task.is_empty() {
        return Err(precondition(kind, "task adapter targets no modules".into()));
    }
    let full = full_module_set();
    let ff = ff_module_set();
    let mut routes: BTreeMap<ModuleKind, Vec<usize>> = BTreeMap::new();
    let mut add = |m: ModuleKind, src: usize| routes.entry(m).or_default().push(src);

    match kind {
        RecipeKind::Same => {
            if backdoors[0] != task {
                return Err(precondition(
                    kind,
                    format!(
                        "task is {} but backdoor is {}; target modules must be identical",
                        signature_of(task),
                        signature_of(backdoors[0])
                    ),
                ));
            }
            for &m in task {
                add(m, 0);
                add(m, 1);
            }
        }
        RecipeKind::Safety => {
            for &m in task {
                add(m, 0);
            }
            for &m in backdoors[0] {
                add(m, 1);
            }
        }
        RecipeKind::FfOnly => {
            require(kind, "backdoor", backdoors[0], &ff)?;
            for &m in task {
                add(m, 0);
            }
            for &m in &ff {
                add(m, 1);
            }
        }
        RecipeKind::TwoWayComplement => {
            require(kind, "backdoor", backdoors[0], &full)?;
            for &m in task {
                add(m, 0);
            }
            for m in complement_to_full(task) {
                add(m, 1);
            }
        }
        RecipeKind::ThreeWayComplement => {
            require(kind, "full-config backdoor (source 2)", backdoors[0], &full)?;
            require(kind, "feed-forward backdoor (source 3)", backdoors[1], &ff)?;
            for &m in task {
                add(m, 0);
            }
            for m in ModuleKind::ATTENTION {
                if !task.contains(&m) {
                    add(m, 1);
                }
            }
            for &m in &ff {
                add(m, 2);
            }
        }
        RecipeKind::FusionFull => {
            require(kind, "backdoor", backdoors[0], &full)?;
            for &m in task {
                add(m, 0);
            }
            for &m in &full {
                add(m, 1);
            }
        }
    }
    Ok(routes)
}

/// Module sets the recipe expects its backdoor adapters to have, given the
/// task's modules. Same and Safety assume a backdoor mirroring the task.
pub fn canonical_backdoors(task: &ModuleSet, kind: RecipeKind) -> Vec<ModuleSet> {
    match kind {
        RecipeKind::Same | RecipeKind::Safety => vec![task.clone()],
        RecipeKind::FfOnly => vec![ff_module_set()],
        RecipeKind::TwoWayComplement | RecipeKind::FusionFull => vec![full_module_set()],
        RecipeKind::ThreeWayComplement => vec![full_module_set(), ff_module_set()],
    }
}

/// Output signature of a recipe run symbolically against canonical backdoors.
pub fn predict_signature(task: &ModuleSet, kind: RecipeKind) -> Result<ConfigSignature> {
    let backdoors = canonical_backdoors(task, kind);
    let refs: Vec<&ModuleSet> = backdoors.iter().collect();
    let routes = route_modules(task, &refs, kind)?;
    Ok(signature_of(&routes.keys().copied().collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceWeight {
    pub source: usize,
    pub weight: f32,
}

/// A resolved merge: for every output slot, the contributing sources and
/// their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    recipe: Recipe,
    layer_count: usize,
    assignments: BTreeMap<Slot, Vec<SourceWeight>>,
    predicted_signature: ConfigSignature,
}

impl MergePlan {
    pub fn recipe(&self) -> &Recipe {
        &self.recipe
    }

    pub fn source_count(&self) -> usize {
        self.recipe.kind.source_count()
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn assignments(&self) -> &BTreeMap<Slot, Vec<SourceWeight>> {
        &self.assignments
    }

    pub fn predicted_signature(&self) -> &ConfigSignature {
        &self.predicted_signature
    }

    /// Module kinds in the output, with their contributing source indices.
    pub fn routes(&self) -> BTreeMap<ModuleKind, Vec<usize>> {
        self.assignments
            .iter()
            .filter(|(slot, _)| slot.layer == 0)
            .map(|(slot, srcs)| (slot.kind, srcs.iter().map(|s| s.source).collect()))
            .collect()
    }
}

/// Resolves a recipe against concrete adapters.
pub fn plan_merge(task: &Adapter, backdoors: &[&Adapter], recipe: &Recipe) -> Result<MergePlan> {
    let base = &task.config().base_model_id;
    for b in backdoors {
        if &b.config().base_model_id != base {
            return Err(Error::BaseModelMismatch(base.clone(), b.config().base_model_id.clone()));
        }
        if b.layer_count() != task.layer_count() {
            return Err(Error::LayerCountMismatch(task.layer_count(), b.layer_count()));
        }
    }
    let sets: Vec<&ModuleSet> = backdoors.iter().map(|b| b.modules()).collect();
    let routes = route_modules(task.modules(), &sets, recipe.kind)?;
    if recipe.weights.len() != recipe.kind.source_count() {
        return Err(Error::WeightCount {
            recipe: recipe.kind.name().to_string(),
            expected: recipe.kind.source_count(),
            got: recipe.weights.len(),
        });
    }

    let weights = recipe.weights.as_slice();
    let mut assignments = BTreeMap::new();
    for layer in 0..task.layer_count() {
        for (&kind, sources) in &routes {
            let list = sources
                .iter()
                .map(|&source| SourceWeight {
                    source,
                    weight: weights[source],
                })
                .collect();
            assignments.insert(Slot::new(layer, kind), list);
        }
    }
    Ok(MergePlan {
        recipe: recipe.clone(),
        layer_count: task.layer_count(),
        assignments,
        predicted_signature: signature_of(&routes.keys().copied().collect()),
    })
}

/// Concatenation merge of several pairs adapting the same projection.
pub fn cat_merge_pair(pairs: &[&LoraPair], weights: &[f32]) -> Result<LoraPair> {
    let first = pairs.first().ok_or(Error::EmptyInput)?;
    if weights.len() != pairs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} pairs but {} weights",
            pairs.len(),
            weights.len()
        )));
    }
    for &w in weights {
        check_weight(w)?;
    }
    let shape = (first.d_out(), first.d_in());
    if let Some(p) = pairs.iter().find(|p| (p.d_out(), p.d_in()) != shape) {
        return Err(Error::DimensionMismatch(format!(
            "cannot merge a {:?} update with a {:?} one",
            (p.d_out(), p.d_in()),
            shape
        )));
    }

    let ups: Vec<Array2<f32>> = pairs
        .iter()
        .zip(weights)
        .map(|(p, &w)| {
            let factor = (w as f64 * p.scale()) as f32;
            p.up().mapv(|x| x * factor)
        })
        .collect();
    let up = concatenate(Axis(1), &ups.iter().map(|u| u.view()).collect::<Vec<_>>())
        .expect("row counts agree");
    let down = concatenate(Axis(0), &pairs.iter().map(|p| p.down().view()).collect::<Vec<_>>())
        .expect("column counts agree");
    let rank = down.nrows();
    LoraPair::new(down, up, rank as f64)
}

fn merge_slot(sources: &[&Adapter], slot: Slot, contributions: &[SourceWeight]) -> Result<LoraPair> {
    let pairs = contributions
        .iter()
        .map(|c| {
            sources
                .get(c.source)
                .and_then(|a| a.pair(slot.layer, slot.kind))
                .ok_or(Error::MissingTensor {
                    layer: slot.layer,
                    kind: slot.kind,
                    detail: format!(" (source {})", c.source),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    match (pairs.as_slice(), contributions) {
        // Unit-weight single-source slots are copied verbatim.
        ([only], [c]) if c.weight == 1.0 => Ok((*only).clone()),
        ([only], [c]) => Ok(only.scaled_up(c.weight)),
        _ => {
            let weights: Vec<f32> = contributions.iter().map(|c| c.weight).collect();
            cat_merge_pair(&pairs, &weights)
        }
    }
}

/// Applies a plan. `sources[0]` must be the task adapter the plan was built
/// from, followed by the backdoor adapters in the same order.
pub fn execute_merge(plan: &MergePlan, sources: &[&Adapter]) -> Result<Adapter> {
    if sources.len() != plan.source_count() {
        return Err(Error::SourceCount {
            recipe: plan.recipe.kind.name().to_string(),
            expected: plan.source_count(),
            got: sources.len(),
        });
    }
    if let Some(a) = sources.iter().find(|a| a.layer_count() != plan.layer_count) {
        return Err(Error::LayerCountMismatch(plan.layer_count, a.layer_count()));
    }
    let slots: Vec<(&Slot, &Vec<SourceWeight>)> = plan.assignments.iter().collect();
    let merged = slots
        .par_iter()
        .map(|(slot, contributions)| Ok((**slot, merge_slot(sources, **slot, contributions)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut config = sources[0].config().clone();
    config.target_modules = plan.routes().keys().copied().collect();
    Adapter::new(config, merged.into_iter().collect())
}

/// Plans and executes a merge in one step.
pub fn merge(task: &Adapter, backdoors: &[&Adapter], recipe: &Recipe) -> Result<(Adapter, MergePlan)> {
    let plan = plan_merge(task, backdoors, recipe)?;
    let mut sources = vec![task];
    sources.extend_from_slice(backdoors);
    let out = execute_merge(&plan, &sources)?;
    Ok((out, plan))
}

/// Dense `scale * up * down` in f64, by explicit loops.
fn dense_f64(pair: &LoraPair, weight: f64, acc: &mut [f64]) {
    let (d_out, d_in, rank) = (pair.d_out(), pair.d_in(), pair.rank());
    let s = weight * pair.alpha() / rank as f64;
    let up = pair.up();
    let down = pair.down();
    for i in 0..d_out {
        let row = &mut acc[i * d_in..(i + 1) * d_in];
        for k in 0..rank {
            let a = s * up[[i, k]] as f64;
            if a == 0.0 {
                continue;
            }
            for (j, cell) in row.iter_mut().enumerate() {
                *cell += a * down[[k, j]] as f64;
            }
        }
    }
}

/// Largest absolute deviation, over all planned slots, between the merged
/// update and the weighted sum of the source updates. Both sides are formed
/// densely in f64, independently of the factored merge path.
pub fn verify_merge(output: &Adapter, sources: &[&Adapter], plan: &MergePlan) -> Result<f64> {
    if let Some(slot) = output.tensors().keys().find(|s| !plan.assignments.contains_key(s)) {
        return Err(Error::ShapeMismatch(format!(
            "output has layer {} module {} which the plan does not produce",
            slot.layer, slot.kind
        )));
    }
    let mut worst = 0.0f64;
    for (slot, contributions) in &plan.assignments {
        let merged = output.pair(slot.layer, slot.kind).ok_or(Error::MissingTensor {
            layer: slot.layer,
            kind: slot.kind,
            detail: " (in merged output)".into(),
        })?;
        let (d_out, d_in) = (merged.d_out(), merged.d_in());
        let mut expected = vec![0.0f64; d_out * d_in];
        for c in contributions {
            let src = sources
                .get(c.source)
                .and_then(|a| a.pair(slot.layer, slot.kind))
                .ok_or(Error::MissingTensor {
                    layer: slot.layer,
                    kind: slot.kind,
                    detail: format!(" (source {})", c.source),
                })?;
            if (src.d_out(), src.d_in()) != (d_out, d_in) {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} module {}: merged is {:?}, source {} is {:?}",
                    slot.layer,
                    slot.kind,
                    (d_out, d_in),
                    c.source,
                    (src.d_out(), src.d_in())
                )));
            }
            dense_f64(src, c.weight as f64, &mut expected);
        }
        let mut actual = vec![0.0f64; d_out * d_in];
        dense_f64(merged, 1.0, &mut actual);
        let dev = actual
            .iter()
            .zip(&expected)
            .map(|(a, e)| (a - e).abs())
            .fold(0.0, f64::max);
        if dev.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(dev);
    }
    Ok(worst)
}
