use std::fmt::Write as _;
use std::path::Path;

use adapter_forge_core::audit::evasion_check_modules;
use adapter_forge_core::{
    build_histogram, flag_config, load_adapter, load_manifest, ConfigSignature, FlagReport, RecipeKind,
};
use anyhow::{anyhow, Result};
use serde::Serialize;

use super::stats::filter_base;
use crate::report::{kv, Report};
use crate::settings::Settings;

#[derive(Debug, Serialize)]
pub struct AuditReport {
    pub manifest: String,
    pub target: String,
    pub target_signature: ConfigSignature,
    pub base_model_id: Option<String>,
    pub lora_count: u64,
    /// Recipe whose output signature was audited instead of the target's own.
    pub recipe: Option<RecipeKind>,
    pub report: FlagReport,
}

impl AuditReport {
    pub fn flagged(&self) -> bool {
        self.report.flagged
    }
}

impl Report for AuditReport {
    fn human(&self, out: &mut String) -> std::fmt::Result {
        kv(out, "manifest", &self.manifest)?;
        kv(out, "target", &self.target)?;
        kv(out, "target signature", &self.target_signature)?;
        if let Some(base) = &self.base_model_id {
            kv(out, "base model", base)?;
        }
        if let Some(recipe) = self.recipe {
            kv(out, "recipe", recipe)?;
            kv(out, "predicted signature", &self.report.signature)?;
        }
        kv(out, "observed", format!("{} of {} LoRA adapters", self.report.observed_count, self.lora_count))?;
        kv(out, "threshold", self.report.threshold)?;
        kv(out, "verdict", if self.report.flagged { "FLAGGED" } else { "ok" })?;
        writeln!(out, "{}", self.report.rationale)
    }
}

pub fn run(
    manifest: &Path,
    target: &str,
    recipe: Option<RecipeKind>,
    base_model: Option<&str>,
    settings: &Settings,
) -> Result<AuditReport> {
    // a target that names an existing path is an adapter, anything else a signature
    let target_path = Path::new(target);
    let signature = if target_path.exists() {
        load_adapter(target_path, &settings.schema)?.signature()
    } else {
        target.parse::<ConfigSignature>()?
    };
    let base = base_model.map(str::to_string);

    let entries = load_manifest(manifest, &settings.schema)?;
    let hist = build_histogram(filter_base(&entries, base.as_deref()))?;
    let report = match recipe {
        Some(kind) => {
            let modules = signature
                .modules()
                .ok_or_else(|| anyhow!("signature {signature} has non-standard modules; cannot predict a merge"))?;
            evasion_check_modules(&modules, kind, &hist, settings.threshold)?.1
        }
        None => flag_config(&signature, &hist, settings.threshold),
    };
    Ok(AuditReport {
        manifest: manifest.display().to_string(),
        target: target.to_string(),
        target_signature: signature,
        base_model_id: base,
        lora_count: hist.lora_count,
        recipe,
        report,
    })
}
