use std::fmt::Write as _;
use std::path::Path;

use adapter_forge_core::audit::histograms_by_base_model;
use adapter_forge_core::{build_histogram, load_manifest, ConfigHistogram, ConfigSignature, ManifestEntry};
use anyhow::Result;
use serde::Serialize;

use crate::report::{kv, Report};
use crate::settings::Settings;

#[derive(Debug, Serialize)]
pub struct SignatureRow {
    pub signature: ConfigSignature,
    pub count: u64,
    pub percent_of_lora: f64,
    pub flagged: bool,
}

#[derive(Debug, Serialize)]
pub struct HistogramReport {
    pub base_model_id: Option<String>,
    pub total_adapters: u64,
    pub lora_count: u64,
    pub lora_percentage: f64,
    pub signatures: Vec<SignatureRow>,
}

#[derive(Debug, Serialize)]
pub struct StatsReport {
    pub manifest: String,
    pub threshold: u64,
    pub histograms: Vec<HistogramReport>,
}

fn describe(base: Option<String>, hist: &ConfigHistogram, threshold: u64) -> HistogramReport {
    let signatures = hist
        .ranked()
        .into_iter()
        .map(|(signature, count)| SignatureRow {
            percent_of_lora: if hist.lora_count == 0 {
                0.0
            } else {
                100.0 * count as f64 / hist.lora_count as f64
            },
            flagged: count <= threshold,
            signature,
            count,
        })
        .collect();
    HistogramReport {
        base_model_id: base,
        total_adapters: hist.total_adapters,
        lora_count: hist.lora_count,
        lora_percentage: hist.lora_percentage(),
        signatures,
    }
}

impl Report for StatsReport {
    fn human(&self, out: &mut String) -> std::fmt::Result {
        kv(out, "manifest", &self.manifest)?;
        kv(out, "flag threshold", self.threshold)?;
        for h in &self.histograms {
            writeln!(out)?;
            kv(out, "base model", h.base_model_id.as_deref().unwrap_or("(all)"))?;
            kv(out, "adapters", h.total_adapters)?;
            kv(out, "lora", format!("{} ({:.2}%)", h.lora_count, h.lora_percentage))?;
            writeln!(out, "{:<24} {:>8} {:>8}", "signature", "count", "% lora")?;
            for row in &h.signatures {
                writeln!(
                    out,
                    "{:<24} {:>8} {:>7.2}%{}",
                    row.signature.as_str(),
                    row.count,
                    row.percent_of_lora,
                    if row.flagged { "  rare" } else { "" }
                )?;
            }
        }
        Ok(())
    }
}

pub fn filter_base<'a>(entries: &'a [ManifestEntry], base: Option<&str>) -> Vec<&'a ManifestEntry> {
    entries
        .iter()
        .filter(|e| base.is_none_or(|b| e.base_model_id == b))
        .collect()
}

pub fn run(manifest: &Path, base_model: Option<&str>, per_base: bool, settings: &Settings) -> Result<StatsReport> {
    let entries = load_manifest(manifest, &settings.schema)?;
    let selected = filter_base(&entries, base_model);
    let histograms = if per_base {
        histograms_by_base_model(selected)?
            .into_iter()
            .map(|(base, h)| describe(Some(base), &h, settings.threshold))
            .collect()
    } else {
        let hist = build_histogram(selected)?;
        vec![describe(base_model.map(str::to_string), &hist, settings.threshold)]
    };
    Ok(StatsReport {
        manifest: manifest.display().to_string(),
        threshold: settings.threshold,
        histograms,
    })
}
