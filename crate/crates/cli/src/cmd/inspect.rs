use std::fmt::Write as _;
use std::path::Path;

use adapter_forge_core::{load_adapter, Adapter, ConfigSignature};
use anyhow::Result;
use serde::Serialize;

use crate::report::{kv, num, shape, Report};
use crate::settings::Settings;

#[derive(Debug, Serialize)]
pub struct ModuleSummary {
    pub module: String,
    pub d_out: usize,
    pub d_in: usize,
    pub ranks: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct SlotSummary {
    pub layer: usize,
    pub module: String,
    pub rank: usize,
    pub alpha: f64,
    pub dtype: String,
}

#[derive(Debug, Serialize)]
pub struct InspectReport {
    pub path: String,
    pub signature: ConfigSignature,
    pub base_model_id: String,
    pub peft_type: String,
    pub layers: usize,
    pub rank_default: u32,
    pub alpha_default: f64,
    pub modules: Vec<ModuleSummary>,
    pub slots: Vec<SlotSummary>,
}

impl InspectReport {
    pub fn build(path: &Path, adapter: &Adapter) -> Self {
        let config = adapter.config();
        let modules = adapter
            .modules()
            .iter()
            .map(|&kind| {
                let (d_out, d_in) = adapter.shape_of(kind).expect("declared modules have tensors");
                let mut ranks: Vec<usize> = adapter
                    .tensors()
                    .iter()
                    .filter(|(s, _)| s.kind == kind)
                    .map(|(_, p)| p.rank())
                    .collect();
                ranks.sort_unstable();
                ranks.dedup();
                ModuleSummary {
                    module: kind.label().to_string(),
                    d_out,
                    d_in,
                    ranks,
                }
            })
            .collect();
        let slots = adapter
            .tensors()
            .iter()
            .map(|(slot, pair)| SlotSummary {
                layer: slot.layer,
                module: slot.kind.label().to_string(),
                rank: pair.rank(),
                alpha: pair.alpha(),
                dtype: pair.dtype().as_str().to_string(),
            })
            .collect();
        InspectReport {
            path: path.display().to_string(),
            signature: adapter.signature(),
            base_model_id: config.base_model_id.clone(),
            peft_type: config.peft_type.clone(),
            layers: adapter.layer_count(),
            rank_default: config.rank_default,
            alpha_default: config.alpha_default,
            modules,
            slots,
        }
    }
}

impl Report for InspectReport {
    fn human(&self, out: &mut String) -> std::fmt::Result {
        kv(out, "path", &self.path)?;
        kv(out, "signature", &self.signature)?;
        kv(out, "base model", &self.base_model_id)?;
        kv(out, "peft type", &self.peft_type)?;
        kv(out, "layers", self.layers)?;
        kv(out, "default rank", self.rank_default)?;
        kv(out, "default alpha", num(self.alpha_default))?;
        writeln!(out, "modules:")?;
        for m in &self.modules {
            let ranks: Vec<String> = m.ranks.iter().map(ToString::to_string).collect();
            writeln!(
                out,
                "  {:<5} {:>12}  rank {}",
                m.module,
                shape((m.d_out, m.d_in)),
                ranks.join("/")
            )?;
        }
        writeln!(out, "slots:")?;
        for s in &self.slots {
            writeln!(
                out,
                "  layer {:>3} {:<5} rank {:>4}  alpha {:>8}  {}",
                s.layer,
                s.module,
                s.rank,
                num(s.alpha),
                s.dtype
            )?;
        }
        Ok(())
    }
}

pub fn run(path: &Path, settings: &Settings) -> Result<InspectReport> {
    let adapter = load_adapter(path, &settings.schema)?;
    Ok(InspectReport::build(path, &adapter))
}
