use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use adapter_forge_core::{load_adapter, Adapter, ConfigSignature, Error, LoraPair, Slot};
use anyhow::Result;
use serde::Serialize;

use crate::report::{kv, num, Report};
use crate::settings::Settings;

#[derive(Debug, Serialize)]
pub struct SlotDiff {
    pub layer: usize,
    pub module: String,
    pub in_a: bool,
    pub in_b: bool,
    /// Max |dW_a - dW_b|; an absent slot counts as a zero update.
    pub max_abs: f64,
    pub frobenius: f64,
}

#[derive(Debug, Serialize)]
pub struct DiffReport {
    pub a: String,
    pub b: String,
    pub signature_a: ConfigSignature,
    pub signature_b: ConfigSignature,
    pub only_in_a: usize,
    pub only_in_b: usize,
    pub max_abs: f64,
    pub slots: Vec<SlotDiff>,
}

impl Report for DiffReport {
    fn human(&self, out: &mut String) -> std::fmt::Result {
        kv(out, "a", format!("{} ({})", self.a, self.signature_a))?;
        kv(out, "b", format!("{} ({})", self.b, self.signature_b))?;
        kv(out, "slots only in a", self.only_in_a)?;
        kv(out, "slots only in b", self.only_in_b)?;
        kv(out, "max abs difference", num(self.max_abs))?;
        writeln!(out, "{:>5} {:<6} {:<8} {:>12} {:>12}", "layer", "module", "present", "max abs", "frobenius")?;
        for s in &self.slots {
            let present = match (s.in_a, s.in_b) {
                (true, true) => "both",
                (true, false) => "a only",
                _ => "b only",
            };
            writeln!(
                out,
                "{:>5} {:<6} {:<8} {:>12} {:>12}",
                s.layer,
                s.module,
                present,
                num(s.max_abs),
                num(s.frobenius)
            )?;
        }
        Ok(())
    }
}

fn norms(a: Option<&LoraPair>, b: Option<&LoraPair>, slot: Slot) -> Result<(f64, f64), Error> {
    let da = a.map(LoraPair::delta);
    let db = b.map(LoraPair::delta);
    if let (Some(x), Some(y)) = (&da, &db) {
        if x.dim() != y.dim() {
            return Err(Error::ShapeMismatch(format!(
                "layer {} {}: {:?} vs {:?}",
                slot.layer,
                slot.kind,
                x.dim(),
                y.dim()
            )));
        }
    }
    let values: Vec<f64> = match (&da, &db) {
        (Some(x), Some(y)) => x.iter().zip(y.iter()).map(|(p, q)| *p as f64 - *q as f64).collect(),
        (Some(x), None) | (None, Some(x)) => x.iter().map(|p| *p as f64).collect(),
        (None, None) => Vec::new(),
    };
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let frobenius = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((max_abs, frobenius))
}

pub fn diff(a: &Adapter, b: &Adapter) -> Result<Vec<SlotDiff>, Error> {
    let slots: BTreeSet<Slot> = a.tensors().keys().chain(b.tensors().keys()).copied().collect();
    slots
        .into_iter()
        .map(|slot| {
            let pa = a.pair(slot.layer, slot.kind);
            let pb = b.pair(slot.layer, slot.kind);
            let (max_abs, frobenius) = norms(pa, pb, slot)?;
            Ok(SlotDiff {
                layer: slot.layer,
                module: slot.kind.label().to_string(),
                in_a: pa.is_some(),
                in_b: pb.is_some(),
                max_abs,
                frobenius,
            })
        })
        .collect()
}

pub fn run(a_path: &Path, b_path: &Path, settings: &Settings) -> Result<DiffReport> {
    let a = load_adapter(a_path, &settings.schema)?;
    let b = load_adapter(b_path, &settings.schema)?;
    let slots = diff(&a, &b)?;
    Ok(DiffReport {
        a: a_path.display().to_string(),
        b: b_path.display().to_string(),
        signature_a: a.signature(),
        signature_b: b.signature(),
        only_in_a: slots.iter().filter(|s| s.in_a && !s.in_b).count(),
        only_in_b: slots.iter().filter(|s| !s.in_a && s.in_b).count(),
        max_abs: slots.iter().fold(0.0, |m, s| m.max(s.max_abs)),
        slots,
    })
}
