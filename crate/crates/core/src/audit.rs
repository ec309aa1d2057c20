//! Target-module configuration statistics over adapter manifests, and the
//! rare-configuration flagging defense built on them.
//!
//! A manifest is either a newline-delimited JSON file (one record per line
//! with `adapter_id`, `peft_type`, `target_modules` and optionally
//! `base_model_id` / `source`) or a directory tree scanned for
//! `adapter_config.json` files.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::merge::{predict_signature, RecipeKind};
use crate::model::{Adapter, ConfigSignature, ModuleSet, NamingSchema};
use crate::tensor_io::CONFIG_FILE;

/// Signatures seen this many times or fewer are flagged by default.
pub const DEFAULT_FLAG_THRESHOLD: u64 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub adapter_id: String,
    pub peft_type: String,
    pub signature: ConfigSignature,
    pub base_model_id: String,
    pub source: String,
}

impl ManifestEntry {
    pub fn is_lora(&self) -> bool {
        self.peft_type.eq_ignore_ascii_case("lora")
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRecord {
    adapter_id: String,
    #[serde(default)]
    peft_type: Option<String>,
    #[serde(default)]
    target_modules: Option<Value>,
    #[serde(default)]
    base_model_id: Option<String>,
    #[serde(default)]
    source: Option<String>,
}

fn module_names(value: Option<&Value>) -> std::result::Result<Vec<&str>, String> {
    match value {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::String(s)) => Ok(vec![s.as_str()]),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().ok_or_else(|| "target_modules entries must be strings".to_string()))
            .collect(),
        Some(_) => Err("target_modules must be a string or an array".to_string()),
    }
}

/// Reads newline-delimited manifest records. Blank lines are skipped.
pub fn read_manifest_records<R: BufRead>(reader: R, schema: &NamingSchema) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::MalformedManifest {
            line: line_no,
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::MalformedManifest { line: line_no, detail };
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let names = module_names(record.target_modules.as_ref()).map_err(bad)?;
        entries.push(ManifestEntry {
            adapter_id: record.adapter_id,
            peft_type: record.peft_type.unwrap_or_else(|| "LORA".to_string()),
            signature: ConfigSignature::from_names(names, schema),
            base_model_id: record.base_model_id.unwrap_or_default(),
            source: record.source.unwrap_or_default(),
        });
    }
    Ok(entries)
}

/// Collects one entry per `adapter_config.json` under `root`. The adapter id
/// is the config's directory relative to `root`.
pub fn scan_adapter_tree(root: &Path, schema: &NamingSchema) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let walker = WalkDir::new(root).sort_by_file_name();
    for item in walker {
        let item = item.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !item.file_type().is_file() || item.file_name() != CONFIG_FILE {
            continue;
        }
        let path = item.path();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let doc: Value = serde_json::from_slice(&bytes)
            .map_err(|e| Error::MalformedConfig(format!("{}: {e}", path.display())))?;
        let names = module_names(doc.get("target_modules"))
            .map_err(|e| Error::MalformedConfig(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(root);
        let rel = dir.strip_prefix(root).unwrap_or(dir);
        let adapter_id = if rel.as_os_str().is_empty() {
            ".".to_string()
        } else {
            rel.to_string_lossy().replace('\\', "/")
        };
        let text = |key: &str| doc.get(key).and_then(Value::as_str).map(str::to_string);
        entries.push(ManifestEntry {
            adapter_id,
            peft_type: text("peft_type").unwrap_or_else(|| "LORA".to_string()),
            signature: ConfigSignature::from_names(names, schema),
            base_model_id: text("base_model_name_or_path").unwrap_or_default(),
            source: path.display().to_string(),
        });
    }
    Ok(entries)
}

/// Loads a manifest from a record file or an adapter directory tree.
pub fn load_manifest(path: &Path, schema: &NamingSchema) -> Result<Vec<ManifestEntry>> {
    if path.is_dir() {
        return scan_adapter_tree(path, schema);
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest_records(std::io::BufReader::new(file), schema)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ConfigHistogram {
    pub total_adapters: u64,
    pub lora_count: u64,
    pub by_signature: BTreeMap<ConfigSignature, u64>,
}

impl ConfigHistogram {
    pub fn count(&self, signature: &ConfigSignature) -> u64 {
        self.by_signature.get(signature).copied().unwrap_or(0)
    }

    /// Share of LoRA adapters among all adapters, in percent.
    pub fn lora_percentage(&self) -> f64 {
        if self.total_adapters == 0 {
            0.0
        } else {
            100.0 * self.lora_count as f64 / self.total_adapters as f64
        }
    }

    /// Signatures by descending count, ties broken by signature.
    pub fn ranked(&self) -> Vec<(ConfigSignature, u64)> {
        let mut v: Vec<_> = self.by_signature.iter().map(|(s, c)| (s.clone(), *c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }
}

/// Accumulates entries into a histogram. Builders filled independently
/// (e.g. one per producer thread) combine with [`HistogramBuilder::merge`].
#[derive(Debug, Default)]
pub struct HistogramBuilder {
    ids: HashSet<String>,
    hist: ConfigHistogram,
}

impl HistogramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, entry: &ManifestEntry) -> Result<()> {
        if !self.ids.insert(entry.adapter_id.clone()) {
            return Err(Error::DuplicateAdapterId(entry.adapter_id.clone()));
        }
        self.hist.total_adapters += 1;
        if entry.is_lora() {
            self.hist.lora_count += 1;
            *self.hist.by_signature.entry(entry.signature.clone()).or_default() += 1;
        }
        Ok(())
    }

    pub fn merge(mut self, other: HistogramBuilder) -> Result<Self> {
        for id in other.ids {
            if !self.ids.insert(id.clone()) {
                return Err(Error::DuplicateAdapterId(id));
            }
        }
        self.hist.total_adapters += other.hist.total_adapters;
        self.hist.lora_count += other.hist.lora_count;
        for (sig, n) in other.hist.by_signature {
            *self.hist.by_signature.entry(sig).or_default() += n;
        }
        Ok(self)
    }

    pub fn finish(self) -> ConfigHistogram {
        self.hist
    }
}

pub fn build_histogram<'a>(entries: impl IntoIterator<Item = &'a ManifestEntry>) -> Result<ConfigHistogram> {
    let mut builder = HistogramBuilder::new();
    for entry in entries {
        builder.add(entry)?;
    }
    Ok(builder.finish())
}

/// One histogram per base model id. Adapter ids must still be unique across
/// the whole manifest.
pub fn histograms_by_base_model<'a>(
    entries: impl IntoIterator<Item = &'a ManifestEntry>,
) -> Result<BTreeMap<String, ConfigHistogram>> {
    let mut seen = HashSet::new();
    let mut builders: BTreeMap<String, HistogramBuilder> = BTreeMap::new();
    for entry in entries {
        if !seen.insert(entry.adapter_id.as_str()) {
            return Err(Error::DuplicateAdapterId(entry.adapter_id.clone()));
        }
        builders.entry(entry.base_model_id.clone()).or_default().add(entry)?;
    }
    Ok(builders.into_iter().map(|(k, b)| (k, b.finish())).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlagReport {
    pub signature: ConfigSignature,
    pub observed_count: u64,
    pub threshold: u64,
    pub flagged: bool,
    pub rationale: String,
}

/// Flags a configuration when at most `threshold` LoRA adapters in the
/// histogram use it. Unseen signatures count as zero.
pub fn flag_config(signature: &ConfigSignature, hist: &ConfigHistogram, threshold: u64) -> FlagReport {
    let observed = hist.count(signature);
    let flagged = observed <= threshold;
    let rationale = if flagged {
        format!(
            "{signature} is used by {observed} of {} LoRA adapters, at or below the threshold of {threshold}; rare configuration, reject",
            hist.lora_count
        )
    } else {
        format!(
            "{signature} is used by {observed} of {} LoRA adapters, above the threshold of {threshold}",
            hist.lora_count
        )
    };
    FlagReport {
        signature: signature.clone(),
        observed_count: observed,
        threshold,
        flagged,
        rationale,
    }
}

/// Predicts the signature a recipe would produce for a task with these
/// modules (no tensor work) and runs the flagging defense on it.
pub fn evasion_check_modules(
    task: &ModuleSet,
    recipe: RecipeKind,
    hist: &ConfigHistogram,
    threshold: u64,
) -> Result<(ConfigSignature, FlagReport)> {
    let predicted = predict_signature(task, recipe)?;
    let report = flag_config(&predicted, hist, threshold);
    Ok((predicted, report))
}

pub fn evasion_check(
    task: &Adapter,
    recipe: RecipeKind,
    hist: &ConfigHistogram,
    threshold: u64,
) -> Result<(ConfigSignature, FlagReport)> {
    evasion_check_modules(task.modules(), recipe, hist, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(id: usize, peft: &str, sig: &str) -> ManifestEntry {
        ManifestEntry {
            adapter_id: format!("a{id}"),
            peft_type: peft.to_string(),
            signature: ConfigSignature::from_names(
                sig.split(',').filter(|s| !s.is_empty()),
                &NamingSchema::default(),
            ),
            base_model_id: String::new(),
            source: String::new(),
        }
    }

    fn sig(s: &str) -> ConfigSignature {
        s.parse().unwrap()
    }

    #[test]
    fn empty_histogram() {
        let h = build_histogram(&[]).unwrap();
        assert_eq!(h, ConfigHistogram::default());
        assert_eq!(h.lora_percentage(), 0.0);
    }

    #[test]
    fn non_lora_counts_only_in_total() {
        let entries = vec![
            entry(0, "LORA", "q_proj,v_proj"),
            entry(1, "IA3", "k_proj"),
            entry(2, "lora", "v_proj,q_proj"),
        ];
        let h = build_histogram(&entries).unwrap();
        assert_eq!(h.total_adapters, 3);
        assert_eq!(h.lora_count, 2);
        assert_eq!(h.count(&sig("QV")), 2);
        assert_eq!(h.by_signature.values().sum::<u64>(), h.lora_count);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let entries = vec![entry(0, "LORA", "q_proj"), entry(0, "LORA", "v_proj")];
        assert!(matches!(build_histogram(&entries), Err(Error::DuplicateAdapterId(_))));
        let mut a = HistogramBuilder::new();
        a.add(&entries[0]).unwrap();
        let mut b = HistogramBuilder::new();
        b.add(&entries[1]).unwrap();
        assert!(matches!(a.merge(b), Err(Error::DuplicateAdapterId(_))));
    }

    #[test]
    fn flag_boundaries() {
        let mut h = ConfigHistogram::default();
        h.by_signature.insert(sig("QKVOFF"), 500);
        h.by_signature.insert(sig("FF"), 10);
        h.lora_count = 510;
        h.total_adapters = 510;
        assert!(!flag_config(&sig("QKVOFF"), &h, 10).flagged);
        assert!(flag_config(&sig("FF"), &h, 10).flagged);
        assert!(!flag_config(&sig("FF"), &h, 9).flagged);
        let r = flag_config(&sig("QVFF"), &h, 0);
        assert!(r.flagged);
        assert_eq!(r.observed_count, 0);
    }

    #[test]
    fn records_parse() {
        let text = r#"{"adapter_id":"x","peft_type":"LORA","target_modules":["q_proj","v_proj"],"base_model_id":"m"}

{"adapter_id":"y","peft_type":"PREFIX_TUNING"}
{"adapter_id":"z","target_modules":"q_proj"}
"#;
        let entries = read_manifest_records(text.as_bytes(), &NamingSchema::default()).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].signature.as_str(), "QV");
        assert_eq!(entries[0].base_model_id, "m");
        assert!(!entries[1].is_lora());
        assert_eq!(entries[2].signature.as_str(), "Q");

        let err = read_manifest_records("{}\n".as_bytes(), &NamingSchema::default()).unwrap_err();
        assert!(matches!(err, Error::MalformedManifest { line: 1, .. }));
        let err = read_manifest_records(
            "\n{\"adapter_id\":\"a\",\"target_modules\":3}".as_bytes(),
            &NamingSchema::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MalformedManifest { line: 2, .. }));
    }

    #[test]
    fn per_base_model_histograms() {
        let mut a = entry(0, "LORA", "q_proj,v_proj");
        a.base_model_id = "llama".into();
        let mut b = entry(1, "LORA", "q_proj,v_proj");
        b.base_model_id = "mistral".into();
        let hs = histograms_by_base_model(&[a, b]).unwrap();
        assert_eq!(hs.len(), 2);
        assert_eq!(hs["llama"].lora_count, 1);
    }

    proptest! {
        #[test]
        fn histogram_is_permutation_invariant(
            kinds in prop::collection::vec((0usize..4, any::<bool>()), 0..60),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let sigs = ["q_proj,v_proj", "q_proj,k_proj,v_proj,o_proj", "gate_proj,up_proj,down_proj", "q_proj"];
            let entries: Vec<ManifestEntry> = kinds
                .iter()
                .enumerate()
                .map(|(i, (s, lora))| entry(i, if *lora { "LORA" } else { "IA3" }, sigs[*s]))
                .collect();
            let mut shuffled = entries.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = build_histogram(&entries).unwrap();
            let b = build_histogram(&shuffled).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.lora_count <= a.total_adapters);
            prop_assert_eq!(a.by_signature.values().sum::<u64>(), a.lora_count);

            // split across two producers
            let (left, right) = entries.split_at(entries.len() / 2);
            let mut l = HistogramBuilder::new();
            left.iter().for_each(|e| l.add(e).unwrap());
            let mut r = HistogramBuilder::new();
            right.iter().for_each(|e| r.add(e).unwrap());
            prop_assert_eq!(l.merge(r).unwrap().finish(), a);
        }
    }
}
