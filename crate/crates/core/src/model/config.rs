use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{Map, Value};

use super::{ModuleKind, ModuleSet, NamingSchema};
use crate::error::{Error, Result};

/// Adapter metadata as stored in `adapter_config.json`.
///
/// `rank_default` and `alpha_default` are the config-level `r` and
/// `lora_alpha`. Per-module overrides live in `rank_pattern` and
/// `alpha_pattern`, keyed by module path suffix as PEFT does.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub base_model_id: String,
    pub rank_default: u32,
    pub alpha_default: f64,
    pub target_modules: ModuleSet,
    pub peft_type: String,
    pub dropout: f64,
    pub rank_pattern: BTreeMap<String, u32>,
    pub alpha_pattern: BTreeMap<String, f64>,
}

impl AdapterConfig {
    /// A LoRA config with the usual r=16, alpha=32 defaults.
    pub fn lora(base_model_id: impl Into<String>, target_modules: ModuleSet) -> Self {
        Self {
            base_model_id: base_model_id.into(),
            rank_default: 16,
            alpha_default: 32.0,
            target_modules,
            peft_type: "LORA".to_string(),
            dropout: 0.05,
            rank_pattern: BTreeMap::new(),
            alpha_pattern: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_modules.is_empty() {
            return Err(Error::MalformedConfig("target_modules is empty".into()));
        }
        if self.rank_default == 0 {
            return Err(Error::MalformedConfig("r must be at least 1".into()));
        }
        if !(self.alpha_default.is_finite() && self.alpha_default > 0.0) {
            return Err(Error::MalformedConfig(format!(
                "lora_alpha must be positive, got {}",
                self.alpha_default
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::MalformedConfig(format!(
                "lora_dropout must be in [0, 1], got {}",
                self.dropout
            )));
        }
        if let Some((k, _)) = self.rank_pattern.iter().find(|(_, r)| **r == 0) {
            return Err(Error::MalformedConfig(format!("rank_pattern[{k}] is zero")));
        }
        if let Some((k, _)) = self
            .alpha_pattern
            .iter()
            .find(|(_, a)| !(a.is_finite() && **a > 0.0))
        {
            return Err(Error::MalformedConfig(format!("alpha_pattern[{k}] is not positive")));
        }
        Ok(())
    }

    /// Alpha for the module at `path`: the longest matching `alpha_pattern`
    /// key, else the default.
    pub fn alpha_for(&self, path: &str) -> f64 {
        longest_suffix_match(&self.alpha_pattern, path).unwrap_or(self.alpha_default)
    }

    pub fn rank_for(&self, path: &str) -> u32 {
        longest_suffix_match(&self.rank_pattern, path).unwrap_or(self.rank_default)
    }
}

fn longest_suffix_match<T: Copy>(pattern: &BTreeMap<String, T>, path: &str) -> Option<T> {
    pattern
        .iter()
        .filter(|(key, _)| {
            path == key.as_str()
                || (path.ends_with(key.as_str())
                    && path.as_bytes().get(path.len() - key.len() - 1) == Some(&b'.'))
        })
        .max_by_key(|(key, _)| key.len())
        .map(|(_, v)| *v)
}

fn field<'a>(obj: &'a Map<String, Value>, name: &'static str) -> Result<&'a Value> {
    match obj.get(name) {
        None | Some(Value::Null) => Err(Error::MissingField(name)),
        Some(v) => Ok(v),
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedConfig(msg.into())
}

/// Parses an `adapter_config.json` document.
///
/// Unknown keys are ignored. Target module names are resolved through
/// `schema`; a name it does not know is an error rather than being skipped.
pub fn parse_adapter_config(bytes: &[u8], schema: &NamingSchema) -> Result<AdapterConfig> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| malformed(e.to_string()))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| malformed("top level is not an object"))?;

    let rank_default = field(obj, "r")?
        .as_u64()
        .filter(|r| (1..=u32::MAX as u64).contains(r))
        .ok_or_else(|| malformed("`r` must be a positive integer"))? as u32;
    let alpha_default = field(obj, "lora_alpha")?
        .as_f64()
        .ok_or_else(|| malformed("`lora_alpha` must be a number"))?;

    let names: Vec<&str> = match field(obj, "target_modules")? {
        Value::String(s) => vec![s.as_str()],
        Value::Array(items) => items
            .iter()
            .map(|v| v.as_str().ok_or_else(|| malformed("target_modules entries must be strings")))
            .collect::<Result<_>>()?,
        _ => return Err(malformed("`target_modules` must be an array of strings")),
    };
    let mut target_modules = ModuleSet::new();
    for name in names {
        let kind = schema
            .kind_for_name(name)
            .ok_or_else(|| Error::UnknownModuleName(name.to_string()))?;
        target_modules.insert(kind);
    }

    let peft_type = match obj.get("peft_type") {
        None | Some(Value::Null) => "LORA".to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(malformed("`peft_type` must be a string")),
    };
    let dropout = match obj.get("lora_dropout") {
        None | Some(Value::Null) => 0.0,
        Some(v) => v
            .as_f64()
            .ok_or_else(|| malformed("`lora_dropout` must be a number"))?,
    };
    let base_model_id = match obj.get("base_model_name_or_path") {
        Some(Value::String(s)) => s.clone(),
        _ => String::new(),
    };

    let mut rank_pattern = BTreeMap::new();
    if let Some(Value::Object(map)) = obj.get("rank_pattern") {
        for (k, v) in map {
            let r = v
                .as_u64()
                .filter(|r| (1..=u32::MAX as u64).contains(r))
                .ok_or_else(|| malformed(format!("rank_pattern[{k}] must be a positive integer")))?;
            rank_pattern.insert(k.clone(), r as u32);
        }
    }
    let mut alpha_pattern = BTreeMap::new();
    if let Some(Value::Object(map)) = obj.get("alpha_pattern") {
        for (k, v) in map {
            let a = v
                .as_f64()
                .ok_or_else(|| malformed(format!("alpha_pattern[{k}] must be a number")))?;
            alpha_pattern.insert(k.clone(), a);
        }
    }

    let config = AdapterConfig {
        base_model_id,
        rank_default,
        alpha_default,
        target_modules,
        peft_type,
        dropout,
        rank_pattern,
        alpha_pattern,
    };
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct RenderedConfig<'a> {
    alpha_pattern: &'a BTreeMap<String, f64>,
    base_model_name_or_path: &'a str,
    lora_alpha: f64,
    lora_dropout: f64,
    peft_type: &'a str,
    r: u32,
    rank_pattern: &'a BTreeMap<String, u32>,
    target_modules: Vec<&'a str>,
    task_type: &'static str,
}

/// Renders a config as pretty-printed JSON with PEFT field names.
/// Target modules are listed in canonical module order.
pub fn render_adapter_config(config: &AdapterConfig, schema: &NamingSchema) -> Vec<u8> {
    let rendered = RenderedConfig {
        alpha_pattern: &config.alpha_pattern,
        base_model_name_or_path: &config.base_model_id,
        lora_alpha: config.alpha_default,
        lora_dropout: config.dropout,
        peft_type: &config.peft_type,
        r: config.rank_default,
        rank_pattern: &config.rank_pattern,
        target_modules: config
            .target_modules
            .iter()
            .map(|k: &ModuleKind| schema.name_of(*k))
            .collect(),
        task_type: "CAUSAL_LM",
    };
    let mut out = serde_json::to_vec_pretty(&rendered).expect("config serialises");
    out.push(b'\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use ModuleKind::*;

    fn parse(json: &str) -> Result<AdapterConfig> {
        parse_adapter_config(json.as_bytes(), &NamingSchema::default())
    }

    #[test]
    fn parses_typical_peft_config() {
        let c = parse(r#"{"r":16,"lora_alpha":32,"target_modules":["q_proj","v_proj"],"peft_type":"LORA"}"#)
            .unwrap();
        assert_eq!(c.rank_default, 16);
        assert_eq!(c.alpha_default, 32.0);
        assert_eq!(c.target_modules, [Q, V].into_iter().collect());
        assert_eq!(c.peft_type, "LORA");
    }

    #[test]
    fn ff_names_map_to_ff_kinds() {
        let c = parse(r#"{"r":8,"lora_alpha":16,"target_modules":["gate_proj","up_proj","down_proj"]}"#)
            .unwrap();
        assert_eq!(c.target_modules, [FfGate, FfUp, FfDown].into_iter().collect());
    }

    #[test]
    fn unknown_module_name_is_reported() {
        let err = parse(r#"{"r":8,"lora_alpha":16,"target_modules":["qq_proj"]}"#).unwrap_err();
        assert!(matches!(err, Error::UnknownModuleName(ref n) if n == "qq_proj"), "{err}");
    }

    #[test]
    fn missing_and_malformed_fields() {
        assert!(matches!(
            parse(r#"{"lora_alpha":16,"target_modules":["q_proj"]}"#),
            Err(Error::MissingField("r"))
        ));
        assert!(matches!(
            parse(r#"{"r":8,"target_modules":["q_proj"]}"#),
            Err(Error::MissingField("lora_alpha"))
        ));
        assert!(matches!(
            parse(r#"{"r":8,"lora_alpha":16}"#),
            Err(Error::MissingField("target_modules"))
        ));
        assert!(matches!(parse("{not json"), Err(Error::MalformedConfig(_))));
        assert!(matches!(
            parse(r#"{"r":0,"lora_alpha":16,"target_modules":["q_proj"]}"#),
            Err(Error::MalformedConfig(_))
        ));
        assert!(matches!(
            parse(r#"{"r":8,"lora_alpha":-1,"target_modules":["q_proj"]}"#),
            Err(Error::MalformedConfig(_))
        ));
        assert!(matches!(
            parse(r#"{"r":8,"lora_alpha":16,"target_modules":[]}"#),
            Err(Error::MalformedConfig(_))
        ));
    }

    #[test]
    fn pattern_lookup_prefers_longest_suffix() {
        let mut c = AdapterConfig::lora("m", [Q].into_iter().collect());
        c.alpha_pattern.insert("q_proj".into(), 8.0);
        c.alpha_pattern.insert("layers.1.self_attn.q_proj".into(), 4.0);
        assert_eq!(c.alpha_for("model.layers.1.self_attn.q_proj"), 4.0);
        assert_eq!(c.alpha_for("model.layers.11.self_attn.q_proj"), 8.0);
        assert_eq!(c.alpha_for("model.layers.2.self_attn.xq_proj"), 32.0);
        assert_eq!(c.rank_for("model.layers.2.self_attn.q_proj"), 16);
    }

    fn arb_config() -> impl Strategy<Value = AdapterConfig> {
        (
            "[a-z0-9/_-]{0,24}",
            1u32..512,
            (1u32..100_000).prop_map(|a| a as f64 / 8.0),
            prop::sample::subsequence(ModuleKind::ALL.to_vec(), 1..=7),
            prop::sample::select(vec!["LORA", "lora"]),
            (0u32..=100).prop_map(|d| d as f64 / 100.0),
            prop::collection::btree_map("[a-z_.0-9]{1,12}", 1u32..64, 0..3),
            prop::collection::btree_map("[a-z_.0-9]{1,12}", (1u32..64).prop_map(|a| a as f64 * 0.5), 0..3),
        )
            .prop_map(|(base, r, alpha, mods, peft, dropout, rp, ap)| AdapterConfig {
                base_model_id: base,
                rank_default: r,
                alpha_default: alpha,
                target_modules: mods.into_iter().collect(),
                peft_type: peft.to_string(),
                dropout,
                rank_pattern: rp,
                alpha_pattern: ap,
            })
    }

    proptest! {
        #[test]
        fn render_then_parse_is_identity(config in arb_config()) {
            let schema = NamingSchema::default();
            let bytes = render_adapter_config(&config, &schema);
            let back = parse_adapter_config(&bytes, &schema).unwrap();
            prop_assert_eq!(back, config);
        }
    }
}
