//! Layered settings: command-line flags override environment variables,
//! which override the config file.
//!
//! The config file is TOML. It is read from `--config` / `ADAPTER_FORGE_CONFIG`
//! when given, otherwise from `./adapter-forge.toml`, otherwise from
//! `$XDG_CONFIG_HOME/adapter-forge/config.toml` (falling back to
//! `~/.config/adapter-forge/config.toml`). A missing default file is fine; a
//! missing explicit one is an error.

use std::path::{Path, PathBuf};

use adapter_forge_core::{ModelFamily, NamingSchema, DEFAULT_FLAG_THRESHOLD};
use anyhow::{Context, Result};
use serde::Deserialize;

pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub schema: Option<PathBuf>,
    pub threshold: Option<u64>,
    pub tolerance: Option<f64>,
    pub family: Option<String>,
}

#[derive(Debug)]
pub struct Settings {
    pub schema: NamingSchema,
    pub threshold: u64,
    pub tolerance: f64,
    pub family: Option<ModelFamily>,
}

fn default_locations() -> Vec<PathBuf> {
    let mut out = vec![PathBuf::from("adapter-forge.toml")];
    let xdg = std::env::var_os("XDG_CONFIG_HOME")
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("HOME").map(|h| Path::new(&h).join(".config")));
    if let Some(dir) = xdg {
        out.push(dir.join("adapter-forge").join("config.toml"));
    }
    out
}

/// Loads the config file and remembers which directory it came from, so
/// relative paths inside it resolve against that directory.
pub fn load_file_config(explicit: Option<&Path>) -> Result<(FileConfig, Option<PathBuf>)> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => match default_locations().into_iter().find(|p| p.is_file()) {
            Some(p) => p,
            None => return Ok((FileConfig::default(), None)),
        },
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let config: FileConfig =
        toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))?;
    Ok((config, path.parent().map(Path::to_path_buf)))
}

pub struct Overrides<'a> {
    pub config: Option<&'a Path>,
    /// Already merged with `ADAPTER_FORGE_SCHEMA` by clap.
    pub schema: Option<&'a Path>,
    pub threshold: Option<u64>,
    pub tolerance: Option<f64>,
    pub family: Option<ModelFamily>,
}

pub fn resolve(over: Overrides<'_>) -> Result<Settings> {
    let (file, base) = load_file_config(over.config)?;
    let schema_path = over.schema.map(Path::to_path_buf).or_else(|| {
        file.schema.map(|p| match &base {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p,
        })
    });
    let schema = match schema_path {
        Some(path) => {
            let bytes = std::fs::read(&path)
                .map_err(|e| anyhow::Error::new(e).context(format!("reading schema {}", path.display())))?;
            NamingSchema::from_json(&bytes)?
        }
        None => NamingSchema::default(),
    };
    let family = match over.family {
        Some(f) => Some(f),
        None => file.family.as_deref().map(str::parse).transpose()?,
    };
    Ok(Settings {
        schema,
        threshold: over.threshold.or(file.threshold).unwrap_or(DEFAULT_FLAG_THRESHOLD),
        tolerance: over.tolerance.or(file.tolerance).unwrap_or(DEFAULT_TOLERANCE),
        family,
    })
}
