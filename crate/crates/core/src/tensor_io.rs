//! Reading and writing adapter weight files.
//!
//! The on-disk layout is the safetensors one: an 8-byte little-endian header
//! length, a JSON header mapping tensor names to `{dtype, shape,
//! data_offsets}`, then the raw little-endian tensor bytes. Offsets are
//! relative to the start of the payload and must tile it exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use half::{bf16, f16};
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{
    parse_adapter_config, render_adapter_config, Adapter, AdapterConfig, LoraPair, ModuleKind,
    NamingSchema, Slot,
};

pub use crate::model::{Half, TensorKey};

pub const CONFIG_FILE: &str = "adapter_config.json";
pub const WEIGHTS_FILE: &str = "adapter_model.safetensors";

const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

/// Floating-point storage types an adapter may use. Values are always
/// decoded to f32 for arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f32> {
        match self {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            DType::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            DType::BF16 => bytes
                .chunks_exact(2)
                .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        }
    }

    fn encode(self, values: impl Iterator<Item = f32>, out: &mut Vec<u8>) {
        match self {
            DType::F32 => values.for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F16 => values.for_each(|v| out.extend_from_slice(&f16::from_f32(v).to_le_bytes())),
            DType::BF16 => {
                values.for_each(|v| out.extend_from_slice(&bf16::from_f32(v).to_le_bytes()))
            }
        }
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(DType::F32),
            "F16" => Ok(DType::F16),
            "BF16" => Ok(DType::BF16),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Element size for every dtype the container format defines, so that files
/// holding non-float tensors still parse (and are rejected later, by name).
fn element_size(dtype: &str) -> Option<usize> {
    Some(match dtype {
        "BOOL" | "U8" | "I8" | "F8_E4M3" | "F8_E5M2" => 1,
        "I16" | "U16" | "F16" | "BF16" => 2,
        "I32" | "U32" | "F32" => 4,
        "I64" | "U64" | "F64" => 8,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorInfo {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data_offsets: (usize, usize),
}

/// A parsed weight file: header entries plus the raw payload.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TensorFile {
    pub header: BTreeMap<String, TensorInfo>,
    pub metadata: BTreeMap<String, String>,
    pub payload: Vec<u8>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptHeader(msg.into())
}

fn parse_entry(name: &str, value: &Value) -> Result<TensorInfo> {
    let obj = value
        .as_object()
        .ok_or_else(|| corrupt(format!("entry `{name}` is not an object")))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| corrupt(format!("entry `{name}` has no dtype")))?;
    let elem = element_size(dtype).ok_or_else(|| corrupt(format!("entry `{name}` has unknown dtype `{dtype}`")))?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| corrupt(format!("entry `{name}` has no shape")))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| corrupt(format!("entry `{name}` has a non-integer dimension")))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|o| o.len() == 2)
        .and_then(|o| Some((o[0].as_u64()? as usize, o[1].as_u64()? as usize)))
        .ok_or_else(|| corrupt(format!("entry `{name}` has malformed data_offsets")))?;
    if offsets.1 < offsets.0 {
        return Err(corrupt(format!("entry `{name}` has reversed data_offsets")));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(elem))
        .ok_or_else(|| corrupt(format!("entry `{name}` shape overflows")))?;
    if offsets.1 - offsets.0 != numel {
        return Err(corrupt(format!(
            "entry `{name}` spans {} bytes but shape {:?} of {dtype} needs {numel}",
            offsets.1 - offsets.0,
            shape
        )));
    }
    Ok(TensorInfo {
        dtype: dtype.to_string(),
        shape,
        data_offsets: offsets,
    })
}

impl TensorFile {
    /// Parses and validates a weight file. Any structural problem, including
    /// truncation, invalid JSON, or offsets that do not exactly tile the
    /// payload, is reported as [`Error::CorruptHeader`].
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(corrupt(format!("file is {} bytes, shorter than the length prefix", bytes.len())));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if n > MAX_HEADER_LEN || n > (bytes.len() - 8) as u64 {
            return Err(corrupt(format!("header length {n} exceeds file size {}", bytes.len())));
        }
        let n = n as usize;
        let text = std::str::from_utf8(&bytes[8..8 + n]).map_err(|e| corrupt(format!("header is not UTF-8: {e}")))?;
        let doc: Value = serde_json::from_str(text).map_err(|e| corrupt(format!("header is not JSON: {e}")))?;
        let obj = doc.as_object().ok_or_else(|| corrupt("header is not a JSON object"))?;

        let mut file = TensorFile {
            payload: bytes[8 + n..].to_vec(),
            ..Default::default()
        };
        for (name, value) in obj {
            if name == "__metadata__" {
                let meta = value.as_object().ok_or_else(|| corrupt("__metadata__ is not an object"))?;
                for (k, v) in meta {
                    let v = v.as_str().ok_or_else(|| corrupt(format!("metadata `{k}` is not a string")))?;
                    file.metadata.insert(k.clone(), v.to_string());
                }
                continue;
            }
            file.header.insert(name.clone(), parse_entry(name, value)?);
        }

        let mut spans: Vec<(usize, usize, &str)> = file
            .header
            .iter()
            .map(|(name, info)| (info.data_offsets.0, info.data_offsets.1, name.as_str()))
            .collect();
        spans.sort();
        let mut cursor = 0;
        for (begin, end, name) in spans {
            if begin != cursor {
                return Err(corrupt(format!(
                    "tensor `{name}` starts at {begin}, expected {cursor} (gap or overlap)"
                )));
            }
            cursor = end;
        }
        if cursor != file.payload.len() {
            return Err(corrupt(format!(
                "tensors cover {cursor} bytes but payload is {} bytes",
                file.payload.len()
            )));
        }
        Ok(file)
    }

    pub fn tensor_bytes(&self, name: &str) -> Option<&[u8]> {
        self.header
            .get(name)
            .map(|info| &self.payload[info.data_offsets.0..info.data_offsets.1])
    }

    /// Builds a file from named tensors, laying the payload out in
    /// lexicographic name order.
    pub fn from_tensors<I>(metadata: BTreeMap<String, String>, tensors: I) -> Self
    where
        I: IntoIterator<Item = (String, String, Vec<usize>, Vec<u8>)>,
    {
        let sorted: BTreeMap<String, (String, Vec<usize>, Vec<u8>)> = tensors
            .into_iter()
            .map(|(name, dtype, shape, data)| (name, (dtype, shape, data)))
            .collect();
        let mut file = TensorFile {
            metadata,
            ..Default::default()
        };
        for (name, (dtype, shape, data)) in sorted {
            let begin = file.payload.len();
            file.payload.extend_from_slice(&data);
            file.header.insert(
                name,
                TensorInfo {
                    dtype,
                    shape,
                    data_offsets: (begin, file.payload.len()),
                },
            );
        }
        file
    }

    /// Serialises with sorted header keys, compact JSON, and the header padded
    /// with spaces to a multiple of 8 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        #[serde(untagged)]
        enum Entry<'a> {
            Meta(&'a BTreeMap<String, String>),
            Tensor(&'a TensorInfo),
        }
        let mut entries: BTreeMap<&str, Entry<'_>> = BTreeMap::new();
        if !self.metadata.is_empty() {
            entries.insert("__metadata__", Entry::Meta(&self.metadata));
        }
        for (name, info) in &self.header {
            entries.insert(name, Entry::Tensor(info));
        }
        let mut header = serde_json::to_vec(&entries).expect("header serialises");
        while !header.len().is_multiple_of(8) {
            header.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header.len() + self.payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out
    }
}

struct RawHalf<'a> {
    name: &'a str,
    info: &'a TensorInfo,
    bytes: &'a [u8],
}

fn decode_matrix(half: &RawHalf<'_>) -> Result<(Array2<f32>, DType)> {
    let dtype: DType = half.info.dtype.parse()?;
    let [rows, cols] = half.info.shape[..] else {
        return Err(Error::ShapeMismatch(format!(
            "`{}` has shape {:?}, expected a matrix",
            half.name, half.info.shape
        )));
    };
    let values = dtype.decode(half.bytes);
    let matrix = Array2::from_shape_vec((rows, cols), values).expect("length checked by header validation");
    Ok((matrix, dtype))
}

/// Assembles an [`Adapter`] from a weight file and its config.
///
/// Every tensor must belong to a module the config declares, and every
/// declared module needs both factors in every layer. A rank recorded in the
/// config (default or pattern) must agree with the tensor shapes.
pub fn read_adapter(weights: &[u8], config: &AdapterConfig, schema: &NamingSchema) -> Result<Adapter> {
    let file = TensorFile::parse(weights)?;
    let mut halves: BTreeMap<Slot, (Option<RawHalf<'_>>, Option<RawHalf<'_>>)> = BTreeMap::new();
    for (name, info) in &file.header {
        let key = schema
            .parse_tensor_name(name)
            .filter(|k| config.target_modules.contains(&k.kind))
            .ok_or_else(|| Error::OrphanTensor(name.clone()))?;
        let raw = RawHalf {
            name,
            info,
            bytes: file.tensor_bytes(name).expect("name from header"),
        };
        let entry = halves.entry(Slot::new(key.layer, key.kind)).or_default();
        match key.half {
            Half::Down => entry.0 = Some(raw),
            Half::Up => entry.1 = Some(raw),
        }
    }

    let mut complete = Vec::with_capacity(halves.len());
    for (slot, (down, up)) in halves {
        match (down, up) {
            (Some(d), Some(u)) => complete.push((slot, d, u)),
            (d, _) => {
                let missing = if d.is_none() { "lora_A" } else { "lora_B" };
                return Err(Error::MissingTensor {
                    layer: slot.layer,
                    kind: slot.kind,
                    detail: format!(" ({missing} absent)"),
                });
            }
        }
    }

    let pairs: Vec<(Slot, LoraPair)> = complete
        .par_iter()
        .map(|(slot, down, up)| {
            let (down_m, down_t) = decode_matrix(down)?;
            let (up_m, up_t) = decode_matrix(up)?;
            if down_t != up_t {
                return Err(corrupt(format!(
                    "`{}` is {down_t} but `{}` is {up_t}",
                    down.name, up.name
                )));
            }
            let path = schema.pattern_key(slot.layer, slot.kind);
            let declared = config.rank_for(&path) as usize;
            if down_m.nrows() != declared {
                return Err(Error::ShapeMismatch(format!(
                    "`{}` has rank {} but the config declares {declared}",
                    down.name,
                    down_m.nrows()
                )));
            }
            let pair = LoraPair::new(down_m, up_m, config.alpha_for(&path)).map_err(|e| match e {
                Error::ShapeMismatch(msg) => Error::ShapeMismatch(format!("layer {} {}: {msg}", slot.layer, slot.kind)),
                other => other,
            })?;
            Ok((*slot, pair.with_dtype(down_t)))
        })
        .collect::<Result<_>>()?;

    Adapter::new(config.clone(), pairs.into_iter().collect())
}

/// Serialises an adapter's weights. Each pair is written in its own dtype.
pub fn write_adapter(adapter: &Adapter, schema: &NamingSchema) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(adapter.tensors().len() * 2);
    for (slot, pair) in adapter.tensors() {
        for (half, matrix) in [(Half::Down, pair.down()), (Half::Up, pair.up())] {
            let mut data = Vec::with_capacity(matrix.len() * pair.dtype().size());
            pair.dtype().encode(matrix.iter().copied(), &mut data);
            tensors.push((
                schema.tensor_name(TensorKey {
                    layer: slot.layer,
                    kind: slot.kind,
                    half,
                }),
                pair.dtype().as_str().to_string(),
                vec![matrix.nrows(), matrix.ncols()],
                data,
            ));
        }
    }
    let metadata = BTreeMap::from([("format".to_string(), "pt".to_string())]);
    TensorFile::from_tensors(metadata, tensors).to_bytes()
}

/// `(alpha / rank) * up * down` for one slot.
pub fn dense_delta(adapter: &Adapter, layer: usize, kind: ModuleKind) -> Result<Array2<f32>> {
    adapter
        .pair(layer, kind)
        .map(LoraPair::delta)
        .ok_or(Error::MissingTensor {
            layer,
            kind,
            detail: String::new(),
        })
}

fn adapter_files(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(CONFIG_FILE), path.join(WEIGHTS_FILE))
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        (dir.join(CONFIG_FILE), path.to_path_buf())
    }
}

/// Loads an adapter from a PEFT-style directory (or from a weights file
/// whose directory holds the config).
pub fn load_adapter(path: impl AsRef<Path>, schema: &NamingSchema) -> Result<Adapter> {
    let (config_path, weights_path) = adapter_files(path.as_ref());
    let config_bytes = std::fs::read(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let config = parse_adapter_config(&config_bytes, schema)?;
    let weights = std::fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    read_adapter(&weights, &config, schema)
}

/// Writes `adapter_config.json` and `adapter_model.safetensors` into `dir`,
/// creating it if needed.
pub fn save_adapter(adapter: &Adapter, dir: impl AsRef<Path>, schema: &NamingSchema) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = render_adapter_config(&adapter.export_config(schema), schema);
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, config).map_err(|e| Error::io(&config_path, e))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    std::fs::write(&weights_path, write_adapter(adapter, schema)).map_err(|e| Error::io(&weights_path, e))?;
    Ok(())
}
