//! Weight container:
//!
//! ```text
//! b"TWBENC01" | header length (u64 LE) | header JSON | f64 LE values
//! ```
//!
//! The header holds the encoder config and the ordered `{name, shape}` list;
//! values follow in that order, row-major.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use super::params::{EncoderModel, Layout};
use super::EncoderError;

const MAGIC: &[u8; 8] = b"TWBENC01";

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

fn io_err(path: &Path, source: std::io::Error) -> EncoderError {
    EncoderError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn entries(layout: &Layout) -> Vec<TensorEntry> {
    layout
        .specs()
        .iter()
        .map(|s| TensorEntry {
            name: s.name.clone(),
            shape: [s.rows, s.cols],
        })
        .collect()
}

pub(crate) fn header_bytes(config: &EncoderConfig) -> Vec<u8> {
    let header = Header {
        config: config.clone(),
        tensors: entries(&Layout::new(config)),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

pub fn save_weights(model: &EncoderModel, path: impl AsRef<Path>) -> Result<(), EncoderError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&header_bytes(&model.config)).map_err(|e| io_err(path, e))?;
    for v in model.params() {
        w.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize), EncoderError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(EncoderError::Format("missing magic bytes".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| EncoderError::Format("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| EncoderError::Format(format!("bad header: {e}")))?;
    Ok((header, end))
}

fn same_shape(a: &EncoderConfig, b: &EncoderConfig) -> Result<(), EncoderError> {
    let fields = [
        ("num_layers", a.num_layers, b.num_layers),
        ("hidden_size", a.hidden_size, b.hidden_size),
        ("num_heads", a.num_heads, b.num_heads),
        ("ffn_size", a.ffn_size, b.ffn_size),
        ("vocab_size", a.vocab_size, b.vocab_size),
        ("max_len", a.max_len, b.max_len),
        ("num_classes", a.num_classes, b.num_classes),
        ("mlm_head", a.mlm_head as usize, b.mlm_head as usize),
    ];
    let diffs: Vec<String> = fields
        .iter()
        .filter(|(_, x, y)| x != y)
        .map(|(n, x, y)| format!("{n} {x} (file) vs {y} (expected)"))
        .collect();
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(EncoderError::ConfigMismatch(diffs.join(", ")))
    }
}

fn decode(bytes: &[u8], expected: Option<&EncoderConfig>) -> Result<EncoderModel, EncoderError> {
    let (header, start) = parse_header(bytes)?;
    if let Some(exp) = expected {
        same_shape(&header.config, exp)?;
    }
    header
        .config
        .validate()
        .map_err(|e| EncoderError::Format(e.to_string()))?;
    let layout = Layout::new(&header.config);
    if header.tensors != entries(&layout) {
        return Err(EncoderError::Format("tensor table does not match the config".into()));
    }
    let body = &bytes[start..];
    let want = layout.total() * 8;
    if body.len() != want {
        return Err(EncoderError::Format(format!(
            "expected {want} bytes of tensor data, found {}",
            body.len()
        )));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    EncoderModel::from_parts(header.config, params)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<EncoderModel, EncoderError> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| io_err(path, e))?, None)
}

/// As [`load_weights`], failing with a config mismatch when the stored
/// architecture differs from `expected`.
pub fn load_weights_expecting(path: impl AsRef<Path>, expected: &EncoderConfig) -> Result<EncoderModel, EncoderError> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| io_err(path, e))?, Some(expected))
}
