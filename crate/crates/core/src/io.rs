//! Text encodings shared by the dataset, parameter and manifest documents.

use std::io::{Read, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, ParamStore};

/// Base64 of the little-endian `f64` bytes, row-major.
pub fn encode_matrix(m: &Matrix) -> String {
    let bytes: Vec<u8> = m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_matrix(rows: usize, cols: usize, text: &str) -> Result<Matrix> {
    let bytes = B64.decode(text).map_err(|e| Error::Format(format!("base64: {e}")))?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Format(format!(
            "{} bytes for a {rows}x{cols} matrix",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Matrix::new(rows, cols, data)
}

pub const PARAMS_FORMAT: &str = "vastvocab-params";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct ParamDocument {
    format: String,
    version: u32,
    params: Vec<ParamEntry>,
}

pub fn write_params<W: Write>(out: W, store: &ParamStore) -> Result<()> {
    let doc = ParamDocument {
        format: PARAMS_FORMAT.into(),
        version: PARAMS_VERSION,
        params: store
            .iter()
            .map(|(name, m)| ParamEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                data: encode_matrix(m),
            })
            .collect(),
    };
    serde_json::to_writer_pretty(out, &doc)?;
    Ok(())
}

/// Overwrites every parameter of `store` from a document holding exactly the
/// same names and shapes.
pub fn read_params_into<R: Read>(input: R, store: &mut ParamStore) -> Result<()> {
    let doc: ParamDocument = serde_json::from_reader(input)?;
    if doc.format != PARAMS_FORMAT || doc.version != PARAMS_VERSION {
        return Err(Error::Format(format!(
            "unsupported parameter header {} v{}",
            doc.format, doc.version
        )));
    }
    if doc.params.len() != store.len() {
        return Err(Error::Format(format!(
            "document has {} parameters, module has {}",
            doc.params.len(),
            store.len()
        )));
    }
    let mut loaded = Vec::with_capacity(doc.params.len());
    for entry in &doc.params {
        let id = store
            .find(&entry.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {:?}", entry.name)))?;
        if store.get(id).shape() != (entry.rows, entry.cols) {
            return Err(Error::Format(format!(
                "parameter {:?} is {:?}, document has {}x{}",
                entry.name,
                store.get(id).shape(),
                entry.rows,
                entry.cols
            )));
        }
        loaded.push((id, decode_matrix(entry.rows, entry.cols, &entry.data)?));
    }
    for (id, m) in loaded {
        *store.get_mut(id) = m;
    }
    Ok(())
}
