//! Binary payloads with JSON sidecar headers: `<stem>.bin` next to `<stem>.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::BitMatrix;
use crate::error::{Error, Result};
use crate::io::{read_bytes, read_json, write_json};
use crate::layout::{TokenGrid, TokenMask};

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

/// A stack of token masks, one byte (0 or 1) per token, mask after mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStackHeader {
    pub grid: TokenGrid,
    pub subjects: Vec<String>,
    /// Masks are ordered layer-major, then subject.
    pub layers: usize,
    pub encoding: String,
}

pub const MASK_ENCODING: &str = "u8 per token, layer-major then subject-major";

pub fn write_masks(dir: &Path, stem: &str, header: &MaskStackHeader, masks: &[TokenMask]) -> Result<()> {
    let n = header.grid.n_video();
    if masks.len() != header.layers * header.subjects.len() || masks.iter().any(|m| m.len() != n) {
        return Err(Error::arg("mask stack does not match its header"));
    }
    let (json, bin) = paths(dir, stem);
    let bytes: Vec<u8> = masks.iter().flat_map(|m| m.iter().map(|&b| u8::from(b))).collect();
    write_json(&json, header)?;
    std::fs::write(bin, bytes)?;
    Ok(())
}

pub fn read_masks(dir: &Path, stem: &str) -> Result<(MaskStackHeader, Vec<TokenMask>)> {
    let (json, bin) = paths(dir, stem);
    let header: MaskStackHeader = read_json(&json)?;
    let bytes = read_bytes(&bin)?;
    let n = header.grid.n_video();
    let count = header.layers * header.subjects.len();
    let where_ = bin.display().to_string();
    if bytes.len() != n * count {
        return Err(Error::format(where_, format!("expected {} bytes, found {}", n * count, bytes.len())));
    }
    if bytes.iter().any(|&b| b > 1) {
        return Err(Error::format(where_, "mask bytes must be 0 or 1"));
    }
    let masks = if n == 0 {
        vec![TokenMask::empty(0); count]
    } else {
        bytes.chunks(n).map(|c| TokenMask::from(c.iter().map(|&b| b == 1).collect::<Vec<_>>())).collect()
    };
    Ok((header, masks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitMatrixHeader {
    pub rows: usize,
    pub cols: usize,
    pub packing: String,
    /// Free-form context, e.g. token counts and the layer the mask came from.
    pub meta: serde_json::Value,
}

pub const BIT_PACKING: &str = "row-major, most significant bit first";

pub fn write_bit_matrix(dir: &Path, stem: &str, m: &BitMatrix, meta: serde_json::Value) -> Result<()> {
    let (json, bin) = paths(dir, stem);
    let header = BitMatrixHeader {
        rows: m.rows(),
        cols: m.cols(),
        packing: BIT_PACKING.into(),
        meta,
    };
    write_json(&json, &header)?;
    std::fs::write(bin, m.pack())?;
    Ok(())
}

pub fn read_bit_matrix(dir: &Path, stem: &str) -> Result<(BitMatrixHeader, BitMatrix)> {
    let (json, bin) = paths(dir, stem);
    let header: BitMatrixHeader = read_json(&json)?;
    let bytes = read_bytes(&bin)?;
    let m = BitMatrix::unpack(header.rows, header.cols, &bytes)
        .map_err(|e| Error::format(bin.display().to_string(), e.to_string()))?;
    Ok((header, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub meta: serde_json::Value,
}

pub const F64_DTYPE: &str = "f64 little-endian, row-major";

pub fn write_f64(dir: &Path, stem: &str, shape: &[usize], data: &[f64], meta: serde_json::Value) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::arg(format!("{} values for shape {shape:?}", data.len())));
    }
    let (json, bin) = paths(dir, stem);
    let header = ArrayHeader {
        shape: shape.to_vec(),
        dtype: F64_DTYPE.into(),
        meta,
    };
    write_json(&json, &header)?;
    std::fs::write(bin, data.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>())?;
    Ok(())
}

pub fn read_f64(dir: &Path, stem: &str) -> Result<(ArrayHeader, Vec<f64>)> {
    let (json, bin) = paths(dir, stem);
    let header: ArrayHeader = read_json(&json)?;
    let bytes = read_bytes(&bin)?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != 8 * n {
        return Err(Error::format(
            bin.display().to_string(),
            format!("expected {} bytes, found {}", 8 * n, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight")))
        .collect();
    Ok((header, data))
}
