//! Binary checkpoint format.
//!
//! ```text
//! "D2LA"                      4 bytes magic
//! version                     u32 LE, currently 1
//! header_len                  u32 LE
//! header                      header_len bytes of UTF-8 JSON (SectionHeader)
//! arrays                      f64 LE, concatenated in header.arrays order
//! ```
//!
//! An unmerged adapter stores `W0, b, m, A_plus, B_plus, [A_minus, B_minus,] tau`.
//! A merged adapter stores `W_hat, b, m` only (`merged = true`). Plain linear
//! sections (used by network checkpoints) store `W, b`.

use serde::{Deserialize, Serialize};

use super::{AdapterConfig, AdapterLayer, AdapterParams, MinusBranch};
use crate::error::{Error, Result};
use crate::linalg::{column_norms, Matrix, Vector};

pub const MAGIC: &[u8; 4] = b"D2LA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    Adapter,
    Linear,
    Network,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl ArraySpec {
    fn new(name: &str, rows: usize, cols: usize) -> Self {
        Self { name: name.to_string(), rows, cols }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionHeader {
    pub kind: SectionKind,
    pub d_in: usize,
    pub d_out: usize,
    pub rank_plus: usize,
    pub rank_minus: usize,
    pub merged: bool,
    pub config: Option<AdapterConfig>,
    pub arrays: Vec<ArraySpec>,
    /// Free-form JSON payload for network manifests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
}

/// Serialise a header plus its arrays; array lengths must match the header.
pub fn encode_section(header: &SectionHeader, arrays: &[&[f64]]) -> Result<Vec<u8>> {
    if header.arrays.len() != arrays.len() {
        return Err(Error::Format("header lists a different number of arrays".into()));
    }
    for (spec, a) in header.arrays.iter().zip(arrays) {
        if spec.rows * spec.cols != a.len() {
            return Err(Error::Format(format!("array {} has wrong length", spec.name)));
        }
    }
    let json = serde_json::to_vec(header)?;
    let json_len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    let payload: usize = arrays.iter().map(|a| a.len()).sum();
    let mut out = Vec::with_capacity(12 + json.len() + 8 * payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&json_len.to_le_bytes());
    out.extend_from_slice(&json);
    for a in arrays {
        for v in *a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse one section from the front of `bytes`; returns the section and the
/// number of bytes consumed.
pub fn decode_section(bytes: &[u8]) -> Result<(SectionHeader, Vec<Vec<f64>>, usize)> {
    let take = |from: usize, n: usize| -> Result<&[u8]> {
        bytes.get(from..from + n).ok_or_else(|| Error::Format("truncated checkpoint".into()))
    };
    if take(0, 4)? != MAGIC {
        return Err(Error::Format("bad magic (expected \"D2LA\")".into()));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes")) as usize;
    let header: SectionHeader = serde_json::from_slice(take(12, header_len)?)?;
    let mut pos = 12 + header_len;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for spec in &header.arrays {
        let n = spec.rows * spec.cols;
        let raw = take(pos, n * 8)?;
        arrays.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect());
        pos += n * 8;
    }
    Ok((header, arrays, pos))
}

fn matrix_of(spec: &ArraySpec, data: Vec<f64>) -> Result<Matrix> {
    Matrix::new(spec.rows, spec.cols, data).map_err(|e| Error::Format(format!("array {}: {e}", spec.name)))
}

fn expect_names(header: &SectionHeader, names: &[&str]) -> Result<()> {
    let got: Vec<&str> = header.arrays.iter().map(|a| a.name.as_str()).collect();
    if got != names {
        return Err(Error::Format(format!("unexpected array order {got:?}, expected {names:?}")));
    }
    Ok(())
}

/// Encode an adapter layer (merged or not) as a single section.
pub fn encode_layer(layer: &AdapterLayer) -> Result<Vec<u8>> {
    let (d_in, d_out) = (layer.d_in(), layer.d_out());
    let cfg = layer.config().clone();
    let mut header = SectionHeader {
        kind: SectionKind::Adapter,
        d_in,
        d_out,
        rank_plus: cfg.rank_plus,
        rank_minus: cfg.effective_rank_minus(),
        merged: layer.is_merged(),
        config: Some(cfg),
        arrays: Vec::new(),
        manifest: None,
    };
    if let Some(w_hat) = layer.merged_weight() {
        header.arrays =
            vec![ArraySpec::new("W_hat", d_out, d_in), ArraySpec::new("b", 1, d_out), ArraySpec::new("m", 1, d_in)];
        return encode_section(&header, &[w_hat.data(), layer.bias().as_slice(), layer.m().as_slice()]);
    }
    let p = layer.params()?;
    header.arrays = vec![
        ArraySpec::new("W0", d_out, d_in),
        ArraySpec::new("b", 1, d_out),
        ArraySpec::new("m", 1, d_in),
        ArraySpec::new("A_plus", d_in, p.a_plus.cols()),
        ArraySpec::new("B_plus", p.b_plus.rows(), d_out),
    ];
    let tau = [p.tau];
    let mut arrays: Vec<&[f64]> =
        vec![p.w0.data(), layer.bias().as_slice(), layer.m().as_slice(), p.a_plus.data(), p.b_plus.data()];
    if let Some(mb) = &p.minus {
        header.arrays.push(ArraySpec::new("A_minus", d_in, mb.a.cols()));
        header.arrays.push(ArraySpec::new("B_minus", mb.b.rows(), d_out));
        arrays.push(mb.a.data());
        arrays.push(mb.b.data());
    }
    header.arrays.push(ArraySpec::new("tau", 1, 1));
    arrays.push(&tau);
    encode_section(&header, &arrays)
}

/// Rebuild a layer from a decoded adapter section.
pub fn layer_from_section(header: SectionHeader, arrays: Vec<Vec<f64>>) -> Result<AdapterLayer> {
    if header.kind != SectionKind::Adapter {
        return Err(Error::Format(format!("expected an adapter section, found {:?}", header.kind)));
    }
    let config = header.config.clone().ok_or_else(|| Error::Format("adapter section without config".into()))?;
    let mut it = header.arrays.iter().zip(arrays);
    let mut next = || -> Result<Matrix> {
        let (spec, data) = it.next().ok_or_else(|| Error::Format("missing array".into()))?;
        matrix_of(spec, data)
    };
    if header.merged {
        expect_names(&header, &["W_hat", "b", "m"])?;
        let w_hat = next()?;
        let bias = Vector::new(next()?.into_data());
        let m = Vector::new(next()?.into_data());
        return AdapterLayer::from_merged(w_hat, bias, m, config);
    }
    let with_minus = header.rank_minus > 0;
    if with_minus {
        expect_names(&header, &["W0", "b", "m", "A_plus", "B_plus", "A_minus", "B_minus", "tau"])?;
    } else {
        expect_names(&header, &["W0", "b", "m", "A_plus", "B_plus", "tau"])?;
    }
    let w0 = next()?;
    let bias = Vector::new(next()?.into_data());
    let m = Vector::new(next()?.into_data());
    let a_plus = next()?;
    let b_plus = next()?;
    let minus = if with_minus { Some(MinusBranch { a: next()?, b: next()? }) } else { None };
    let tau = next()?.get(0, 0);

    let recomputed = column_norms(&w0);
    if recomputed.as_slice().iter().zip(m.as_slice()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Format("stored column norms do not match W0".into()));
    }
    let mut layer = AdapterLayer::new(w0, bias, config)?;
    {
        let p = layer.params.as_mut().expect("fresh layer has parameters");
        if p.a_plus.shape() != a_plus.shape()
            || p.b_plus.shape() != b_plus.shape()
            || p.minus.as_ref().map(|mb| (mb.a.shape(), mb.b.shape()))
                != minus.as_ref().map(|mb| (mb.a.shape(), mb.b.shape()))
        {
            return Err(Error::Format("factor shapes disagree with the config".into()));
        }
        *p = AdapterParams { a_plus, b_plus, minus, tau, ..p.clone() };
    }
    Ok(layer)
}

pub fn decode_layer(bytes: &[u8]) -> Result<AdapterLayer> {
    let (header, arrays, used) = decode_section(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format("trailing bytes after adapter section".into()));
    }
    layer_from_section(header, arrays)
}
