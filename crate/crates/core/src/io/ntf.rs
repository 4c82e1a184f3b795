//! NTF v1: one ASCII header line `ntf v1 <n> <c> <h> <w>\n` followed by
//! `n·c·h·w` little-endian `f32` values in `n → c → h → w` order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

const MAX_HEADER: usize = 256;

pub fn encode_ntf<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let s = t.shape();
    let header = format!("ntf v1 {} {} {} {}\n", s.n, s.c, s.h, s.w);
    let mut out = Vec::with_capacity(header.len() + 4 * s.len());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

/// Decodes one NTF blob; `origin` names it in error messages.
pub fn decode_ntf(bytes: &[u8], origin: &str) -> Result<Tensor<f32>> {
    let nl = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(origin, bytes.len().min(MAX_HEADER), "no NTF header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::format(origin, e.valid_up_to(), "header is not UTF-8"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.first() != Some(&"ntf") {
        return Err(Error::format(origin, 0, "bad magic, expected `ntf`"));
    }
    match fields.get(1) {
        Some(&"v1") => {}
        Some(v) => {
            return Err(Error::UnsupportedVersion {
                path: origin.to_string(),
                format: "NTF",
                found: v.to_string(),
            })
        }
        None => return Err(Error::format(origin, 3, "missing version")),
    }
    if fields.len() != 6 {
        return Err(Error::format(origin, 0, format!("expected 4 dimensions, found {}", fields.len().saturating_sub(2))));
    }
    let mut dims = [0usize; 4];
    let mut offset = 7;
    for (d, f) in dims.iter_mut().zip(&fields[2..]) {
        *d = f
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::format(origin, offset, format!("invalid dimension `{f}`")))?;
        offset += f.len() + 1;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let payload = &bytes[nl + 1..];
    let want = dims
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(origin, 0, "dimensions overflow"))?;
    if payload.len() != want {
        return Err(Error::format(
            origin,
            nl + 1,
            format!("expected {want} payload bytes for {shape}, found {}", payload.len()),
        ));
    }
    let mut data = Vec::with_capacity(want / 4);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunks of four"));
        if !v.is_finite() {
            return Err(Error::format(origin, nl + 1 + 4 * i, "non-finite value"));
        }
        data.push(v);
    }
    Tensor::new(shape, data)
}

pub fn read_ntf(path: &Path) -> Result<Tensor<f32>> {
    let bytes = super::read_file(path)?;
    decode_ntf(&bytes, &path.display().to_string())
}

pub fn write_ntf<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    super::write_atomic(path, &encode_ntf(t))
}
