//! Checkpoint container: a text metadata block followed by named NTF
//! sections.
//!
//! ```text
//! dio-checkpoint v1
//! <key> = <value>          (zero or more, in insertion order)
//! end
//! tensor <name> <bytes>    (then exactly <bytes> bytes of NTF)
//! ...
//! ```

use std::path::Path;

use super::ntf::{decode_ntf, encode_ntf};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "dio-checkpoint";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::config(format!("checkpoint is missing metadata `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = format!("{MAGIC} v1\n").into_bytes();
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(['=', '\n', ' ']) || k == "end" || v.contains('\n') {
                return Err(Error::config(format!("checkpoint metadata `{k}` cannot be encoded")));
            }
            out.extend_from_slice(format!("{k} = {v}\n").as_bytes());
        }
        out.extend_from_slice(b"end\n");
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::config(format!("checkpoint tensor name `{name}` cannot be encoded")));
            }
            let blob = encode_ntf(t);
            out.extend_from_slice(format!("tensor {name} {}\n", blob.len()).as_bytes());
            out.extend_from_slice(&blob);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<(usize, String)> {
            let start = *pos;
            let rest = &bytes[start..];
            let nl = rest
                .iter()
                .take(4096)
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format(origin, start, "unterminated line"))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| Error::format(origin, start, "line is not UTF-8"))?
                .to_string();
            *pos = start + nl + 1;
            Ok((start, line))
        };

        let (_, first) = next_line(&mut pos)?;
        match first.split_once(' ') {
            Some((MAGIC, "v1")) => {}
            Some((MAGIC, v)) => {
                return Err(Error::UnsupportedVersion {
                    path: origin.to_string(),
                    format: "checkpoint",
                    found: v.to_string(),
                })
            }
            _ => return Err(Error::format(origin, 0, "bad magic, expected `dio-checkpoint`")),
        }
        let mut ck = Checkpoint::default();
        loop {
            let (at, line) = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::format(origin, at, format!("malformed metadata line `{line}`")))?;
            ck.meta.push((k.to_string(), v.to_string()));
        }
        while pos < bytes.len() {
            let (at, line) = next_line(&mut pos)?;
            let parts: Vec<&str> = line.split(' ').collect();
            let (name, len) = match parts.as_slice() {
                ["tensor", name, len] => (
                    *name,
                    len.parse::<usize>()
                        .map_err(|_| Error::format(origin, at, format!("invalid section length `{len}`")))?,
                ),
                _ => return Err(Error::format(origin, at, format!("expected `tensor <name> <bytes>`, found `{line}`"))),
            };
            let end = pos
                .checked_add(len)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| {
                    Error::format(
                        origin,
                        pos,
                        format!("section `{name}` needs {len} bytes, {} remain", bytes.len() - pos),
                    )
                })?;
            let t = decode_ntf(&bytes[pos..end], &format!("{origin}[{name}]"))?;
            ck.tensors.push((name.to_string(), t));
            pos = end;
        }
        Ok(ck)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = super::read_file(path)?;
    Checkpoint::decode(&bytes, &path.display().to_string())
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    super::write_atomic(path, &ck.encode()?)
}
