//! Versioned binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DSFADCKP" | version u32 | header_len u32 | header (JSON, UTF-8)
//! entry_count u32
//! per entry: name_len u32 | name | dtype u8 (0 = f32, 1 = f64) | rank u32 | dims u64 x rank | data
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Model, ModelConfig, ParamStore, Variant};
use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DSFADCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode(header: &serde_json::Value, entries: &[(String, &Tensor)], dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let h = serde_json::to_vec(header)?;
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match dtype {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        });
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            Dtype::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            Dtype::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Container> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = c.u32()? as usize;
    let header: serde_json::Value = serde_json::from_slice(c.take(hlen)?)?;
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = String::from_utf8(c.take(nlen)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let dtype = c.take(1)?[0];
        let rank = c.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64()? as usize);
        }
        let numel: usize = dims.iter().product();
        let data: Vec<f64> = match dtype {
            0 => c
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
            1 => c
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            other => return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {other}"))),
        };
        entries.push((name, Tensor::new(dims, data)));
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(Container { header, entries })
}

pub fn write_file(path: &Path, header: &serde_json::Value, entries: &[(String, &Tensor)], dtype: Dtype) -> Result<()> {
    let bytes = encode(header, entries, dtype)?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}

pub fn read_file(path: &Path) -> Result<Container> {
    if !path.exists() {
        return Err(Error::MissingDependency(path.to_path_buf()));
    }
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    decode(&buf)
}

/// One line of a load mismatch report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeDiff {
    pub name: String,
    pub expected: Option<Vec<usize>>,
    pub found: Option<Vec<usize>>,
}

impl std::fmt::Display for ShapeDiff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |s: &Option<Vec<usize>>| s.as_ref().map_or("<absent>".to_string(), |s| format!("{s:?}"));
        write!(f, "{}: expected {}, found {}", self.name, show(&self.expected), show(&self.found))
    }
}

/// Differences between the parameters of `store` and the entries of `c`
/// whose names start with `prefix`.
pub fn shape_diff(store: &ParamStore, c: &Container, prefix: &str) -> Vec<ShapeDiff> {
    let mut diffs = Vec::new();
    for p in store.iter() {
        let found = c.get(&format!("{prefix}{}", p.name)).map(|t| t.shape().to_vec());
        if found.as_deref() != Some(p.value.shape()) {
            diffs.push(ShapeDiff {
                name: p.name.clone(),
                expected: Some(p.value.shape().to_vec()),
                found,
            });
        }
    }
    for (name, t) in &c.entries {
        if let Some(stripped) = name.strip_prefix(prefix) {
            if store.find(stripped).is_none() {
                diffs.push(ShapeDiff {
                    name: stripped.to_string(),
                    expected: None,
                    found: Some(t.shape().to_vec()),
                });
            }
        }
    }
    diffs
}

/// Copies tensors into `store`; any mismatch rejects the whole load.
pub fn load_into(store: &mut ParamStore, c: &Container, prefix: &str) -> Result<()> {
    let diffs = shape_diff(store, c, prefix);
    if !diffs.is_empty() {
        let report: Vec<String> = diffs.iter().map(ToString::to_string).collect();
        return Err(Error::Checkpoint(format!(
            "{} parameter mismatches:\n  {}",
            diffs.len(),
            report.join("\n  ")
        )));
    }
    for p in store.iter_mut() {
        p.value = c.get(&format!("{prefix}{}", p.name)).expect("checked").clone();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub kind: String,
    pub model: ModelConfig,
    pub variant: Variant,
    pub config_hash: String,
    pub epoch: usize,
    pub step: usize,
}

pub fn save_model(path: &Path, model: &Model, header: &ModelHeader, dtype: Dtype) -> Result<()> {
    let entries: Vec<(String, &Tensor)> = model.params.iter().map(|p| (p.name.clone(), &p.value)).collect();
    write_file(path, &serde_json::to_value(header)?, &entries, dtype)
}

pub fn load_model(path: &Path) -> Result<(Model, ModelHeader)> {
    let c = read_file(path)?;
    let header: ModelHeader = serde_json::from_value(c.header.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    let mut model = Model::new(header.model.clone())?;
    load_into(&mut model.params, &c, "")?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2)),
            ("b".into(), Tensor::scalar(std::f64::consts::PI)),
        ]
    }

    #[test]
    fn round_trip_f64_is_exact() {
        let s = sample();
        let refs: Vec<(String, &Tensor)> = s.iter().map(|(n, t)| (n.clone(), t)).collect();
        let h = serde_json::json!({"k": 1});
        let c = decode(&encode(&h, &refs, Dtype::F64).unwrap()).unwrap();
        assert_eq!(c.header, h);
        assert_eq!(c.entries, s);
    }

    #[test]
    fn f32_rounds() {
        let s = sample();
        let refs: Vec<(String, &Tensor)> = s.iter().map(|(n, t)| (n.clone(), t)).collect();
        let c = decode(&encode(&serde_json::Value::Null, &refs, Dtype::F32).unwrap()).unwrap();
        assert_eq!(c.get("b").unwrap().item(), std::f32::consts::PI as f64);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let s = sample();
        let refs: Vec<(String, &Tensor)> = s.iter().map(|(n, t)| (n.clone(), t)).collect();
        let bytes = encode(&serde_json::Value::Null, &refs, Dtype::F64).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
