//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "RCNNCKPT"
//! version      u32      1
//! header_len   u32
//! header       UTF-8 "key=value\n" lines: model spec, then meta.* entries
//! tensor_count u32
//! manifest     per tensor: name_len u16, name, ndim u8, dims u32 x ndim
//! blobs        per tensor, in manifest order: f32 values
//! ```
//!
//! Trainable tensors come first in declaration order, followed by batch norm
//! running statistics (`layer{l}.bn.running_{mean,var}.t{t}`) for every time
//! step that has them, followed by any extra tensors (optimizer state).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::NetworkParams;
use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::RunningStats;

pub const MAGIC: &[u8; 8] = b"RCNNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedBlob {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: NetworkParams<f32>,
    /// Free-form metadata such as the epoch or optimizer step.
    pub meta: BTreeMap<String, String>,
    pub extra: Vec<NamedBlob>,
}

fn spec_header(spec: &ModelSpec) -> Vec<(String, String)> {
    let preset = spec.preset_name().map(|p| p.name().to_string()).unwrap_or_else(|| "custom".into());
    vec![
        ("preset".into(), preset),
        ("filters".into(), spec.filters.to_string()),
        ("kernel_size".into(), spec.kernel_size.to_string()),
        ("lateral".into(), u8::from(spec.has_lateral).to_string()),
        ("topdown".into(), u8::from(spec.has_topdown).to_string()),
        ("tau".into(), spec.tau.to_string()),
        ("classes".into(), spec.classes.to_string()),
        ("input_channels".into(), spec.input_channels.to_string()),
        ("input_size".into(), spec.input_size.to_string()),
    ]
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, params: NetworkParams<f32>) -> Self {
        Checkpoint { spec, params, meta: BTreeMap::new(), extra: Vec::new() }
    }

    fn blobs(&self) -> Vec<NamedBlob> {
        let mut out: Vec<NamedBlob> = self
            .params
            .trainable()
            .into_iter()
            .map(|v| NamedBlob { name: v.name.to_string(), dims: v.dims, values: v.values.to_vec() })
            .collect();
        for (l, bn) in [(1, &self.params.layer1.bn), (2, &self.params.layer2.bn)] {
            for (t, rs) in bn.running.iter().enumerate() {
                if let Some(rs) = rs {
                    out.push(NamedBlob {
                        name: format!("layer{l}.bn.running_mean.t{t}"),
                        dims: vec![rs.mean.len()],
                        values: rs.mean.clone(),
                    });
                    out.push(NamedBlob {
                        name: format!("layer{l}.bn.running_var.t{t}"),
                        dims: vec![rs.var.len()],
                        values: rs.var.clone(),
                    });
                }
            }
        }
        out.extend(self.extra.iter().cloned());
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in spec_header(&self.spec) {
            header.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.meta {
            header.push_str(&format!("meta.{k}={v}\n"));
        }
        let blobs = self.blobs();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for b in &blobs {
            out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.dims.len() as u8);
            for &d in &b.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for b in &blobs {
            for v in &b.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(path, detail),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?).map_err(|_| bad("header is not UTF-8"))?;
        let mut kv = BTreeMap::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(&format!("header line {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let num = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| bad(&format!("header lacks {k}")))?
                .parse()
                .map_err(|_| bad(&format!("header {k} is not an integer")))
        };
        let spec = ModelSpec {
            has_lateral: num("lateral")? == 1,
            has_topdown: num("topdown")? == 1,
            filters: num("filters")?,
            kernel_size: num("kernel_size")?,
            tau: num("tau")?,
            classes: num("classes")?,
            input_channels: num("input_channels")?,
            input_size: num("input_size")?,
        };
        spec.validate()?;
        let meta = kv.iter().filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone()))).collect();

        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
            let ndim = r.take(1)?[0] as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            manifest.push((name, dims));
        }
        let mut blobs: Vec<NamedBlob> = Vec::with_capacity(count);
        for (name, dims) in manifest {
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            blobs.push(NamedBlob { name, dims, values });
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after tensor blobs"));
        }

        let mut params = NetworkParams::<f32>::init(&spec, 0)?;
        let mut by_name: BTreeMap<String, NamedBlob> = BTreeMap::new();
        for b in blobs {
            if by_name.insert(b.name.clone(), b).is_some() {
                return Err(bad("duplicate tensor name"));
            }
        }
        for (name, slot) in params.trainable_mut() {
            let blob = by_name.remove(name).ok_or_else(|| bad(&format!("missing tensor {name}")))?;
            if blob.values.len() != slot.len() {
                return Err(bad(&format!("tensor {name} has {} values, expected {}", blob.values.len(), slot.len())));
            }
            slot.copy_from_slice(&blob.values);
        }
        for (l, bn) in [(1, &mut params.layer1.bn), (2, &mut params.layer2.bn)] {
            for t in 0..spec.tau {
                let mean = by_name.remove(&format!("layer{l}.bn.running_mean.t{t}"));
                let var = by_name.remove(&format!("layer{l}.bn.running_var.t{t}"));
                bn.running[t] = match (mean, var) {
                    (Some(m), Some(v)) if m.values.len() == spec.filters && v.values.len() == spec.filters => {
                        Some(RunningStats { mean: m.values, var: v.values })
                    }
                    (None, None) => None,
                    _ => return Err(bad(&format!("incomplete running statistics for layer {l} step {t}"))),
                };
            }
        }
        // remaining blobs are extras; keep file order
        let mut extra: Vec<NamedBlob> = by_name.into_values().collect();
        extra.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(Checkpoint { spec, params, meta, extra })
    }
}

fn bad(detail: &str) -> Error {
    Error::format("<checkpoint>", detail)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Preset;

    #[test]
    fn round_trip_with_running_stats_and_extras() {
        let spec = ModelSpec::preset_scaled(Preset::BLT, 4, 2).with_input_size(8).with_tau(2);
        let mut params = NetworkParams::<f32>::init(&spec, 5).unwrap();
        params.layer1.bn.update_running(1, &[0.5; 4], &[2.0; 4]).unwrap();
        params.layer2.bn.update_running(1, &[0.25; 4], &[3.0; 4]).unwrap();
        let mut ck = Checkpoint::new(spec.clone(), params);
        ck.meta.insert("epoch".into(), "3".into());
        ck.extra.push(NamedBlob { name: "adam.m.dense.bias".into(), dims: vec![10], values: vec![0.5; 10] });
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(Checkpoint::from_bytes(&corrupt).is_err());
    }
}
