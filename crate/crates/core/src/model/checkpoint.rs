//! Binary checkpoint container.
//!
//! ```text
//! "LLRCCKPT" | version: u32 LE | manifest_len: u64 LE | manifest (JSON) | blob
//! ```
//!
//! The manifest lists every tensor with its name, dtype (`f64`), shape and its
//! byte offset and length inside the blob. Blobs are little-endian raw `f64`
//! bits, laid out contiguously in manifest order, so a round trip is
//! bit-exact.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::ModelConfig;
use super::distill::DistillationRecord;
use super::masked::{MaskedLayer, MaskedModel};
use super::transformer::{Backbone, ToyTransformer};
use crate::error::{Error, Result};
use crate::lowrank::{Decomposition, SvdFactors, WhiteningScale};
use crate::masking::MaskLogits;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LLRCCKPT";
pub const FORMAT_VERSION: u32 = 1;
/// Byte offset at which the manifest starts.
pub const MANIFEST_OFFSET: u64 = 20;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

fn format_err(offset: u64, detail: impl Into<String>) -> Error {
    Error::Format {
        offset,
        detail: detail.into(),
    }
}

/// Parsed (or to-be-written) checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let length = 8 * t.numel() as u64;
                let e = TensorEntry {
                    name: name.clone(),
                    dtype: "f64".into(),
                    shape: t.shape().to_vec(),
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect();
        let manifest = Manifest {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let manifest = serde_json::to_vec(&manifest).map_err(|e| Error::contract(format!("manifest encoding: {e}")))?;
        let mut out = Vec::with_capacity(MANIFEST_OFFSET as usize + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len = bytes.len() as u64;
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(format_err(0, "missing checkpoint magic"));
        }
        if bytes.len() < 12 {
            return Err(format_err(len, "truncated header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(format_err(8, format!("unsupported version {version}")));
        }
        if bytes.len() < MANIFEST_OFFSET as usize {
            return Err(format_err(len, "truncated header"));
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        if manifest_len > len - MANIFEST_OFFSET {
            return Err(format_err(12, format!("manifest length {manifest_len} exceeds the {len}-byte file")));
        }
        let blob_start = MANIFEST_OFFSET + manifest_len;
        let manifest: Manifest = serde_json::from_slice(&bytes[MANIFEST_OFFSET as usize..blob_start as usize])
            .map_err(|e| format_err(MANIFEST_OFFSET, format!("manifest: {e}")))?;
        let blob = &bytes[blob_start as usize..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f64" {
                return Err(format_err(MANIFEST_OFFSET, format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
            if e.length != 8 * numel {
                return Err(format_err(
                    blob_start + e.offset,
                    format!("{}: {} bytes for shape {:?}", e.name, e.length, e.shape),
                ));
            }
            if e.offset != expected {
                return Err(format_err(
                    blob_start + e.offset,
                    format!("{}: expected offset {expected}, found {}", e.name, e.offset),
                ));
            }
            let end = e.offset + e.length;
            if end > blob.len() as u64 {
                return Err(format_err(len, format!("{}: blob truncated", e.name)));
            }
            let raw = &blob[e.offset as usize..end as usize];
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(format_err(blob_start + e.offset + 8 * i as u64, format!("{}: non-finite value", e.name)));
            }
            tensors.push((e.name, Tensor::from_parts(e.shape, data)));
            expected = end;
        }
        if expected != blob.len() as u64 {
            return Err(format_err(blob_start + expected, "trailing bytes after the last tensor"));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub(crate) fn into_reader(self) -> TensorReader {
        TensorReader {
            map: self.tensors.into_iter().collect(),
        }
    }
}

/// Name-indexed access to the tensors of a parsed container.
pub(crate) struct TensorReader {
    map: HashMap<String, Tensor>,
}

impl TensorReader {
    pub(crate) fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .map
            .remove(name)
            .ok_or_else(|| format_err(MANIFEST_OFFSET, format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(format_err(
                MANIFEST_OFFSET,
                format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
        Ok(t)
    }

    pub(crate) fn take_vector(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        Ok(self.take(name, &[len])?.into_data())
    }

    pub(crate) fn finish(self) -> Result<()> {
        match self.map.keys().min() {
            None => Ok(()),
            Some(extra) => Err(format_err(MANIFEST_OFFSET, format!("unexpected tensor {extra}"))),
        }
    }
}

pub(crate) fn meta_field<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| format_err(MANIFEST_OFFSET, format!("manifest meta lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| format_err(MANIFEST_OFFSET, format!("meta `{key}`: {e}")))
}

/// A value that can be stored in a checkpoint container.
pub trait Checkpoint: Sized {
    const KIND: &'static str;
    fn to_container(&self) -> Result<Container>;
    fn from_container(c: Container) -> Result<Self>;
}

pub fn save_checkpoint<M: Checkpoint>(model: &M, path: &Path) -> Result<()> {
    model.to_container()?.write(path)
}

/// Load and check the stored kind; nothing is returned on any error.
pub fn load_checkpoint<M: Checkpoint>(path: &Path) -> Result<M> {
    decode(Container::read(path)?)
}

pub fn decode<M: Checkpoint>(c: Container) -> Result<M> {
    if c.kind != M::KIND {
        return Err(format_err(MANIFEST_OFFSET, format!("checkpoint holds `{}`, expected `{}`", c.kind, M::KIND)));
    }
    M::from_container(c)
}

pub(crate) fn push_backbone(c: &mut Container, cfg: &ModelConfig, b: &Backbone) {
    for ((name, _), t) in Backbone::layout(cfg).into_iter().zip(b.tensors()) {
        c.push(name, t);
    }
}

pub(crate) fn take_backbone(r: &mut TensorReader, cfg: &ModelConfig) -> Result<Backbone> {
    let tensors = Backbone::layout(cfg)
        .into_iter()
        .map(|(name, shape)| r.take(&name, &shape))
        .collect::<Result<Vec<_>>>()?;
    Backbone::from_tensors(cfg, tensors)
}

pub(crate) fn read_config(meta: &Value) -> Result<ModelConfig> {
    let cfg: ModelConfig = meta_field(meta, "config")?;
    cfg.validate().map_err(|e| format_err(MANIFEST_OFFSET, e.to_string()))?;
    Ok(cfg)
}

impl Checkpoint for ToyTransformer {
    const KIND: &'static str = "toy-transformer";

    fn to_container(&self) -> Result<Container> {
        let cfg = self.config();
        let mut c = Container::new(Self::KIND, json!({ "config": cfg, "frozen": self.is_frozen() }));
        push_backbone(&mut c, cfg, self.backbone());
        for site in cfg.sites() {
            c.push(format!("{}.weight", site.name()), self.weight(site));
        }
        Ok(c)
    }

    fn from_container(c: Container) -> Result<Self> {
        let cfg = read_config(&c.meta)?;
        let frozen: bool = meta_field(&c.meta, "frozen")?;
        let mut r = c.into_reader();
        let backbone = take_backbone(&mut r, &cfg)?;
        let weights = cfg
            .sites()
            .into_iter()
            .map(|s| {
                let (m, n) = cfg.dims(s.kind);
                r.take(&format!("{}.weight", s.name()), &[m, n])
            })
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        ToyTransformer::from_parts(cfg, backbone, weights, frozen)
    }
}

#[derive(Serialize, Deserialize)]
struct MaskedLayerMeta {
    name: String,
    rank: usize,
    temperature: f64,
    whitened: bool,
    epsilon_floor: f64,
}

impl Checkpoint for MaskedModel {
    const KIND: &'static str = "masked-model";

    fn to_container(&self) -> Result<Container> {
        let layers: Vec<MaskedLayerMeta> = self
            .layers()
            .iter()
            .map(|l| MaskedLayerMeta {
                name: l.site.name(),
                rank: l.decomposition.rank(),
                temperature: l.logits.temperature(),
                whitened: l.decomposition.scale.is_some(),
                epsilon_floor: l.decomposition.scale.as_ref().map_or(0.0, |s| s.epsilon_floor()),
            })
            .collect();
        let meta = json!({
            "config": self.config(),
            "calibration_ids": self.calibration_ids,
            "layers": layers,
        });
        let mut c = Container::new(Self::KIND, meta);
        push_backbone(&mut c, self.config(), self.backbone());
        for l in self.layers() {
            let name = l.site.name();
            let f = &l.decomposition.factors;
            c.push(format!("{name}.u"), &f.u);
            c.push(format!("{name}.sigma"), &Tensor::from_parts(vec![f.rank()], f.sigma.clone()));
            c.push(format!("{name}.v"), &f.v);
            if let Some(s) = &l.decomposition.scale {
                c.push(format!("{name}.scale"), &Tensor::from_parts(vec![s.len()], s.values().to_vec()));
            }
            c.push(format!("{name}.logits"), &l.logits.to_tensor());
        }
        Ok(c)
    }

    fn from_container(c: Container) -> Result<Self> {
        let cfg = read_config(&c.meta)?;
        let calibration_ids: BTreeSet<u64> = meta_field(&c.meta, "calibration_ids")?;
        let metas: Vec<MaskedLayerMeta> = meta_field(&c.meta, "layers")?;
        let sites = cfg.sites();
        if metas.len() != sites.len() {
            return Err(format_err(MANIFEST_OFFSET, format!("{} layer records for {} sites", metas.len(), sites.len())));
        }
        let mut r = c.into_reader();
        let backbone = take_backbone(&mut r, &cfg)?;
        let mut layers = Vec::with_capacity(sites.len());
        for (site, meta) in sites.into_iter().zip(metas) {
            let name = site.name();
            if meta.name != name {
                return Err(format_err(MANIFEST_OFFSET, format!("layer {} where {name} was expected", meta.name)));
            }
            let (m, n) = cfg.dims(site.kind);
            let rank = meta.rank;
            if rank != m.min(n) {
                return Err(format_err(MANIFEST_OFFSET, format!("{name}: rank {rank} for a {m}x{n} layer")));
            }
            let bad = |e: Error| format_err(MANIFEST_OFFSET, format!("{name}: {e}"));
            let factors = SvdFactors {
                u: r.take(&format!("{name}.u"), &[m, rank])?,
                sigma: r.take_vector(&format!("{name}.sigma"), rank)?,
                v: r.take(&format!("{name}.v"), &[n, rank])?,
                m,
                n,
            };
            let scale = if meta.whitened {
                let s = r.take_vector(&format!("{name}.scale"), n)?;
                Some(WhiteningScale::from_values(s, meta.epsilon_floor).map_err(bad)?)
            } else {
                None
            };
            let logits = MaskLogits::from_values(r.take_vector(&format!("{name}.logits"), rank)?, meta.temperature).map_err(bad)?;
            layers.push(MaskedLayer {
                site,
                decomposition: Decomposition { factors, scale },
                logits,
            });
        }
        r.finish()?;
        MaskedModel::from_parts(cfg, backbone, layers, calibration_ids)
    }
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    doc_id: u64,
    chunk_index: usize,
    token_ids: Vec<usize>,
}

impl Checkpoint for Vec<DistillationRecord> {
    const KIND: &'static str = "distillation-records";

    fn to_container(&self) -> Result<Container> {
        let d = self.first().map_or(0, |r| r.middle_hidden.cols());
        let metas: Vec<RecordMeta> = self
            .iter()
            .map(|r| RecordMeta {
                doc_id: r.doc_id,
                chunk_index: r.chunk_index,
                token_ids: r.token_ids.clone(),
            })
            .collect();
        let mut c = Container::new(Self::KIND, json!({ "d_model": d, "records": metas }));
        for (i, r) in self.iter().enumerate() {
            c.push(format!("records.{i}.middle"), &r.middle_hidden);
            c.push(format!("records.{i}.pre_logits"), &r.pre_logits_hidden);
        }
        Ok(c)
    }

    fn from_container(c: Container) -> Result<Self> {
        let d: usize = meta_field(&c.meta, "d_model")?;
        let metas: Vec<RecordMeta> = meta_field(&c.meta, "records")?;
        let mut r = c.into_reader();
        let out = metas
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                let shape = [m.token_ids.len(), d];
                Ok(DistillationRecord {
                    doc_id: m.doc_id,
                    chunk_index: m.chunk_index,
                    middle_hidden: r.take(&format!("records.{i}.middle"), &shape)?,
                    pre_logits_hidden: r.take(&format!("records.{i}.pre_logits"), &shape)?,
                    token_ids: m.token_ids,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test", json!({ "x": 0.1 }));
        c.push("a", &Tensor::from_rows(&[vec![1.0, -2.5], vec![1e-300, 3.0]]).unwrap());
        c.push("b", &Tensor::vector(vec![0.1, 0.2, 0.30000000000000004]).unwrap());
        c.push("empty", &Tensor::zeros(vec![0, 4]));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.meta, c.meta);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.bitwise_eq(t2));
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(
                matches!(Container::from_bytes(&bytes[..cut]), Err(Error::Format { .. })),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn header_errors_carry_offsets() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format { offset: 8, .. })));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = sample().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format { .. })));
    }
}
