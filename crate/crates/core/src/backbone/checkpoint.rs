//! Versioned binary checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic           8 bytes   "PTTTCKPT"
//! format_version  u32
//! section_count   u32
//! section*        tag [u8; 4], payload_len u64, payload
//! checksum        32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Sections: `MODL` (model config + dense tensors), `LORA` (optional
//! adapter), `HEAD` (optional frozen classifier head) and `META` (optional
//! UTF-8 JSON provenance). A tensor block is `u32 count` followed by, per
//! tensor, `u16 name_len, name, u8 dtype (0 = f32, 1 = f64), u8 ndim,
//! u64 dims[ndim], data`.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{BackboneSnapshot, LoraAdapter, LoraSpec, ModelConfig, Params, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::heads::ClassifierHead;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PTTTCKPT";

/// Everything a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F = f32> {
    pub snapshot: BackboneSnapshot<F>,
    pub head: Option<ClassifierHead>,
    pub meta: Option<serde_json::Value>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new(snapshot: BackboneSnapshot<F>) -> Self {
        Self {
            snapshot,
            head: None,
            meta: None,
        }
    }
}

pub(crate) fn write_tensors<F: Scalar>(out: &mut Vec<u8>, tensors: &[(String, &Tensor<F>)]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE as u8);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(out);
        }
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub(crate) fn read_tensors<F: Scalar>(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor<F>)>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_code(r.u8()?)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype for {name}")))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * dtype.size())?;
        let data: Vec<F> = match dtype {
            d if d == F::DTYPE => raw.chunks_exact(d.size()).map(F::read_le).collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| F::from_f64_lossy(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| F::from_f64_lossy(f64::read_le(c)))
                .collect(),
        };
        out.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok(out)
}

/// Moves loaded tensors into `targets` by name, checking shapes.
pub(crate) fn assign_tensors<F: Scalar>(
    loaded: Vec<(String, Tensor<F>)>,
    names: Vec<String>,
    targets: Vec<&mut Tensor<F>>,
) -> Result<()> {
    if loaded.len() != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            names.len(),
            loaded.len()
        )));
    }
    for ((name, target), (got_name, t)) in names.into_iter().zip(targets).zip(loaded) {
        if name != got_name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {got_name}")));
        }
        if t.shape() != target.shape() {
            return Err(Error::Shape {
                name,
                expected: target.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        *target = t;
    }
    Ok(())
}

fn push_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn encode_config(out: &mut Vec<u8>, cfg: &ModelConfig) {
    for v in [
        cfg.num_layers as u64,
        cfg.model_dim as u64,
        cfg.num_heads as u64,
        cfg.ffn_dim as u64,
        cfg.max_positions as u64,
        cfg.vocab_size as u64,
        cfg.seed,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode_config(r: &mut Reader<'_>) -> Result<ModelConfig> {
    Ok(ModelConfig {
        num_layers: r.u64()? as usize,
        model_dim: r.u64()? as usize,
        num_heads: r.u64()? as usize,
        ffn_dim: r.u64()? as usize,
        max_positions: r.u64()? as usize,
        vocab_size: r.u64()? as usize,
        seed: r.u64()?,
    })
}

/// Serializes a checkpoint to bytes.
pub fn write_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>) -> Vec<u8> {
    let snap = &ckpt.snapshot;
    let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();

    let mut model = Vec::new();
    encode_config(&mut model, &snap.config);
    let named: Vec<(String, &Tensor<F>)> = snap
        .params
        .tensors()
        .into_iter()
        .map(|(n, _, t)| (n, t))
        .collect();
    write_tensors(&mut model, &named);
    sections.push((*b"MODL", model));

    if let Some(adapter) = &snap.adapter {
        let mut lora = Vec::new();
        lora.extend_from_slice(&(adapter.spec.rank as u64).to_le_bytes());
        lora.extend_from_slice(&adapter.spec.alpha.to_le_bytes());
        write_tensors(&mut lora, &adapter.tensors());
        sections.push((*b"LORA", lora));
    }
    if let Some(head) = &ckpt.head {
        sections.push((*b"HEAD", head.encode()));
    }
    if let Some(meta) = &ckpt.meta {
        sections.push((*b"META", serde_json::to_vec(meta).expect("json value serializes")));
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&snap.format_version.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (tag, payload) in &sections {
        push_section(&mut out, tag, payload);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    out
}

/// Parses checkpoint bytes, verifying the checksum first.
pub fn read_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 + 32 {
        return Err(Error::Checksum);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let mut r = Reader::new(body);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version(version));
    }
    let count = r.u32()?;
    let mut snapshot: Option<BackboneSnapshot<F>> = None;
    let mut lora_payload: Option<&[u8]> = None;
    let mut head = None;
    let mut meta = None;
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        match &tag {
            b"MODL" => {
                let mut pr = Reader::new(payload);
                let config = decode_config(&mut pr)?;
                config.validate()?;
                let mut params = Params::<F>::zeros(&config);
                let names = params.tensors().into_iter().map(|(n, _, _)| n).collect();
                assign_tensors(read_tensors(&mut pr)?, names, params.tensors_mut())?;
                snapshot = Some(BackboneSnapshot {
                    format_version: version,
                    config,
                    params,
                    adapter: None,
                });
            }
            b"LORA" => lora_payload = Some(payload),
            b"HEAD" => head = Some(ClassifierHead::decode(payload)?),
            b"META" => meta = Some(serde_json::from_slice(payload)?),
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown section {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
    }
    if !r.is_done() {
        return Err(Error::Checkpoint("trailing bytes after sections".into()));
    }
    let mut snapshot = snapshot.ok_or_else(|| Error::Checkpoint("missing MODL section".into()))?;
    if let Some(payload) = lora_payload {
        let mut pr = Reader::new(payload);
        let spec = LoraSpec {
            rank: pr.u64()? as usize,
            alpha: pr.f64()?,
        };
        let mut adapter = LoraAdapter::<F>::new(&snapshot.config, spec, 0)?;
        let names = adapter.tensors().into_iter().map(|(n, _)| n).collect();
        assign_tensors(read_tensors(&mut pr)?, names, adapter.tensors_mut())?;
        snapshot.adapter = Some(adapter);
    }
    Ok(Checkpoint {
        snapshot,
        head,
        meta,
    })
}

pub fn save_checkpoint<F: Scalar>(path: impl AsRef<Path>, ckpt: &Checkpoint<F>) -> Result<()> {
    std::fs::write(path, write_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<F>> {
    read_checkpoint(&std::fs::read(path)?)
}

/// Hex SHA-256 of serialized checkpoint bytes.
pub fn checkpoint_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
