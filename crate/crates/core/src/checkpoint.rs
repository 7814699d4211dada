//! Checkpoint container.
//!
//! Layout: the 8 magic bytes `DPLXSSM1`, a `u64` little-endian header length,
//! a UTF-8 JSON header mapping tensor name to
//! `{"dtype","shape","offset","length"}`, then the little-endian payload.
//! Offsets are relative to the start of the payload. The optional
//! `__metadata__` header key holds free-form JSON (the model configuration).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::AdapterWeights;
use crate::blocks::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::init;
use crate::lm::{LmConfig, LmWeights};
use crate::module::{Module, TensorMap};
use crate::numerics::{DType, Tensor};

pub const MAGIC: &[u8; 8] = b"DPLXSSM1";
pub const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

pub fn write_tensors<W: Write>(mut out: W, tensors: &TensorMap, metadata: Option<&Value>) -> Result<()> {
    let mut header = serde_json::Map::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        if name == METADATA_KEY {
            return Err(Error::Format(format!("tensor name {METADATA_KEY} is reserved")));
        }
        let length = t.nbytes() as u64;
        let e = TensorEntry {
            dtype: t.dtype(),
            shape: t.shape().to_vec(),
            offset,
            length,
        };
        header.insert(name.clone(), serde_json::to_value(e)?);
        offset += length;
    }
    if let Some(m) = metadata {
        header.insert(METADATA_KEY.to_string(), m.clone());
    }
    let hjson = serde_json::to_vec(&Value::Object(header))?;
    out.write_all(MAGIC)?;
    out.write_all(&(hjson.len() as u64).to_le_bytes())?;
    out.write_all(&hjson)?;
    for t in tensors.values() {
        out.write_all(&t.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensors<R: Read>(mut inp: R) -> Result<(TensorMap, Option<Value>)> {
    let mut magic = [0u8; 8];
    inp.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut len = [0u8; 8];
    inp.read_exact(&mut len)?;
    let hlen = u64::from_le_bytes(len);
    if hlen > MAX_HEADER {
        return Err(Error::Format(format!("header length {hlen} is implausible")));
    }
    let mut hbuf = vec![0u8; hlen as usize];
    inp.read_exact(&mut hbuf)?;
    let header: BTreeMap<String, Value> = serde_json::from_slice(&hbuf)?;
    let mut payload = Vec::new();
    inp.read_to_end(&mut payload)?;

    let mut metadata = None;
    let mut tensors = TensorMap::new();
    for (name, v) in header {
        if name == METADATA_KEY {
            metadata = Some(v);
            continue;
        }
        let e: TensorEntry = serde_json::from_value(v)?;
        let numel: usize = e.shape.iter().product();
        if e.length != (numel * e.dtype.size_bytes()) as u64 {
            return Err(Error::Format(format!("tensor {name}: length does not match shape and dtype")));
        }
        let end = e.offset.checked_add(e.length).filter(|&end| end <= payload.len() as u64);
        let end = end.ok_or_else(|| Error::Format(format!("tensor {name}: byte range outside payload")))?;
        let bytes = &payload[e.offset as usize..end as usize];
        tensors.insert(name, Tensor::from_le_bytes(&e.shape, e.dtype, bytes)?);
    }
    Ok((tensors, metadata))
}

pub fn save_tensors(path: &Path, tensors: &TensorMap, metadata: Option<&Value>) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), tensors, metadata)
}

pub fn load_tensors(path: &Path) -> Result<(TensorMap, Option<Value>)> {
    read_tensors(BufReader::new(File::open(path)?))
}

/// Configuration of a complete speech-to-text duplex model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub lm: LmConfig,
    /// Absent for token-only models.
    pub encoder: Option<EncoderConfig>,
    pub adapter_k: usize,
    /// Adapter hidden width; defaults to the LM width.
    pub adapter_hidden: Option<usize>,
}

impl BundleConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        if let Some(e) = &self.encoder {
            e.validate()?;
        }
        if self.adapter_k == 0 {
            return Err(Error::Invalid("adapter_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Encoder, adapter and language model weights with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub cfg: BundleConfig,
    pub encoder: Option<EncoderWeights>,
    pub adapter: Option<AdapterWeights>,
    pub lm: LmWeights,
}

crate::impl_module!(ModelBundle { encoder, adapter, lm });

impl ModelBundle {
    pub fn init(cfg: &BundleConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init::seeded(seed);
        let lm = LmWeights::init(&cfg.lm, dtype, &mut rng)?;
        let (encoder, adapter) = match &cfg.encoder {
            Some(e) => (
                Some(EncoderWeights::init(e, dtype, &mut rng)),
                Some(AdapterWeights::init(cfg.adapter_k, e.d_model, cfg.adapter_hidden, cfg.lm.d_model, dtype, &mut rng)?),
            ),
            None => (None, None),
        };
        Ok(ModelBundle {
            cfg: cfg.clone(),
            encoder,
            adapter,
            lm,
        })
    }

    pub fn dtype(&self) -> DType {
        self.lm.dtype()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(path, &self.to_map(), Some(&serde_json::to_value(&self.cfg)?))
    }

    /// Rebuilds the skeleton from the stored config, then assigns every tensor.
    pub fn load(path: &Path) -> Result<Self> {
        let (map, meta) = load_tensors(path)?;
        Self::from_map(&map, meta)
    }

    pub fn from_map(map: &TensorMap, meta: Option<Value>) -> Result<Self> {
        let meta = meta.ok_or_else(|| Error::Format("checkpoint has no model configuration".into()))?;
        let cfg: BundleConfig = serde_json::from_value(meta)?;
        let dtype = map
            .values()
            .next()
            .map(|t| t.dtype())
            .ok_or_else(|| Error::Format("checkpoint holds no tensors".into()))?;
        let mut b = Self::init(&cfg, dtype, 0)?;
        let expected = b.num_params();
        b.assign(map)?;
        if map.len() != b.params().len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {} ({expected} elements)",
                map.len(),
                b.params().len()
            )));
        }
        b.lm.check_consistent()?;
        Ok(b)
    }
}
