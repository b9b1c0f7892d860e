//! Binary checkpoint format.
//!
//! ```text
//! "PQVT"                      4 bytes
//! version                     u32 LE
//! header length               u64 LE
//! header                      JSON (CheckpointHeader)
//! tensor count                u64 LE
//! per tensor:
//!   name length, name bytes   u64 LE, UTF-8
//!   rank                      u64 LE
//!   dims                      rank × u64 LE
//!   data                      row-major f32 LE
//! ```
//!
//! Model tensors use their canonical names; optimizer moments are stored as
//! `optim.m.<name>` and `optim.v.<name>`. Training keeps every value
//! representable in `f32`, so a save/load cycle is lossless.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::raster::ImageSpec;
use crate::signal::TimeGrid;
use crate::tensor::Tensor;
use crate::train::{EpochRecord, TrainConfig};
use crate::vit::{ModelParams, ViTConfig, VisionTransformer, Weights};

pub const MAGIC: &[u8; 4] = b"PQVT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub magic: String,
    pub version: u32,
    pub model: ViTConfig,
    pub train: TrainConfig,
    pub grid: TimeGrid,
    pub image: ImageSpec,
    /// Disturbance class id behind each model output.
    pub class_ids: Vec<u8>,
    pub epochs_completed: usize,
    pub optimizer_step: u64,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<VisionTransformer> {
        VisionTransformer::from_params(self.header.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);

        let mut tensors: Vec<(String, &Tensor)> = self.params.named().collect();
        if let Some(opt) = &self.optimizer {
            tensors.extend(opt.m.named().map(|(n, t)| (format!("optim.m.{n}"), t)));
            tensors.extend(opt.v.named().map(|(n, t)| (format!("optim.v.{n}"), t)));
        }
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing PQVT magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)?;
        header.model.validate()?;

        let count = r.u64()? as usize;
        let mut tensors = HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u64()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let data = r
                .take(4 * len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.insert(name, Tensor::new(dims, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let layers = header.model.layers;
        let names = ModelParams::init_names(layers);
        let gather = |prefix: &str, tensors: &mut HashMap<String, Tensor>| -> Result<Option<ModelParams>> {
            let mut items = Vec::with_capacity(names.len());
            for n in &names {
                match tensors.remove(&format!("{prefix}{n}")) {
                    Some(t) => items.push(t),
                    None if items.is_empty() => return Ok(None),
                    None => return Err(Error::Format(format!("tensor {prefix}{n} is missing"))),
                }
            }
            Weights::from_ordered(layers, items).map(Some)
        };
        let params = gather("", &mut tensors)?
            .ok_or_else(|| Error::Format("model tensors are missing".into()))?;
        params.check_shapes(&header.model)?;
        let m = gather("optim.m.", &mut tensors)?;
        let v = gather("optim.v.", &mut tensors)?;
        let optimizer = match (m, v) {
            (Some(m), Some(v)) => {
                m.check_shapes(&header.model)?;
                v.check_shapes(&header.model)?;
                Some(AdamState {
                    step: header.optimizer_step,
                    m,
                    v,
                })
            }
            (None, None) => None,
            _ => return Err(Error::Format("incomplete optimizer state".into())),
        };
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {name}")));
        }
        Ok(Checkpoint {
            header,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl ModelParams {
    fn init_names(layers: usize) -> Vec<String> {
        let dummy: Vec<()> = vec![(); 3 + 16 * layers + 4];
        Weights::from_ordered(layers, dummy).expect("layout").names()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
