//! Binary checkpoint: magic, version, a JSON header describing named
//! tensors, then raw little-endian `f32` payloads (parameters, followed by
//! optimizer moments when present). Values round-trip bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, CosineSchedule, ParamStore, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"EDUCKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    step: usize,
    config: AdamWConfig,
    schedule: CosineSchedule,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
}

pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ParamStore<f32>,
    optimizer: Option<&AdamW<f32>>,
) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        optimizer: optimizer.map(|o| OptimizerEntry {
            step: o.step,
            config: o.config,
            schedule: o.schedule,
        }),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + header.len() + params.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    let mut put = |t: &Tensor<f32>| {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    };
    for (_, t) in params.iter() {
        put(t);
    }
    if let Some(o) = optimizer {
        o.first_moment.iter().for_each(&mut put);
        o.second_moment.iter().for_each(&mut put);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Invalid(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut cursor = 20 + hlen;
    let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let raw = bytes
            .get(cursor..cursor + 4 * n)
            .ok_or_else(|| bad("truncated payload"))?;
        cursor += 4 * n;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape.to_vec(), data)
    };
    let mut params = ParamStore::new();
    for e in &header.tensors {
        let t = take(&e.shape)?;
        params.insert(e.name.clone(), t);
    }
    let optimizer = match header.optimizer {
        None => None,
        Some(o) => {
            let mut opt = AdamW::new(&params, o.config, o.schedule);
            opt.step = o.step;
            for i in 0..header.tensors.len() {
                opt.first_moment[i] = take(&header.tensors[i].shape)?;
            }
            for i in 0..header.tensors.len() {
                opt.second_moment[i] = take(&header.tensors[i].shape)?;
            }
            Some(opt)
        }
    };
    if cursor != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint { params, optimizer })
}
