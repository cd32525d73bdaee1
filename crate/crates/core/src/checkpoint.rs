//! Model checkpoint format.
//!
//! Layout (all multi-byte integers little-endian):
//!
//! ```text
//! magic   b"FATW"
//! version u8 (= 1)
//! meta    u32 length, then JSON: {"config", "lambda_index", "stage", "dtype"}
//! count   u32 number of tensors
//! tensor  u16 name length, name (UTF-8)
//!         u8 rank, rank x u32 dims
//!         product(dims) IEEE floats (f32 or f64 per dtype), little-endian
//! ```
//!
//! Tensors are stored under the hierarchical parameter names the model
//! exposes; loading rebuilds the model from the embedded config and fills
//! every parameter by name, rejecting missing or misshapen entries.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CodecConfig, FatLic};
use crate::tensor::{Dtype, Element};

const MAGIC: &[u8; 4] = b"FATW";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: CodecConfig,
    lambda_index: usize,
    stage: u8,
    dtype: String,
}

pub fn save<E: Element>(path: &Path, model: &FatLic<E>, lambda_index: usize) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write(&mut f, model, lambda_index)
}

pub fn write<E: Element, W: Write>(w: &mut W, model: &FatLic<E>, lambda_index: usize) -> Result<()> {
    let meta = Meta {
        config: model.cfg.clone(),
        lambda_index,
        stage: model.stage,
        dtype: match E::DTYPE {
            Dtype::F32 => "f32".into(),
            Dtype::F64 => "f64".into(),
        },
    };
    let meta_json = serde_json::to_vec(&meta).expect("meta serializes");
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    w.write_all(&meta_json)?;
    let params = model.parameters();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in &params {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let data = t.data();
        match E::DTYPE {
            Dtype::F32 => {
                for &v in data.iter() {
                    w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
                }
            }
            Dtype::F64 => {
                for &v in data.iter() {
                    w.write_all(&v.as_f64().to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn load<E: Element>(path: &Path) -> Result<(FatLic<E>, usize)> {
    let mut f = std::fs::File::open(path)?;
    read(&mut f)
}

pub fn read<E: Element, R: Read>(r: &mut R) -> Result<(FatLic<E>, usize)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut ver = [0u8; 1];
    r.read_exact(&mut ver)?;
    if ver[0] != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", ver[0])));
    }
    let meta_len = read_u32(r)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)?;
    let meta: Meta = serde_json::from_slice(&meta_buf)
        .map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
    let want_dtype = match E::DTYPE {
        Dtype::F32 => "f32",
        Dtype::F64 => "f64",
    };
    if meta.dtype != want_dtype {
        return Err(Error::Format(format!(
            "checkpoint stores {} tensors, expected {want_dtype}",
            meta.dtype
        )));
    }

    let mut model = FatLic::<E>::new(&meta.config, 0)?;
    if meta.stage >= 2 {
        model.attach_tca(0)?;
        model.stage = meta.stage;
    }
    let params: std::collections::HashMap<String, _> = model.parameters().into_iter().collect();
    let mut filled = std::collections::HashSet::new();

    let count = read_u32(r)? as usize;
    for _ in 0..count {
        let mut nl = [0u8; 2];
        r.read_exact(&mut nl)?;
        let mut name_buf = vec![0u8; u16::from_le_bytes(nl) as usize];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("non-UTF-8 tensor name".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match E::DTYPE {
            Dtype::F32 => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf)?;
                for c in buf.chunks_exact(4) {
                    data.push(E::from_f64(
                        f32::from_le_bytes(c.try_into().unwrap()) as f64
                    ));
                }
            }
            Dtype::F64 => {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf)?;
                for c in buf.chunks_exact(8) {
                    data.push(E::from_f64(f64::from_le_bytes(c.try_into().unwrap())));
                }
            }
        }
        let target = params.get(&name).ok_or_else(|| {
            Error::Format(format!("checkpoint tensor {name} not present in model"))
        })?;
        if target.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor {name}: checkpoint shape {:?} vs model {:?}",
                shape,
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(&data);
        filled.insert(name);
    }
    if filled.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint fills {} of {} model tensors",
            filled.len(),
            params.len()
        )));
    }
    Ok((model, meta.lambda_index))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
