//! Self-describing binary checkpoints: magic, format version, spec JSON,
//! creation seed, then the named f32 tensors in sorted order. Round-trips
//! bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use super::{BackboneSpec, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"STRUDLCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    let spec_json = serde_json::to_vec(&params.spec)
        .map_err(|e| Error::Format(format!("spec serialization failed: {e}")))?;
    w.write_u32::<LittleEndian>(spec_json.len() as u32)?;
    w.write_all(&spec_json)?;
    w.write_u64::<LittleEndian>(params.seed)?;
    w.write_u32::<LittleEndian>(params.num_tensors() as u32)?;
    for (name, tensor) in params.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(tensor.ndim() as u32)?;
        for &d in tensor.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in tensor.iter() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{path:?} is not a checkpoint file")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {version} does not match supported {FORMAT_VERSION}"
        )));
    }
    let spec_len = r.read_u32::<LittleEndian>()? as usize;
    let mut spec_json = vec![0u8; spec_len];
    r.read_exact(&mut spec_json)?;
    let spec: BackboneSpec = serde_json::from_slice(&spec_json)
        .map_err(|e| Error::Format(format!("bad spec in checkpoint: {e}")))?;
    let seed = r.read_u64::<LittleEndian>()?;
    let count = r.read_u32::<LittleEndian>()? as usize;

    let mut params = super::init_model(&spec, seed)?;
    let expected: Vec<String> = params.tensor_names().map(|s| s.to_string()).collect();
    if expected.len() != count {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, spec implies {}",
            expected.len()
        )));
    }
    for expected_name in expected {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("non-utf8 tensor name".to_string()))?;
        if name != expected_name {
            return Err(Error::Format(format!(
                "tensor order mismatch: found '{name}', expected '{expected_name}'"
            )));
        }
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0f32; len];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Format(format!("bad tensor shape in checkpoint: {e}")))?;
        if arr.shape() != params.tensor(&name).shape() {
            return Err(Error::Format(format!(
                "tensor '{name}' shape {:?} does not match spec {:?}",
                arr.shape(),
                params.tensor(&name).shape()
            )));
        }
        *params.tensor_mut(&name) = arr;
    }
    Ok(params)
}
