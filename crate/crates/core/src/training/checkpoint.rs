//! Single-file binary checkpoints: a version tag, a JSON meta block (config
//! echo, counters, rng state), named parameter blocks, and optimizer moments.
//! Loading validates each block's shape by name.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use crate::error::{EcdiffError, Result};
use crate::tape::Arr;

const MAGIC: &[u8; 4] = b"ECKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Arr>,
    pub v: Vec<Arr>,
}

#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub meta_json: String,
    pub params: Vec<(String, Arr)>,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn write_arr(w: &mut impl Write, a: &Arr) -> Result<()> {
    w.write_all(&[a.ndim() as u8])?;
    for &d in a.shape() {
        write_u64(w, d as u64)?;
    }
    for &v in a.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_arr(r: &mut impl Read) -> Result<Arr> {
    let mut nd = [0u8; 1];
    r.read_exact(&mut nd)?;
    let mut dims = Vec::with_capacity(nd[0] as usize);
    for _ in 0..nd[0] {
        dims.push(read_u64(r)? as usize);
    }
    let len: usize = dims.iter().product();
    let mut data = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Arr::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| EcdiffError::Data(format!("corrupt checkpoint array: {}", e)))
}

fn write_adam(w: &mut impl Write, s: &AdamState) -> Result<()> {
    write_u64(w, s.step)?;
    write_u64(w, s.m.len() as u64)?;
    for a in &s.m {
        write_arr(w, a)?;
    }
    for a in &s.v {
        write_arr(w, a)?;
    }
    Ok(())
}

fn read_adam(r: &mut impl Read) -> Result<AdamState> {
    let step = read_u64(r)?;
    let count = read_u64(r)? as usize;
    let mut m = Vec::with_capacity(count);
    for _ in 0..count {
        m.push(read_arr(r)?);
    }
    let mut v = Vec::with_capacity(count);
    for _ in 0..count {
        v.push(read_arr(r)?);
    }
    Ok(AdamState { step, m, v })
}

pub fn save_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = data.meta_json.as_bytes();
    write_u64(&mut w, meta.len() as u64)?;
    w.write_all(meta)?;
    write_u64(&mut w, data.params.len() as u64)?;
    for (name, value) in &data.params {
        write_u64(&mut w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        write_arr(&mut w, value)?;
    }
    write_adam(&mut w, &data.adam_g)?;
    write_adam(&mut w, &data.adam_d)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        EcdiffError::Data(format!("cannot open checkpoint {}: {}", path.display(), e))
    })?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(EcdiffError::Data(format!("{}: not a checkpoint file", path.display())));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(EcdiffError::Data(format!(
            "checkpoint version {} unsupported (expected {})",
            version, VERSION
        )));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta_json = String::from_utf8(meta)
        .map_err(|_| EcdiffError::Data("checkpoint meta is not valid utf-8".into()))?;
    let n_params = read_u64(&mut r)? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = read_u64(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| EcdiffError::Data("checkpoint parameter name is not utf-8".into()))?;
        params.push((name, read_arr(&mut r)?));
    }
    let adam_g = read_adam(&mut r)?;
    let adam_d = read_adam(&mut r)?;
    Ok(CheckpointData { meta_json, params, adam_g, adam_d })
}
