//! Parameter checkpoint format.
//!
//! Layout: the magic string `ACTK1`, then one record per parameter in name
//! order. Each record is the name length (u64 LE), the name bytes, the rank
//! (u64 LE), each dimension (u64 LE) and the data as f64 LE values.

use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 5] = b"ACTK1";

pub fn save_params<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    for (name, tensor) in store.iter() {
        w.write_u64::<LittleEndian>(name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        w.write_u64::<LittleEndian>(tensor.rank() as u64)?;
        for &d in tensor.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in tensor.data() {
            w.write_f64::<LittleEndian>(v.as_f64())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_params<S: Scalar>(path: &Path) -> Result<ParamStore<S>> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::MissingDependency(format!("checkpoint {}: {e}", path.display()))
    })?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::validation(format!(
            "{} is not a parameter checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut store = ParamStore::new();
    loop {
        let name_len = match r.read_u64::<LittleEndian>() {
            Ok(n) => n as usize,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::validation("checkpoint parameter name is not UTF-8"))?;
        let rank = r.read_u64::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(S::from_f64_lossy(r.read_f64::<LittleEndian>()?));
        }
        store.insert(&name, Tensor::new(shape, data)?);
    }
    Ok(store)
}
