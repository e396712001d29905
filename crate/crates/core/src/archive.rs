//! Binary file formats for arrays and embedding sets.
//!
//! Arrays go to one file each: magic `AVJP`, version, rank, dims, then the
//! elements as little-endian `f32` in row-major order. Embedding archives
//! hold a `(count, dim)` header followed by `(id length, id bytes, dim
//! floats)` records. Values are `f64` in memory and `f32` on disk; reading
//! widens losslessly, so write → read → write reproduces the bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};

use crate::error::{Error, Result};

pub(crate) const ARRAY_MAGIC: &[u8; 4] = b"AVJP";
pub(crate) const ARRAY_VERSION: u32 = 1;

/// Little-endian primitives shared by the binary formats.
pub(crate) mod wire {
    use std::io::{Read, Write};

    pub fn put_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
        w.write_all(&v.to_le_bytes())
    }

    pub fn put_f32<W: Write>(w: &mut W, v: f32) -> std::io::Result<()> {
        w.write_all(&v.to_le_bytes())
    }

    pub fn put_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
        w.write_all(&v.to_le_bytes())
    }

    pub fn get_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn get_f32<R: Read>(r: &mut R) -> std::io::Result<f32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    pub fn get_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::io(path.display().to_string(), source)
}

/// Writes one array in the `AVJP` format, narrowing elements to `f32`.
pub fn write_array(path: &Path, array: ArrayViewD<'_, f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let go = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(ARRAY_MAGIC)?;
        wire::put_u32(w, ARRAY_VERSION)?;
        wire::put_u32(w, array.ndim() as u32)?;
        for &d in array.shape() {
            wire::put_u32(w, d as u32)?;
        }
        for &x in array.iter() {
            wire::put_f32(w, x as f32)?;
        }
        w.flush()
    };
    go(&mut w).map_err(|e| io_err(path, e))
}

/// Reads one `AVJP` array file, widening elements to `f64`.
pub fn read_array(path: &Path) -> Result<ArrayD<f64>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != ARRAY_MAGIC {
        return Err(Error::parse(
            path.display().to_string(),
            "bad array magic".to_string(),
        ));
    }
    let version = wire::get_u32(&mut r).map_err(|e| io_err(path, e))?;
    if version != ARRAY_VERSION {
        return Err(Error::parse(
            path.display().to_string(),
            format!("unsupported array version {version}"),
        ));
    }
    let rank = wire::get_u32(&mut r).map_err(|e| io_err(path, e))? as usize;
    if rank > 8 {
        return Err(Error::parse(
            path.display().to_string(),
            format!("implausible array rank {rank}"),
        ));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(wire::get_u32(&mut r).map_err(|e| io_err(path, e))? as usize);
    }
    let len: usize = dims.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(wire::get_f32(&mut r).map_err(|e| io_err(path, e))? as f64);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| io_err(path, e))? != 0 {
        return Err(Error::parse(
            path.display().to_string(),
            "trailing bytes after array data".to_string(),
        ));
    }
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| {
        Error::parse(path.display().to_string(), format!("shape error: {e}"))
    })
}

/// One named embedding, id plus vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Writes an embedding archive: `count u32, dim u32`, then per record
/// `id_len u32, id bytes, dim f32`. All records must share one dimension.
pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let dim = match records.first() {
        Some(r) => r.vector.len(),
        None => {
            return Err(Error::contract(
                "embedding archive requires at least one record",
            ))
        }
    };
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::contract(format!(
                "embedding '{}' has dim {}, archive dim is {dim}",
                r.id,
                r.vector.len()
            )));
        }
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let go = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        wire::put_u32(w, records.len() as u32)?;
        wire::put_u32(w, dim as u32)?;
        for r in records {
            let bytes = r.id.as_bytes();
            wire::put_u32(w, bytes.len() as u32)?;
            w.write_all(bytes)?;
            for &x in &r.vector {
                wire::put_f32(w, x as f32)?;
            }
        }
        w.flush()
    };
    go(&mut w).map_err(|e| io_err(path, e))
}

/// Reads an embedding archive written by [`write_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let count = wire::get_u32(&mut r).map_err(|e| io_err(path, e))? as usize;
    let dim = wire::get_u32(&mut r).map_err(|e| io_err(path, e))? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = wire::get_u32(&mut r).map_err(|e| io_err(path, e))? as usize;
        let mut id_bytes = vec![0u8; id_len];
        r.read_exact(&mut id_bytes).map_err(|e| io_err(path, e))?;
        let id = String::from_utf8(id_bytes).map_err(|e| {
            Error::parse(path.display().to_string(), format!("bad utf-8 id: {e}"))
        })?;
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            vector.push(wire::get_f32(&mut r).map_err(|e| io_err(path, e))? as f64);
        }
        out.push(EmbeddingRecord { id, vector });
    }
    Ok(out)
}
