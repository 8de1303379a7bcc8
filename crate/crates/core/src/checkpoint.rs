//! DMNS1 tensor container: magic, record count, then named f64 tensors, all
//! little-endian.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 5] = b"DMNS1";

/// Longest name or rank accepted when reading, to reject garbage early.
const MAX_NAME: u32 = 4096;
const MAX_RANK: u32 = 16;

pub fn write_records<W: Write>(mut w: W, records: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 5] = read_exact(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Corrupt(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let count = u64::from_le_bytes(read_exact(&mut r, "record count")?);
    let mut out = Vec::new();
    for i in 0..count {
        let len = u32::from_le_bytes(read_exact(&mut r, "name length")?);
        if len > MAX_NAME {
            return Err(Error::Corrupt(format!("record {i} name length {len}")));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name).map_err(|_| Error::Corrupt(format!("record {i} name truncated")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Corrupt(format!("record {i} name is not UTF-8")))?;
        let rank = u32::from_le_bytes(read_exact(&mut r, "rank")?);
        if rank > MAX_RANK {
            return Err(Error::Corrupt(format!("record `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(&mut r, "dimension")?) as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| Error::Corrupt(format!("record `{name}` shape overflows")))?;
        let mut bytes = Vec::new();
        (&mut r).take(numel as u64 * 8).read_to_end(&mut bytes)?;
        if bytes.len() != numel * 8 {
            return Err(Error::Corrupt(format!("record `{name}` data truncated")));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    let file = fs::File::create(path)?;
    write_records(io::BufWriter::new(file), records)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = fs::File::open(path)?;
    read_records(io::BufReader::new(file))
}
