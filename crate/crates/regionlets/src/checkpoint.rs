//! Checkpoint format: a text header `REGIONLET-CKPT v1 <n_tensors>` followed
//! by, per tensor: name length, name bytes, rank, extents (all u64
//! little-endian) and the raw f64 little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &str = "REGIONLET-CKPT v1";

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(String, &Tensor)]) -> Result<()> {
    writeln!(w, "{} {}", MAGIC, entries.len())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut header = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
        if header.len() > 256 {
            return Err(Error::Checkpoint("header line too long".into()));
        }
    }
    let header = String::from_utf8(header)
        .map_err(|_| Error::Checkpoint("header is not valid UTF-8".into()))?;
    let rest = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Checkpoint(format!("bad magic in `{header}`")))?;
    let n: usize = rest
        .trim()
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad tensor count in `{header}`")))?;

    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u64(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::Checkpoint(format!("name length {name_len} too large")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::Checkpoint("truncated tensor name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not valid UTF-8".into()))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let volume: usize = shape.iter().product();
        let mut data = vec![0.0f64; volume];
        for v in data.iter_mut() {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated payload for `{name}`")))?;
            *v = f64::from_le_bytes(buf);
        }
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(entries)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated u64 field".into()))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn save(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let file = File::create(path)?;
    write_checkpoint(BufWriter::new(file), entries)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path)?;
    read_checkpoint(BufReader::new(file))
}
