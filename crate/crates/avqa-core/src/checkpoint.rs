//! Binary checkpoint format for named f64 tensors.
//!
//! Layout: the ASCII magic `ANTF1`, then one record per tensor:
//!
//! ```text
//! name_len: u64 LE | name: UTF-8 bytes | rank: u64 LE | dims: rank x u64 LE | data: numel x f64 LE
//! ```
//!
//! Records run until end of file. Values round-trip bit-exactly, which the
//! determinism guarantees elsewhere in the workspace depend on.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::param::Param;

pub const MAGIC: &[u8; 5] = b"ANTF1";

/// Hard cap on name length and rank while parsing, so a corrupt header
/// cannot request an absurd allocation.
const MAX_NAME_LEN: u64 = 4096;
const MAX_RANK: u64 = 8;

/// Writes tensors in the given order.
pub fn save(path: &Path, tensors: &[&Param]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for t in tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(CoreError::Format(format!("duplicate tensor name `{}`", t.name)));
        }
    }
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.shape.len() as u64).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        if t.data.len() != t.numel() {
            return Err(CoreError::Format(format!(
                "tensor `{}`: data length {} does not match shape {:?}",
                t.name,
                t.data.len(),
                t.shape
            )));
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads every record, in file order.
pub fn load(path: &Path) -> Result<Vec<Param>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| CoreError::Format("file shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(CoreError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }

    let mut out = Vec::new();
    let mut names = BTreeSet::new();
    loop {
        let mut len_buf = [0u8; 8];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u64::from_le_bytes(len_buf);
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(CoreError::Format(format!("implausible name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len as usize];
        read_exact_or_format(&mut r, &mut name_buf, "tensor name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| CoreError::Format("tensor name is not UTF-8".into()))?;
        if !names.insert(name.clone()) {
            return Err(CoreError::Format(format!("duplicate tensor name `{name}`")));
        }

        read_exact_or_format(&mut r, &mut len_buf, "rank")?;
        let rank = u64::from_le_bytes(len_buf);
        if rank == 0 || rank > MAX_RANK {
            return Err(CoreError::Format(format!("implausible rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            read_exact_or_format(&mut r, &mut len_buf, "dimension")?;
            let d = u64::from_le_bytes(len_buf);
            if d == 0 {
                return Err(CoreError::Format(format!("zero dimension in `{name}`")));
            }
            numel = numel.checked_mul(d).ok_or_else(|| {
                CoreError::Format(format!("shape overflow in `{name}`"))
            })?;
            shape.push(d as usize);
        }

        let mut data = Vec::with_capacity(numel as usize);
        let mut val_buf = [0u8; 8];
        for _ in 0..numel {
            read_exact_or_format(&mut r, &mut val_buf, "tensor data")?;
            data.push(f64::from_le_bytes(val_buf));
        }
        out.push(Param { name, shape, data });
    }
    Ok(out)
}

fn read_exact_or_format(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| CoreError::Format(format!("truncated while reading {what}")))
}
