//! Checkpoint container: magic "SVQA", u32 LE version, then a count-prefixed
//! list of records (name length, UTF-8 name, rank, extents, f32 LE payload).
//! All integers are u32 little-endian; payloads are stored as f32.

use crate::array::Array;
use crate::error::{Result, SvqaError};
use crate::optim::ParamStore;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SVQA";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| SvqaError::Checkpoint("truncated file".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_arrays(path: &Path, arrays: &BTreeMap<String, Array>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, arrays.len() as u32);
    for (name, arr) in arrays {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, arr.shape.len() as u32);
        for &e in &arr.shape {
            put_u32(&mut buf, e as u32);
        }
        for &v in &arr.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    // Write then rename so readers never observe a half-written file.
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_arrays(path: &Path) -> Result<BTreeMap<String, Array>> {
    let mut f = std::fs::File::open(path).map_err(|_| {
        SvqaError::MissingCheckpoint(path.display().to_string())
    })?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| SvqaError::Checkpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(SvqaError::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(SvqaError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(&mut f)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut f)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes)
            .map_err(|_| SvqaError::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| SvqaError::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(&mut f)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut f)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        f.read_exact(&mut payload)
            .map_err(|_| SvqaError::Checkpoint(format!("truncated payload for {name}")))?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.insert(name, Array::new(shape, data));
    }
    Ok(out)
}

/// Save parameter values (optimizer state is not persisted) plus any extra
/// arrays such as serialized metadata.
pub fn save_store(path: &Path, store: &ParamStore, extra: &BTreeMap<String, Array>) -> Result<()> {
    let mut arrays: BTreeMap<String, Array> = extra.clone();
    for (name, p) in store.iter() {
        arrays.insert(name.clone(), p.value.clone());
    }
    write_arrays(path, &arrays)
}

/// Load every record into a fresh store. Records whose names start with "@"
/// are metadata and are returned separately.
pub fn load_store(path: &Path) -> Result<(ParamStore, BTreeMap<String, Array>)> {
    let arrays = read_arrays(path)?;
    let mut store = ParamStore::new();
    let mut meta = BTreeMap::new();
    for (name, arr) in arrays {
        if name.starts_with('@') {
            meta.insert(name, arr);
        } else {
            store.insert(&name, arr);
        }
    }
    Ok((store, meta))
}

/// Encode a UTF-8 string as an f32-per-byte array so it can ride inside the
/// container (used for the vocabulary).
pub fn string_to_array(s: &str) -> Array {
    Array::new(vec![s.len()], s.bytes().map(|b| b as f64).collect())
}

pub fn array_to_string(a: &Array) -> Result<String> {
    let bytes: Vec<u8> = a.data.iter().map(|&v| v as u8).collect();
    String::from_utf8(bytes).map_err(|_| SvqaError::Checkpoint("invalid string array".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.svqa");
        let mut rng = Rng::new(3);
        let mut arrays = BTreeMap::new();
        arrays.insert("a.w".to_string(), Array::uniform(&[3, 4], -1.0, 1.0, &mut rng));
        arrays.insert("b".to_string(), Array::scalar(0.5));
        write_arrays(&path, &arrays).unwrap();
        let back = read_arrays(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (k, v) in &arrays {
            let r = &back[k];
            assert_eq!(r.shape, v.shape);
            for (x, y) in r.data.iter().zip(&v.data) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.svqa");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(read_arrays(&path).is_err());
    }

    #[test]
    fn truncated_file_is_error_not_panic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.svqa");
        std::fs::write(&path, b"SVQA\x01\x00").unwrap();
        assert!(read_arrays(&path).is_err());
    }

    #[test]
    fn string_round_trip() {
        let a = string_to_array("tone chirp");
        assert_eq!(array_to_string(&a).unwrap(), "tone chirp");
    }
}
