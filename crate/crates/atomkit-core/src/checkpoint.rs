//! Parameter checkpoint file.
//!
//! Layout: magic `ATOMCKPT1`, then per named parameter:
//! name length (u32 LE), name bytes (UTF-8), rank (u32 LE), dims (u32 LE each),
//! values (f64 LE, row-major). Entries repeat until EOF. Round trips are
//! bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"ATOMCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not an ATOMCKPT1 file")]
    BadMagic,
    #[error("truncated checkpoint while reading {0}")]
    Truncated(String),
    #[error("invalid name bytes")]
    BadName,
}

/// Named parameter values, ordered by name.
pub type ParamMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

pub fn save<W: Write>(w: &mut W, params: &ParamMap) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    for (name, (shape, data)) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_to_path(path: &Path, params: &ParamMap) -> Result<(), CheckpointError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save(&mut f, params)?;
    f.flush()?;
    Ok(())
}

pub fn load<R: Read>(r: &mut R) -> Result<ParamMap, CheckpointError> {
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut params = ParamMap::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read_exact(&mut len4) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| CheckpointError::Truncated("parameter name".into()))?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName)?;
        r.read_exact(&mut len4)
            .map_err(|_| CheckpointError::Truncated(name.clone()))?;
        let rank = u32::from_le_bytes(len4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut len4)
                .map_err(|_| CheckpointError::Truncated(name.clone()))?;
            shape.push(u32::from_le_bytes(len4) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut f8 = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut f8)
                .map_err(|_| CheckpointError::Truncated(name.clone()))?;
            data.push(f64::from_le_bytes(f8));
        }
        params.insert(name, (shape, data));
    }
    Ok(params)
}

pub fn load_from_path(path: &Path) -> Result<ParamMap, CheckpointError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    load(&mut f)
}

/// Snapshot of named tensors into a checkpoint map.
pub fn collect(named: &[(String, Tensor)]) -> ParamMap {
    named
        .iter()
        .map(|(n, t)| (n.clone(), (t.shape().to_vec(), t.to_vec())))
        .collect()
}

/// Writes checkpoint values back into live tensors by name.
pub fn restore(named: &[(String, Tensor)], params: &ParamMap) -> Result<(), CheckpointError> {
    for (name, tensor) in named {
        let (shape, data) = params
            .get(name)
            .ok_or_else(|| CheckpointError::Truncated(format!("missing parameter {name}")))?;
        if shape != tensor.shape() {
            return Err(CheckpointError::Truncated(format!(
                "shape mismatch for {name}: file {:?} vs model {:?}",
                shape,
                tensor.shape()
            )));
        }
        tensor.set_data(data.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_exact() {
        let mut params = ParamMap::new();
        params.insert(
            "layer.0.wq".into(),
            (vec![2, 3], vec![1.5, -0.25, f64::MIN_POSITIVE, 1e300, -0.0, 3.141592653589793]),
        );
        params.insert("gamma".into(), (vec![], vec![0.3333333333333333]));
        let mut buf = Vec::new();
        save(&mut buf, &params).unwrap();
        assert_eq!(&buf[..9], MAGIC);
        let loaded = load(&mut buf.as_slice()).unwrap();
        assert_eq!(params.len(), loaded.len());
        for (k, (s, d)) in &params {
            let (ls, ld) = &loaded[k];
            assert_eq!(s, ls);
            for (a, b) in d.iter().zip(ld) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOTACKPT1".to_vec();
        assert!(matches!(load(&mut buf.as_slice()), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn rejects_truncation() {
        let mut params = ParamMap::new();
        params.insert("w".into(), (vec![4], vec![1.0, 2.0, 3.0, 4.0]));
        let mut buf = Vec::new();
        save(&mut buf, &params).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(matches!(load(&mut buf.as_slice()), Err(CheckpointError::Truncated(_))));
    }
}
