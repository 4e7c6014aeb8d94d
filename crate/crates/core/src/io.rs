//! Parameter checkpoint format.
//!
//! Layout: magic `SPHNN001`, u32 version, u32 entry count, then a manifest of
//! (name, shape, payload byte offset) records, then the f32 payload section.
//! Everything little-endian. Payloads are stored as f32 regardless of the
//! in-memory scalar type.

use crate::error::{Error, Result};
use crate::mat::Scalar;
use crate::nn::Params;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SPHNN001";

pub fn write_checkpoint<S: Scalar>(path: impl AsRef<Path>, params: &impl Params<S>) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    params.visit("model", &mut |name, shape, data| {
        entries.push((
            name.to_string(),
            shape.to_vec(),
            data.iter().map(|v| v.to_f64v() as f32).collect(),
        ));
    });
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for (name, shape, data) in &entries {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Format("parameter name too long".into()));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        offset += (data.len() * 4) as u64;
    }
    for (_, _, data) in &entries {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads the manifest: (name, shape, payload offset).
pub fn read_manifest(r: &mut impl Read) -> Result<Vec<(String, Vec<usize>, u64)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let name_len = u16::from_le_bytes(b2) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Format("non-utf8 parameter name".into()))?;
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let ndim = b1[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut b4)?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        entries.push((name, shape, u64::from_le_bytes(b8)));
    }
    Ok(entries)
}

/// Loads a checkpoint into an existing parameter tree; every stored entry
/// must match a visited tensor (and vice versa) by name and shape.
pub fn read_checkpoint_into<S: Scalar>(
    path: impl AsRef<Path>,
    params: &mut impl Params<S>,
) -> Result<()> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let entries = read_manifest(&mut r)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut by_name: HashMap<String, (Vec<usize>, u64)> = entries
        .into_iter()
        .map(|(n, s, o)| (n, (s, o)))
        .collect();
    let mut err: Option<Error> = None;
    params.visit_mut("model", &mut |name, shape, data| {
        if err.is_some() {
            return;
        }
        match by_name.remove(name) {
            None => err = Some(Error::Format(format!("checkpoint missing {name}"))),
            Some((stored_shape, offset)) => {
                if stored_shape != shape {
                    err = Some(Error::Format(format!(
                        "shape mismatch for {name}: stored {stored_shape:?}, expected {shape:?}"
                    )));
                    return;
                }
                let need = data.len() * 4;
                let lo = offset as usize;
                if lo + need > payload.len() {
                    err = Some(Error::Format(format!("payload overrun for {name}")));
                    return;
                }
                for (i, chunk) in payload[lo..lo + need].chunks_exact(4).enumerate() {
                    let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                    data[i] = S::from_f64(v as f64);
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::Format(format!(
            "checkpoint has unexpected entry {name}"
        )));
    }
    Ok(())
}

/// Manifest of a checkpoint file, for describe-style commands.
pub fn describe_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<usize>)>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(read_manifest(&mut r)?
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{assign_params, flatten_params, FfnParams};

    #[test]
    fn checkpoint_roundtrip() {
        let dir = std::env::temp_dir().join("sphdepth_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ffn.ckpt");
        let mut p = FfnParams::<f64>::zeros(3, 2);
        let vals: Vec<f64> = (0..flatten_params(&p).len())
            .map(|i| (i as f64) * 0.25 - 2.0)
            .collect();
        assign_params(&mut p, &vals);
        write_checkpoint(&path, &p).unwrap();

        let mut q = FfnParams::<f32>::zeros(3, 2);
        read_checkpoint_into(&path, &mut q).unwrap();
        let back = flatten_params(&q);
        for (a, b) in vals.iter().zip(back.iter()) {
            assert!((*a as f32 - *b).abs() < 1e-6);
        }

        let names = describe_checkpoint(&path).unwrap();
        assert_eq!(names.len(), 4);

        // Shape mismatch must be rejected.
        let mut wrong = FfnParams::<f32>::zeros(4, 2);
        assert!(read_checkpoint_into(&path, &mut wrong).is_err());
        std::fs::remove_file(&path).unwrap();
    }
}
