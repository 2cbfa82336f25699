//! Checkpoint file: `"CLCK"`, version `u32`, parameter count `u32`, then per
//! parameter `name_len u32`, UTF-8 name, `ndims u32`, dims `u32 * ndims` and
//! row-major `f64` data. Everything little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CLCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_entries(w: &mut impl Write, entries: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_entries(r: &mut impl Read) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::MalformedCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::MalformedCheckpoint("name is not UTF-8".into()))?;
        let ndims = read_u32(r)? as usize;
        let shape = (0..ndims)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

pub fn store_entries(store: &ParamStore) -> Vec<NamedTensor> {
    store
        .iter()
        .map(|(_, p)| NamedTensor {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect()
}

/// Copies matching entries into `store`. Every store parameter must be
/// present with the same shape; extra entries are returned to the caller.
pub fn restore(store: &mut ParamStore, entries: Vec<NamedTensor>) -> Result<Vec<NamedTensor>> {
    let mut extra = Vec::new();
    let mut seen = vec![false; store.len()];
    let mut problems = Vec::new();
    for e in entries {
        let Some(id) = store.id(&e.name) else {
            extra.push(e);
            continue;
        };
        let want = store.value(id).shape();
        if e.shape != want {
            seen[id.index()] = true;
            problems.push(format!(
                "{}: checkpoint shape {:?}, model shape {:?}",
                e.name, e.shape, want
            ));
            continue;
        }
        *store.value_mut(id) = Tensor::new(want[0], want[1], e.data)?;
        seen[id.index()] = true;
    }
    for (id, p) in store.iter() {
        if !seen[id.index()] {
            problems.push(format!("{}: missing from checkpoint", p.name));
        }
    }
    if !problems.is_empty() {
        return Err(Error::CheckpointIncompatible(problems));
    }
    Ok(extra)
}

pub fn save(path: &Path, entries: &[NamedTensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_entries(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut r = BufReader::new(File::open(path)?);
    read_entries(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_survive_a_round_trip_bit_exactly() {
        let entries = vec![
            NamedTensor {
                name: "a.w".into(),
                shape: vec![2, 3],
                data: vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25],
            },
            NamedTensor {
                name: "meta".into(),
                shape: vec![4],
                data: vec![64.0, 4.0, 4.0, 256.0],
            },
        ];
        let mut buf = Vec::new();
        write_entries(&mut buf, &entries).unwrap();
        assert_eq!(&buf[..4], b"CLCK");
        let back = read_entries(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in entries.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
    }

    #[test]
    fn restore_reports_each_mismatch() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::zeros(2, 2));
        store.add("y", Tensor::zeros(1, 3));
        let entries = vec![NamedTensor {
            name: "x".into(),
            shape: vec![3, 2],
            data: vec![0.0; 6],
        }];
        match restore(&mut store, entries) {
            Err(Error::CheckpointIncompatible(p)) => {
                assert_eq!(p.len(), 2, "{p:?}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
