//! Binary checkpoint format.
//!
//! Layout: magic `HANC`, format version u32, tensor count u32, then per
//! tensor: name length u32 + UTF-8 name + rank u32 + extents u32[] +
//! little-endian float32 values. Running batch-norm statistics and Adam
//! moments are stored under their reserved `!` name prefixes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::store::{ParamStore, ADAM_STEP_KEY};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HANC";
const VERSION: u32 = 1;

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let step_tensor = Tensor::row(vec![store.step_count() as f32]);
    let entries: Vec<(&str, &Tensor)> = store
        .params()
        .chain(store.aux_entries())
        .chain(std::iter::once((ADAM_STEP_KEY, &step_tensor)))
        .collect();
    w.write_all(&(entries.len() as u32).to_le_bytes())?;

    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
        for &extent in &tensor.shape {
            w.write_all(&(extent as u32).to_le_bytes())?;
        }
        for &v in &tensor.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::data("checkpoint tensor name is not UTF-8".to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = vec![0.0f32; numel];
        for v in values.iter_mut() {
            let mut buf = [0u8; 4];
            read_exact(&mut r, &mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        let tensor = Tensor::new(shape, values).map_err(|e| Error::data(e.to_string()))?;
        store.insert_raw(name, tensor)?;
    }
    Ok(store)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::data("truncated checkpoint payload".to_string())
        } else {
            Error::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::store::AdamConfig;

    #[test]
    fn checkpoint_round_trips_params_moments_and_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.hanc");

        let mut store = ParamStore::new();
        store.create("a.w", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        store.create("a.b", Tensor::row(vec![0.5, -0.5, 0.25])).unwrap();
        store.ensure_bn_stats("head", 3).unwrap();
        store.accumulate_grad("a.w", &[0.1; 6]).unwrap();
        store.accumulate_grad("a.b", &[0.2; 3]).unwrap();
        store.adam_step(&AdamConfig::default()).unwrap();

        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.step_count(), 1);
        assert_eq!(loaded.get("a.w").unwrap().values, store.get("a.w").unwrap().values);
        assert_eq!(
            loaded.get("!adam_m!a.b").unwrap().values,
            store.get("!adam_m!a.b").unwrap().values
        );
        assert_eq!(
            loaded.get("!bn_var!head").unwrap().values,
            store.get("!bn_var!head").unwrap().values
        );

        // Saving the loaded store reproduces the file byte for byte.
        let path2 = dir.path().join("ck2.hanc");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_and_truncation_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hanc");

        std::fs::write(&path, b"NOPE").unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let mut store = ParamStore::new();
        store.create("p", Tensor::row(vec![1.0, 2.0])).unwrap();
        save_checkpoint(&store, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
