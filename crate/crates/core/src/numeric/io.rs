//! Tensor directory format: one raw little-endian file per tensor plus a
//! `manifest.json` mapping name → `{shape, dtype, file}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

pub type Manifest = BTreeMap<String, TensorEntry>;

pub fn write_tensors(dir: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::new();
    for (name, t) in tensors {
        let file = format!("{name}.bin");
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        manifest.insert(
            name.clone(),
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                file,
            },
        );
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_tensors(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut out = BTreeMap::new();
    for (name, entry) in manifest {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let values: Vec<f64> = match entry.dtype.as_str() {
            "f64" => {
                if bytes.len() % 8 != 0 {
                    return Err(Error::format(&path, "length is not a multiple of 8"));
                }
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect()
            }
            "f32" => {
                if bytes.len() % 4 != 0 {
                    return Err(Error::format(&path, "length is not a multiple of 4"));
                }
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                    .collect()
            }
            other => return Err(Error::format(&path, format!("unsupported dtype {other}"))),
        };
        let t = Tensor::new(entry.shape.clone(), values)
            .map_err(|_| Error::format(&path, format!("payload does not match shape {:?}", entry.shape)))?;
        out.insert(name, t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = BTreeMap::new();
        m.insert("a.w".to_string(), Tensor::from_fn(&[2, 3], |i| (i as f64).sqrt() / 7.0));
        m.insert("b".to_string(), Tensor::scalar(-0.0));
        write_tensors(dir.path(), &m).unwrap();
        let back = read_tensors(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (k, v) in &m {
            let w = &back[k];
            assert_eq!(v.shape(), w.shape());
            for (x, y) in v.data().iter().zip(w.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = BTreeMap::new();
        m.insert("t".to_string(), Tensor::zeros(&[4]));
        write_tensors(dir.path(), &m).unwrap();
        fs::write(dir.path().join("t.bin"), [0u8; 16]).unwrap();
        assert!(read_tensors(dir.path()).is_err());
    }
}
