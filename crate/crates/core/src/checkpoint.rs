//! Checkpoint directories: a text manifest plus one binary blob.
//!
//! ```text
//! manifest.txt   ctxlora-checkpoint 1
//!                meta <key> <value>
//!                tensor <name> f64 <rows>x<cols> <byte offset> <sha256>
//! tensors.bin    little-endian f64 data, tensors back to back
//! ```
//!
//! Loading re-hashes every tensor and refuses the directory on any mismatch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "tensors.bin";
const HEADER: &str = "ctxlora-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Matrix>,
}

fn to_bytes(m: &Matrix) -> Vec<u8> {
    m.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save(dir: &Path, meta: &BTreeMap<String, String>, tensors: &[(String, &Matrix)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{HEADER}\n");
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::checkpoint(dir, format!("unserializable meta entry {k:?}")));
        }
        let _ = writeln!(manifest, "meta {k} {v}");
    }
    let mut blob = Vec::new();
    for (name, m) in tensors {
        if name.contains(char::is_whitespace) {
            return Err(Error::checkpoint(dir, format!("tensor name {name:?} has whitespace")));
        }
        let bytes = to_bytes(m);
        let _ = writeln!(
            manifest,
            "tensor {name} f64 {}x{} {} {}",
            m.rows(),
            m.cols(),
            blob.len(),
            sha256_hex(&bytes)
        );
        blob.extend_from_slice(&bytes);
    }
    fs::write(dir.join(BLOB), &blob)?;
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join(MANIFEST))
            .map_err(|e| Error::checkpoint(dir, format!("cannot read manifest: {e}")))?;
        let blob = fs::read(dir.join(BLOB))
            .map_err(|e| Error::checkpoint(dir, format!("cannot read tensor blob: {e}")))?;
        let mut lines = manifest.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::checkpoint(dir, "unrecognised manifest header"));
        }
        let mut meta = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let bad = |m: &str| Error::checkpoint(dir, format!("manifest line {lineno}: {m}"));
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let Some(rest) = line.strip_prefix("tensor ") else {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(bad("unknown record"));
            };
            let fields: Vec<&str> = rest.split(' ').collect();
            let [name, dtype, shape, offset, hash] = fields[..] else {
                return Err(bad("expected: name dtype shape offset sha256"));
            };
            if dtype != "f64" {
                return Err(bad(&format!("unsupported dtype {dtype}")));
            }
            let (rows, cols) = shape
                .split_once('x')
                .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
                .ok_or_else(|| bad("malformed shape"))?;
            let offset: usize = offset.parse().map_err(|_| bad("malformed offset"))?;
            let len = rows * cols * 8;
            let bytes = blob
                .get(offset..offset + len)
                .ok_or_else(|| bad(&format!("tensor {name} extends past end of blob")))?;
            let actual = sha256_hex(bytes);
            if actual != hash {
                return Err(Error::checkpoint(
                    dir,
                    format!("hash mismatch for tensor {name}: manifest {hash}, data {actual}"),
                ));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            tensors.insert(name.to_string(), Matrix::from_vec(rows, cols, data));
        }
        Ok(Self { meta, tensors })
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint has no tensor {name}")))
    }

    pub fn meta_parse<T: FromStr>(&self, key: &str) -> Option<T> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (BTreeMap<String, String>, Matrix, Matrix) {
        let mut meta = BTreeMap::new();
        meta.insert("step".into(), "12".into());
        meta.insert("note".into(), "two words".into());
        let a = Matrix::from_vec(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]);
        let b = Matrix::from_vec(1, 3, vec![0.1, 0.2, 0.3]);
        (meta, a, b)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (meta, a, b) = sample();
        save(dir.path(), &meta, &[("a".into(), &a), ("w.b".into(), &b)]).unwrap();
        let ck = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(ck.meta, meta);
        let la = ck.tensor("a").unwrap();
        assert!(la.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(ck.tensor("w.b").unwrap(), &b);
        assert_eq!(ck.meta_parse::<u64>("step"), Some(12));
    }

    #[test]
    fn corrupted_blob_is_refused_with_hash_detail() {
        let dir = tempfile::tempdir().unwrap();
        let (meta, a, b) = sample();
        save(dir.path(), &meta, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let mut blob = fs::read(dir.path().join(BLOB)).unwrap();
        blob[40] ^= 0xff;
        fs::write(dir.path().join(BLOB), blob).unwrap();
        let err = Checkpoint::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("hash mismatch for tensor b"), "{err}");
    }

    #[test]
    fn missing_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Checkpoint::load(&dir.path().join("nope")).is_err());
    }
}
