//! Checkpoint files: a UTF-8 manifest followed by a flat little-endian
//! binary blob of f64 values in manifest order.
//!
//! Layout:
//!
//! ```text
//! retriever-checkpoint v1
//! [meta]
//! step 120
//! ...
//! [config]
//! d 64
//! ...
//! [params]
//! tokenizer.w f64 64x64 step 120
//! ...
//! [blob] <byte count>
//! <raw bytes: per parameter, value then adam-m then adam-v>
//! ```
//!
//! Save followed by load round-trips bit-exactly: f64 bit patterns pass
//! through untouched.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::optim::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "retriever-checkpoint v1";

#[derive(Debug)]
pub enum CheckpointError {
    Io(String),
    Parse { line: usize, reason: String },
    TruncatedBlob { expected: usize, got: usize },
    MissingParam { name: String },
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    ConfigMismatch { field: String, expected: String, got: String },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::Parse { line, reason } => {
                write!(f, "checkpoint manifest line {line}: {reason}")
            }
            CheckpointError::TruncatedBlob { expected, got } => {
                write!(f, "checkpoint blob truncated: expected {expected} bytes, got {got}")
            }
            CheckpointError::MissingParam { name } => {
                write!(f, "checkpoint missing parameter '{name}'")
            }
            CheckpointError::ShapeMismatch { name, expected, got } => write!(
                f,
                "checkpoint parameter '{name}' shape {got:?} does not match model shape {expected:?}"
            ),
            CheckpointError::ConfigMismatch { field, expected, got } => write!(
                f,
                "checkpoint config field '{field}' is '{got}' but runtime expects '{expected}'"
            ),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e.to_string())
    }
}

/// Everything a checkpoint carries besides the parameters.
#[derive(Debug, Default, Clone)]
pub struct CheckpointMeta {
    /// Free-form counters: global step, rng positions, schedule state.
    pub meta: Vec<(String, String)>,
    /// Echo of the model configuration the parameters belong to.
    pub config: Vec<(String, String)>,
}

impl CheckpointMeta {
    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    manifest.push_str("[meta]\n");
    for (k, v) in &meta.meta {
        manifest.push_str(&format!("{k} {v}\n"));
    }
    manifest.push_str("[config]\n");
    for (k, v) in &meta.config {
        manifest.push_str(&format!("{k} {v}\n"));
    }
    manifest.push_str("[params]\n");
    let mut blob_len = 0usize;
    for p in store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "{} f64 {} step {}\n",
            p.name,
            dims.join("x"),
            p.step
        ));
        blob_len += p.value.numel() * 3 * 8;
    }
    manifest.push_str(&format!("[blob] {blob_len}\n"));

    let mut bytes = Vec::with_capacity(manifest.len() + blob_len);
    bytes.extend_from_slice(manifest.as_bytes());
    for p in store.iter() {
        for &v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &p.m {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &p.v {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;

    // Split manifest (UTF-8 lines up to and including the [blob] line) from
    // the raw blob that follows.
    let mut offset = 0usize;
    let mut lineno = 0usize;
    let mut section = String::new();
    let mut meta = CheckpointMeta::default();
    struct Rec {
        name: String,
        shape: Vec<usize>,
        step: u64,
    }
    let mut records: Vec<Rec> = Vec::new();
    let mut blob_expected = None;

    while offset < bytes.len() {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| offset + p)
            .ok_or(CheckpointError::Parse {
                line: lineno + 1,
                reason: "unterminated manifest line".into(),
            })?;
        let line = std::str::from_utf8(&bytes[offset..end]).map_err(|_| {
            CheckpointError::Parse {
                line: lineno + 1,
                reason: "manifest is not UTF-8".into(),
            }
        })?;
        offset = end + 1;
        lineno += 1;

        if lineno == 1 {
            if line != MAGIC {
                return Err(CheckpointError::Parse {
                    line: 1,
                    reason: format!("bad magic '{line}'"),
                });
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("[blob]") {
            let n: usize = rest.trim().parse().map_err(|_| CheckpointError::Parse {
                line: lineno,
                reason: "bad blob length".into(),
            })?;
            blob_expected = Some(n);
            break;
        }
        if line.starts_with('[') {
            section = line.trim_matches(['[', ']']).to_string();
            continue;
        }
        match section.as_str() {
            "meta" | "config" => {
                let (k, v) = line.split_once(' ').ok_or(CheckpointError::Parse {
                    line: lineno,
                    reason: format!("expected 'key value', got '{line}'"),
                })?;
                let pair = (k.to_string(), v.to_string());
                if section == "meta" {
                    meta.meta.push(pair);
                } else {
                    meta.config.push(pair);
                }
            }
            "params" => {
                let parts: Vec<&str> = line.split(' ').collect();
                if parts.len() != 5 || parts[1] != "f64" || parts[3] != "step" {
                    return Err(CheckpointError::Parse {
                        line: lineno,
                        reason: format!("bad parameter record '{line}'"),
                    });
                }
                let shape: Result<Vec<usize>, _> =
                    parts[2].split('x').map(str::parse::<usize>).collect();
                let shape = shape.map_err(|_| CheckpointError::Parse {
                    line: lineno,
                    reason: format!("bad shape '{}'", parts[2]),
                })?;
                let step = parts[4].parse().map_err(|_| CheckpointError::Parse {
                    line: lineno,
                    reason: format!("bad step '{}'", parts[4]),
                })?;
                records.push(Rec {
                    name: parts[0].to_string(),
                    shape,
                    step,
                });
            }
            other => {
                return Err(CheckpointError::Parse {
                    line: lineno,
                    reason: format!("line outside known section '{other}'"),
                });
            }
        }
    }

    let blob_expected = blob_expected.ok_or(CheckpointError::Parse {
        line: lineno,
        reason: "missing [blob] section".into(),
    })?;
    let blob = &bytes[offset..];
    if blob.len() != blob_expected {
        return Err(CheckpointError::TruncatedBlob {
            expected: blob_expected,
            got: blob.len(),
        });
    }
    let want: usize = records
        .iter()
        .map(|r| r.shape.iter().product::<usize>() * 3 * 8)
        .sum();
    if want != blob_expected {
        return Err(CheckpointError::TruncatedBlob {
            expected: want,
            got: blob_expected,
        });
    }

    let mut store = ParamStore::new();
    let mut cur = 0usize;
    let read_f64s = |n: usize, cur: &mut usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            b.copy_from_slice(&blob[*cur..*cur + 8]);
            out.push(f64::from_le_bytes(b));
            *cur += 8;
        }
        out
    };
    for r in records {
        let n: usize = r.shape.iter().product();
        let value = read_f64s(n, &mut cur);
        let m = read_f64s(n, &mut cur);
        let v = read_f64s(n, &mut cur);
        let id = store
            .add(
                r.name.clone(),
                Tensor::new(r.shape, value).map_err(|e| CheckpointError::Parse {
                    line: 0,
                    reason: e.to_string(),
                })?,
            )
            .map_err(|e| CheckpointError::Parse {
                line: 0,
                reason: e.to_string(),
            })?;
        let p = store.get_mut(id);
        p.m = m;
        p.v = v;
        p.step = r.step;
    }
    Ok((store, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_store() -> ParamStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store
            .add("a.w", crate::tensor::randn(&[3, 4], 0.3, &mut rng))
            .unwrap();
        store
            .add("a.b", crate::tensor::randn(&[4], 0.3, &mut rng))
            .unwrap();
        let id = store
            .add("deep.block.k", crate::tensor::randn(&[2, 2, 3], 0.3, &mut rng))
            .unwrap();
        let p = store.get_mut(id);
        p.m = vec![0.125; 12];
        p.v = vec![1e-9; 12];
        p.step = 77;
        store
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        let meta = CheckpointMeta {
            meta: vec![("step".into(), "123".into())],
            config: vec![("d".into(), "64".into())],
        };
        save_checkpoint(&path, &store, &meta).unwrap();
        let (loaded, lmeta) = load_checkpoint(&path).unwrap();
        assert_eq!(lmeta.get_meta("step"), Some("123"));
        assert_eq!(lmeta.config, meta.config);
        assert_eq!(loaded.len(), store.len());
        for (a, b) in loaded.iter().zip(store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.step, b.step);
            assert!(a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.m.iter().zip(&b.m).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.v.iter().zip(&b.v).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_blob_is_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample_store(), &CheckpointMeta::default()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::TruncatedBlob { expected, got }) => {
                assert_eq!(got + 9, expected);
            }
            other => panic!("expected TruncatedBlob, got {other:?}"),
        }
    }
}
