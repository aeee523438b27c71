//! Checkpoint codec: a human-readable manifest next to a raw little-endian
//! f32 blob.
//!
//! `<base>.manifest` lists metadata and one line per tensor (name, dtype,
//! shape, byte offset, element count); `<base>.bin` holds the payloads
//! back-to-back in manifest order. Round-trips are bit-exact because floats
//! never pass through decimal formatting.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

const MAGIC: &str = "gait-checkpoint v1";

pub fn manifest_path(base: &Path) -> PathBuf {
    let mut p = base.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

pub fn blob_path(base: &Path) -> PathBuf {
    let mut p = base.as_os_str().to_owned();
    p.push(".bin");
    PathBuf::from(p)
}

/// Write a checkpoint. Tensor order in the file follows the slice order, so
/// callers should pass a deterministically sorted list. Names and meta keys
/// must be whitespace-free.
pub fn save_checkpoint(
    base: &Path,
    meta: &[(String, String)],
    tensors: &[(String, &Tensor<f32>)],
) -> Result<()> {
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains(char::is_whitespace) {
            return Err(TensorError::InvalidArg {
                context: "save_checkpoint",
                what: format!("meta entry `{k}` contains whitespace"),
            });
        }
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(TensorError::InvalidArg {
                context: "save_checkpoint",
                what: format!("tensor name `{name}` must be non-empty and whitespace-free"),
            });
        }
        let shape = if t.rank() == 0 {
            "-".to_string()
        } else {
            t.shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x")
        };
        manifest.push_str(&format!(
            "tensor {name} f32 {shape} {} {}\n",
            blob.len(),
            t.len()
        ));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(manifest_path(base), manifest)?;
    let mut f = fs::File::create(blob_path(base))?;
    f.write_all(&blob)?;
    Ok(())
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl LoadedCheckpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn load_checkpoint(base: &Path) -> Result<LoadedCheckpoint> {
    let manifest = fs::read_to_string(manifest_path(base))?;
    let blob = fs::read(blob_path(base))?;
    let mut lines = manifest.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == MAGIC => {}
        Some((_, other)) => {
            return Err(TensorError::CheckpointFormat {
                line: 1,
                msg: format!("bad magic `{other}`, expected `{MAGIC}`"),
            })
        }
        None => {
            return Err(TensorError::CheckpointFormat {
                line: 1,
                msg: "empty manifest".into(),
            })
        }
    }
    let mut meta = Vec::new();
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("meta") => {
                let (Some(k), Some(v)) = (parts.next(), parts.next()) else {
                    return Err(TensorError::CheckpointFormat {
                        line: lineno,
                        msg: "meta line needs `meta <key> <value>`".into(),
                    });
                };
                meta.push((k.to_string(), v.to_string()));
            }
            Some("tensor") => {
                let (Some(name), Some(dtype), Some(shape), Some(off), Some(count)) = (
                    parts.next(),
                    parts.next(),
                    parts.next(),
                    parts.next(),
                    parts.next(),
                ) else {
                    return Err(TensorError::CheckpointFormat {
                        line: lineno,
                        msg: "tensor line needs `tensor <name> <dtype> <shape> <offset> <count>`"
                            .into(),
                    });
                };
                if dtype != "f32" {
                    return Err(TensorError::CheckpointFormat {
                        line: lineno,
                        msg: format!("unsupported dtype `{dtype}`"),
                    });
                }
                let shape: Vec<usize> = if shape == "-" {
                    vec![]
                } else {
                    shape
                        .split('x')
                        .map(|d| {
                            d.parse::<usize>().map_err(|_| TensorError::CheckpointFormat {
                                line: lineno,
                                msg: format!("bad shape component `{d}`"),
                            })
                        })
                        .collect::<Result<_>>()?
                };
                let off: usize = off.parse().map_err(|_| TensorError::CheckpointFormat {
                    line: lineno,
                    msg: format!("bad offset `{off}`"),
                })?;
                let count: usize = count.parse().map_err(|_| TensorError::CheckpointFormat {
                    line: lineno,
                    msg: format!("bad element count `{count}`"),
                })?;
                let expected: usize = shape.iter().product();
                if expected != count {
                    return Err(TensorError::CheckpointFormat {
                        line: lineno,
                        msg: format!("shape {shape:?} implies {expected} elements, line says {count}"),
                    });
                }
                let end = off + count * 4;
                if end > blob.len() {
                    return Err(TensorError::CheckpointFormat {
                        line: lineno,
                        msg: format!("tensor `{name}` spans bytes {off}..{end}, blob has {}", blob.len()),
                    });
                }
                if tensors.iter().any(|(n, _)| n == name) {
                    return Err(TensorError::CheckpointFormat {
                        line: lineno,
                        msg: format!("duplicate tensor `{name}`"),
                    });
                }
                let data: Vec<f32> = blob[off..end]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                tensors.push((name.to_string(), Tensor::new(shape, data)?));
            }
            Some(other) => {
                return Err(TensorError::CheckpointFormat {
                    line: lineno,
                    msg: format!("unknown record `{other}`"),
                })
            }
            None => unreachable!("empty lines filtered above"),
        }
    }
    Ok(LoadedCheckpoint { meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ckpt_test");
        // include values that decimal formatting would mangle
        let a = Tensor::from_fn(vec![3, 4], |i| (i as f32 * 0.1).sin() / 3.0);
        let b = Tensor::new(vec![2], vec![f32::MIN_POSITIVE, 1.0e-42]).unwrap();
        let meta = vec![
            ("seed".to_string(), "7".to_string()),
            ("iteration".to_string(), "123".to_string()),
        ];
        save_checkpoint(
            &base,
            &meta,
            &[("layer.w".to_string(), &a), ("layer.b".to_string(), &b)],
        )
        .unwrap();
        let loaded = load_checkpoint(&base).unwrap();
        assert_eq!(loaded.meta_value("seed"), Some("7"));
        let la = loaded.tensor("layer.w").unwrap();
        assert_eq!(la.shape(), a.shape());
        for (x, y) in la.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let lb = loaded.tensor("layer.b").unwrap();
        assert_eq!(lb.data()[1].to_bits(), 1.0e-42f32.to_bits());
    }

    #[test]
    fn corrupt_magic_is_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("bad");
        std::fs::write(manifest_path(&base), "something else\n").unwrap();
        std::fs::write(blob_path(&base), b"").unwrap();
        let err = load_checkpoint(&base).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn truncated_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("trunc");
        let a = Tensor::from_fn(vec![8], |i| i as f32);
        save_checkpoint(&base, &[], &[("w".to_string(), &a)]).unwrap();
        let blob = std::fs::read(blob_path(&base)).unwrap();
        std::fs::write(blob_path(&base), &blob[..blob.len() - 4]).unwrap();
        assert!(load_checkpoint(&base).is_err());
    }

    #[test]
    fn tensor_names_with_spaces_are_rejected_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("x");
        let a = Tensor::zeros(vec![1]);
        assert!(save_checkpoint(&base, &[], &[("bad name".to_string(), &a)]).is_err());
    }
}
