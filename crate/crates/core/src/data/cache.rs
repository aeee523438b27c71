//! On-disk sequence cache: one compact binary file per sequence (little-
//! endian frame count, then the packed 8-bit frames) plus a text manifest
//! listing geometry, labels and a caller-supplied content hash. A cache
//! whose stored hash does not match the expected one is treated as stale.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Condition, Dataset, SeqLabel, Sequence};
use crate::error::{CoreError, Result};

const MANIFEST: &str = "manifest.txt";
const MAGIC: &str = "gait-data-cache v1";

fn seq_file_name(label: &SeqLabel) -> String {
    format!(
        "{:03}_{}-{:02}_{:03}.bin",
        label.subject,
        label.condition.name(),
        label.trial,
        label.view
    )
}

/// Write `data` under `dir` (created if needed), tagged with `hash`.
pub fn save(dir: &Path, data: &Dataset, hash: &str) -> Result<()> {
    if hash.is_empty() || hash.contains(char::is_whitespace) {
        return Err(CoreError::Data(
            "cache content hash must be a non-empty token".into(),
        ));
    }
    let seq_dir = dir.join("seq");
    fs::create_dir_all(&seq_dir)?;
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("hash {hash}\n"));
    manifest.push_str(&format!("geometry {} {}\n", data.h, data.w));
    for seq in &data.sequences {
        let name = seq_file_name(&seq.label);
        let mut bytes = Vec::with_capacity(4 + seq.frames.len());
        bytes.extend_from_slice(&(seq.n() as u32).to_le_bytes());
        bytes.extend_from_slice(&seq.frames);
        let mut f = fs::File::create(seq_dir.join(&name))?;
        f.write_all(&bytes)?;
        manifest.push_str(&format!(
            "seq {} {} {} {} {} {}\n",
            seq.label.subject,
            seq.label.condition.name(),
            seq.label.trial,
            seq.label.view,
            seq.n(),
            name
        ));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// The stored hash, or `None` when no readable cache exists at `dir`.
pub fn stored_hash(dir: &Path) -> Option<String> {
    let text = fs::read_to_string(dir.join(MANIFEST)).ok()?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return None;
    }
    lines
        .next()?
        .strip_prefix("hash ")
        .map(|h| h.trim().to_string())
}

/// Load a cache previously written by [`save`], verifying `expected_hash`.
pub fn load(dir: &Path, expected_hash: &str) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(CoreError::Data(format!(
            "{} is not a sequence cache manifest",
            manifest_path.display()
        )));
    }
    let hash_line = lines
        .next()
        .and_then(|l| l.strip_prefix("hash "))
        .ok_or_else(|| CoreError::Data("cache manifest is missing its hash line".into()))?;
    if hash_line.trim() != expected_hash {
        return Err(CoreError::Data(format!(
            "cache at {} is stale: stored hash {} != expected {}",
            dir.display(),
            hash_line.trim(),
            expected_hash
        )));
    }
    let geom = lines
        .next()
        .and_then(|l| l.strip_prefix("geometry "))
        .ok_or_else(|| CoreError::Data("cache manifest is missing its geometry line".into()))?;
    let mut it = geom.split_whitespace();
    let (h, w): (usize, usize) = match (it.next(), it.next()) {
        (Some(h), Some(w)) => (
            h.parse().map_err(|_| bad_line(geom))?,
            w.parse().map_err(|_| bad_line(geom))?,
        ),
        _ => return Err(bad_line(geom)),
    };

    let mut data = Dataset {
        h,
        w,
        sequences: Vec::new(),
    };
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rest = line
            .strip_prefix("seq ")
            .ok_or_else(|| bad_line(line))?;
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(bad_line(line));
        }
        let label = SeqLabel {
            subject: fields[0].parse().map_err(|_| bad_line(line))?,
            condition: Condition::parse(fields[1])?,
            trial: fields[2].parse().map_err(|_| bad_line(line))?,
            view: fields[3].parse().map_err(|_| bad_line(line))?,
        };
        let n: usize = fields[4].parse().map_err(|_| bad_line(line))?;
        let path = dir.join("seq").join(fields[5]);
        let bytes = fs::read(&path)?;
        if bytes.len() < 4 {
            return Err(CoreError::Data(format!(
                "{} is truncated",
                path.display()
            )));
        }
        let stored_n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let frames = bytes[4..].to_vec();
        if stored_n != n || frames.len() != n * h * w {
            return Err(CoreError::Data(format!(
                "{} holds {} frames / {} bytes, manifest expects {} frames of {}x{}",
                path.display(),
                stored_n,
                frames.len(),
                n,
                h,
                w
            )));
        }
        data.sequences.push(Sequence {
            label,
            h,
            w,
            frames,
        });
    }
    Ok(data)
}

fn bad_line(line: &str) -> CoreError {
    CoreError::Data(format!("malformed cache manifest line: `{line}`"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthSpec};

    fn tiny() -> Dataset {
        generate(&SynthSpec {
            ids: 2,
            views: vec![0, 90],
            frames: 4,
            seed: 3,
            nm_trials: 1,
            bg_trials: 1,
            cl_trials: 1,
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny();
        save(dir.path(), &data, "abc123").unwrap();
        assert_eq!(stored_hash(dir.path()).as_deref(), Some("abc123"));
        let back = load(dir.path(), "abc123").unwrap();
        assert_eq!(back.h, data.h);
        assert_eq!(back.sequences.len(), data.sequences.len());
        for (a, b) in data.sequences.iter().zip(&back.sequences) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.frames, b.frames);
        }
    }

    #[test]
    fn stale_hash_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &tiny(), "abc123").unwrap();
        match load(dir.path(), "other") {
            Err(CoreError::Data(msg)) => assert!(msg.contains("stale"), "{msg}"),
            other => panic!("expected a stale-cache error, got {other:?}"),
        }
    }

    #[test]
    fn missing_cache_reports_no_hash() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(stored_hash(dir.path()), None);
    }

    #[test]
    fn truncated_sequence_file_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny();
        save(dir.path(), &data, "abc123").unwrap();
        let victim = dir.path().join("seq").join(seq_file_name(&data.sequences[0].label));
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(dir.path(), "abc123").is_err());
    }
}
