//! Loader for the standard multi-view silhouette directory layout:
//! `root/<subject>/<condition-trial>/<view>/<frame>.png`, e.g.
//! `001/nm-01/090/0001.png`. Scanning is lazy (no image is decoded until
//! the index is materialized), so corpus shape checks stay cheap.

use std::fs;
use std::path::{Path, PathBuf};

use super::preprocess::{normalize_frame, OUT_H, OUT_W};
use super::{quantize, Condition, Dataset, SeqLabel, Sequence};
use crate::error::{CoreError, Result};

/// Views used by the 11-camera layout (18-degree spacing) and the
/// 14-camera layout (15-degree spacing over two quarter arcs).
fn known_view(v: u16) -> bool {
    let eleven = v <= 180 && v % 18 == 0;
    let fourteen = (v <= 90 || (180..=270).contains(&v)) && v % 15 == 0;
    eleven || fourteen
}

/// Minimum usable frames after preprocessing; shorter sequences are
/// dropped with a warning.
pub const MIN_FRAMES: usize = 15;

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub label: SeqLabel,
    pub dir: PathBuf,
    pub frame_files: Vec<PathBuf>,
}

/// A scanned corpus: labels and frame paths, nothing decoded yet.
#[derive(Debug)]
pub struct CasiaIndex {
    pub root: PathBuf,
    pub entries: Vec<IndexEntry>,
    /// Itemized structural gaps found while scanning (empty directories,
    /// skipped stray files); informational, not fatal.
    pub warnings: Vec<String>,
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(path)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> &str {
    p.file_name().and_then(|n| n.to_str()).unwrap_or("")
}

/// Walk the directory tree and index every sequence.
pub fn scan(root: &Path) -> Result<CasiaIndex> {
    if !root.is_dir() {
        return Err(CoreError::Data(format!(
            "corpus root {} is not a directory",
            root.display()
        )));
    }
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for subject_dir in sorted_dir(root)? {
        let name = file_name(&subject_dir);
        if !subject_dir.is_dir() {
            warnings.push(format!("skipping stray file {name}"));
            continue;
        }
        let subject: u32 = match name.parse() {
            Ok(s) => s,
            Err(_) => {
                warnings.push(format!("skipping non-numeric subject directory {name}"));
                continue;
            }
        };
        let mut subject_has_sequences = false;
        for cond_dir in sorted_dir(&subject_dir)? {
            let cname = file_name(&cond_dir).to_string();
            if !cond_dir.is_dir() {
                warnings.push(format!("{name}: skipping stray file {cname}"));
                continue;
            }
            let (cond, trial) = match cname.split_once('-') {
                Some((c, t)) => match (Condition::parse(c), t.parse::<u8>()) {
                    (Ok(c), Ok(t)) => (c, t),
                    _ => {
                        return Err(CoreError::Data(format!(
                            "{name}/{cname}: not a condition-trial directory"
                        )))
                    }
                },
                None => {
                    return Err(CoreError::Data(format!(
                        "{name}/{cname}: not a condition-trial directory"
                    )))
                }
            };
            let mut cond_has_views = false;
            for view_dir in sorted_dir(&cond_dir)? {
                let vname = file_name(&view_dir).to_string();
                if !view_dir.is_dir() {
                    warnings.push(format!("{name}/{cname}: skipping stray file {vname}"));
                    continue;
                }
                let view: u16 = vname.parse().map_err(|_| {
                    CoreError::Data(format!("{name}/{cname}/{vname}: not a view directory"))
                })?;
                if !known_view(view) {
                    return Err(CoreError::Data(format!(
                        "{name}/{cname}/{vname}: unknown view angle {view}"
                    )));
                }
                let frame_files: Vec<PathBuf> = sorted_dir(&view_dir)?
                    .into_iter()
                    .filter(|p| p.is_file())
                    .collect();
                if frame_files.is_empty() {
                    warnings.push(format!("{name}/{cname}/{vname}: no frame files"));
                    continue;
                }
                cond_has_views = true;
                subject_has_sequences = true;
                entries.push(IndexEntry {
                    label: SeqLabel {
                        subject,
                        condition: cond,
                        trial,
                        view,
                    },
                    dir: view_dir,
                    frame_files,
                });
            }
            if !cond_has_views {
                warnings.push(format!("{name}/{cname}: no view directories with frames"));
            }
        }
        if !subject_has_sequences {
            warnings.push(format!("{name}: no sequences"));
        }
    }
    entries.sort_by_key(|e| e.label);
    Ok(CasiaIndex {
        root: root.to_path_buf(),
        entries,
        warnings,
    })
}

impl CasiaIndex {
    pub fn sequence_count(&self) -> usize {
        self.entries.len()
    }

    /// Decode, binarize (foreground is any value above 127), normalize and
    /// quantize every sequence. Frames with no foreground are dropped;
    /// sequences left with fewer than [`MIN_FRAMES`] frames are skipped
    /// with a warning.
    pub fn materialize(&self) -> Result<Dataset> {
        let mut data = Dataset {
            h: OUT_H,
            w: OUT_W,
            sequences: Vec::new(),
        };
        for entry in &self.entries {
            let mut frames: Vec<u8> = Vec::new();
            let mut kept = 0usize;
            for path in &entry.frame_files {
                let img = image::open(path)?.into_luma8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                let px: Vec<f32> = img
                    .as_raw()
                    .iter()
                    .map(|&b| if b > 127 { 1.0 } else { 0.0 })
                    .collect();
                match normalize_frame(&px, h, w)? {
                    Some(norm) => {
                        frames.extend(norm.iter().map(|&v| quantize(v)));
                        kept += 1;
                    }
                    None => log::warn!("{}: empty silhouette, dropped", path.display()),
                }
            }
            if kept < MIN_FRAMES {
                log::warn!(
                    "{}: only {kept} usable frames (need {MIN_FRAMES}), sequence skipped",
                    entry.dir.display()
                );
                continue;
            }
            data.sequences.push(Sequence {
                label: entry.label,
                h: OUT_H,
                w: OUT_W,
                frames,
            });
        }
        Ok(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path) {
        fs::write(path, b"").unwrap();
    }

    /// Build the full 124-subject stub layout: 6 nm + 2 bg + 2 cl trials,
    /// 11 views each, one placeholder frame file per view directory.
    #[test]
    fn full_stub_layout_counts_13640_sequences() {
        let dir = tempfile::tempdir().unwrap();
        let conds: Vec<String> = (1..=6)
            .map(|t| format!("nm-{t:02}"))
            .chain((1..=2).map(|t| format!("bg-{t:02}")))
            .chain((1..=2).map(|t| format!("cl-{t:02}")))
            .collect();
        for subject in 1..=124 {
            for cond in &conds {
                for view in (0..=180).step_by(18) {
                    let d = dir
                        .path()
                        .join(format!("{subject:03}"))
                        .join(cond)
                        .join(format!("{view:03}"));
                    fs::create_dir_all(&d).unwrap();
                    touch(&d.join("0001.png"));
                }
            }
        }
        let index = scan(dir.path()).unwrap();
        assert_eq!(index.sequence_count(), 13_640);
        assert!(index.warnings.is_empty(), "{:?}", index.warnings);
    }

    #[test]
    fn unknown_view_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("001").join("nm-01").join("017");
        fs::create_dir_all(&d).unwrap();
        touch(&d.join("0001.png"));
        match scan(dir.path()) {
            Err(CoreError::Data(msg)) => assert!(msg.contains("unknown view"), "{msg}"),
            other => panic!("expected an unknown-view error, got {other:?}"),
        }
    }

    #[test]
    fn gaps_are_itemized_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("001").join("nm-01").join("000")).unwrap();
        fs::create_dir_all(dir.path().join("002")).unwrap();
        touch(&dir.path().join("notes.txt"));
        let index = scan(dir.path()).unwrap();
        assert_eq!(index.sequence_count(), 0);
        let text = index.warnings.join("\n");
        assert!(text.contains("001/nm-01/000: no frame files"), "{text}");
        assert!(text.contains("002: no sequences"), "{text}");
        assert!(text.contains("notes.txt"), "{text}");
    }

    #[test]
    fn fourteen_view_naming_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        for view in [0u16, 15, 30, 45, 60, 75, 90, 180, 195, 210, 225, 240, 255, 270] {
            let d = dir
                .path()
                .join("001")
                .join("nm-01")
                .join(format!("{view:03}"));
            fs::create_dir_all(&d).unwrap();
            touch(&d.join("0001.png"));
        }
        let index = scan(dir.path()).unwrap();
        assert_eq!(index.sequence_count(), 14);
    }

    #[test]
    fn materialize_decodes_normalizes_and_applies_the_frame_floor() {
        let dir = tempfile::tempdir().unwrap();
        let make_seq = |subject: &str, cond: &str, view: &str, frames: usize| {
            let d = dir.path().join(subject).join(cond).join(view);
            fs::create_dir_all(&d).unwrap();
            for f in 0..frames {
                let img = image::GrayImage::from_fn(50, 60, |x, y| {
                    let inside = (10..40).contains(&x) && (5..55).contains(&y);
                    image::Luma([if inside { 255 } else { 0 }])
                });
                img.save(d.join(format!("{f:04}.png"))).unwrap();
            }
        };
        make_seq("001", "nm-01", "090", 16);
        make_seq("001", "nm-02", "090", 5); // below the floor, skipped
        let index = scan(dir.path()).unwrap();
        assert_eq!(index.sequence_count(), 2);
        let data = index.materialize().unwrap();
        assert_eq!(data.sequences.len(), 1);
        let seq = &data.sequences[0];
        assert_eq!(seq.label.trial, 1);
        assert_eq!(seq.n(), 16);
        assert_eq!((seq.h, seq.w), (OUT_H, OUT_W));
        assert!(seq.frames.iter().any(|&b| b > 0));
    }
}
