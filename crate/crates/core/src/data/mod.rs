//! Silhouette datasets: labels, in-memory storage (8-bit quantized frames),
//! train/test splitting, frame sampling, plus the loaders (synthetic
//! renderer, directory layout) and the binary cache.

pub mod cache;
pub mod casia;
pub mod preprocess;
pub mod synth;

use gaitrm_tensor::Mode;
use rand::Rng;

use crate::error::{CoreError, Result};

/// Walking condition tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    Nm,
    Bg,
    Cl,
}

impl Condition {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "nm" => Self::Nm,
            "bg" => Self::Bg,
            "cl" => Self::Cl,
            other => {
                return Err(CoreError::Data(format!(
                    "unknown condition tag `{other}` (expected nm, bg or cl)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Nm => "nm",
            Self::Bg => "bg",
            Self::Cl => "cl",
        }
    }

    pub const ALL: [Condition; 3] = [Condition::Nm, Condition::Bg, Condition::Cl];
}

/// Identity of one silhouette sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SeqLabel {
    pub subject: u32,
    pub condition: Condition,
    pub trial: u8,
    pub view: u16,
}

/// One sequence; frames quantized to 8 bits (`v * 255` rounded), row-major
/// `n * h * w`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub label: SeqLabel,
    pub h: usize,
    pub w: usize,
    pub frames: Vec<u8>,
}

impl Sequence {
    pub fn n(&self) -> usize {
        self.frames.len() / (self.h * self.w)
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let plane = self.h * self.w;
        &self.frames[i * plane..(i + 1) * plane]
    }

    /// Dequantize one frame into `out` (values in [0, 1]).
    pub fn frame_f32(&self, i: usize, out: &mut [f32]) {
        for (o, &b) in out.iter_mut().zip(self.frame(i)) {
            *o = b as f32 / 255.0;
        }
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A set of sequences with uniform frame geometry.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.sequences.iter().map(|q| q.label.subject).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Sorted distinct views.
    pub fn views(&self) -> Vec<u16> {
        let mut v: Vec<u16> = self.sequences.iter().map(|q| q.label.view).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Subject id -> sequence indices (dataset order), subjects sorted.
    pub fn subject_index(&self) -> Vec<(u32, Vec<usize>)> {
        let mut out: Vec<(u32, Vec<usize>)> = Vec::new();
        for subject in self.subjects() {
            let seqs = self
                .sequences
                .iter()
                .enumerate()
                .filter(|(_, q)| q.label.subject == subject)
                .map(|(i, _)| i)
                .collect();
            out.push((subject, seqs));
        }
        out
    }

    /// Split by subject: the first `train_subjects` (sorted ascending) train,
    /// the rest test. The two sides are disjoint by construction.
    pub fn split(&self, train_subjects: usize) -> Result<(Dataset, Dataset)> {
        let subjects = self.subjects();
        if train_subjects == 0 || train_subjects >= subjects.len() {
            return Err(CoreError::Data(format!(
                "cannot reserve {train_subjects} train subjects out of {}",
                subjects.len()
            )));
        }
        let cut = subjects[train_subjects];
        let mut train = Dataset {
            h: self.h,
            w: self.w,
            sequences: Vec::new(),
        };
        let mut test = train.clone();
        for seq in &self.sequences {
            if seq.label.subject < cut {
                train.sequences.push(seq.clone());
            } else {
                test.sequences.push(seq.clone());
            }
        }
        Ok((train, test))
    }
}

/// Named split presets: training subject counts for the three standard
/// partitions of a 124-subject corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPreset {
    St,
    Mt,
    Lt,
}

impl SplitPreset {
    pub fn train_subjects(&self) -> usize {
        match self {
            Self::St => 24,
            Self::Mt => 62,
            Self::Lt => 74,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "st" => Self::St,
            "mt" => Self::Mt,
            "lt" => Self::Lt,
            other => {
                return Err(CoreError::InvalidConfig(format!(
                    "unknown split `{other}` (expected st, mt or lt)"
                )))
            }
        })
    }
}

/// Choose the frame indices one forward pass consumes.
///
/// Train mode: a contiguous window of `count` frames at a uniformly random
/// start (one draw); sequences shorter than `count` are cycled from frame 0
/// to the requested length (no draw). Eval mode: every frame, no draws.
pub fn sample_frames<R: Rng>(
    n: usize,
    count: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(CoreError::Data("cannot sample from an empty sequence".into()));
    }
    if count == 0 {
        return Err(CoreError::InvalidConfig("frame count must be >= 1".into()));
    }
    Ok(match mode {
        Mode::Eval => (0..n).collect(),
        Mode::Train => {
            if n >= count {
                let start = rng.gen_range(0..=(n - count));
                (start..start + count).collect()
            } else {
                (0..count).map(|i| i % n).collect()
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(subject: u32, cond: Condition, trial: u8, view: u16) -> Sequence {
        Sequence {
            label: SeqLabel {
                subject,
                condition: cond,
                trial,
                view,
            },
            h: 2,
            w: 2,
            frames: vec![0; 4 * 3],
        }
    }

    #[test]
    fn split_is_disjoint_and_ordered() {
        let mut d = Dataset {
            h: 2,
            w: 2,
            sequences: Vec::new(),
        };
        for s in [5u32, 1, 9, 3] {
            d.sequences.push(seq(s, Condition::Nm, 1, 0));
        }
        let (train, test) = d.split(2).unwrap();
        assert_eq!(train.subjects(), vec![1, 3]);
        assert_eq!(test.subjects(), vec![5, 9]);
        assert!(d.split(0).is_err());
        assert!(d.split(4).is_err());
    }

    #[test]
    fn train_window_is_contiguous() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let idx = sample_frames(100, 30, Mode::Train, &mut rng).unwrap();
            assert_eq!(idx.len(), 30);
            assert!(idx.windows(2).all(|p| p[1] == p[0] + 1));
            assert!(*idx.last().unwrap() < 100);
        }
    }

    #[test]
    fn short_sequence_cycles_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let before = rng.clone();
        let idx = sample_frames(10, 30, Mode::Train, &mut rng).unwrap();
        let want: Vec<usize> = (0..30).map(|i| i % 10).collect();
        assert_eq!(idx, want);
        // no randomness consumed on the cycle path
        assert_eq!(rng, before);
    }

    #[test]
    fn eval_takes_every_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let before = rng.clone();
        let idx = sample_frames(17, 30, Mode::Eval, &mut rng).unwrap();
        assert_eq!(idx, (0..17).collect::<Vec<_>>());
        assert_eq!(rng, before);
    }

    #[test]
    fn quantize_roundtrip_is_within_half_step() {
        for i in 0..=255u32 {
            let v = i as f32 / 255.0;
            assert_eq!(quantize(v), i as u8);
        }
        assert_eq!(quantize(-0.5), 0);
        assert_eq!(quantize(1.5), 255);
    }
}
