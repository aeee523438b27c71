//! PK batch sampling: P distinct subjects, K sequences each.

use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub p: usize,
    pub k: usize,
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(CoreError::InvalidConfig(format!(
                "PK sampling needs P >= 2 and K >= 2 (got P={}, K={}); \
                 smaller batches admit no triplets",
                self.p, self.k
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

/// Draw one batch of sequence indices from a subject index (subject id plus
/// that subject's sequence indices, in stable dataset order).
///
/// P distinct subjects are drawn uniformly without replacement; for each, K
/// sequences without replacement when the subject has at least K, otherwise
/// K independent uniform draws (with replacement). Draw order is fixed:
/// the subject draw first, then each chosen subject's sequence draws in
/// subject-chosen order.
pub fn pk_sample_batch<R: Rng>(
    index: &[(u32, Vec<usize>)],
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<(u32, usize)>> {
    spec.validate()?;
    if index.len() < spec.p {
        return Err(CoreError::Data(format!(
            "dataset has {} subjects, batch needs P={}",
            index.len(),
            spec.p
        )));
    }
    if let Some((subject, _)) = index.iter().find(|(_, seqs)| seqs.is_empty()) {
        return Err(CoreError::Data(format!(
            "subject {subject} has no sequences"
        )));
    }
    let chosen = index_sample(rng, index.len(), spec.p);
    let mut batch = Vec::with_capacity(spec.batch_size());
    for si in chosen.iter() {
        let (subject, seqs) = &index[si];
        if seqs.len() >= spec.k {
            for pick in index_sample(rng, seqs.len(), spec.k).iter() {
                batch.push((*subject, seqs[pick]));
            }
        } else {
            for _ in 0..spec.k {
                let pick = rng.gen_range(0..seqs.len());
                batch.push((*subject, seqs[pick]));
            }
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn toy_index(subjects: usize, seqs_each: usize) -> Vec<(u32, Vec<usize>)> {
        (0..subjects)
            .map(|s| {
                (
                    s as u32,
                    (0..seqs_each).map(|i| s * seqs_each + i).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn batch_has_p_subjects_k_each() {
        let index = toy_index(6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = BatchSpec { p: 2, k: 2 };
        let batch = pk_sample_batch(&index, &spec, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for (s, _) in &batch {
            *counts.entry(*s).or_default() += 1;
        }
        assert_eq!(counts.len(), 2);
        assert!(counts.values().all(|&c| c == 2));
        // a subject's K draws are distinct when it has >= K sequences
        for (s, _) in &counts {
            let seqs: Vec<usize> = batch
                .iter()
                .filter(|(subj, _)| subj == s)
                .map(|(_, i)| *i)
                .collect();
            let mut dedup = seqs.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), seqs.len());
        }
    }

    #[test]
    fn short_subject_repeats_with_replacement() {
        let index = vec![(7u32, vec![42usize]), (8u32, vec![11usize, 12])];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = BatchSpec { p: 2, k: 4 };
        let batch = pk_sample_batch(&index, &spec, &mut rng).unwrap();
        let from7: Vec<usize> = batch
            .iter()
            .filter(|(s, _)| *s == 7)
            .map(|(_, i)| *i)
            .collect();
        assert_eq!(from7, vec![42, 42, 42, 42]);
    }

    #[test]
    fn too_few_subjects_is_an_error() {
        let index = toy_index(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = BatchSpec { p: 4, k: 2 };
        assert!(pk_sample_batch(&index, &spec, &mut rng).is_err());
        assert!(BatchSpec { p: 1, k: 2 }.validate().is_err());
        assert!(BatchSpec { p: 2, k: 1 }.validate().is_err());
    }

    /// Subject inclusion is uniform: over many batches, each of N subjects
    /// appears with frequency P/N, within 3-sigma binomial bounds.
    #[test]
    fn subject_inclusion_is_uniform() {
        let n_subjects = 10;
        let index = toy_index(n_subjects, 3);
        let spec = BatchSpec { p: 2, k: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trials = 10_000usize;
        let mut counts = vec![0usize; n_subjects];
        for _ in 0..trials {
            let batch = pk_sample_batch(&index, &spec, &mut rng).unwrap();
            let mut seen: Vec<u32> = batch.iter().map(|(s, _)| *s).collect();
            seen.sort_unstable();
            seen.dedup();
            for s in seen {
                counts[s as usize] += 1;
            }
        }
        let p_inc = spec.p as f64 / n_subjects as f64;
        let mean = trials as f64 * p_inc;
        let sigma = (trials as f64 * p_inc * (1.0 - p_inc)).sqrt();
        for (s, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - mean).abs();
            assert!(
                dev <= 3.0 * sigma,
                "subject {s} included {c} times, expected {mean:.0} +- {:.0}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let index = toy_index(8, 4);
        let spec = BatchSpec { p: 3, k: 2 };
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            assert_eq!(
                pk_sample_batch(&index, &spec, &mut a).unwrap(),
                pk_sample_batch(&index, &spec, &mut b).unwrap()
            );
        }
    }
}
