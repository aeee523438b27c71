//! Cross-view identification protocol: embed every sequence, then for each
//! (condition, probe view, gallery view) cell rank gallery sequences by
//! Euclidean distance and score rank-1 accuracy. The probe's own view is
//! always excluded from the gallery.

use std::fmt::Write as _;

use gaitrm_tensor::Tensor;

use crate::data::{Condition, Dataset, SeqLabel};
use crate::error::{CoreError, Result};
use crate::model::{embed_sequence, ModelConfig, ModelParams};

/// Embedded sequences: `data` holds row-major descriptors, one per label.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub labels: Vec<SeqLabel>,
    pub data: Vec<f32>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            labels: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, label: SeqLabel, descriptor: &[f32]) -> Result<()> {
        if descriptor.len() != self.dim {
            return Err(CoreError::Data(format!(
                "descriptor has {} values, set is {}-dimensional",
                descriptor.len(),
                self.dim
            )));
        }
        if descriptor.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Data(format!(
                "non-finite descriptor for subject {} view {}",
                label.subject, label.view
            )));
        }
        self.labels.push(label);
        self.data.extend_from_slice(descriptor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Euclidean distance accumulated in f64.
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Run every sequence of `data` through the model in eval mode.
pub fn embed_dataset(
    cfg: &ModelConfig,
    params: &mut ModelParams<f32>,
    data: &Dataset,
) -> Result<EmbeddingSet> {
    let plan = cfg.plan()?;
    let mut set = EmbeddingSet::new(plan.descriptor_dim);
    for seq in &data.sequences {
        let plane = seq.h * seq.w;
        let mut frames = vec![0.0f32; seq.n() * plane];
        for i in 0..seq.n() {
            seq.frame_f32(i, &mut frames[i * plane..(i + 1) * plane]);
        }
        let clip = Tensor::new(vec![seq.n(), seq.h, seq.w], frames)?;
        let descriptor = embed_sequence(cfg, params, &clip)?;
        set.push(seq.label, &descriptor)?;
    }
    Ok(set)
}

/// Which (condition, trial) pairs form the gallery and which form each
/// probe set.
#[derive(Debug, Clone)]
pub struct ProtocolSpec {
    pub gallery: Vec<(Condition, u8)>,
    /// Probe trials per reported condition, in report order.
    pub probes: Vec<(Condition, Vec<u8>)>,
    /// When true, probes whose subject has no gallery entry in a cell are
    /// scored as misses; when false (default) they are skipped.
    pub include_unmatched_probes: bool,
}

impl ProtocolSpec {
    /// Gallery nm trials 1-4; probes nm 5-6, bg 1-2, cl 1-2.
    pub fn standard() -> Self {
        Self {
            gallery: (1..=4).map(|t| (Condition::Nm, t)).collect(),
            probes: vec![
                (Condition::Nm, vec![5, 6]),
                (Condition::Bg, vec![1, 2]),
                (Condition::Cl, vec![1, 2]),
            ],
            include_unmatched_probes: false,
        }
    }

    /// Minimal two-trial protocol: gallery nm trial 1, probe nm trial 0.
    pub fn two_trial() -> Self {
        Self {
            gallery: vec![(Condition::Nm, 1)],
            probes: vec![(Condition::Nm, vec![0])],
            include_unmatched_probes: false,
        }
    }
}

/// Rank-1 accuracies for one probe condition. `cells[p][g]` is the cell
/// for probe view index `p` against gallery view index `g`; the diagonal
/// (same view) is structurally `None`, as are cells with no scoreable
/// probes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMatrix {
    pub condition: Condition,
    pub views: Vec<u16>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl ConditionMatrix {
    /// Mean over gallery views per probe view (diagonal excluded).
    pub fn probe_view_means(&self) -> Vec<Option<f64>> {
        self.cells
            .iter()
            .enumerate()
            .map(|(p, row)| {
                let vals: Vec<f64> = row
                    .iter()
                    .enumerate()
                    .filter(|&(g, _)| g != p)
                    .filter_map(|(_, c)| *c)
                    .collect();
                if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                }
            })
            .collect()
    }

    /// Mean of the probe-view means present.
    pub fn mean(&self) -> Option<f64> {
        let means: Vec<f64> = self.probe_view_means().into_iter().flatten().collect();
        if means.is_empty() {
            None
        } else {
            Some(means.iter().sum::<f64>() / means.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolResult {
    pub matrices: Vec<ConditionMatrix>,
}

impl ProtocolResult {
    pub fn condition_mean(&self, c: Condition) -> Option<f64> {
        self.matrices
            .iter()
            .find(|m| m.condition == c)
            .and_then(|m| m.mean())
    }

    /// Mean of the per-condition means present.
    pub fn grand_mean(&self) -> Option<f64> {
        let means: Vec<f64> = self.matrices.iter().filter_map(|m| m.mean()).collect();
        if means.is_empty() {
            None
        } else {
            Some(means.iter().sum::<f64>() / means.len() as f64)
        }
    }
}

/// Score the full protocol. Ties on distance go to the gallery sequence
/// that appears first in the set; empty cells are reported as `None` with
/// a warning.
pub fn rank1_matrix(set: &EmbeddingSet, spec: &ProtocolSpec) -> Result<ProtocolResult> {
    if set.is_empty() {
        return Err(CoreError::Data("cannot evaluate an empty embedding set".into()));
    }
    let mut views: Vec<u16> = set.labels.iter().map(|l| l.view).collect();
    views.sort_unstable();
    views.dedup();

    let in_gallery = |l: &SeqLabel| spec.gallery.contains(&(l.condition, l.trial));

    let mut matrices = Vec::new();
    for (cond, trials) in &spec.probes {
        let mut cells = vec![vec![None; views.len()]; views.len()];
        for (pi, &pv) in views.iter().enumerate() {
            let probe_idx: Vec<usize> = (0..set.len())
                .filter(|&i| {
                    let l = &set.labels[i];
                    l.condition == *cond && trials.contains(&l.trial) && l.view == pv
                })
                .collect();
            for (gi, &gv) in views.iter().enumerate() {
                if gv == pv {
                    continue;
                }
                let gallery_idx: Vec<usize> = (0..set.len())
                    .filter(|&i| {
                        let l = &set.labels[i];
                        in_gallery(l) && l.view == gv
                    })
                    .collect();
                if gallery_idx.is_empty() {
                    log::warn!(
                        "{} probes at view {pv}: no gallery sequences at view {gv}",
                        cond.name()
                    );
                    continue;
                }
                let mut hits = 0usize;
                let mut counted = 0usize;
                for &p in &probe_idx {
                    let subject = set.labels[p].subject;
                    let has_match = gallery_idx
                        .iter()
                        .any(|&g| set.labels[g].subject == subject);
                    if !has_match && !spec.include_unmatched_probes {
                        continue;
                    }
                    counted += 1;
                    let mut best = f64::INFINITY;
                    let mut best_g = usize::MAX;
                    for &g in &gallery_idx {
                        let d = euclidean(set.descriptor(p), set.descriptor(g));
                        if d < best {
                            best = d;
                            best_g = g;
                        }
                    }
                    if has_match && set.labels[best_g].subject == subject {
                        hits += 1;
                    }
                }
                if counted == 0 {
                    log::warn!(
                        "{} view {pv} vs gallery view {gv}: no scoreable probes",
                        cond.name()
                    );
                    continue;
                }
                cells[pi][gi] = Some(hits as f64 / counted as f64);
            }
        }
        matrices.push(ConditionMatrix {
            condition: *cond,
            views: views.clone(),
            cells,
        });
    }
    Ok(ProtocolResult { matrices })
}

/// One row per cell: `split,condition,probe_view,gallery_view,rank1`.
/// Unscored cells — the same-view diagonal, and cells with no scoreable
/// probes — keep their row but leave the `rank1` field empty, so the row
/// count is always conditions x probe views x gallery views.
pub fn cells_to_csv(result: &ProtocolResult, split: &str) -> String {
    let mut out = String::from("split,condition,probe_view,gallery_view,rank1\n");
    for m in &result.matrices {
        for (pi, row) in m.cells.iter().enumerate() {
            for (gi, cell) in row.iter().enumerate() {
                let _ = write!(
                    out,
                    "{split},{},{},{},",
                    m.condition.name(),
                    m.views[pi],
                    m.views[gi],
                );
                if let Some(acc) = cell {
                    let _ = write!(out, "{acc}");
                }
                out.push('\n');
            }
        }
    }
    out
}

/// Parse a CSV produced by [`cells_to_csv`]. Returns the split name and
/// the reconstructed result; views are inferred from the rows. Leading `#`
/// lines (provenance comments written by the CLI) are skipped.
pub fn cells_from_csv(text: &str) -> Result<(String, ProtocolResult)> {
    let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
    let header = lines.next().unwrap_or("");
    if header != "split,condition,probe_view,gallery_view,rank1" {
        return Err(CoreError::Data(format!("unexpected CSV header `{header}`")));
    }
    let mut rows: Vec<(String, Condition, u16, u16, Option<f64>)> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(CoreError::Data(format!("malformed CSV row `{line}`")));
        }
        let bad = |what: &str| CoreError::Data(format!("bad {what} in CSV row `{line}`"));
        let rank1 = if f[4].is_empty() {
            None
        } else {
            Some(f[4].parse().map_err(|_| bad("rank1 value"))?)
        };
        rows.push((
            f[0].to_string(),
            Condition::parse(f[1])?,
            f[2].parse().map_err(|_| bad("probe view"))?,
            f[3].parse().map_err(|_| bad("gallery view"))?,
            rank1,
        ));
    }
    if rows.is_empty() {
        return Err(CoreError::Data("CSV holds no cells".into()));
    }
    let split = rows[0].0.clone();
    if rows.iter().any(|r| r.0 != split) {
        return Err(CoreError::Data("CSV mixes splits".into()));
    }
    let mut views: Vec<u16> = rows.iter().flat_map(|r| [r.2, r.3]).collect();
    views.sort_unstable();
    views.dedup();
    let mut conds: Vec<Condition> = rows.iter().map(|r| r.1).collect();
    conds.sort();
    conds.dedup();
    let mut matrices = Vec::new();
    for cond in conds {
        let mut cells = vec![vec![None; views.len()]; views.len()];
        for r in rows.iter().filter(|r| r.1 == cond) {
            let pi = views.iter().position(|&v| v == r.2).unwrap();
            let gi = views.iter().position(|&v| v == r.3).unwrap();
            if pi == gi && r.4.is_some() {
                return Err(CoreError::Data(format!(
                    "CSV row scores a probe against its own view {}",
                    r.2
                )));
            }
            cells[pi][gi] = r.4;
        }
        matrices.push(ConditionMatrix {
            condition: cond,
            views: views.clone(),
            cells,
        });
    }
    Ok((split, ProtocolResult { matrices }))
}

/// Summary CSV: one row per condition with per-probe-view means and the
/// condition mean.
pub fn summary_csv(result: &ProtocolResult, split: &str) -> String {
    let mut out = String::from("split,condition");
    if let Some(m) = result.matrices.first() {
        for v in &m.views {
            let _ = write!(out, ",view_{v}");
        }
    }
    out.push_str(",mean\n");
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{:.4}", 100.0 * x),
        None => "-".to_string(),
    };
    for m in &result.matrices {
        let _ = write!(out, "{split},{}", m.condition.name());
        for pm in m.probe_view_means() {
            let _ = write!(out, ",{}", fmt(pm));
        }
        let _ = writeln!(out, ",{}", fmt(m.mean()));
    }
    out
}

/// Human-readable aligned table of per-probe-view means (percent).
pub fn summary_table(result: &ProtocolResult, split: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "rank-1 accuracy (%), split {split}");
    let views = result
        .matrices
        .first()
        .map(|m| m.views.clone())
        .unwrap_or_default();
    let _ = write!(out, "{:<6}", "cond");
    for v in &views {
        let _ = write!(out, "{v:>7}");
    }
    let _ = writeln!(out, "{:>7}", "mean");
    for m in &result.matrices {
        let _ = write!(out, "{:<6}", m.condition.name());
        for pm in m.probe_view_means() {
            match pm {
                Some(x) => {
                    let _ = write!(out, "{:>7.2}", 100.0 * x);
                }
                None => {
                    let _ = write!(out, "{:>7}", "-");
                }
            }
        }
        match m.mean() {
            Some(x) => {
                let _ = writeln!(out, "{:>7.2}", 100.0 * x);
            }
            None => {
                let _ = writeln!(out, "{:>7}", "-");
            }
        }
    }
    if let Some(g) = result.grand_mean() {
        let _ = writeln!(out, "grand mean {:.2}", 100.0 * g);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn label(subject: u32, cond: Condition, trial: u8, view: u16) -> SeqLabel {
        SeqLabel {
            subject,
            condition: cond,
            trial,
            view,
        }
    }

    /// Brute-force rank-1 for one cell, written independently of the
    /// production code path.
    fn oracle_cell(
        set: &EmbeddingSet,
        spec: &ProtocolSpec,
        cond: Condition,
        trials: &[u8],
        pv: u16,
        gv: u16,
    ) -> Option<f64> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for p in 0..set.len() {
            let pl = &set.labels[p];
            if pl.condition != cond || !trials.contains(&pl.trial) || pl.view != pv {
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            let mut subject_present = false;
            for g in 0..set.len() {
                let gl = &set.labels[g];
                if gl.view != gv || !spec.gallery.contains(&(gl.condition, gl.trial)) {
                    continue;
                }
                if gl.subject == pl.subject {
                    subject_present = true;
                }
                let d = euclidean(set.descriptor(p), set.descriptor(g));
                let better = match best {
                    None => true,
                    Some((bd, _)) => d < bd,
                };
                if better {
                    best = Some((d, g));
                }
            }
            let Some((_, bg)) = best else { continue };
            if !subject_present && !spec.include_unmatched_probes {
                continue;
            }
            total += 1;
            if subject_present && set.labels[bg].subject == pl.subject {
                hits += 1;
            }
        }
        if total == 0 {
            None
        } else {
            Some(hits as f64 / total as f64)
        }
    }

    fn random_set(rng: &mut ChaCha8Rng) -> (EmbeddingSet, ProtocolSpec) {
        let subjects = rng.gen_range(2..=10u32);
        let views: Vec<u16> = {
            let all = [0u16, 18, 36, 54, 72, 90, 108, 126, 144, 162, 180];
            let k = rng.gen_range(2..=all.len());
            all[..k].to_vec()
        };
        let dim = rng.gen_range(2..=6);
        let mut set = EmbeddingSet::new(dim);
        let spec = ProtocolSpec::standard();
        for s in 1..=subjects {
            for cond in Condition::ALL {
                let trials: Vec<u8> = match cond {
                    Condition::Nm => (1..=6).collect(),
                    _ => (1..=2).collect(),
                };
                for t in trials {
                    for &v in &views {
                        // Randomly drop some sequences to exercise gaps.
                        if rng.gen_bool(0.15) {
                            continue;
                        }
                        let d: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        set.push(label(s, cond, t, v), &d).unwrap();
                        if set.len() >= 200 {
                            return (set, spec);
                        }
                    }
                }
            }
        }
        (set, spec)
    }

    #[test]
    fn matches_the_brute_force_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let (set, spec) = random_set(&mut rng);
            let result = rank1_matrix(&set, &spec).unwrap();
            for m in &result.matrices {
                let trials: Vec<u8> = spec
                    .probes
                    .iter()
                    .find(|(c, _)| *c == m.condition)
                    .unwrap()
                    .1
                    .clone();
                for (pi, &pv) in m.views.iter().enumerate() {
                    for (gi, &gv) in m.views.iter().enumerate() {
                        if pi == gi {
                            assert_eq!(m.cells[pi][gi], None, "diagonal must stay empty");
                            continue;
                        }
                        let want = oracle_cell(&set, &spec, m.condition, &trials, pv, gv);
                        assert_eq!(m.cells[pi][gi], want, "cell {pv}->{gv} {:?}", m.condition);
                    }
                }
            }
        }
    }

    #[test]
    fn copied_gallery_embeddings_score_perfectly() {
        // Each probe is an exact copy of its subject's gallery embedding.
        let mut set = EmbeddingSet::new(3);
        let views = [0u16, 90];
        for s in 1..=4u32 {
            let d = [s as f32, -(s as f32), 0.5 * s as f32];
            for &v in &views {
                for t in 1..=4 {
                    set.push(label(s, Condition::Nm, t, v), &d).unwrap();
                }
                set.push(label(s, Condition::Nm, 5, v), &d).unwrap();
            }
        }
        let result = rank1_matrix(&set, &ProtocolSpec::standard()).unwrap();
        let nm = &result.matrices[0];
        assert_eq!(nm.condition, Condition::Nm);
        assert_eq!(nm.cells[0][1], Some(1.0));
        assert_eq!(nm.cells[1][0], Some(1.0));
        assert_eq!(result.condition_mean(Condition::Nm), Some(1.0));
        // bg/cl have no probes at all -> None
        assert_eq!(result.condition_mean(Condition::Bg), None);
        assert_eq!(result.grand_mean(), Some(1.0));
    }

    #[test]
    fn random_embeddings_score_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut set = EmbeddingSet::new(8);
        for s in 1..=50u32 {
            for &v in &[0u16, 90] {
                for t in 1..=4 {
                    let d: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                    set.push(label(s, Condition::Nm, t, v), &d).unwrap();
                }
                for t in [5, 6] {
                    let d: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                    set.push(label(s, Condition::Nm, t, v), &d).unwrap();
                }
            }
        }
        let result = rank1_matrix(&set, &ProtocolSpec::standard()).unwrap();
        let acc = result.condition_mean(Condition::Nm).unwrap();
        assert!(acc < 0.12, "chance-level retrieval scored {acc}");
    }

    #[test]
    fn three_subject_hand_fixture() {
        // Two views. Subject embeddings at view 0 (gallery) are 0, 10, 20;
        // probes at view 90: subject 1 lands nearest its own gallery,
        // subject 2 lands nearest subject 3's, subject 3 nearest its own.
        let mut set = EmbeddingSet::new(1);
        set.push(label(1, Condition::Nm, 1, 0), &[0.0]).unwrap();
        set.push(label(2, Condition::Nm, 1, 0), &[10.0]).unwrap();
        set.push(label(3, Condition::Nm, 1, 0), &[20.0]).unwrap();
        set.push(label(1, Condition::Nm, 5, 90), &[1.0]).unwrap();
        set.push(label(2, Condition::Nm, 5, 90), &[16.0]).unwrap();
        set.push(label(3, Condition::Nm, 5, 90), &[21.0]).unwrap();
        let result = rank1_matrix(&set, &ProtocolSpec::standard()).unwrap();
        let nm = &result.matrices[0];
        // probe view 90 against gallery view 0: 2 of 3 correct
        assert_eq!(nm.cells[1][0], Some(2.0 / 3.0));
        // no probes at view 0 -> None
        assert_eq!(nm.cells[0][1], None);
    }

    #[test]
    fn tie_goes_to_the_earliest_gallery_sequence() {
        let mut set = EmbeddingSet::new(1);
        // Two gallery sequences at identical distance from the probe;
        // the earlier belongs to subject 1, and the probe is subject 1.
        set.push(label(1, Condition::Nm, 1, 0), &[1.0]).unwrap();
        set.push(label(2, Condition::Nm, 1, 0), &[1.0]).unwrap();
        set.push(label(1, Condition::Nm, 5, 90), &[1.0]).unwrap();
        set.push(label(2, Condition::Nm, 5, 90), &[1.0]).unwrap();
        let result = rank1_matrix(&set, &ProtocolSpec::standard()).unwrap();
        // Both probes tie on distance; the first gallery row is subject 1,
        // so subject 1 hits and subject 2 misses.
        assert_eq!(result.matrices[0].cells[1][0], Some(0.5));
    }

    #[test]
    fn unmatched_probes_are_skipped_by_default_and_scored_when_asked() {
        let mut set = EmbeddingSet::new(1);
        set.push(label(1, Condition::Nm, 1, 0), &[0.0]).unwrap();
        // Subject 2 has no gallery entry anywhere.
        set.push(label(1, Condition::Nm, 5, 90), &[0.1]).unwrap();
        set.push(label(2, Condition::Nm, 5, 90), &[0.2]).unwrap();
        let mut spec = ProtocolSpec::standard();
        let skip = rank1_matrix(&set, &spec).unwrap();
        assert_eq!(skip.matrices[0].cells[1][0], Some(1.0));
        spec.include_unmatched_probes = true;
        let strict = rank1_matrix(&set, &spec).unwrap();
        assert_eq!(strict.matrices[0].cells[1][0], Some(0.5));
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (set, spec) = random_set(&mut rng);
        let result = rank1_matrix(&set, &spec).unwrap();
        let csv = cells_to_csv(&result, "mt");
        // Every cell gets a row, scored or not: conditions x views x views.
        let n_views = result.matrices[0].views.len();
        let data_rows = csv.lines().count() - 1;
        assert_eq!(data_rows, result.matrices.len() * n_views * n_views);
        // Provenance comments above the header must not disturb the parse.
        let commented = format!("# seed 3 config deadbeef\n{csv}");
        let (split, back) = cells_from_csv(&commented).unwrap();
        assert_eq!(split, "mt");
        // Round trip must preserve every populated cell exactly. The view
        // axis of the parse is the union of views seen in rows, so compare
        // cell-by-cell through view lookups.
        for m in &result.matrices {
            let bm = back
                .matrices
                .iter()
                .find(|b| b.condition == m.condition)
                .expect("condition lost in round trip");
            for (pi, &pv) in m.views.iter().enumerate() {
                for (gi, &gv) in m.views.iter().enumerate() {
                    let cell = m.cells[pi][gi];
                    let bpi = bm.views.iter().position(|&v| v == pv);
                    let bgi = bm.views.iter().position(|&v| v == gv);
                    let bcell = match (bpi, bgi) {
                        (Some(a), Some(b)) => bm.cells[a][b],
                        _ => None,
                    };
                    assert_eq!(cell, bcell, "{:?} {pv}->{gv}", m.condition);
                }
            }
        }
        assert!(cells_from_csv("bogus\n").is_err());
        // A diagonal cell may exist as a row, but never with a value.
        let diag = "split,condition,probe_view,gallery_view,rank1\nst,nm,0,0,0.5\n";
        assert!(cells_from_csv(diag).is_err());
        let diag_empty = "split,condition,probe_view,gallery_view,rank1\n\
                          st,nm,0,0,\nst,nm,0,90,0.25\nst,nm,90,0,0.75\nst,nm,90,90,\n";
        let (_, parsed) = cells_from_csv(diag_empty).unwrap();
        assert_eq!(parsed.matrices[0].cells[0][1], Some(0.25));
        assert_eq!(parsed.matrices[0].cells[0][0], None);
    }

    #[test]
    fn summary_outputs_render() {
        let mut set = EmbeddingSet::new(1);
        set.push(label(1, Condition::Nm, 1, 0), &[0.0]).unwrap();
        set.push(label(2, Condition::Nm, 1, 0), &[5.0]).unwrap();
        set.push(label(1, Condition::Nm, 5, 90), &[1.0]).unwrap();
        set.push(label(2, Condition::Nm, 5, 90), &[4.0]).unwrap();
        let result = rank1_matrix(&set, &ProtocolSpec::standard()).unwrap();
        let csv = summary_csv(&result, "st");
        assert!(csv.starts_with("split,condition,view_0,view_90,mean"));
        assert!(csv.contains("st,nm"));
        let table = summary_table(&result, "st");
        assert!(table.contains("grand mean"));
    }
}
