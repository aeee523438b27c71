//! Batch-all triplet loss, computed independently per horizontal strip.
//!
//! For every strip: over all ordered (anchor, positive, negative) triples in
//! the batch (anchor and positive share a subject, anchor != positive, the
//! negative does not), the term is `max(0, d(a,p) - d(a,n) + margin)` with
//! Euclidean distance over the strip's embedding dim. The strip loss is the
//! mean over the terms that are strictly positive (0 if none survive); the
//! final loss is the mean over strips. The count of active terms is treated
//! as a constant in the backward pass (it is piecewise constant in the
//! embeddings).

use gaitrm_tensor::{elem, Element, Graph, NodeId, Tensor};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy)]
pub struct TripletConfig {
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { margin: 0.2 }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "triplet margin must be a positive finite number, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

fn check_batch(labels: &[u32], b: usize) -> Result<()> {
    if labels.len() != b {
        return Err(CoreError::InvalidConfig(format!(
            "batch has {b} embeddings but {} labels",
            labels.len()
        )));
    }
    let mut distinct: Vec<u32> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(CoreError::DegenerateBatch(
            "triplet loss needs at least two subjects in the batch".into(),
        ));
    }
    let has_pair = distinct
        .iter()
        .any(|s| labels.iter().filter(|&&l| l == *s).count() >= 2);
    if !has_pair {
        return Err(CoreError::DegenerateBatch(
            "triplet loss needs at least one subject with two sequences".into(),
        ));
    }
    Ok(())
}

/// Per-strip pairwise Euclidean distances, accumulated in f64.
/// `dist[s][i * b + j]`.
fn strip_distances<E: Element>(data: &[E], b: usize, s: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0f64; b * b]; s];
    for si in 0..s {
        for i in 0..b {
            for j in (i + 1)..b {
                let base_i = (i * s + si) * d;
                let base_j = (j * s + si) * d;
                let mut acc = 0.0f64;
                for k in 0..d {
                    let diff = data[base_i + k].to_f64().unwrap_or(0.0)
                        - data[base_j + k].to_f64().unwrap_or(0.0);
                    acc += diff * diff;
                }
                let dist = acc.sqrt();
                out[si][i * b + j] = dist;
                out[si][j * b + i] = dist;
            }
        }
    }
    out
}

/// Walk every valid ordered triple, calling `f(strip, a, p, n, term)` for
/// each strictly positive term. Returns per-strip (active count, term sum).
fn fold_active_terms(
    dist: &[Vec<f64>],
    labels: &[u32],
    b: usize,
    margin: f64,
    mut f: impl FnMut(usize, usize, usize, usize, f64),
) -> Vec<(usize, f64)> {
    let s = dist.len();
    let mut per_strip = vec![(0usize, 0.0f64); s];
    for si in 0..s {
        for a in 0..b {
            for p in 0..b {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                let d_ap = dist[si][a * b + p];
                for n in 0..b {
                    if labels[n] == labels[a] {
                        continue;
                    }
                    let term = d_ap - dist[si][a * b + n] + margin;
                    if term > 0.0 {
                        per_strip[si].0 += 1;
                        per_strip[si].1 += term;
                        f(si, a, p, n, term);
                    }
                }
            }
        }
    }
    per_strip
}

/// The loss op. `embeddings` is rank-3 `(b, s, d)`; returns a scalar node.
pub fn ba_plus_triplet<E: Element>(
    g: &mut Graph<E>,
    embeddings: NodeId,
    labels: &[u32],
    cfg: &TripletConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let (b, s, d) = g.value(embeddings).dims3("ba_plus_triplet")?;
    check_batch(labels, b)?;
    let margin = cfg.margin;

    let dist = strip_distances(g.value(embeddings).data(), b, s, d);
    let per_strip = fold_active_terms(&dist, labels, b, margin, |_, _, _, _, _| {});
    let loss: f64 = per_strip
        .iter()
        .map(|&(active, sum)| if active > 0 { sum / active as f64 } else { 0.0 })
        .sum::<f64>()
        / s as f64;

    let labels_owned: Vec<u32> = labels.to_vec();
    let value = Tensor::scalar(elem::<E>(loss));
    Ok(g.push_op(
        "ba_plus_triplet",
        value,
        &[embeddings],
        Some(Box::new(move |upstream, ctx, sink| {
            if !sink.wants(embeddings) {
                return;
            }
            let up = upstream[0].to_f64().unwrap_or(0.0);
            let emb = ctx.value(embeddings);
            let data = emb.data();
            let dist = strip_distances(data, b, s, d);
            // first pass: active counts per strip set the denominators
            let per_strip = fold_active_terms(&dist, &labels_owned, b, margin, |_, _, _, _, _| {});
            let mut grad = vec![0.0f64; data.len()];
            {
                let mut add_pair = |si: usize, i: usize, j: usize, coef: f64| {
                    // d |e_i - e_j| / d e_i = (e_i - e_j) / dist (0 at dist 0)
                    let dij = dist[si][i * b + j];
                    if dij == 0.0 {
                        return;
                    }
                    let base_i = (i * s + si) * d;
                    let base_j = (j * s + si) * d;
                    for k in 0..d {
                        let diff = (data[base_i + k].to_f64().unwrap_or(0.0)
                            - data[base_j + k].to_f64().unwrap_or(0.0))
                            / dij;
                        grad[base_i + k] += coef * diff;
                        grad[base_j + k] -= coef * diff;
                    }
                };
                fold_active_terms(&dist, &labels_owned, b, margin, |si, a, p, n, _| {
                    let active = per_strip[si].0 as f64;
                    let c = up / (active * s as f64);
                    // term = d(a,p) - d(a,n) + margin
                    add_pair(si, a, p, c);
                    add_pair(si, a, n, -c);
                });
            }
            let gslice = sink.accum(embeddings);
            for (gi, gv) in gslice.iter_mut().zip(&grad) {
                *gi = *gi + elem::<E>(*gv);
            }
        })),
    ))
}
