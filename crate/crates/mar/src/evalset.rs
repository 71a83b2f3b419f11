//! Retrieval evaluation: cosine ranking, CMC Rank-k and mean average
//! precision under the cross-view protocol (same-person same-view gallery
//! entries are excluded per probe).

use crate::error::{MarError, Result};
use crate::geometry::{self, UnitVector};

/// Embeddings annotated with person and view ids.
#[derive(Debug, Clone)]
pub struct LabeledEmbeddingSet {
    pub embeddings: Vec<UnitVector>,
    pub person_ids: Vec<i64>,
    pub view_ids: Vec<u32>,
}

impl LabeledEmbeddingSet {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Gallery indices sorted by descending cosine similarity to the probe,
/// ties broken by ascending index.
pub fn rank_gallery(probe: &UnitVector, gallery: &LabeledEmbeddingSet) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(MarError::EmptyGallery);
    }
    let sims: Vec<f64> = gallery
        .embeddings
        .iter()
        .map(|g| geometry::dot(probe.coords(), g.coords()))
        .collect();
    let mut idx: Vec<usize> = (0..gallery.len()).collect();
    idx.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// (k, rank-k accuracy), sorted by k.
    pub cmc: Vec<(usize, f64)>,
    pub map: f64,
    pub evaluated_probes: usize,
    pub skipped_probes: usize,
}

/// CMC and mAP over all probes with at least one valid cross-view match.
pub fn cmc_map(
    probes: &LabeledEmbeddingSet,
    gallery: &LabeledEmbeddingSet,
    ks: &[usize],
) -> Result<EvalReport> {
    if gallery.is_empty() {
        return Err(MarError::EmptyGallery);
    }
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut hits_at_k = vec![0usize; ks.len()];
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;

    for p in 0..probes.len() {
        let pid = probes.person_ids[p];
        let pview = probes.view_ids[p];
        // Standard protocol: drop same-person same-view gallery entries.
        let keep: Vec<usize> = (0..gallery.len())
            .filter(|&g| !(gallery.person_ids[g] == pid && gallery.view_ids[g] == pview))
            .collect();
        let relevant_total = keep
            .iter()
            .filter(|&&g| gallery.person_ids[g] == pid)
            .count();
        if relevant_total == 0 {
            skipped += 1;
            continue;
        }
        evaluated += 1;
        let sub = LabeledEmbeddingSet {
            embeddings: keep.iter().map(|&g| gallery.embeddings[g].clone()).collect(),
            person_ids: keep.iter().map(|&g| gallery.person_ids[g]).collect(),
            view_ids: keep.iter().map(|&g| gallery.view_ids[g]).collect(),
        };
        let order = rank_gallery(&probes.embeddings[p], &sub)?;
        let mut first_hit = None;
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        for (rank_minus_1, &g) in order.iter().enumerate() {
            if sub.person_ids[g] == pid {
                found += 1;
                precision_sum += found as f64 / (rank_minus_1 + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank_minus_1 + 1);
                }
            }
        }
        ap_sum += precision_sum / relevant_total as f64;
        let first = first_hit.expect("relevant_total > 0 guarantees a hit");
        for (slot, &k) in ks.iter().enumerate() {
            if first <= k {
                hits_at_k[slot] += 1;
            }
        }
    }
    if evaluated == 0 {
        return Err(MarError::NoValidProbes);
    }
    Ok(EvalReport {
        cmc: ks
            .iter()
            .zip(&hits_at_k)
            .map(|(&k, &h)| (k, h as f64 / evaluated as f64))
            .collect(),
        map: ap_sum / evaluated as f64,
        evaluated_probes: evaluated,
        skipped_probes: skipped,
    })
}
