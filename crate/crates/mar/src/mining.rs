//! Soft multilabel-guided hard negative mining and the discriminative
//! embedding loss computed over the mined positive/hard-negative pair sets.

use crate::agents::{zero_grads, VecGrads};
use crate::error::{MarError, Result};
use crate::geometry::{SimilarityTable, UnitVector};

/// The thresholds that defined one batch's mined sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningThresholds {
    /// Feature-similarity threshold: value of the rank-th most similar pair.
    pub s: f64,
    /// Agreement threshold: value of the rank-th highest-agreement pair.
    pub t: f64,
    pub p: f64,
    pub rank: usize,
    pub m_batch: usize,
}

/// Mined positive and hard-negative pair sets for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningSets {
    pub positives: Vec<(usize, usize)>,
    pub hard_negatives: Vec<(usize, usize)>,
    pub thresholds: MiningThresholds,
}

/// Pair indices sorted by (value descending, pair order ascending).
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// The number of pairs treated as "similar": round(p * m_batch), floored at 1.
pub fn mining_rank(p: f64, m_batch: usize) -> usize {
    ((p * m_batch as f64).round() as usize).clamp(1, m_batch)
}

/// Computes the similarity and agreement thresholds for a mining ratio.
pub fn compute_thresholds(
    sims: &SimilarityTable,
    agreements: &SimilarityTable,
    p: f64,
) -> Result<MiningThresholds> {
    if sims.n() < 2 {
        return Err(MarError::BatchTooSmall { min: 2, got: sims.n() });
    }
    if sims.len() != agreements.len() {
        return Err(MarError::DimensionMismatch { expected: sims.len(), got: agreements.len() });
    }
    let m_batch = sims.len();
    let rank = mining_rank(p, m_batch);
    let s = sims.values()[descending_order(sims.values())[rank - 1]];
    let t = agreements.values()[descending_order(agreements.values())[rank - 1]];
    Ok(MiningThresholds { s, t, p, rank, m_batch })
}

fn pair_of_linear(n: usize, linear: usize) -> (usize, usize) {
    // Inverse of the fixed (0,1),(0,2),... ordering.
    let mut idx = linear;
    for i in 0..n {
        let row = n - i - 1;
        if idx < row {
            return (i, i + 1 + idx);
        }
        idx -= row;
    }
    unreachable!("linear pair index out of range")
}

/// Partitions the top-rank similar pairs into positives (agreement >= T) and
/// hard negatives (agreement < T).
pub fn build_sets(
    sims: &SimilarityTable,
    agreements: &SimilarityTable,
    thresholds: &MiningThresholds,
) -> MiningSets {
    let order = descending_order(sims.values());
    let mut positives = Vec::new();
    let mut hard_negatives = Vec::new();
    let mut similar: Vec<usize> = order[..thresholds.rank].to_vec();
    similar.sort_unstable(); // fixed pair order within each set
    for linear in similar {
        let pair = pair_of_linear(sims.n(), linear);
        if agreements.values()[linear] >= thresholds.t {
            positives.push(pair);
        } else {
            hard_negatives.push(pair);
        }
    }
    MiningSets { positives, hard_negatives, thresholds: thresholds.clone() }
}

/// Feature-similarity-guided ablation baseline: the same top-rank similar
/// pairs, split at their median similarity instead of by agreement.
pub fn baseline_sets(sims: &SimilarityTable, p: f64) -> Result<MiningSets> {
    if sims.n() < 2 {
        return Err(MarError::BatchTooSmall { min: 2, got: sims.n() });
    }
    let m_batch = sims.len();
    let rank = mining_rank(p, m_batch);
    let order = descending_order(sims.values());
    let similar = &order[..rank];
    let n_pos = (rank + 1) / 2; // upper half keeps the median element
    let s = sims.values()[similar[rank - 1]];
    let t = sims.values()[similar[n_pos - 1]];
    let mut positives: Vec<usize> = similar[..n_pos].to_vec();
    let mut hard_negatives: Vec<usize> = similar[n_pos..].to_vec();
    positives.sort_unstable();
    hard_negatives.sort_unstable();
    let to_pairs = |v: Vec<usize>| {
        v.into_iter()
            .map(|linear| pair_of_linear(sims.n(), linear))
            .collect()
    };
    Ok(MiningSets {
        positives: to_pairs(positives),
        hard_negatives: to_pairs(hard_negatives),
        thresholds: MiningThresholds { s, t, p, rank, m_batch },
    })
}

/// Discriminative embedding loss over mined sets:
/// -log(Pbar / (Pbar + Nbar)) with Pbar/Nbar the mean of exp(-||f_i - f_j||^2)
/// over positives/hard negatives.
///
/// Returns the loss and its gradient w.r.t. every embedding.
pub fn mdl_loss(sets: &MiningSets, embeddings: &[UnitVector]) -> Result<(f64, VecGrads)> {
    if sets.positives.is_empty() {
        return Err(MarError::EmptyMiningSet { which: "positive" });
    }
    if sets.hard_negatives.is_empty() {
        return Err(MarError::EmptyMiningSet { which: "hard-negative" });
    }
    let d = embeddings[0].dim();
    let pair_exp = |&(i, j): &(usize, usize)| -> f64 {
        let d2: f64 = embeddings[i]
            .coords()
            .iter()
            .zip(embeddings[j].coords())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (-d2).exp()
    };
    let p_bar: f64 = sets.positives.iter().map(pair_exp).sum::<f64>() / sets.positives.len() as f64;
    let n_bar: f64 =
        sets.hard_negatives.iter().map(pair_exp).sum::<f64>() / sets.hard_negatives.len() as f64;
    let loss = -(p_bar / (p_bar + n_bar)).ln();

    let dl_dp = -1.0 / p_bar + 1.0 / (p_bar + n_bar);
    let dl_dn = 1.0 / (p_bar + n_bar);
    let mut grads = zero_grads(embeddings.len(), d);
    let mut accumulate = |pairs: &[(usize, usize)], dl: f64| {
        let inv = 1.0 / pairs.len() as f64;
        for &(i, j) in pairs {
            let e = pair_exp(&(i, j));
            // d exp(-d2)/d u_i = exp(-d2) * (-2)(u_i - u_j)
            for c in 0..d {
                let diff = embeddings[i].coords()[c] - embeddings[j].coords()[c];
                let g = dl * inv * e * (-2.0) * diff;
                grads[i][c] += g;
                grads[j][c] -= g;
            }
        }
    };
    accumulate(&sets.positives, dl_dp);
    accumulate(&sets.hard_negatives, dl_dn);
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{self, pairwise_similarities};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn table(n: usize, values: &[f64]) -> SimilarityTable {
        let mut it = values.iter();
        SimilarityTable::from_fn(n, |_, _| *it.next().unwrap()).unwrap()
    }

    #[test]
    fn pair_of_linear_inverts_fixed_order() {
        let n = 5;
        let mut linear = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                assert_eq!(pair_of_linear(n, linear), (i, j));
                linear += 1;
            }
        }
    }

    #[test]
    fn thresholds_rank_one() {
        let sims = table(4, &[0.9, 0.1, 0.2, 0.3, 0.4, 0.5]);
        let agr = table(4, &[0.2, 0.8, 0.1, 0.3, 0.4, 0.5]);
        let th = compute_thresholds(&sims, &agr, 0.1).unwrap();
        assert_eq!(th.rank, 1);
        assert_eq!(th.s, 0.9);
        assert_eq!(th.t, 0.8);
    }

    #[test]
    fn thresholds_p_one() {
        let sims = table(4, &[0.9, 0.1, 0.2, 0.3, 0.4, 0.5]);
        let agr = table(4, &[0.2, 0.8, 0.1, 0.3, 0.4, 0.5]);
        let th = compute_thresholds(&sims, &agr, 1.0).unwrap();
        assert_eq!(th.rank, 6);
        assert_eq!(th.s, 0.1);
        assert_eq!(th.t, 0.1);
    }

    #[test]
    fn default_batch_rank() {
        // 184 unlabeled per batch -> 16836 pairs; p = 5 per mille -> rank 84.
        let m_batch = 184 * 183 / 2;
        assert_eq!(m_batch, 16836);
        assert_eq!(mining_rank(0.005, m_batch), 84);
    }

    #[test]
    fn build_sets_all_duplicates() {
        // All agreements are 1: hard-negative set is empty.
        let v = geometry::normalize(&[0.6, 0.8]).unwrap();
        let batch = vec![v.clone(), v.clone(), v.clone(), v];
        let sims = pairwise_similarities(&batch).unwrap();
        let agr = table(4, &[1.0; 6]);
        let th = compute_thresholds(&sims, &agr, 0.5).unwrap();
        let sets = build_sets(&sims, &agr, &th);
        assert!(sets.hard_negatives.is_empty());
        assert_eq!(sets.positives.len(), th.rank);
    }

    #[test]
    fn build_sets_rank_one_brute_force() {
        // With rank 1 the single most similar pair lands in P iff its
        // agreement is the global maximum.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let sims_v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let agr_v: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let sims = table(4, &sims_v);
            let agr = table(4, &agr_v);
            let th = compute_thresholds(&sims, &agr, 1e-9).unwrap();
            assert_eq!(th.rank, 1);
            let sets = build_sets(&sims, &agr, &th);
            assert_eq!(sets.positives.len() + sets.hard_negatives.len(), 1);
            // brute force
            let best_sim = sims_v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let max_agr = agr_v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let in_p = agr_v[best_sim] >= max_agr;
            assert_eq!(sets.positives.len() == 1, in_p);
        }
    }

    #[test]
    fn build_sets_satisfy_threshold_predicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let sims_v: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let agr_v: Vec<f64> = (0..15).map(|_| rng.gen_range(0.0..1.0)).collect();
        let sims = table(6, &sims_v);
        let agr = table(6, &agr_v);
        let th = compute_thresholds(&sims, &agr, 0.4).unwrap();
        let sets = build_sets(&sims, &agr, &th);
        assert_eq!(sets.positives.len() + sets.hard_negatives.len(), th.rank);
        for &(i, j) in &sets.positives {
            assert!(sims.get(i, j) >= th.s);
            assert!(agr.get(i, j) >= th.t);
        }
        for &(i, j) in &sets.hard_negatives {
            assert!(sims.get(i, j) >= th.s);
            assert!(agr.get(i, j) < th.t);
        }
        // Disjoint
        for p in &sets.positives {
            assert!(!sets.hard_negatives.contains(p));
        }
    }

    #[test]
    fn monotonic_in_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sims_v: Vec<f64> = (0..28).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let agr_v: Vec<f64> = (0..28).map(|_| rng.gen_range(0.0..1.0)).collect();
        let sims = table(8, &sims_v);
        let agr = table(8, &agr_v);
        let mut prev: Vec<(usize, usize)> = Vec::new();
        for p in [0.05, 0.2, 0.5, 0.8, 1.0] {
            let th = compute_thresholds(&sims, &agr, p).unwrap();
            let sets = build_sets(&sims, &agr, &th);
            let mut all: Vec<(usize, usize)> = sets
                .positives
                .iter()
                .chain(&sets.hard_negatives)
                .cloned()
                .collect();
            all.sort_unstable();
            for pair in &prev {
                assert!(all.contains(pair), "pair {pair:?} dropped when p grew to {p}");
            }
            prev = all;
        }
    }

    #[test]
    fn mdl_hand_example() {
        let v = geometry::normalize(&[1.0, 0.0]).unwrap();
        let sets = MiningSets {
            positives: vec![(0, 1)],
            hard_negatives: vec![(2, 3)],
            thresholds: MiningThresholds { s: 1.0, t: 0.5, p: 1.0, rank: 2, m_batch: 6 },
        };
        let embs = vec![v.clone(), v.clone(), v.clone(), v];
        let (loss, _) = mdl_loss(&sets, &embs).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn mdl_perfect_separation_limit() {
        // Hard negatives maximally far (d2 = 4 for antipodal unit vectors)
        // push the loss toward zero relative to the coincident-pair case.
        let v = geometry::normalize(&[1.0, 0.0]).unwrap();
        let w = geometry::normalize(&[-1.0, 0.0]).unwrap();
        let sets = MiningSets {
            positives: vec![(0, 1)],
            hard_negatives: vec![(2, 3)],
            thresholds: MiningThresholds { s: 1.0, t: 0.5, p: 1.0, rank: 2, m_batch: 6 },
        };
        let embs = vec![v.clone(), v.clone(), v, w];
        let (loss, _) = mdl_loss(&sets, &embs).unwrap();
        assert!(loss < 0.02);
        assert!(loss > 0.0);
    }

    #[test]
    fn mdl_empty_sets_error() {
        let v = geometry::normalize(&[1.0, 0.0]).unwrap();
        let sets = MiningSets {
            positives: vec![],
            hard_negatives: vec![(0, 1)],
            thresholds: MiningThresholds { s: 1.0, t: 0.5, p: 1.0, rank: 1, m_batch: 1 },
        };
        assert!(matches!(
            mdl_loss(&sets, &[v.clone(), v]),
            Err(MarError::EmptyMiningSet { .. })
        ));
    }

    #[test]
    fn mdl_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 4;
        let embs: Vec<UnitVector> = (0..6)
            .map(|_| {
                let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                geometry::normalize(&raw).unwrap()
            })
            .collect();
        let sets = MiningSets {
            positives: vec![(0, 1), (2, 3)],
            hard_negatives: vec![(1, 4), (0, 5)],
            thresholds: MiningThresholds { s: 0.0, t: 0.5, p: 0.3, rank: 4, m_batch: 15 },
        };
        let (_, grads) = mdl_loss(&sets, &embs).unwrap();
        let h = 1e-6;
        for k in 0..embs.len() {
            for c in 0..d {
                let mut ep = embs.clone();
                let mut em = embs.clone();
                let mut cp = ep[k].coords().to_vec();
                let mut cm = cp.clone();
                cp[c] += h;
                cm[c] -= h;
                ep[k] = UnitVector::from_unit_for_test(cp);
                em[k] = UnitVector::from_unit_for_test(cm);
                let lp = mdl_loss(&sets, &ep).unwrap().0;
                let lm = mdl_loss(&sets, &em).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[k][c];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-4, "{k},{c}: fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn mdl_monotone_in_pair_similarity() {
        // Pulling a positive pair closer lowers the loss; pulling a hard
        // negative closer raises it. Checked by the sign of the analytic
        // gradient along the "toward the partner" direction.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let embs: Vec<UnitVector> = (0..6)
            .map(|_| {
                let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                geometry::normalize(&raw).unwrap()
            })
            .collect();
        let sets = MiningSets {
            positives: vec![(0, 1)],
            hard_negatives: vec![(2, 3)],
            thresholds: MiningThresholds { s: 0.0, t: 0.5, p: 0.2, rank: 2, m_batch: 15 },
        };
        let (_, grads) = mdl_loss(&sets, &embs).unwrap();
        // Direction from 0 toward 1 decreases their distance.
        let toward = |a: usize, b: usize| -> Vec<f64> {
            embs[b]
                .coords()
                .iter()
                .zip(embs[a].coords())
                .map(|(x, y)| x - y)
                .collect()
        };
        let dir_pos = toward(0, 1);
        let slope_pos: f64 = grads[0].iter().zip(&dir_pos).map(|(g, d)| g * d).sum();
        assert!(slope_pos < 0.0, "moving a positive pair together must reduce the loss");
        let dir_neg = toward(2, 3);
        let slope_neg: f64 = grads[2].iter().zip(&dir_neg).map(|(g, d)| g * d).sum();
        assert!(slope_neg > 0.0, "moving a hard negative together must raise the loss");
    }

    #[test]
    fn baseline_median_split() {
        let sims = table(4, &[0.9, 0.8, 0.1, 0.2, 0.3, 0.4]);
        let sets = baseline_sets(&sims, 2.0 / 6.0).unwrap();
        assert_eq!(sets.thresholds.rank, 2);
        assert_eq!(sets.positives, vec![(0, 1)]); // similarity 0.9
        assert_eq!(sets.hard_negatives, vec![(0, 2)]); // similarity 0.8
    }

    #[test]
    fn baseline_ties_deterministic() {
        let sims = table(4, &[0.5; 6]);
        let a = baseline_sets(&sims, 4.0 / 6.0).unwrap();
        let b = baseline_sets(&sims, 4.0 / 6.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.positives.len(), 2);
        assert_eq!(a.hard_negatives.len(), 2);
        // Fixed pair order breaks the ties: earliest pairs first.
        assert_eq!(a.positives, vec![(0, 1), (0, 2)]);
    }
}
