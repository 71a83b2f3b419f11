//! Soft multilabels: the agent-comparison softmax, the label agreement, and
//! the cross-view consistency loss over per-view log-label statistics.

use std::collections::BTreeMap;

use crate::agents::{self, AgentBank, VecGrads};
use crate::error::{MarError, Result};
use crate::geometry::{self, UnitVector};

/// Added to softmax outputs before taking logs; softmax entries can underflow.
pub const EPS_LOG: f64 = 1e-12;

/// Label-likelihood vector over the reference persons. Entries are positive
/// and sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMultilabel {
    y: Vec<f64>,
}

impl SoftMultilabel {
    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn dim(&self) -> usize {
        self.y.len()
    }

    /// Wraps an existing probability vector, e.g. one produced elsewhere or
    /// constructed in tests. The entries must be nonnegative and sum to 1.
    pub fn from_distribution(y: Vec<f64>) -> Result<Self> {
        if y.is_empty() {
            return Err(MarError::EmptyAgentBank);
        }
        let sum: f64 = y.iter().sum();
        if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > 1e-9 {
            return Err(MarError::NumericalFailure(
                "soft multilabel entries must form a distribution".into(),
            ));
        }
        Ok(Self { y })
    }
}

/// Softmax of the scaled agent inner products, with max-logit subtraction.
pub fn soft_multilabel(f_x: &[f64], agents: &AgentBank, scale: f64) -> Result<SoftMultilabel> {
    if agents.is_empty() {
        return Err(MarError::EmptyAgentBank);
    }
    if f_x.len() != agents.dim() {
        return Err(MarError::DimensionMismatch { expected: agents.dim(), got: f_x.len() });
    }
    let logits: Vec<f64> = agents
        .agents()
        .iter()
        .map(|a| scale * geometry::dot(a, f_x))
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(SoftMultilabel { y: exps.into_iter().map(|e| e / z).collect() })
}

/// Soft multilabel agreement: the cumulated per-reference-person minimum.
pub fn agreement(y_i: &SoftMultilabel, y_j: &SoftMultilabel) -> Result<f64> {
    if y_i.dim() != y_j.dim() {
        return Err(MarError::DimensionMismatch { expected: y_i.dim(), got: y_j.dim() });
    }
    Ok(y_i
        .values()
        .iter()
        .zip(y_j.values())
        .map(|(a, b)| a.min(*b))
        .sum())
}

/// Elementwise mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Per-view and global statistics of the log soft multilabels.
#[derive(Debug, Clone)]
pub struct ViewStats {
    /// Sorted by view id; only views with at least two samples.
    pub per_view: Vec<(u32, Stats)>,
    pub counts: Vec<(u32, usize)>,
    pub global: Stats,
    /// Number of samples behind the global statistics.
    pub total: usize,
}

fn mean_std(rows: &[&Vec<f64>], dim: usize) -> Stats {
    let n = rows.len() as f64;
    let mut mu = vec![0.0; dim];
    for r in rows {
        for (m, v) in mu.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n;
    }
    let mut sigma = vec![0.0; dim];
    for r in rows {
        for (s, (v, m)) in sigma.iter_mut().zip(r.iter().zip(&mu)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut sigma {
        *s = (*s / n).sqrt();
    }
    Stats { mu, sigma }
}

fn log_labels(labels: &[(SoftMultilabel, u32)]) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|(y, _)| y.values().iter().map(|v| (v + EPS_LOG).ln()).collect())
        .collect()
}

/// Groups samples by view, drops views with fewer than two samples, and
/// computes log-label statistics per view and over the union of kept views.
pub fn view_stats(labels: &[(SoftMultilabel, u32)]) -> Result<ViewStats> {
    let logs = log_labels(labels);
    view_stats_of_logs(&logs, &labels.iter().map(|(_, v)| *v).collect::<Vec<_>>())
}

fn view_stats_of_logs(logs: &[Vec<f64>], views: &[u32]) -> Result<ViewStats> {
    let dim = logs.first().map(|l| l.len()).unwrap_or(0);
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (idx, &v) in views.iter().enumerate() {
        groups.entry(v).or_default().push(idx);
    }
    groups.retain(|_, idxs| idxs.len() >= 2);
    if groups.is_empty() {
        return Err(MarError::NoValidViews);
    }
    let mut per_view = Vec::new();
    let mut counts = Vec::new();
    let mut kept: Vec<&Vec<f64>> = Vec::new();
    for (&v, idxs) in &groups {
        let rows: Vec<&Vec<f64>> = idxs.iter().map(|&i| &logs[i]).collect();
        per_view.push((v, mean_std(&rows, dim)));
        counts.push((v, idxs.len()));
        kept.extend(rows);
    }
    let global = mean_std(&kept, dim);
    Ok(ViewStats { per_view, counts, global, total: kept.len() })
}

/// Loss value from precomputed statistics: sum over views of the squared
/// distance between view and global (mean, std) vectors.
pub fn cml_from_stats(stats: &ViewStats) -> f64 {
    stats
        .per_view
        .iter()
        .map(|(_, s)| {
            s.mu
                .iter()
                .zip(&stats.global.mu)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                + s.sigma
                    .iter()
                    .zip(&stats.global.sigma)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
        })
        .sum()
}

/// Cross-view consistency loss and its gradient w.r.t. every contributing
/// log-label entry. Samples in dropped views get zero gradient.
pub fn cml_log_label_grads(
    labels: &[(SoftMultilabel, u32)],
) -> Result<(f64, ViewStats, Vec<Vec<f64>>)> {
    let logs = log_labels(labels);
    let views: Vec<u32> = labels.iter().map(|(_, v)| *v).collect();
    let stats = view_stats_of_logs(&logs, &views)?;
    let loss = cml_from_stats(&stats);
    let dim = logs.first().map(|l| l.len()).unwrap_or(0);
    let n = stats.total as f64;

    // Sums over views of the (mu_v - mu) and (sigma_v - sigma) residuals,
    // needed for the global-statistic part of the gradient.
    let mut sum_dmu = vec![0.0; dim];
    let mut sum_dsig = vec![0.0; dim];
    for (_, s) in &stats.per_view {
        for c in 0..dim {
            sum_dmu[c] += s.mu[c] - stats.global.mu[c];
            sum_dsig[c] += s.sigma[c] - stats.global.sigma[c];
        }
    }

    let kept_views: BTreeMap<u32, (&Stats, usize)> = stats
        .per_view
        .iter()
        .zip(&stats.counts)
        .map(|((v, s), (_, cnt))| (*v, (s, *cnt)))
        .collect();

    let mut grads = vec![vec![0.0; dim]; logs.len()];
    for (k, (log_row, &v)) in logs.iter().zip(&views).enumerate() {
        let Some(&(view_stats, n_v)) = kept_views.get(&v) else {
            continue;
        };
        let n_v = n_v as f64;
        for c in 0..dim {
            let l = log_row[c];
            let mut g = 2.0 * (view_stats.mu[c] - stats.global.mu[c]) / n_v;
            if view_stats.sigma[c] > 0.0 {
                g += 2.0 * (view_stats.sigma[c] - stats.global.sigma[c]) * (l - view_stats.mu[c])
                    / (n_v * view_stats.sigma[c]);
            }
            g -= 2.0 * sum_dmu[c] / n;
            if stats.global.sigma[c] > 0.0 {
                g -= 2.0 * sum_dsig[c] * (l - stats.global.mu[c]) / (n * stats.global.sigma[c]);
            }
            grads[k][c] = g;
        }
    }
    Ok((loss, stats, grads))
}

/// Full cross-view consistency loss: chains the log-label gradient through the
/// log, the softmax and the scaled agent logits back to the target embeddings
/// and the agents.
///
/// Returns (loss, grads w.r.t. embeddings, grads w.r.t. agents).
pub fn cml_loss(
    target_embeddings: &[UnitVector],
    view_ids: &[u32],
    agents: &AgentBank,
    scale: f64,
) -> Result<(f64, VecGrads, VecGrads)> {
    let labels: Vec<(SoftMultilabel, u32)> = target_embeddings
        .iter()
        .zip(view_ids)
        .map(|(u, &v)| Ok((soft_multilabel(u.coords(), agents, scale)?, v)))
        .collect::<Result<_>>()?;
    let (loss, _, log_grads) = cml_log_label_grads(&labels)?;

    let n_p = agents.len();
    let d = agents.dim();
    let mut g_emb = agents::zero_grads(target_embeddings.len(), d);
    let mut g_agents = agents::zero_grads(n_p, d);
    for (k, (y, _)) in labels.iter().enumerate() {
        let y = y.values();
        let u = target_embeddings[k].coords();
        // dL/dy then softmax backward: dL/dg = y .* (dL/dy - <dL/dy, y>).
        let dl_dy: Vec<f64> = log_grads[k]
            .iter()
            .zip(y)
            .map(|(g, yi)| g / (yi + EPS_LOG))
            .collect();
        let inner: f64 = dl_dy.iter().zip(y).map(|(g, yi)| g * yi).sum();
        for i in 0..n_p {
            let dg = y[i] * (dl_dy[i] - inner);
            if dg == 0.0 {
                continue;
            }
            let a = agents.agent(i);
            for c in 0..d {
                g_emb[k][c] += scale * dg * a[c];
                g_agents[i][c] += scale * dg * u[c];
            }
        }
    }
    Ok((loss, g_emb, g_agents))
}
