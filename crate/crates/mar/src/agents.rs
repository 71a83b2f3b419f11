//! Reference agents and their losses: the classification-style agent loss,
//! the cross-domain joint-embedding loss with its per-agent mined sets, and
//! the combined reference agent learning loss.

use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{MarError, Result};
use crate::geometry::{self, UnitVector};

pub const AGENT_MAGIC: &[u8; 8] = b"MARAGT01";

/// The learnable reference agents, one per reference person.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBank {
    agents: Vec<Vec<f64>>,
    dim: usize,
    pub constrained: bool,
}

impl AgentBank {
    pub fn init(n_p: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let lim = 1.0 / (d_out as f64).sqrt();
        let agents = (0..n_p)
            .map(|_| (0..d_out).map(|_| rng.gen_range(-lim..lim)).collect())
            .collect();
        Self { agents, dim: d_out, constrained: false }
    }

    pub fn from_vectors(agents: Vec<Vec<f64>>, constrained: bool) -> Result<Self> {
        if agents.is_empty() {
            return Err(MarError::EmptyAgentBank);
        }
        let dim = agents[0].len();
        for a in &agents {
            if a.len() != dim {
                return Err(MarError::DimensionMismatch { expected: dim, got: a.len() });
            }
        }
        Ok(Self { agents, dim, constrained })
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        &self.agents[i]
    }

    pub fn agents(&self) -> &[Vec<f64>] {
        &self.agents
    }

    pub fn agents_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.agents
    }

    /// Projects every agent back onto the unit sphere.
    pub fn renormalize(&mut self) -> Result<()> {
        for a in &mut self.agents {
            *a = geometry::normalize(a)?.coords().to_vec();
        }
        self.constrained = true;
        Ok(())
    }

    pub fn max_norm_deviation(&self) -> f64 {
        self.agents
            .iter()
            .map(|a| (geometry::norm(a) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(AGENT_MAGIC)?;
            f.write_all(&(self.agents.len() as u32).to_le_bytes())?;
            f.write_all(&(self.dim as u32).to_le_bytes())?;
            for a in &self.agents {
                for v in a {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, constrained: bool) -> Result<Self> {
        let mal = |detail: &str| MarError::MalformedFile {
            path: path.display().to_string(),
            detail: detail.to_string(),
        };
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(|_| mal("truncated header"))?;
        if &magic != AGENT_MAGIC {
            return Err(mal("bad magic"));
        }
        let mut b4 = [0u8; 4];
        f.read_exact(&mut b4).map_err(|_| mal("truncated header"))?;
        let n_p = u32::from_le_bytes(b4) as usize;
        f.read_exact(&mut b4).map_err(|_| mal("truncated header"))?;
        let dim = u32::from_le_bytes(b4) as usize;
        let mut agents = Vec::with_capacity(n_p);
        for _ in 0..n_p {
            let mut a = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b8 = [0u8; 8];
                f.read_exact(&mut b8).map_err(|_| mal("truncated agent data"))?;
                a.push(f64::from_le_bytes(b8));
            }
            agents.push(a);
        }
        let bank = Self { agents, dim, constrained };
        if bank.agents.iter().flatten().any(|v| !v.is_finite()) {
            return Err(mal("non-finite agent coordinate"));
        }
        Ok(bank)
    }
}

/// Gradients w.r.t. a set of vectors (embeddings or agents).
pub type VecGrads = Vec<Vec<f64>>;

pub fn zero_grads(n: usize, dim: usize) -> VecGrads {
    vec![vec![0.0; dim]; n]
}

/// Agent learning loss: mean cross-entropy of the scaled agent logits against
/// the auxiliary labels (1-based person ids).
///
/// Returns (loss, grads w.r.t. embeddings, grads w.r.t. agents).
pub fn al_loss(
    aux_embeddings: &[Vec<f64>],
    labels: &[usize],
    agents: &AgentBank,
    scale: f64,
) -> Result<(f64, VecGrads, VecGrads)> {
    if agents.is_empty() {
        return Err(MarError::EmptyAgentBank);
    }
    let n_p = agents.len();
    for &w in labels {
        if w == 0 || w > n_p {
            return Err(MarError::LabelOutOfRange { label: w, max: n_p });
        }
    }
    let n = aux_embeddings.len();
    let mut loss = 0.0;
    let mut g_emb = zero_grads(n, agents.dim());
    let mut g_agents = zero_grads(n_p, agents.dim());
    for (k, (f_z, &w)) in aux_embeddings.iter().zip(labels).enumerate() {
        if f_z.len() != agents.dim() {
            return Err(MarError::DimensionMismatch { expected: agents.dim(), got: f_z.len() });
        }
        let logits: Vec<f64> = (0..n_p).map(|i| scale * geometry::dot(agents.agent(i), f_z)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let target = w - 1;
        loss += -(exps[target] / z).ln();
        for i in 0..n_p {
            let y_i = exps[i] / z;
            let dlogit = (y_i - if i == target { 1.0 } else { 0.0 }) / n as f64;
            for (ge, &a) in g_emb[k].iter_mut().zip(agents.agent(i)) {
                *ge += scale * dlogit * a;
            }
            for (ga, &e) in g_agents[i].iter_mut().zip(f_z) {
                *ga += scale * dlogit * e;
            }
        }
    }
    Ok((loss / n as f64, g_emb, g_agents))
}

/// Per-agent mined target indices: M_i = { j : ||a_i - f(x_j)||^2 < m }.
pub fn rj_mined_sets(agents: &AgentBank, target_embeddings: &[UnitVector], m: f64) -> Vec<Vec<usize>> {
    (0..agents.len())
        .map(|i| {
            target_embeddings
                .iter()
                .enumerate()
                .filter(|(_, u)| sq_dist(agents.agent(i), u.coords()) < m)
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Joint-embedding loss over precomputed mined sets: averaged hinge terms on
/// cross-domain similar pairs plus averaged center-pulling terms.
///
/// Returns (loss, grads w.r.t. agents, grads w.r.t. target embeddings, grads
/// w.r.t. aux embeddings).
pub fn rj_loss_with_sets(
    agents: &AgentBank,
    target_embeddings: &[UnitVector],
    aux_embeddings: &[Vec<f64>],
    labels: &[usize],
    m: f64,
    mined: &[Vec<usize>],
) -> Result<(f64, VecGrads, VecGrads, VecGrads)> {
    let n_p = agents.len();
    let d = agents.dim();
    for &w in labels {
        if w == 0 || w > n_p {
            return Err(MarError::LabelOutOfRange { label: w, max: n_p });
        }
    }
    let mut g_agents = zero_grads(n_p, d);
    let mut g_targets = zero_grads(target_embeddings.len(), d);
    let mut g_aux = zero_grads(aux_embeddings.len(), d);

    let n_hinge: usize = mined.iter().map(|s| s.len()).sum();
    let n_center = labels.len();

    let mut hinge_sum = 0.0;
    if n_hinge > 0 {
        let inv = 1.0 / n_hinge as f64;
        for (i, set) in mined.iter().enumerate() {
            let a = agents.agent(i);
            for &j in set {
                let u = target_embeddings[j].coords();
                let d2 = sq_dist(a, u);
                let slack = m - d2;
                // Mined means d2 < m, so the hinge is active; keep the guard
                // for externally supplied sets.
                if slack > 0.0 {
                    hinge_sum += slack;
                    for k in 0..d {
                        let diff = a[k] - u[k];
                        g_agents[i][k] += inv * (-2.0 * diff);
                        g_targets[j][k] += inv * (2.0 * diff);
                    }
                }
            }
        }
        hinge_sum *= inv;
    }

    let mut center_sum = 0.0;
    if n_center > 0 {
        let inv = 1.0 / n_center as f64;
        for (k, (f_z, &w)) in aux_embeddings.iter().zip(labels).enumerate() {
            let i = w - 1;
            let a = agents.agent(i);
            center_sum += sq_dist(a, f_z);
            for c in 0..d {
                let diff = a[c] - f_z[c];
                g_agents[i][c] += inv * 2.0 * diff;
                g_aux[k][c] += inv * (-2.0 * diff);
            }
        }
        center_sum *= inv;
    }

    Ok((hinge_sum + center_sum, g_agents, g_targets, g_aux))
}

/// Mines the per-agent sets from current embeddings, then evaluates the loss.
pub fn rj_loss(
    agents: &AgentBank,
    target_embeddings: &[UnitVector],
    aux_embeddings: &[Vec<f64>],
    labels: &[usize],
    m: f64,
) -> Result<(f64, VecGrads, VecGrads, VecGrads)> {
    let mined = rj_mined_sets(agents, target_embeddings, m);
    rj_loss_with_sets(agents, target_embeddings, aux_embeddings, labels, m, &mined)
}

/// Combined reference agent learning loss.
pub fn ral_loss(al: f64, rj: f64, beta: f64) -> f64 {
    al + beta * rj
}
