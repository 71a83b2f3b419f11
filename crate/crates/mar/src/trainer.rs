//! The full training objective and the two-phase schedule: agent-loss
//! pretraining with free norms, logit-scale freezing, then constrained
//! training of the combined objective with per-step agent reprojection.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agents::{self, AgentBank, VecGrads};
use crate::config::{MiningMode, TrainConfig};
use crate::data::FeatureDataset;
use crate::encoder::{EncoderGrads, EncoderOutput, EncoderParams};
use crate::error::{MarError, Result};
use crate::evalset::LabeledEmbeddingSet;
use crate::geometry::{self, UnitVector};
use crate::mining;
use crate::softlabel::{self, SoftMultilabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Constrained,
}

/// Mutable training state between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub encoder: EncoderParams,
    pub agents: AgentBank,
    pub scale: f64,
    pub phase: Phase,
    pub epoch: usize,
    pub step: u64,
    /// Sum/count of true-class inner products over the current pretrain epoch.
    logit_sum: f64,
    logit_count: u64,
    /// Worst embedding/agent norm deviation seen in the constrained phase.
    pub max_norm_deviation: f64,
}

/// Per-step (and per-epoch averaged) loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub mdl: f64,
    pub cml: f64,
    pub al: f64,
    pub rj: f64,
    pub total: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// One metrics-log row.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub losses: LossBreakdown,
    pub scale: f64,
}

impl TrainState {
    pub fn new(config: &TrainConfig, n_reference_persons: usize) -> Result<Self> {
        config.validate()?;
        if n_reference_persons < 2 {
            return Err(MarError::Config("need at least 2 reference persons".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder =
            EncoderParams::init(config.d_in, config.d_h, config.d_out, config.depth, &mut rng);
        let agents = AgentBank::init(n_reference_persons, config.d_out, &mut rng);
        Ok(Self {
            encoder,
            agents,
            scale: 1.0,
            phase: Phase::Pretrain,
            epoch: 0,
            step: 0,
            logit_sum: 0.0,
            logit_count: 0,
            max_norm_deviation: 0.0,
        })
    }

    pub fn running_logit_mean(&self) -> Option<f64> {
        (self.logit_count > 0).then(|| self.logit_sum / self.logit_count as f64)
    }

    fn reset_epoch_stats(&mut self) {
        self.logit_sum = 0.0;
        self.logit_count = 0;
    }
}

/// Uniformly samples B/2 target and B/2 auxiliary indices, deterministic in
/// (seed, step). Sampling is without replacement when the pool allows it.
pub fn compose_batch(
    seed: u64,
    step: u64,
    batch_size: usize,
    n_target: usize,
    n_aux: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_target == 0 || n_aux == 0 {
        return Err(MarError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let half = batch_size / 2;
    let draw = |rng: &mut ChaCha8Rng, n: usize, count: usize| -> Vec<usize> {
        if count <= n {
            // Partial Fisher-Yates over an index pool.
            let mut pool: Vec<usize> = (0..n).collect();
            for i in 0..count {
                let j = rng.gen_range(i..n);
                pool.swap(i, j);
            }
            pool.truncate(count);
            pool
        } else {
            (0..count).map(|_| rng.gen_range(0..n)).collect()
        }
    };
    let target = draw(&mut rng, n_target, half);
    let aux = draw(&mut rng, n_aux, half);
    Ok((target, aux))
}

/// Forward a set of rows through the encoder, returning caches.
fn forward_all(
    encoder: &EncoderParams,
    rows: &[&Vec<f64>],
    constrained: bool,
) -> Result<Vec<EncoderOutput>> {
    rows.iter().map(|x| encoder.forward(x, constrained)).collect()
}

/// One loss+gradient evaluation of the combined objective on explicit
/// batches. Mining (pair sets and per-agent sets) is recomputed from the
/// given parameters.
///
/// Returns the loss breakdown, the encoder gradients and the agent gradients.
pub fn mar_losses(
    encoder: &EncoderParams,
    agent_bank: &AgentBank,
    scale: f64,
    config: &TrainConfig,
    target_rows: &[&Vec<f64>],
    target_views: &[u32],
    aux_rows: &[&Vec<f64>],
    aux_labels: &[usize],
) -> Result<(LossBreakdown, EncoderGrads, VecGrads)> {
    let d = config.d_out;
    let target_out = forward_all(encoder, target_rows, true)?;
    let aux_out = forward_all(encoder, aux_rows, true)?;
    let target_units: Vec<UnitVector> = target_out
        .iter()
        .map(|o| UnitVector::from_unit(o.embedding.clone()))
        .collect();
    let aux_embs: Vec<Vec<f64>> = aux_out.iter().map(|o| o.embedding.clone()).collect();

    let mut g_targets = agents::zero_grads(target_units.len(), d);
    let mut g_aux = agents::zero_grads(aux_embs.len(), d);
    let mut g_agents = agents::zero_grads(agent_bank.len(), d);
    let mut breakdown = LossBreakdown::default();

    // Discriminative embedding loss over mined pairs.
    {
        let sims = geometry::pairwise_similarities(&target_units)?;
        let sets = match config.mining {
            MiningMode::Guided => {
                let labels: Vec<SoftMultilabel> = target_units
                    .iter()
                    .map(|u| softlabel::soft_multilabel(u.coords(), agent_bank, scale))
                    .collect::<Result<_>>()?;
                let agreements = geometry::SimilarityTable::from_fn(labels.len(), |i, j| {
                    softlabel::agreement(&labels[i], &labels[j]).expect("equal label dims")
                })?;
                let thresholds = mining::compute_thresholds(&sims, &agreements, config.p)?;
                mining::build_sets(&sims, &agreements, &thresholds)
            }
            MiningMode::Baseline => mining::baseline_sets(&sims, config.p)?,
        };
        breakdown.n_pos = sets.positives.len();
        breakdown.n_neg = sets.hard_negatives.len();
        match mining::mdl_loss(&sets, &target_units) {
            Ok((loss, grads)) => {
                breakdown.mdl = loss;
                for (acc, g) in g_targets.iter_mut().zip(&grads) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            // Early training can legitimately produce an empty side; the
            // term is skipped for this batch.
            Err(MarError::EmptyMiningSet { .. }) => breakdown.mdl = 0.0,
            Err(e) => return Err(e),
        }
    }

    // Cross-view consistency. Skipped entirely when lambda1 = 0 so runs are
    // independent of view ids.
    if config.lambda1 > 0.0 {
        match softlabel::cml_loss(&target_units, target_views, agent_bank, scale) {
            Ok((loss, ge, ga)) => {
                breakdown.cml = loss;
                for (acc, g) in g_targets.iter_mut().zip(&ge) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += config.lambda1 * b;
                    }
                }
                for (acc, g) in g_agents.iter_mut().zip(&ga) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += config.lambda1 * b;
                    }
                }
            }
            Err(MarError::NoValidViews) => breakdown.cml = 0.0,
            Err(e) => return Err(e),
        }
    }

    // Reference agent learning.
    if config.lambda2 > 0.0 {
        let (al, al_ge, al_ga) = agents::al_loss(&aux_embs, aux_labels, agent_bank, scale)?;
        breakdown.al = al;
        let (rj, rj_ga, rj_gt, rj_gx) =
            agents::rj_loss(agent_bank, &target_units, &aux_embs, aux_labels, config.m)?;
        breakdown.rj = rj;
        let l2 = config.lambda2;
        let l2b = config.lambda2 * config.beta;
        for (acc, g) in g_aux.iter_mut().zip(&al_ge) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += l2 * b;
            }
        }
        for (acc, g) in g_aux.iter_mut().zip(&rj_gx) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += l2b * b;
            }
        }
        for (acc, g) in g_targets.iter_mut().zip(&rj_gt) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += l2b * b;
            }
        }
        for (acc, (g1, g2)) in g_agents.iter_mut().zip(al_ga.iter().zip(&rj_ga)) {
            for ((a, b1), b2) in acc.iter_mut().zip(g1).zip(g2) {
                *a += l2 * b1 + l2b * b2;
            }
        }
    }

    breakdown.total = breakdown.mdl
        + config.lambda1 * breakdown.cml
        + config.lambda2 * (breakdown.al + config.beta * breakdown.rj);
    if !breakdown.total.is_finite() {
        return Err(MarError::NumericalFailure("non-finite training loss".into()));
    }

    // Chain embedding gradients through the encoder, fixed sample order:
    // targets first, then aux.
    let mut enc_grads = encoder.zero_grads();
    for ((x, out), g) in target_rows.iter().zip(&target_out).zip(&g_targets) {
        let per = encoder.backward(x, out, g, true)?;
        enc_grads.accumulate(&per, 1.0);
    }
    for ((x, out), g) in aux_rows.iter().zip(&aux_out).zip(&g_aux) {
        let per = encoder.backward(x, out, g, true)?;
        enc_grads.accumulate(&per, 1.0);
    }
    Ok((breakdown, enc_grads, g_agents))
}

fn clip_gradients(enc: &mut EncoderGrads, agents_g: &mut VecGrads, max_norm: f64) {
    let agent_sq: f64 = agents_g.iter().flatten().map(|v| v * v).sum();
    let norm = (enc.squared_norm() + agent_sq).sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        enc.scale(f);
        for g in agents_g.iter_mut() {
            for v in g {
                *v *= f;
            }
        }
    }
}

fn apply_agent_update(bank: &mut AgentBank, grads: &VecGrads, lr: f64) {
    for (a, g) in bank.agents_mut().iter_mut().zip(grads) {
        for (p, gv) in a.iter_mut().zip(g) {
            *p -= lr * gv;
        }
    }
}

/// One pretraining SGD step on the agent loss with free norms.
pub fn pretrain_step(
    state: &mut TrainState,
    config: &TrainConfig,
    aux_rows: &[&Vec<f64>],
    aux_labels: &[usize],
) -> Result<LossBreakdown> {
    assert!(state.phase == Phase::Pretrain, "pretrain_step requires the pretrain phase");
    let aux_out = forward_all(&state.encoder, aux_rows, false)?;
    let aux_embs: Vec<Vec<f64>> = aux_out.iter().map(|o| o.embedding.clone()).collect();
    let (al, g_emb, mut g_agents) = agents::al_loss(&aux_embs, aux_labels, &state.agents, 1.0)?;
    if !al.is_finite() {
        return Err(MarError::NumericalFailure("non-finite pretraining loss".into()));
    }
    // Running average of the true-class inner products, the quantity the
    // constrained-phase rescaling must preserve.
    for (emb, &w) in aux_embs.iter().zip(aux_labels) {
        state.logit_sum += geometry::dot(state.agents.agent(w - 1), emb);
        state.logit_count += 1;
    }
    let mut enc_grads = state.encoder.zero_grads();
    for ((x, out), g) in aux_rows.iter().zip(&aux_out).zip(&g_emb) {
        let per = state.encoder.backward(x, out, g, false)?;
        enc_grads.accumulate(&per, 1.0);
    }
    if config.clip_grad {
        clip_gradients(&mut enc_grads, &mut g_agents, config.clip_norm);
    }
    state.encoder.apply_update(&enc_grads, config.lr_pretrain);
    apply_agent_update(&mut state.agents, &g_agents, config.lr_pretrain);
    state.step += 1;
    Ok(LossBreakdown { al, total: al, ..Default::default() })
}

/// Ends pretraining: freezes the logit scale to the last epoch's running
/// average and projects the agents onto the sphere.
pub fn freeze_scale(state: &mut TrainState) -> Result<()> {
    assert!(state.phase == Phase::Pretrain);
    let mean = state.running_logit_mean().ok_or(MarError::NoPretrainStats)?;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(MarError::InvalidScale(mean));
    }
    state.scale = mean;
    state.agents.renormalize()?;
    state.phase = Phase::Constrained;
    Ok(())
}

/// One constrained SGD step on the full objective.
pub fn mar_step(
    state: &mut TrainState,
    config: &TrainConfig,
    target_rows: &[&Vec<f64>],
    target_views: &[u32],
    aux_rows: &[&Vec<f64>],
    aux_labels: &[usize],
) -> Result<LossBreakdown> {
    assert!(state.phase == Phase::Constrained, "mar_step requires the constrained phase");
    let (breakdown, mut enc_grads, mut agent_grads) = mar_losses(
        &state.encoder,
        &state.agents,
        state.scale,
        config,
        target_rows,
        target_views,
        aux_rows,
        aux_labels,
    )?;
    if config.clip_grad {
        clip_gradients(&mut enc_grads, &mut agent_grads, config.clip_norm);
    }
    state.encoder.apply_update(&enc_grads, config.lr_train);
    apply_agent_update(&mut state.agents, &agent_grads, config.lr_train);
    state.agents.renormalize()?;
    state.step += 1;

    // Norm invariant bookkeeping: agents after projection plus the batch
    // embeddings under the updated parameters.
    let mut dev = state.agents.max_norm_deviation();
    for x in target_rows.iter().chain(aux_rows.iter()) {
        let out = state.encoder.forward(x, true)?;
        dev = dev.max((geometry::norm(&out.embedding) - 1.0).abs());
    }
    state.max_norm_deviation = state.max_norm_deviation.max(dev);
    Ok(breakdown)
}

/// Maps global auxiliary person ids to dense 1-based labels.
pub fn dense_labels(aux: &FeatureDataset) -> (Vec<usize>, usize) {
    let mut uniq: Vec<i64> = aux.person_ids.clone();
    uniq.sort_unstable();
    uniq.dedup();
    let labels = aux
        .person_ids
        .iter()
        .map(|pid| uniq.binary_search(pid).expect("id present") + 1)
        .collect();
    (labels, uniq.len())
}

/// Runs the full schedule: pretraining, scale freezing, constrained training.
/// Returns the final state and one record per epoch.
pub fn train(
    config: &TrainConfig,
    target: &FeatureDataset,
    aux: &FeatureDataset,
) -> Result<(TrainState, Vec<EpochRecord>)> {
    config.validate()?;
    if target.is_empty() || aux.is_empty() {
        return Err(MarError::EmptyDataset);
    }
    if target.dim != config.d_in || aux.dim != config.d_in {
        return Err(MarError::DimensionMismatch { expected: config.d_in, got: target.dim });
    }
    let (aux_labels, n_p) = dense_labels(aux);
    let mut state = TrainState::new(config, n_p)?;
    let half = config.batch_size / 2;
    let steps_per_epoch = (target.len() + half - 1) / half;
    let mut records = Vec::new();

    for epoch in 1..=config.pretrain_epochs {
        state.epoch = epoch;
        state.reset_epoch_stats();
        let mut acc = LossBreakdown::default();
        for _ in 0..steps_per_epoch {
            let (_, aux_idx) =
                compose_batch(config.seed, state.step, config.batch_size, target.len(), aux.len())?;
            let rows: Vec<&Vec<f64>> = aux_idx.iter().map(|&i| &aux.features[i]).collect();
            let labels: Vec<usize> = aux_idx.iter().map(|&i| aux_labels[i]).collect();
            let b = pretrain_step(&mut state, config, &rows, &labels)?;
            acc.al += b.al;
            acc.total += b.total;
        }
        acc.al /= steps_per_epoch as f64;
        acc.total /= steps_per_epoch as f64;
        records.push(EpochRecord { epoch, phase: Phase::Pretrain, losses: acc, scale: state.scale });
    }

    if config.pretrain_epochs > 0 {
        freeze_scale(&mut state)?;
    } else {
        let scale = config.scale_override.ok_or(MarError::NoPretrainStats)?;
        state.scale = scale;
        state.agents.renormalize()?;
        state.phase = Phase::Constrained;
    }
    if let Some(s) = config.scale_override {
        state.scale = s;
    }

    for e in 1..=config.train_epochs {
        let epoch = config.pretrain_epochs + e;
        state.epoch = epoch;
        let mut acc = LossBreakdown::default();
        for _ in 0..steps_per_epoch {
            let (t_idx, a_idx) =
                compose_batch(config.seed, state.step, config.batch_size, target.len(), aux.len())?;
            let t_rows: Vec<&Vec<f64>> = t_idx.iter().map(|&i| &target.features[i]).collect();
            let t_views: Vec<u32> = t_idx.iter().map(|&i| target.view_ids[i]).collect();
            let a_rows: Vec<&Vec<f64>> = a_idx.iter().map(|&i| &aux.features[i]).collect();
            let labels: Vec<usize> = a_idx.iter().map(|&i| aux_labels[i]).collect();
            let b = mar_step(&mut state, config, &t_rows, &t_views, &a_rows, &labels)?;
            acc.mdl += b.mdl;
            acc.cml += b.cml;
            acc.al += b.al;
            acc.rj += b.rj;
            acc.total += b.total;
            acc.n_pos += b.n_pos;
            acc.n_neg += b.n_neg;
        }
        let n = steps_per_epoch as f64;
        acc.mdl /= n;
        acc.cml /= n;
        acc.al /= n;
        acc.rj /= n;
        acc.total /= n;
        records.push(EpochRecord { epoch, phase: Phase::Constrained, losses: acc, scale: state.scale });
    }
    Ok((state, records))
}

/// Embeds a dataset with the constrained encoder into a labeled set.
pub fn embed_dataset(encoder: &EncoderParams, ds: &FeatureDataset) -> Result<LabeledEmbeddingSet> {
    let embeddings = ds
        .features
        .iter()
        .map(|x| Ok(UnitVector::from_unit(encoder.forward(x, true)?.embedding)))
        .collect::<Result<_>>()?;
    Ok(LabeledEmbeddingSet {
        embeddings,
        person_ids: ds.person_ids.clone(),
        view_ids: ds.view_ids.clone(),
    })
}

/// The cross-view consistency statistic of a dataset under given parameters,
/// used to compare runs on held-out data.
pub fn cml_statistic(
    encoder: &EncoderParams,
    agent_bank: &AgentBank,
    scale: f64,
    ds: &FeatureDataset,
) -> Result<f64> {
    let labels: Vec<(SoftMultilabel, u32)> = ds
        .features
        .iter()
        .zip(&ds.view_ids)
        .map(|(x, &v)| {
            let out = encoder.forward(x, true)?;
            Ok((softlabel::soft_multilabel(&out.embedding, agent_bank, scale)?, v))
        })
        .collect::<Result<_>>()?;
    let stats = softlabel::view_stats(&labels)?;
    Ok(softlabel::cml_from_stats(&stats))
}

/// Renders epoch records as the metrics-log CSV.
pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mdl,cml,al,rj,total,n_pos,n_neg,scale\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.losses.mdl,
            r.losses.cml,
            r.losses.al,
            r.losses.rj,
            r.losses.total,
            r.losses.n_pos,
            r.losses.n_neg,
            r.scale
        ));
    }
    out
}
