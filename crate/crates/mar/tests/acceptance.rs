//! End-to-end acceptance gate. Each test prints one PASS/FAIL line for its
//! criterion. The expensive training runs are shared across tests through a
//! lazily initialized fixture; all of them are deterministic in the seed.

use std::sync::OnceLock;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mar::agents::{self, AgentBank};
use mar::data::{self, FeatureDataset, SyntheticSpec};
use mar::encoder::EncoderParams;
use mar::evalset::{self, LabeledEmbeddingSet};
use mar::geometry::{self, UnitVector};
use mar::mining::{self, MiningSets};
use mar::softlabel::{self, SoftMultilabel};
use mar::trainer::{self, EpochRecord, TrainState};
use mar::{MiningMode, TrainConfig};

fn verdict(criterion: &str, ok: bool) {
    println!("{criterion}: {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{criterion} failed");
}

struct Fixture {
    target: FeatureDataset,
    holdout: FeatureDataset,
    guided: TrainState,
    pretrain_only: TrainState,
    baseline: TrainState,
    lambda1_zero: TrainState,
    lambda1_zero_csv: String,
    lambda1_zero_permuted_csv: String,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let spec = SyntheticSpec::default();
        let (target, aux) = data::generate(&spec).unwrap();
        // Held-out images from the same population: regenerating at the same
        // seed with twice the images per (person, view) group reproduces the
        // training rows in the first half of each group (prototypes and view
        // transforms are drawn before the per-image noise), so the second
        // half is a fresh holdout under identical view conditions.
        let extra = SyntheticSpec {
            images_per_person_per_view: spec.images_per_person_per_view * 2,
            ..spec.clone()
        };
        let (big, _) = data::generate(&extra).unwrap();
        let per = spec.images_per_person_per_view;
        let keep: Vec<usize> =
            (0..big.person_ids.len()).filter(|i| i % (2 * per) >= per).collect();
        let holdout = FeatureDataset {
            features: keep.iter().map(|&i| big.features[i].clone()).collect(),
            person_ids: keep.iter().map(|&i| big.person_ids[i]).collect(),
            view_ids: keep.iter().map(|&i| big.view_ids[i]).collect(),
            domain: big.domain,
            dim: big.dim,
        };

        let cfg = TrainConfig::default();
        let (guided, _) = trainer::train(&cfg, &target, &aux).unwrap();

        let pre_cfg = TrainConfig { train_epochs: 0, ..cfg.clone() };
        let (pretrain_only, _) = trainer::train(&pre_cfg, &target, &aux).unwrap();

        let base_cfg = TrainConfig { mining: MiningMode::Baseline, ..cfg.clone() };
        let (baseline, _) = trainer::train(&base_cfg, &target, &aux).unwrap();

        let zero_cfg = TrainConfig { lambda1: 0.0, ..cfg.clone() };
        let (lambda1_zero, zero_records) = trainer::train(&zero_cfg, &target, &aux).unwrap();

        let mut permuted = target.clone();
        let n_views = spec.views_target as u32;
        for v in &mut permuted.view_ids {
            *v = (*v % n_views) + 1; // cyclic relabeling of the views
        }
        let (_, permuted_records) = trainer::train(&zero_cfg, &permuted, &aux).unwrap();

        Fixture {
            target,
            holdout,
            guided,
            pretrain_only,
            baseline,
            lambda1_zero,
            lambda1_zero_csv: csv(&zero_records),
            lambda1_zero_permuted_csv: csv(&permuted_records),
        }
    })
}

fn csv(records: &[EpochRecord]) -> String {
    trainer::metrics_csv(records)
}

fn rank1_and_map(state: &TrainState, ds: &FeatureDataset) -> (f64, f64) {
    let set = trainer::embed_dataset(&state.encoder, ds).unwrap();
    let report = evalset::cmc_map(&set, &set, &[1]).unwrap();
    (report.cmc[0].1, report.map)
}

// --- A1: analytic gradients vs central finite differences -------------------

struct GradInstance {
    encoder: EncoderParams,
    agents: AgentBank,
    target_x: Vec<Vec<f64>>,
    target_views: Vec<u32>,
    aux_x: Vec<Vec<f64>>,
    aux_labels: Vec<usize>,
    scale: f64,
    margin: f64,
    mdl_sets: MiningSets,
    rj_sets: Vec<Vec<usize>>,
}

impl GradInstance {
    fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let d_in = 5;
        let d_out = 4;
        let encoder = EncoderParams::init(d_in, 0, d_out, 1, &mut rng);
        let agents = AgentBank::from_vectors(
            (0..3)
                .map(|_| {
                    let v: Vec<f64> = (0..d_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    geometry::normalize(&v).unwrap().coords().to_vec()
                })
                .collect(),
            false,
        )
        .unwrap();
        let sample = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let target_x: Vec<Vec<f64>> = (0..6).map(|_| sample(&mut rng)).collect();
        let aux_x: Vec<Vec<f64>> = (0..6).map(|_| sample(&mut rng)).collect();
        let target_views = vec![1, 1, 1, 2, 2, 2];
        let aux_labels = vec![1, 2, 3, 1, 2, 3];
        let scale = 3.0;
        let margin = 1.0;

        let mut inst = Self {
            encoder,
            agents,
            target_x,
            target_views,
            aux_x,
            aux_labels,
            scale,
            margin,
            mdl_sets: MiningSets {
                positives: vec![],
                hard_negatives: vec![],
                thresholds: mining::compute_thresholds(
                    &geometry::SimilarityTable::from_fn(2, |_, _| 0.0).unwrap(),
                    &geometry::SimilarityTable::from_fn(2, |_, _| 0.0).unwrap(),
                    0.5,
                )
                .unwrap(),
            },
            rj_sets: vec![],
        };
        // Freeze the discrete memberships at the unperturbed point so every
        // loss below is smooth over the finite-difference neighborhood.
        let (t_emb, _) = inst.embed();
        let sims = geometry::pairwise_similarities(&t_emb).unwrap();
        let labels: Vec<SoftMultilabel> = t_emb
            .iter()
            .map(|u| softlabel::soft_multilabel(u.coords(), &inst.agents, inst.scale).unwrap())
            .collect();
        let agr = geometry::SimilarityTable::from_fn(t_emb.len(), |i, j| {
            softlabel::agreement(&labels[i], &labels[j]).unwrap()
        })
        .unwrap();
        let th = mining::compute_thresholds(&sims, &agr, 0.4).unwrap();
        inst.mdl_sets = mining::build_sets(&sims, &agr, &th);
        assert!(!inst.mdl_sets.positives.is_empty() && !inst.mdl_sets.hard_negatives.is_empty());
        inst.rj_sets = agents::rj_mined_sets(&inst.agents, &t_emb, inst.margin);
        inst
    }

    fn embed(&self) -> (Vec<UnitVector>, Vec<Vec<f64>>) {
        let t = self
            .target_x
            .iter()
            .map(|x| UnitVector::from_unit(self.encoder.forward(x, true).unwrap().embedding))
            .collect();
        let a = self
            .aux_x
            .iter()
            .map(|x| self.encoder.forward(x, true).unwrap().embedding)
            .collect();
        (t, a)
    }

    /// Loss plus analytic gradients w.r.t. flat encoder params and agent
    /// coordinates, for one weighted combination of the four terms.
    fn eval(&self, w_mdl: f64, w_cml: f64, w_al: f64, w_rj: f64) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
        let (t_emb, a_emb) = self.embed();
        let d = self.agents.dim();
        let mut g_t = agents::zero_grads(t_emb.len(), d);
        let mut g_a = agents::zero_grads(a_emb.len(), d);
        let mut g_agents = agents::zero_grads(self.agents.len(), d);
        let mut loss = 0.0;

        if w_mdl != 0.0 {
            let (l, g) = mining::mdl_loss(&self.mdl_sets, &t_emb).unwrap();
            loss += w_mdl * l;
            add(&mut g_t, &g, w_mdl);
        }
        if w_cml != 0.0 {
            let (l, ge, ga) =
                softlabel::cml_loss(&t_emb, &self.target_views, &self.agents, self.scale).unwrap();
            loss += w_cml * l;
            add(&mut g_t, &ge, w_cml);
            add(&mut g_agents, &ga, w_cml);
        }
        if w_al != 0.0 {
            let (l, ge, ga) =
                agents::al_loss(&a_emb, &self.aux_labels, &self.agents, self.scale).unwrap();
            loss += w_al * l;
            add(&mut g_a, &ge, w_al);
            add(&mut g_agents, &ga, w_al);
        }
        if w_rj != 0.0 {
            let (l, ga, gt, gx) = agents::rj_loss_with_sets(
                &self.agents,
                &t_emb,
                &a_emb,
                &self.aux_labels,
                self.margin,
                &self.rj_sets,
            )
            .unwrap();
            loss += w_rj * l;
            add(&mut g_agents, &ga, w_rj);
            add(&mut g_t, &gt, w_rj);
            add(&mut g_a, &gx, w_rj);
        }

        let mut enc = self.encoder.zero_grads();
        for (x, (g, u)) in self.target_x.iter().zip(g_t.iter().zip(&t_emb)) {
            let out = self.encoder.forward(x, true).unwrap();
            debug_assert_eq!(out.embedding, u.coords());
            enc.accumulate(&self.encoder.backward(x, &out, g, true).unwrap(), 1.0);
        }
        for (x, g) in self.aux_x.iter().zip(&g_a) {
            let out = self.encoder.forward(x, true).unwrap();
            enc.accumulate(&self.encoder.backward(x, &out, g, true).unwrap(), 1.0);
        }
        let flat = (0..self.encoder.param_count())
            .map(|i| enc_flat(&enc, &self.encoder, i))
            .collect();
        (loss, flat, g_agents)
    }
}

fn add(acc: &mut [Vec<f64>], g: &[Vec<f64>], w: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += w * y;
        }
    }
}

/// Reads gradient component `idx` using the same flat indexing the encoder
/// uses for its parameters, by round-tripping through a probe update.
fn enc_flat(grads: &mar::encoder::EncoderGrads, params: &EncoderParams, idx: usize) -> f64 {
    let mut probe = params.clone();
    probe.apply_update(grads, 1.0);
    params.get_param(idx) - probe.get_param(idx)
}

fn check_grads(name: &str, w: (f64, f64, f64, f64)) -> bool {
    let inst = GradInstance::new();
    let (_, g_enc, g_agents) = inst.eval(w.0, w.1, w.2, w.3);
    let h = 1e-5;
    let close = |analytic: f64, numeric: f64| -> bool {
        if analytic.abs() < 1e-6 {
            (analytic - numeric).abs() <= 1e-8
        } else {
            ((analytic - numeric) / analytic).abs() <= 1e-4
        }
    };
    let mut ok = true;
    for i in 0..inst.encoder.param_count() {
        let mut plus = GradInstance { encoder: inst.encoder.clone(), ..inst_clone(&inst) };
        plus.encoder.set_param(i, inst.encoder.get_param(i) + h);
        let mut minus = GradInstance { encoder: inst.encoder.clone(), ..inst_clone(&inst) };
        minus.encoder.set_param(i, inst.encoder.get_param(i) - h);
        let fd = (plus.eval(w.0, w.1, w.2, w.3).0 - minus.eval(w.0, w.1, w.2, w.3).0) / (2.0 * h);
        if !close(g_enc[i], fd) {
            eprintln!("{name}: encoder param {i}: analytic {} vs fd {fd}", g_enc[i]);
            ok = false;
        }
    }
    for i in 0..inst.agents.len() {
        for c in 0..inst.agents.dim() {
            let mut plus = inst_clone(&inst);
            plus.agents.agents_mut()[i][c] += h;
            let mut minus = inst_clone(&inst);
            minus.agents.agents_mut()[i][c] -= h;
            let fd =
                (plus.eval(w.0, w.1, w.2, w.3).0 - minus.eval(w.0, w.1, w.2, w.3).0) / (2.0 * h);
            if !close(g_agents[i][c], fd) {
                eprintln!("{name}: agent {i}[{c}]: analytic {} vs fd {fd}", g_agents[i][c]);
                ok = false;
            }
        }
    }
    ok
}

fn inst_clone(inst: &GradInstance) -> GradInstance {
    GradInstance {
        encoder: inst.encoder.clone(),
        agents: inst.agents.clone(),
        target_x: inst.target_x.clone(),
        target_views: inst.target_views.clone(),
        aux_x: inst.aux_x.clone(),
        aux_labels: inst.aux_labels.clone(),
        scale: inst.scale,
        margin: inst.margin,
        mdl_sets: inst.mdl_sets.clone(),
        rj_sets: inst.rj_sets.clone(),
    }
}

#[test]
fn a1_gradients_match_finite_differences() {
    let ok = check_grads("agent classification", (0.0, 0.0, 1.0, 0.0))
        && check_grads("joint embedding", (0.0, 0.0, 0.0, 1.0))
        && check_grads("discriminative embedding", (1.0, 0.0, 0.0, 0.0))
        && check_grads("cross-view consistency", (0.0, 1.0, 0.0, 0.0))
        && check_grads("combined objective", (1.0, 0.0002, 50.0, 10.0));
    verdict("A1 analytic gradients match central finite differences", ok);
}

// --- A2: agreement identity -------------------------------------------------

#[test]
fn a2_agreement_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut ok = true;
    let simplex = |rng: &mut ChaCha8Rng, n: usize| -> SoftMultilabel {
        let raw: Vec<f64> = (0..n).map(|_| -f64::ln(rng.gen_range(1e-12..1.0))).collect();
        let s: f64 = raw.iter().sum();
        SoftMultilabel::from_distribution(raw.into_iter().map(|v| v / s).collect()).unwrap()
    };
    for i in 0..1000 {
        let n = [2, 5, 50][i % 3];
        let y1 = simplex(&mut rng, n);
        let y2 = simplex(&mut rng, n);
        let a = softlabel::agreement(&y1, &y2).unwrap();
        let sum_min: f64 = y1.values().iter().zip(y2.values()).map(|(p, q)| p.min(*q)).sum();
        ok &= (a - sum_min).abs() <= 1e-12;
        let self_a = softlabel::agreement(&y1, &y1).unwrap();
        ok &= (self_a - 1.0).abs() <= 1e-12;
    }
    let one_hot = |k: usize| {
        let mut v = vec![0.0; 5];
        v[k] = 1.0;
        SoftMultilabel::from_distribution(v).unwrap()
    };
    let disjoint = softlabel::agreement(&one_hot(0), &one_hot(3)).unwrap();
    ok &= disjoint.abs() <= 1e-12;
    verdict("A2 agreement equals 1 - L1/2 on the simplex", ok);
}

// --- A3: end-to-end uplift --------------------------------------------------

const FROZEN_PRE_RANK1: f64 = 233.0 / 1800.0;
const FROZEN_FIN_RANK1: f64 = 471.0 / 1800.0;

#[test]
fn a3_end_to_end_uplift() {
    let fx = fixture();
    let (pre_rank1, pre_map) = rank1_and_map(&fx.pretrain_only, &fx.target);
    let (fin_rank1, fin_map) = rank1_and_map(&fx.guided, &fx.target);
    let uplift_ok = fin_rank1 >= pre_rank1 + 0.10;
    // Frozen regression values from the first verified run (deterministic).
    let frozen_ok =
        (pre_rank1 - FROZEN_PRE_RANK1).abs() < 1e-9 && (fin_rank1 - FROZEN_FIN_RANK1).abs() < 1e-9;
    println!(
        "A3 detail: pretrain rank1 {pre_rank1:.16} (map {pre_map:.4}) -> \
         full rank1 {fin_rank1:.16} (map {fin_map:.4})"
    );
    verdict("A3 full training lifts rank-1 by at least 10 points", uplift_ok && frozen_ok);
}

// --- A4: guided vs baseline mining -----------------------------------------

fn batch_sets(
    state: &TrainState,
    target: &FeatureDataset,
    step: u64,
    cfg: &TrainConfig,
) -> (Vec<usize>, MiningSets, MiningSets) {
    let (idx, _) = trainer::compose_batch(7, step, cfg.batch_size, target.len(), 1).unwrap();
    let emb: Vec<UnitVector> = idx
        .iter()
        .map(|&i| {
            UnitVector::from_unit(state.encoder.forward(&target.features[i], true).unwrap().embedding)
        })
        .collect();
    let sims = geometry::pairwise_similarities(&emb).unwrap();
    let labels: Vec<SoftMultilabel> = emb
        .iter()
        .map(|u| softlabel::soft_multilabel(u.coords(), &state.agents, state.scale).unwrap())
        .collect();
    let agr = geometry::SimilarityTable::from_fn(emb.len(), |i, j| {
        softlabel::agreement(&labels[i], &labels[j]).unwrap()
    })
    .unwrap();
    let th = mining::compute_thresholds(&sims, &agr, cfg.p).unwrap();
    let guided = mining::build_sets(&sims, &agr, &th);
    let baseline = mining::baseline_sets(&sims, cfg.p).unwrap();
    (idx, guided, baseline)
}

fn negative_precision(idx: &[usize], pairs: &[(usize, usize)], ds: &FeatureDataset) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let wrong = pairs
        .iter()
        .filter(|&&(i, j)| ds.person_ids[idx[i]] != ds.person_ids[idx[j]])
        .count();
    Some(wrong as f64 / pairs.len() as f64)
}

#[test]
fn a4_guided_mining_beats_baseline() {
    let fx = fixture();
    // The precision study widens the mining ratio to 0.1 so that each batch
    // mines enough pairs past the trivially-similar band for the two
    // partition rules to diverge measurably.
    let cfg = TrainConfig { p: 0.1, ..TrainConfig::default() };
    let mut guided_sum = 0.0;
    let mut baseline_sum = 0.0;
    let mut counted = 0usize;
    for s in 0..50u64 {
        let (idx, guided, baseline) = batch_sets(&fx.guided, &fx.target, 1_000_000 + s, &cfg);
        match (
            negative_precision(&idx, &guided.hard_negatives, &fx.target),
            negative_precision(&idx, &baseline.hard_negatives, &fx.target),
        ) {
            (Some(g), Some(b)) => {
                guided_sum += g;
                baseline_sum += b;
                counted += 1;
            }
            _ => continue,
        }
    }
    let precision_ok = counted > 0 && guided_sum / counted as f64 >= baseline_sum / counted as f64;

    let (guided_rank1, _) = rank1_and_map(&fx.guided, &fx.target);
    let (baseline_rank1, _) = rank1_and_map(&fx.baseline, &fx.target);
    println!(
        "A4 detail: negative precision {:.4} vs {:.4} over {counted} batches; \
         rank1 {guided_rank1:.4} vs {baseline_rank1:.4}",
        guided_sum / counted as f64,
        baseline_sum / counted as f64
    );
    verdict(
        "A4 agreement-guided mining matches or beats similarity-only mining",
        precision_ok && guided_rank1 >= baseline_rank1,
    );
}

// --- A5: cross-view consistency effect --------------------------------------

#[test]
fn a5_consistency_loss_effect() {
    let fx = fixture();
    let with_cml = trainer::cml_statistic(
        &fx.guided.encoder,
        &fx.guided.agents,
        fx.guided.scale,
        &fx.holdout,
    )
    .unwrap();
    let without_cml = trainer::cml_statistic(
        &fx.lambda1_zero.encoder,
        &fx.lambda1_zero.agents,
        fx.lambda1_zero.scale,
        &fx.holdout,
    )
    .unwrap();
    let bitwise_ok = fx.lambda1_zero_csv == fx.lambda1_zero_permuted_csv;
    println!("A5 detail: held-out view statistic {with_cml:.4} vs {without_cml:.4}");
    verdict(
        "A5 consistency term shrinks held-out view statistics; disabled runs ignore views",
        with_cml < without_cml && bitwise_ok,
    );
}

// --- A6: norm invariants -----------------------------------------------------

#[test]
fn a6_unit_norm_invariants() {
    let fx = fixture();
    let dev = fx.guided.max_norm_deviation;
    println!("A6 detail: max norm deviation {dev:.3e}");
    verdict("A6 embedding and agent norms stay within 1e-6 of unit", dev <= 1e-6);
}

// --- A7: retrieval metric oracle ---------------------------------------------

fn brute_force_eval(set: &LabeledEmbeddingSet, ks: &[usize]) -> (Vec<f64>, f64) {
    let n = set.len();
    let mut hits = vec![0usize; ks.len()];
    let mut aps = Vec::new();
    for p in 0..n {
        let kept: Vec<usize> = (0..n)
            .filter(|&g| {
                !(set.person_ids[g] == set.person_ids[p] && set.view_ids[g] == set.view_ids[p])
            })
            .collect();
        let relevant: Vec<bool> = kept
            .iter()
            .map(|&g| set.person_ids[g] == set.person_ids[p])
            .collect();
        if !relevant.iter().any(|&r| r) {
            continue;
        }
        let mut order: Vec<usize> = (0..kept.len()).collect();
        order.sort_by(|&a, &b| {
            let sa = geometry::cosine(&set.embeddings[p], &set.embeddings[kept[a]]).unwrap();
            let sb = geometry::cosine(&set.embeddings[p], &set.embeddings[kept[b]]).unwrap();
            sb.partial_cmp(&sa).unwrap().then(kept[a].cmp(&kept[b]))
        });
        let mut num_rel = 0usize;
        let mut ap = 0.0;
        let mut first_hit = usize::MAX;
        for (pos, &o) in order.iter().enumerate() {
            if relevant[o] {
                num_rel += 1;
                ap += num_rel as f64 / (pos + 1) as f64;
                first_hit = first_hit.min(pos);
            }
        }
        aps.push(ap / num_rel as f64);
        for (ki, &k) in ks.iter().enumerate() {
            if first_hit < k {
                hits[ki] += 1;
            }
        }
    }
    let evaluated = aps.len() as f64;
    (
        hits.iter().map(|&h| h as f64 / evaluated).collect(),
        aps.iter().sum::<f64>() / evaluated,
    )
}

#[test]
fn a7_metric_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut ok = true;
    for _ in 0..20 {
        let n = rng.gen_range(6..14);
        let d = rng.gen_range(3..6);
        let set = LabeledEmbeddingSet {
            embeddings: (0..n)
                .map(|_| {
                    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    geometry::normalize(&v).unwrap()
                })
                .collect(),
            person_ids: (0..n).map(|_| rng.gen_range(1..4)).collect(),
            view_ids: (0..n).map(|_| rng.gen_range(1..3)).collect(),
        };
        let ks = [1, 3, 5];
        let report = match evalset::cmc_map(&set, &set, &ks) {
            Ok(r) => r,
            Err(_) => continue, // no valid probes in this draw
        };
        let (cmc, map) = brute_force_eval(&set, &ks);
        for ((_, got), want) in report.cmc.iter().zip(&cmc) {
            ok &= (got - want).abs() <= 1e-12;
        }
        ok &= (report.map - map).abs() <= 1e-12;
    }
    verdict("A7 retrieval metrics match a brute-force oracle", ok);
}

// --- A8: mining rank arithmetic ----------------------------------------------

#[test]
fn a8_mining_rank_arithmetic() {
    let n = 184usize;
    let m_batch = n * (n - 1) / 2;
    let ok = m_batch == 16836 && mining::mining_rank(0.005, m_batch) == 84;
    verdict("A8 mining rank is 84 for 184 samples at ratio 0.005", ok);
}
