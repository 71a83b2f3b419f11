//! Synthetic multi-view, two-domain feature generation and the text dataset
//! format used for external feature ingestion.
//!
//! The generator draws unit-norm person prototypes, applies a random affine
//! transform per camera view, adds Gaussian noise, and plants "confuser"
//! persons that duplicate another person's prototype except in a small
//! trailing subspace of fine-grained clues.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{MarError, Result};
use crate::geometry;

/// Dimensions reserved at the tail of the feature space for the fine-grained
/// clue that distinguishes a confuser from its base person.
const CLUE_DIMS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Target,
    Auxiliary,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Target => "target",
            Domain::Auxiliary => "aux",
        }
    }
}

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_persons_target: usize,
    pub n_persons_aux: usize,
    pub views_target: usize,
    pub views_aux: usize,
    pub images_per_person_per_view: usize,
    pub d_in: usize,
    pub view_transform_scale: f64,
    pub noise_sigma: f64,
    pub confuser_fraction: f64,
    /// How strongly target persons resemble reference persons (0 = unrelated
    /// populations, 1 = target prototypes coincide with reference ones).
    pub reference_affinity: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// The desk-scale benchmark: 150 target and 150 reference persons,
    /// 6 target views with 2 images per person and view, 32-dim features.
    /// The population is sized so that a 184-sample batch holds roughly as
    /// many same-person pairs as the default mining ratio selects.
    fn default() -> Self {
        Self {
            n_persons_target: 150,
            n_persons_aux: 150,
            views_target: 6,
            views_aux: 4,
            images_per_person_per_view: 2,
            d_in: 32,
            view_transform_scale: 0.5,
            noise_sigma: 0.08,
            confuser_fraction: 0.3,
            reference_affinity: 0.6,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_persons_target == 0 || self.n_persons_aux == 0 {
            return Err(MarError::InvalidSpec("person counts must be positive".into()));
        }
        if self.views_target < 2 {
            return Err(MarError::InvalidSpec("need at least 2 target views".into()));
        }
        if self.views_aux < 1 {
            return Err(MarError::InvalidSpec("need at least 1 auxiliary view".into()));
        }
        if self.images_per_person_per_view == 0 {
            return Err(MarError::InvalidSpec("images per person per view must be positive".into()));
        }
        if self.d_in < 2 {
            return Err(MarError::InvalidSpec("feature dimension must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.confuser_fraction) {
            return Err(MarError::InvalidSpec("confuser fraction must lie in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.reference_affinity) {
            return Err(MarError::InvalidSpec("reference affinity must lie in [0,1]".into()));
        }
        if self.view_transform_scale < 0.0 || self.noise_sigma < 0.0 {
            return Err(MarError::InvalidSpec("scales must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A feature dataset with identity and view annotations. Target person ids
/// are hidden from training and consumed only by evaluation and test oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub features: Vec<Vec<f64>>,
    pub person_ids: Vec<i64>,
    pub view_ids: Vec<u32>,
    pub domain: Domain,
    pub dim: usize,
}

impl FeatureDataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn unit_prototype(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        if let Ok(u) = geometry::normalize(&raw) {
            return u.coords().to_vec();
        }
    }
}

struct ViewTransform {
    /// I + scale * G, row-major.
    matrix: Vec<f64>,
    bias: Vec<f64>,
    d: usize,
}

impl ViewTransform {
    fn random(d: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let sqrt_d = (d as f64).sqrt();
        let mut matrix = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                let g = gaussian(rng) / sqrt_d;
                matrix[r * d + c] = if r == c { 1.0 } else { 0.0 } + scale * g;
            }
        }
        let bias: Vec<f64> = (0..d).map(|_| scale * 0.3 * gaussian(rng)).collect();
        Self { matrix, bias, d }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for r in 0..self.d {
            out[r] += geometry::dot(&self.matrix[r * self.d..(r + 1) * self.d], x);
        }
        out
    }
}

fn generate_domain(
    prototypes: &[Vec<f64>],
    first_person_id: i64,
    views: usize,
    images_per: usize,
    scale: f64,
    sigma: f64,
    domain: Domain,
    rng: &mut ChaCha8Rng,
) -> FeatureDataset {
    let d = prototypes[0].len();
    let transforms: Vec<ViewTransform> =
        (0..views).map(|_| ViewTransform::random(d, scale, rng)).collect();
    let mut features = Vec::new();
    let mut person_ids = Vec::new();
    let mut view_ids = Vec::new();
    for (p_idx, proto) in prototypes.iter().enumerate() {
        for (v_idx, tf) in transforms.iter().enumerate() {
            for _ in 0..images_per {
                let mut x = tf.apply(proto);
                if sigma > 0.0 {
                    for xi in &mut x {
                        *xi += sigma * gaussian(rng);
                    }
                }
                features.push(x);
                person_ids.push(first_person_id + p_idx as i64);
                view_ids.push((v_idx + 1) as u32);
            }
        }
    }
    FeatureDataset { features, person_ids, view_ids, domain, dim: d }
}

/// Generates the target and auxiliary datasets. Person populations are
/// disjoint: target ids start at 1, auxiliary ids after the last target id.
pub fn generate(spec: &SyntheticSpec) -> Result<(FeatureDataset, FeatureDataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d_in;

    let aux_protos: Vec<Vec<f64>> =
        (0..spec.n_persons_aux).map(|_| unit_prototype(d, &mut rng)).collect();

    // Target persons resemble reference persons to a tunable degree: each
    // target prototype leans toward a distinct auxiliary prototype. Distinct
    // assignments keep resemblance from collapsing two target persons onto
    // the same reference person.
    let a = spec.reference_affinity;
    let mut assignment: Vec<usize> = (0..spec.n_persons_aux).collect();
    for i in 0..assignment.len() {
        let j = rng.gen_range(i..assignment.len());
        assignment.swap(i, j);
    }
    let mut target_protos: Vec<Vec<f64>> = (0..spec.n_persons_target)
        .map(|p| {
            let fresh = unit_prototype(d, &mut rng);
            if a == 0.0 {
                return fresh;
            }
            let anchor = &aux_protos[assignment[p % assignment.len()]];
            let mixed: Vec<f64> = anchor
                .iter()
                .zip(&fresh)
                .map(|(x, y)| a * x + (1.0 - a) * y)
                .collect();
            geometry::normalize(&mixed)
                .map(|u| u.coords().to_vec())
                .unwrap_or(fresh)
        })
        .collect();
    // Plant confusers: near-duplicates of another person differing only in
    // the trailing clue subspace.
    let n_conf = (spec.confuser_fraction * spec.n_persons_target as f64).round() as usize;
    let clue = CLUE_DIMS.min(d / 2);
    for c in 0..n_conf {
        let victim = spec.n_persons_target - 1 - c;
        let base = c % (spec.n_persons_target - n_conf).max(1);
        let mut proto = target_protos[base].clone();
        for slot in proto.iter_mut().rev().take(clue) {
            *slot = 0.35 * gaussian(&mut rng);
        }
        target_protos[victim] = geometry::normalize(&proto)
            .map(|u| u.coords().to_vec())
            .unwrap_or_else(|_| unit_prototype(d, &mut rng));
    }

    let target = generate_domain(
        &target_protos,
        1,
        spec.views_target,
        spec.images_per_person_per_view,
        spec.view_transform_scale,
        spec.noise_sigma,
        Domain::Target,
        &mut rng,
    );
    let aux = generate_domain(
        &aux_protos,
        1 + spec.n_persons_target as i64,
        spec.views_aux,
        spec.images_per_person_per_view,
        spec.view_transform_scale,
        spec.noise_sigma,
        Domain::Auxiliary,
        &mut rng,
    );
    Ok((target, aux))
}

/// Writes the text format: header lines then one `person_id,view_id,f...`
/// record per sample.
pub fn save(path: &Path, ds: &FeatureDataset) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut out = String::new();
        writeln!(out, "dim = {}", ds.dim).unwrap();
        writeln!(out, "domain = {}", ds.domain.as_str()).unwrap();
        writeln!(out, "count = {}", ds.len()).unwrap();
        for i in 0..ds.len() {
            write!(out, "{},{}", ds.person_ids[i], ds.view_ids[i]).unwrap();
            for v in &ds.features[i] {
                write!(out, ",{}", v).unwrap();
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(out.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FeatureDataset> {
    let mal = |detail: String| MarError::MalformedFile {
        path: path.display().to_string(),
        detail,
    };
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines().enumerate();
    let mut header_val = |key: &str| -> Result<String> {
        loop {
            let (n, line) = lines
                .next()
                .ok_or_else(|| mal(format!("missing header line `{key}`")))?;
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| mal(format!("line {}: expected `{key} = ...`", n + 1)))?;
            if k.trim() != key {
                return Err(mal(format!("line {}: expected header `{key}`, got `{}`", n + 1, k.trim())));
            }
            return Ok(v.trim().to_string());
        }
    };
    let dim: usize = header_val("dim")?
        .parse()
        .map_err(|_| mal("bad dim".into()))?;
    let domain = match header_val("domain")?.as_str() {
        "target" => Domain::Target,
        "aux" => Domain::Auxiliary,
        other => return Err(mal(format!("unknown domain `{other}`"))),
    };
    let count: usize = header_val("count")?
        .parse()
        .map_err(|_| mal("bad count".into()))?;

    let mut features = Vec::with_capacity(count);
    let mut person_ids = Vec::with_capacity(count);
    let mut view_ids = Vec::with_capacity(count);
    for (n, line) in lines {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut parts = t.split(',');
        let pid: i64 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| mal(format!("line {}: bad person id", n + 1)))?;
        let view: u32 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| mal(format!("line {}: bad view id", n + 1)))?;
        let feat: Vec<f64> = parts
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| mal(format!("line {}: bad feature value", n + 1)))?;
        if feat.len() != dim {
            return Err(MarError::DimensionMismatch { expected: dim, got: feat.len() });
        }
        features.push(feat);
        person_ids.push(pid);
        view_ids.push(view);
    }
    if features.len() != count {
        return Err(mal(format!("expected {count} records, found {}", features.len())));
    }
    Ok(FeatureDataset { features, person_ids, view_ids, domain, dim })
}
