//! Hypersphere primitives: unit vectors, inner products and pairwise tables.
//!
//! All features and agents live on the unit hypersphere, so cosine similarity
//! reduces to the plain inner product. Everything here is a pure function over
//! 64-bit floats.

use crate::error::{MarError, Result};

/// Norms at or below this have no usable direction.
pub const EPS_NORM: f64 = 1e-12;

/// A point on the unit hypersphere.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector {
    coords: Vec<f64>,
}

impl UnitVector {
    /// Wraps coordinates that are already unit-norm. Debug-asserts the norm.
    pub fn from_unit(coords: Vec<f64>) -> Self {
        debug_assert!((norm(&coords) - 1.0).abs() < 1e-6);
        Self { coords }
    }

    /// Test-only constructor that skips the norm check, for finite-difference
    /// probes that perturb a single coordinate.
    #[cfg(test)]
    pub fn from_unit_for_test(coords: Vec<f64>) -> Self {
        Self { coords }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Projects a raw vector onto the unit sphere.
pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    let n = norm(v);
    if !(n > EPS_NORM) {
        return Err(MarError::DegenerateVector { norm: n, eps: EPS_NORM });
    }
    Ok(UnitVector {
        coords: v.iter().map(|x| x / n).collect(),
    })
}

/// Inner product of two unit vectors, i.e. their cosine similarity.
pub fn cosine(u: &UnitVector, v: &UnitVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(MarError::DimensionMismatch {
            expected: u.dim(),
            got: v.dim(),
        });
    }
    Ok(dot(u.coords(), v.coords()))
}

/// Upper-triangular table of per-pair values over a batch of n items.
///
/// Pair (i, j), i < j, is stored at a fixed linear index so iteration order is
/// (0,1), (0,2), ..., (n-2,n-1) regardless of how the table was built.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTable {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityTable {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        if n < 2 {
            return Err(MarError::BatchTooSmall { min: 2, got: n });
        }
        let mut values = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                values.push(f(i, j));
            }
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Linear index of pair (i, j) with i < j.
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.n);
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        self.values[self.pair_index(i, j)]
    }

    /// Iterates (i, j, value) in the fixed pair order.
    pub fn iter_pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.n;
        (0..n)
            .flat_map(move |i| ((i + 1)..n).map(move |j| (i, j)))
            .zip(self.values.iter())
            .map(|((i, j), &v)| (i, j, v))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Cosine similarity of every unordered pair in the batch.
pub fn pairwise_similarities(batch: &[UnitVector]) -> Result<SimilarityTable> {
    if batch.len() < 2 {
        return Err(MarError::BatchTooSmall { min: 2, got: batch.len() });
    }
    let d = batch[0].dim();
    for v in batch {
        if v.dim() != d {
            return Err(MarError::DimensionMismatch { expected: d, got: v.dim() });
        }
    }
    SimilarityTable::from_fn(batch.len(), |i, j| dot(batch[i].coords(), batch[j].coords()))
}
