//! The trainable embedding head f(.): an affine map (optionally with one tanh
//! hidden layer) followed by projection onto the unit sphere.
//!
//! Gradients are hand-derived; the normalization Jacobian is
//! (I - u u^T) / ||v||, which keeps grads orthogonal to the output direction.

use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{MarError, Result};
use crate::geometry::{self, EPS_NORM};

pub const ENCODER_MAGIC: &[u8; 8] = b"MARENC01";

/// Parameters of the embedding head. Row-major matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub d_in: usize,
    pub d_h: usize,
    pub d_out: usize,
    pub depth: usize,
    /// Output layer weights: d_out x d_in (depth 1) or d_out x d_h (depth 2).
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    /// Hidden layer, present only for depth 2: d_h x d_in.
    pub w_h: Vec<f64>,
    pub b_h: Vec<f64>,
}

/// Gradient record with the same shapes as [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub w_h: Vec<f64>,
    pub b_h: Vec<f64>,
}

/// Forward result: the embedding plus the activations needed for backward.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Unit-norm when constrained; equal to `pre_norm` otherwise.
    pub embedding: Vec<f64>,
    /// Un-normalized output activation.
    pub pre_norm: Vec<f64>,
    /// tanh hidden activations (depth 2 only).
    pub hidden: Option<Vec<f64>>,
}

impl EncoderParams {
    /// Fan-in scaled uniform init, biases zero.
    pub fn init(d_in: usize, d_h: usize, d_out: usize, depth: usize, rng: &mut impl Rng) -> Self {
        assert!(depth == 1 || depth == 2, "depth must be 1 or 2");
        let fan_top = if depth == 2 { d_h } else { d_in };
        let lim_top = 1.0 / (fan_top as f64).sqrt();
        let w: Vec<f64> = (0..d_out * fan_top).map(|_| rng.gen_range(-lim_top..lim_top)).collect();
        let (w_h, b_h) = if depth == 2 {
            let lim_h = 1.0 / (d_in as f64).sqrt();
            (
                (0..d_h * d_in).map(|_| rng.gen_range(-lim_h..lim_h)).collect(),
                vec![0.0; d_h],
            )
        } else {
            (Vec::new(), Vec::new())
        };
        Self { d_in, d_h, d_out, depth, w, b: vec![0.0; d_out], w_h, b_h }
    }

    fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = b.to_vec();
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            out[r] += geometry::dot(row, x);
        }
        out
    }

    /// Runs the head on one input. `constrained` selects unit-norm output.
    pub fn forward(&self, x: &[f64], constrained: bool) -> Result<EncoderOutput> {
        if x.len() != self.d_in {
            return Err(MarError::DimensionMismatch { expected: self.d_in, got: x.len() });
        }
        let (hidden, top_in): (Option<Vec<f64>>, Vec<f64>) = if self.depth == 2 {
            let pre_h = Self::affine(&self.w_h, &self.b_h, x, self.d_h, self.d_in);
            let h: Vec<f64> = pre_h.iter().map(|v| v.tanh()).collect();
            (Some(h.clone()), h)
        } else {
            (None, x.to_vec())
        };
        let cols = if self.depth == 2 { self.d_h } else { self.d_in };
        let pre_norm = Self::affine(&self.w, &self.b, &top_in, self.d_out, cols);
        if pre_norm.iter().any(|v| !v.is_finite()) {
            return Err(MarError::NonFiniteActivation);
        }
        let embedding = if constrained {
            geometry::normalize(&pre_norm)?.coords().to_vec()
        } else {
            pre_norm.clone()
        };
        Ok(EncoderOutput { embedding, pre_norm, hidden })
    }

    /// Chain-rule gradients of a loss w.r.t. all parameters, given the loss
    /// gradient w.r.t. the embedding of a single forward pass.
    pub fn backward(
        &self,
        x: &[f64],
        out: &EncoderOutput,
        grad_wrt_embedding: &[f64],
        constrained: bool,
    ) -> Result<EncoderGrads> {
        if grad_wrt_embedding.len() != self.d_out {
            return Err(MarError::DimensionMismatch {
                expected: self.d_out,
                got: grad_wrt_embedding.len(),
            });
        }
        // Through normalization: g_v = (g - (u.g) u) / ||v||.
        let grad_pre: Vec<f64> = if constrained {
            let n = geometry::norm(&out.pre_norm);
            let u = &out.embedding;
            let ug = geometry::dot(u, grad_wrt_embedding);
            grad_wrt_embedding
                .iter()
                .zip(u)
                .map(|(g, ui)| (g - ug * ui) / n)
                .collect()
        } else {
            grad_wrt_embedding.to_vec()
        };

        let mut grads = self.zero_grads();
        let (top_in, cols): (&[f64], usize) = if self.depth == 2 {
            (out.hidden.as_ref().expect("depth-2 output missing hidden"), self.d_h)
        } else {
            (x, self.d_in)
        };
        for r in 0..self.d_out {
            grads.b[r] = grad_pre[r];
            for c in 0..cols {
                grads.w[r * cols + c] = grad_pre[r] * top_in[c];
            }
        }
        if self.depth == 2 {
            let h = top_in;
            // dL/dh = W^T grad_pre, then through tanh'.
            for c in 0..self.d_h {
                let mut g = 0.0;
                for r in 0..self.d_out {
                    g += self.w[r * self.d_h + c] * grad_pre[r];
                }
                let g_pre_h = g * (1.0 - h[c] * h[c]);
                grads.b_h[c] = g_pre_h;
                for k in 0..self.d_in {
                    grads.w_h[c * self.d_in + k] = g_pre_h * x[k];
                }
            }
        }
        Ok(grads)
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.b.len()],
            w_h: vec![0.0; self.w_h.len()],
            b_h: vec![0.0; self.b_h.len()],
        }
    }

    /// Flat view of all parameters, used by optimizer and finite differences.
    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len() + self.w_h.len() + self.b_h.len()
    }

    pub fn get_param(&self, idx: usize) -> f64 {
        *self.param_slot(idx)
    }

    pub fn set_param(&mut self, idx: usize, v: f64) {
        *self.param_slot_mut(idx) = v;
    }

    fn param_slot(&self, mut idx: usize) -> &f64 {
        for t in [&self.w, &self.b, &self.w_h, &self.b_h] {
            if idx < t.len() {
                return &t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    fn param_slot_mut(&mut self, mut idx: usize) -> &mut f64 {
        let lens = [self.w.len(), self.b.len(), self.w_h.len()];
        if idx < lens[0] {
            return &mut self.w[idx];
        }
        idx -= lens[0];
        if idx < lens[1] {
            return &mut self.b[idx];
        }
        idx -= lens[1];
        if idx < lens[2] {
            return &mut self.w_h[idx];
        }
        idx -= lens[2];
        &mut self.b_h[idx]
    }

    pub fn apply_update(&mut self, grads: &EncoderGrads, lr: f64) {
        for (p, g) in self.w.iter_mut().zip(&grads.w) {
            *p -= lr * g;
        }
        for (p, g) in self.b.iter_mut().zip(&grads.b) {
            *p -= lr * g;
        }
        for (p, g) in self.w_h.iter_mut().zip(&grads.w_h) {
            *p -= lr * g;
        }
        for (p, g) in self.b_h.iter_mut().zip(&grads.b_h) {
            *p -= lr * g;
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(ENCODER_MAGIC)?;
            for v in [self.d_in, self.d_h, self.d_out, self.depth] {
                f.write_all(&(v as u32).to_le_bytes())?;
            }
            for t in [&self.w, &self.b, &self.w_h, &self.b_h] {
                for v in t.iter() {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mal = |detail: &str| MarError::MalformedFile {
            path: path.display().to_string(),
            detail: detail.to_string(),
        };
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(|_| mal("truncated header"))?;
        if &magic != ENCODER_MAGIC {
            return Err(mal("bad magic"));
        }
        let read_u32 = |f: &mut std::fs::File| -> Result<usize> {
            let mut b = [0u8; 4];
            f.read_exact(&mut b).map_err(|_| mal("truncated header"))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let d_in = read_u32(&mut f)?;
        let d_h = read_u32(&mut f)?;
        let d_out = read_u32(&mut f)?;
        let depth = read_u32(&mut f)?;
        if depth != 1 && depth != 2 {
            return Err(mal("bad depth"));
        }
        let fan_top = if depth == 2 { d_h } else { d_in };
        let sizes = if depth == 2 {
            vec![d_out * fan_top, d_out, d_h * d_in, d_h]
        } else {
            vec![d_out * fan_top, d_out, 0, 0]
        };
        let mut tensors = Vec::new();
        for sz in sizes {
            let mut t = Vec::with_capacity(sz);
            for _ in 0..sz {
                let mut b = [0u8; 8];
                f.read_exact(&mut b).map_err(|_| mal("truncated tensor data"))?;
                t.push(f64::from_le_bytes(b));
            }
            tensors.push(t);
        }
        let b_h = tensors.pop().unwrap();
        let w_h = tensors.pop().unwrap();
        let b = tensors.pop().unwrap();
        let w = tensors.pop().unwrap();
        let params = Self { d_in, d_h, d_out, depth, w, b, w_h, b_h };
        if params.w.iter().chain(&params.b).chain(&params.w_h).chain(&params.b_h).any(|v| !v.is_finite()) {
            return Err(mal("non-finite parameter"));
        }
        Ok(params)
    }
}

impl EncoderGrads {
    pub fn accumulate(&mut self, other: &EncoderGrads, factor: f64) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += factor * b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += factor * b;
        }
        for (a, b) in self.w_h.iter_mut().zip(&other.w_h) {
            *a += factor * b;
        }
        for (a, b) in self.b_h.iter_mut().zip(&other.b_h) {
            *a += factor * b;
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.w
            .iter()
            .chain(&self.b)
            .chain(&self.w_h)
            .chain(&self.b_h)
            .map(|v| v * v)
            .sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self
            .w
            .iter_mut()
            .chain(&mut self.b)
            .chain(&mut self.w_h)
            .chain(&mut self.b_h)
        {
            *v *= factor;
        }
    }
}

/// Identity-like params for tests: W square identity, b zero, depth 1.
#[cfg(test)]
pub fn identity_params(d: usize) -> EncoderParams {
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        w[i * d + i] = 1.0;
    }
    EncoderParams { d_in: d, d_h: 0, d_out: d, depth: 1, w, b: vec![0.0; d], w_h: Vec::new(), b_h: Vec::new() }
}

// Keep the constant referenced from this module's docs in scope.
#[allow(dead_code)]
const _: f64 = EPS_NORM;
