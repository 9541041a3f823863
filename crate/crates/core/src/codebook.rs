//! Multi-sub-codebook primitive store and the centroid diversity regularizer.
//!
//! A codebook holds `M` sub-codebooks, each with `V'` primitives of width
//! `D'`. Sub-codebook `j` quantizes columns `[j*D', (j+1)*D')` of an
//! embedding of width `D = M*D'`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{cosine_with_grad, Matrix, DEFAULT_COS_EPS};
use crate::optim::StepRule;
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Vec<Matrix>,
    usage_counts: Vec<Vec<u64>>,
    size: usize,
    dim: usize,
}

impl Codebook {
    /// Uniform `[-1/V', 1/V']` initialization.
    pub fn init(m: usize, size: usize, dim: usize, rng: &mut StreamRng) -> Result<Self> {
        if m == 0 || size == 0 || dim == 0 {
            return Err(Error::arg(format!(
                "codebook dimensions must be positive, got M={m}, V'={size}, D'={dim}"
            )));
        }
        let bound = 1.0 / size as f64;
        let entries = (0..m)
            .map(|_| {
                let data = (0..size * dim).map(|_| rng.gen_range(-bound..=bound)).collect();
                Matrix::new(size, dim, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entries,
            usage_counts: vec![vec![0; size]; m],
            size,
            dim,
        })
    }

    pub fn from_entries(entries: Vec<Matrix>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::arg("codebook needs at least one sub-codebook"))?;
        let (size, dim) = first.shape();
        if size == 0 || dim == 0 {
            return Err(Error::arg("empty sub-codebook"));
        }
        if entries.iter().any(|e| e.shape() != (size, dim)) {
            return Err(Error::shape("sub-codebooks differ in shape"));
        }
        let m = entries.len();
        Ok(Self {
            entries,
            usage_counts: vec![vec![0; size]; m],
            size,
            dim,
        })
    }

    /// Number of sub-codebooks `M`.
    pub fn num_subcodebooks(&self) -> usize {
        self.entries.len()
    }

    /// Primitives per sub-codebook `V'`.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Primitive width `D'`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Full embedding width `D = M * D'`.
    pub fn embed_dim(&self) -> usize {
        self.entries.len() * self.dim
    }

    pub fn sub(&self, j: usize) -> &Matrix {
        &self.entries[j]
    }

    pub fn entries(&self) -> &[Matrix] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Matrix] {
        &mut self.entries
    }

    pub fn usage_counts(&self) -> &[Vec<u64>] {
        &self.usage_counts
    }

    pub fn set_usage_counts(&mut self, counts: Vec<Vec<u64>>) -> Result<()> {
        if counts.len() != self.entries.len() || counts.iter().any(|c| c.len() != self.size) {
            return Err(Error::shape("usage counts do not match codebook layout"));
        }
        self.usage_counts = counts;
        Ok(())
    }

    /// Adds per-primitive selection counts, e.g. from a quantization pass.
    pub fn record_usage(&mut self, counts: &[Vec<u64>]) -> Result<()> {
        if counts.len() != self.usage_counts.len() {
            return Err(Error::shape("usage delta does not match codebook layout"));
        }
        for (acc, delta) in self.usage_counts.iter_mut().zip(counts) {
            if delta.len() != acc.len() {
                return Err(Error::shape("usage delta does not match codebook layout"));
            }
            acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d);
        }
        Ok(())
    }

    pub fn centroids(&self) -> CentroidSet {
        let mut out = Matrix::zeros(self.entries.len(), self.dim);
        for (j, sub) in self.entries.iter().enumerate() {
            let row = out.row_mut(j);
            for prim in sub.row_iter() {
                row.iter_mut().zip(prim).for_each(|(c, p)| *c += p);
            }
            row.iter_mut().for_each(|c| *c /= self.size as f64);
        }
        CentroidSet { centroids: out }
    }

    /// Spreads a gradient on the centroids back onto every primitive
    /// (each primitive receives `grad_j / V'`) and adds it to `grads`.
    pub fn accumulate_centroid_grad(&self, centroid_grad: &Matrix, grads: &mut [Matrix]) -> Result<()> {
        if centroid_grad.shape() != (self.entries.len(), self.dim) || grads.len() != self.entries.len() {
            return Err(Error::shape("centroid gradient does not match codebook"));
        }
        let scale = 1.0 / self.size as f64;
        for (j, g) in grads.iter_mut().enumerate() {
            let cg = centroid_grad.row(j);
            for i in 0..self.size {
                g.row_mut(i).iter_mut().zip(cg).for_each(|(a, b)| *a += b * scale);
            }
        }
        Ok(())
    }

    /// One update of every sub-codebook; sub-codebook `j` uses optimizer slot
    /// `slot_base + j`. Usage counts are untouched.
    pub fn apply_grads(&mut self, grads: &[Matrix], rule: &mut dyn StepRule, slot_base: usize) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::shape(format!(
                "{} gradient blocks for {} sub-codebooks",
                grads.len(),
                self.entries.len()
            )));
        }
        for (j, (e, g)) in self.entries.iter_mut().zip(grads).enumerate() {
            if e.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for sub-codebook {j} of shape {:?}",
                    g.shape(),
                    e.shape()
                )));
            }
            rule.apply(slot_base + j, e.as_mut_slice(), g.as_slice())?;
        }
        Ok(())
    }

    /// Zeroed gradient buffers matching the codebook layout.
    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.entries.iter().map(|e| Matrix::zeros(e.rows(), e.cols())).collect()
    }
}

/// Per-sub-codebook means, one row per sub-codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub centroids: Matrix,
}

/// Mean pairwise cosine similarity of the centroids and its gradient.
///
/// With a single sub-codebook there are no pairs; the loss is zero.
pub fn diversity_loss(cs: &CentroidSet) -> (f64, Matrix) {
    let c = &cs.centroids;
    let m = c.rows();
    let mut grad = Matrix::zeros(m, c.cols());
    if m < 2 {
        return (0.0, grad);
    }
    let scale = 2.0 / (m * (m - 1)) as f64;
    let mut total = 0.0;
    for j in 0..m {
        for k in j + 1..m {
            let (cos, gj, gk) = cosine_with_grad(c.row(j), c.row(k), DEFAULT_COS_EPS);
            total += cos;
            grad.row_mut(j).iter_mut().zip(&gj).for_each(|(a, b)| *a += scale * b);
            grad.row_mut(k).iter_mut().zip(&gk).for_each(|(a, b)| *a += scale * b);
        }
    }
    (scale * total, grad)
}

/// Mean of `|cos|` over centroid pairs; the orthogonality summary reported by
/// the diversity ablation.
pub fn mean_abs_pairwise_cosine(cs: &CentroidSet) -> f64 {
    let c = &cs.centroids;
    let m = c.rows();
    if m < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..m {
        for k in j + 1..m {
            total += crate::numerics::cosine(c.row(j), c.row(k), DEFAULT_COS_EPS).abs();
        }
    }
    total * 2.0 / (m * (m - 1)) as f64
}
