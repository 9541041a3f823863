//! Dense row-major matrices, similarity and selection kernels, and the
//! central finite-difference gradient checker used to validate every
//! hand-written backward pass in the crate.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Norm clamp used for cosine similarity when callers have no better value.
pub const DEFAULT_COS_EPS: f64 = 1e-8;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix, rejecting wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero; an empty-column matrix has no row data.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self += other`, element-wise.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine similarity with both norms clamped below by `eps`.
pub fn cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    dot(a, b) / (norm(a).max(eps) * norm(b).max(eps))
}

/// Cosine similarity together with its gradients with respect to `a` and `b`.
///
/// The clamp is respected: when a norm sits below `eps` it is treated as the
/// constant `eps`, so that side contributes no normalization term.
pub fn cosine_with_grad(a: &[f64], b: &[f64], eps: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let (na_raw, nb_raw) = (norm(a), norm(b));
    let (na, nb) = (na_raw.max(eps), nb_raw.max(eps));
    let ab = dot(a, b);
    let cos = ab / (na * nb);
    let inv = 1.0 / (na * nb);
    let ka = if na_raw > eps { cos / (na_raw * na_raw) } else { 0.0 };
    let kb = if nb_raw > eps { cos / (nb_raw * nb_raw) } else { 0.0 };
    let ga = a.iter().zip(b).map(|(x, y)| y * inv - ka * x).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x * inv - kb * y).collect();
    (cos, ga, gb)
}

/// `out[i][j] = <A_i, B_j> / (max(|A_i|, eps) * max(|B_j|, eps))`.
pub fn cosine_similarity_matrix(a: &Matrix, b: &Matrix, eps: f64) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "cosine similarity needs equal widths, got {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::arg(format!("eps must be positive, got {eps}")));
    }
    let an: Vec<f64> = a.row_iter().map(|r| norm(r).max(eps)).collect();
    let bn: Vec<f64> = b.row_iter().map(|r| norm(r).max(eps)).collect();
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for (i, ra) in a.row_iter().enumerate() {
        for (j, rb) in b.row_iter().enumerate() {
            out.data[i * b.rows() + j] = dot(ra, rb) / (an[i] * bn[j]);
        }
    }
    Ok(out)
}

/// Orders by descending score, then ascending index.
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest scores, best first. Ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::arg(format!(
            "top-k needs 1 <= k <= {}, got k = {k}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    Ok(idx)
}

/// Softmax of `scores / temperature` restricted to `selected`, in selection order.
pub fn masked_softmax(scores: &[f64], selected: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::arg("softmax over an empty selection"));
    }
    if !(temperature > 0.0) {
        return Err(Error::arg(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut seen = vec![false; scores.len()];
    for &i in selected {
        if i >= scores.len() {
            return Err(Error::arg(format!(
                "selected index {i} out of range for {} scores",
                scores.len()
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::arg(format!("index {i} selected twice")));
        }
    }
    let max = selected
        .iter()
        .map(|&i| scores[i] / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = selected
        .iter()
        .map(|&i| (scores[i] / temperature - max).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub passed: bool,
    pub probe_count: usize,
}

/// Relative differences are taken against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so coordinates whose true gradient is zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares `analytic_grad(point)` against central differences of `f` at every
/// coordinate of `point`.
pub fn grad_check<F, G>(
    f: F,
    analytic_grad: G,
    point: &Matrix,
    eps: f64,
    rel_tol: f64,
) -> Result<GradReport>
where
    F: Fn(&Matrix) -> f64,
    G: Fn(&Matrix) -> Matrix,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::arg(format!("probe step {eps} outside [1e-7, 1e-3]")));
    }
    if !point.is_finite() {
        return Err(Error::Numerical("probe point has non-finite entries".into()));
    }
    let analytic = analytic_grad(point);
    if analytic.shape() != point.shape() {
        return Err(Error::shape(format!(
            "analytic gradient {:?} does not match point {:?}",
            analytic.shape(),
            point.shape()
        )));
    }
    let mut probe = point.clone();
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    for i in 0..point.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let hi = f(&probe);
        probe.data[i] = orig - eps;
        let lo = f(&probe);
        probe.data[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Numerical(format!(
                "objective not finite while probing coordinate ({}, {})",
                i / point.cols.max(1),
                i % point.cols.max(1)
            )));
        }
        let numeric = (hi - lo) / (2.0 * eps);
        let a = analytic.data[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(GradReport {
        max_abs_diff: max_abs,
        max_rel_diff: max_rel,
        passed: max_rel <= rel_tol,
        probe_count: point.data.len(),
    })
}
