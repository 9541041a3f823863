//! Adaptive multi-primitive quantization.
//!
//! Each embedding row is split into `M` chunks. Chunk `j` is compared with
//! every primitive of sub-codebook `j` by cosine similarity, the best
//! `K_pool` form a candidate pool, the best `n` of the pool are kept, and the
//! chunk is replaced by the softmax-weighted sum of those primitives. `n` is
//! fixed (Top-1 / Top-n baselines) or comes from the allocator's ratio.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::allocator::{count_from_ratio, RatioVector};
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::numerics::{cosine_with_grad, masked_softmax, squared_distance, top_k_indices, Matrix, DEFAULT_COS_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    /// Single nearest primitive per chunk, regardless of the ratio.
    Warmup,
    /// Exactly `n` primitives per chunk.
    FixedTopN(usize),
    /// `clamp(round(R*K), 1, K)` primitives per chunk.
    Adaptive(usize),
}

impl QuantizeMode {
    /// Largest count this mode can select.
    pub fn max_count(&self) -> usize {
        match *self {
            QuantizeMode::Warmup => 1,
            QuantizeMode::FixedTopN(n) | QuantizeMode::Adaptive(n) => n,
        }
    }

    pub fn validate(&self, codebook_size: usize) -> Result<()> {
        let n = self.max_count();
        if n == 0 || n > codebook_size {
            return Err(Error::Config(format!(
                "{self:?} needs a count in [1, {codebook_size}]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerSettings {
    pub mode: QuantizeMode,
    /// Candidate pool size; raised to the mode's maximum count if smaller.
    pub k_pool: usize,
    pub temperature: f64,
    /// Weight of the encoder-side commitment term.
    pub beta: f64,
}

impl QuantizerSettings {
    pub fn pool_size(&self, codebook_size: usize) -> usize {
        self.k_pool.max(self.mode.max_count()).min(codebook_size)
    }
}

/// One quantized chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSelection {
    pub output: Vec<f64>,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Quantizes one chunk against one sub-codebook.
pub fn quantize_chunk(chunk: &[f64], sub_cb: &Matrix, n: usize, k_pool: usize, temperature: f64) -> Result<ChunkSelection> {
    if chunk.len() != sub_cb.cols() {
        return Err(Error::shape(format!(
            "chunk of width {} against primitives of width {}",
            chunk.len(),
            sub_cb.cols()
        )));
    }
    if n == 0 || n > k_pool || k_pool > sub_cb.rows() {
        return Err(Error::arg(format!(
            "need 1 <= n ({n}) <= pool ({k_pool}) <= V' ({})",
            sub_cb.rows()
        )));
    }
    let sims: Vec<f64> = sub_cb.row_iter().map(|c| crate::numerics::cosine(chunk, c, DEFAULT_COS_EPS)).collect();
    let pool = top_k_indices(&sims, k_pool)?;
    let indices = pool[..n].to_vec();
    let weights = masked_softmax(&sims, &indices, temperature)?;
    let mut output = vec![0.0; chunk.len()];
    for (&i, &w) in indices.iter().zip(&weights) {
        output.iter_mut().zip(sub_cb.row(i)).for_each(|(o, c)| *o += w * c);
    }
    Ok(ChunkSelection { output, indices, weights })
}

/// Splits columns into `m` equal-width blocks.
pub fn chunk_embeddings(z: &Matrix, m: usize) -> Result<Vec<Matrix>> {
    if m == 0 || !z.cols().is_multiple_of(m) {
        return Err(Error::Config(format!(
            "embedding width {} is not divisible into {m} chunks",
            z.cols()
        )));
    }
    let w = z.cols() / m;
    (0..m)
        .map(|j| {
            let data = z.row_iter().flat_map(|r| r[j * w..(j + 1) * w].iter().copied()).collect();
            Matrix::new(z.rows(), w, data)
        })
        .collect()
}

/// Inverse of [`chunk_embeddings`].
pub fn concat_chunks(chunks: &[Matrix]) -> Result<Matrix> {
    let rows = chunks.first().map_or(0, Matrix::rows);
    if chunks.iter().any(|c| c.rows() != rows) {
        return Err(Error::shape("chunks differ in row count"));
    }
    let cols: usize = chunks.iter().map(Matrix::cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in chunks {
            data.extend_from_slice(c.row(r));
        }
    }
    Matrix::new(rows, cols, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchAllocation {
    /// Allocator ratio, when one was supplied.
    pub ratio: Option<f64>,
    pub count: usize,
    /// Per sub-codebook: selected indices and weights (both of length `count`).
    pub selections: Vec<(Vec<usize>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AllocationMap {
    pub patches: Vec<PatchAllocation>,
}

impl AllocationMap {
    pub fn counts(&self) -> Vec<usize> {
        self.patches.iter().map(|p| p.count).collect()
    }

    /// Selection counts per primitive, laid out like `Codebook::usage_counts`.
    pub fn usage(&self, m: usize, size: usize) -> Vec<Vec<u64>> {
        let mut out = vec![vec![0u64; size]; m];
        for p in &self.patches {
            for (j, (idx, _)) in p.selections.iter().enumerate() {
                for &i in idx {
                    out[j][i] += 1;
                }
            }
        }
        out
    }

    pub fn extend(&mut self, other: AllocationMap) {
        self.patches.extend(other.patches);
    }

    /// CSV with `patch_index,ratio,count,cb0,..,cb{M-1}`; each sub-codebook
    /// cell lists `index:weight` pairs separated by `;`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let m = self.patches.first().map_or(0, |p| p.selections.len());
        let mut header = String::from("patch_index,ratio,count");
        for j in 0..m {
            let _ = write!(header, ",cb{j}");
        }
        writeln!(out, "{header}")?;
        for (i, p) in self.patches.iter().enumerate() {
            let mut line = format!("{i},{},{}", p.ratio.map(|r| r.to_string()).unwrap_or_default(), p.count);
            for (idx, w) in &p.selections {
                let cell: Vec<String> = idx.iter().zip(w).map(|(i, w)| format!("{i}:{w}")).collect();
                let _ = write!(line, ",{}", cell.join(";"));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut patches = Vec::new();
        let mut offset = 0usize;
        let mut lines = input.lines();
        let bad = |offset: usize, msg: String| Error::Parse { offset, message: msg };
        let header = lines
            .next()
            .ok_or_else(|| bad(0, "empty allocation CSV".into()))?
            .map_err(|e| bad(0, e.to_string()))?;
        if !header.starts_with("patch_index,ratio,count") {
            return Err(bad(0, format!("unexpected header `{header}`")));
        }
        let m = header.split(',').count() - 3;
        offset += header.len() + 1;
        for line in lines {
            let line = line.map_err(|e| bad(offset, e.to_string()))?;
            if line.trim().is_empty() {
                offset += line.len() + 1;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != m + 3 {
                return Err(bad(offset, format!("expected {} fields, found {}", m + 3, fields.len())));
            }
            let ratio = match fields[1] {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|e| bad(offset, format!("ratio: {e}")))?),
            };
            let count: usize = fields[2].parse().map_err(|e| bad(offset, format!("count: {e}")))?;
            let mut selections = Vec::with_capacity(m);
            for cell in &fields[3..] {
                let mut idx = Vec::new();
                let mut w = Vec::new();
                for pair in cell.split(';').filter(|s| !s.is_empty()) {
                    let (i, v) = pair
                        .split_once(':')
                        .ok_or_else(|| bad(offset, format!("malformed pair `{pair}`")))?;
                    idx.push(i.parse().map_err(|e| bad(offset, format!("index: {e}")))?);
                    w.push(v.parse().map_err(|e| bad(offset, format!("weight: {e}")))?);
                }
                selections.push((idx, w));
            }
            patches.push(PatchAllocation { ratio, count, selections });
            offset += line.len() + 1;
        }
        Ok(Self { patches })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeOutput {
    pub z_hat: Matrix,
    pub alloc: AllocationMap,
    pub commit_loss: f64,
    pub per_patch_error: Vec<f64>,
}

/// Quantizes every row of `z`. `ratios` is required in adaptive mode and
/// otherwise only recorded in the allocation map.
///
/// The codebook is read-only here; callers fold `alloc.usage(..)` into the
/// usage counters when they own the codebook.
pub fn quantize(z: &Matrix, cb: &Codebook, ratios: Option<&RatioVector>, settings: &QuantizerSettings) -> Result<QuantizeOutput> {
    let m = cb.num_subcodebooks();
    if z.cols() != cb.embed_dim() {
        return Err(Error::shape(format!(
            "embeddings of width {} against a codebook of width {}",
            z.cols(),
            cb.embed_dim()
        )));
    }
    settings.mode.validate(cb.size())?;
    if let Some(r) = ratios {
        if r.0.len() != z.rows() {
            return Err(Error::shape(format!("{} ratios for {} patches", r.0.len(), z.rows())));
        }
    }
    let counts = match settings.mode {
        QuantizeMode::Warmup => vec![1; z.rows()],
        QuantizeMode::FixedTopN(n) => vec![n; z.rows()],
        QuantizeMode::Adaptive(k) => {
            let r = ratios.ok_or_else(|| Error::Config("adaptive quantization needs allocator ratios".into()))?;
            count_from_ratio(r, k)
        }
    };
    let pool = settings.pool_size(cb.size());
    let d = cb.dim();
    let mut z_hat = Matrix::zeros(z.rows(), z.cols());
    let mut patches = Vec::with_capacity(z.rows());
    for (i, row) in z.row_iter().enumerate() {
        let mut selections = Vec::with_capacity(m);
        let out = z_hat.row_mut(i);
        for j in 0..m {
            let sel = quantize_chunk(&row[j * d..(j + 1) * d], cb.sub(j), counts[i], pool, settings.temperature)?;
            out[j * d..(j + 1) * d].copy_from_slice(&sel.output);
            selections.push((sel.indices, sel.weights));
        }
        patches.push(PatchAllocation {
            ratio: ratios.map(|r| r.0[i]),
            count: counts[i],
            selections,
        });
    }
    let per_patch_error = z.row_iter().zip(z_hat.row_iter()).map(|(a, b)| squared_distance(a, b)).collect();
    let commit_loss = commitment_loss(z, &z_hat, settings.beta)?.loss;
    Ok(QuantizeOutput {
        z_hat,
        alloc: AllocationMap { patches },
        commit_loss,
        per_patch_error,
    })
}

/// Gradients of the quantized output with the selection held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeGrads {
    /// Through the similarity-derived weights into the input embeddings.
    pub input: Matrix,
    /// Per sub-codebook, through both the primitive values and the weights.
    pub codebook: Vec<Matrix>,
}

/// Back-propagates `grad_out` (w.r.t. the quantized embeddings) through the
/// weighted sums recorded in `alloc`.
pub fn quantize_backward(
    z: &Matrix,
    cb: &Codebook,
    alloc: &AllocationMap,
    grad_out: &Matrix,
    temperature: f64,
) -> Result<QuantizeGrads> {
    if grad_out.shape() != z.shape() || alloc.patches.len() != z.rows() {
        return Err(Error::shape("quantizer backward inputs disagree in shape"));
    }
    let d = cb.dim();
    let mut input = Matrix::zeros(z.rows(), z.cols());
    let mut codebook = cb.zero_grads();
    for (i, patch) in alloc.patches.iter().enumerate() {
        let row = z.row(i);
        let g_row = grad_out.row(i);
        for (j, (idx, w)) in patch.selections.iter().enumerate() {
            let x = &row[j * d..(j + 1) * d];
            let g = &g_row[j * d..(j + 1) * d];
            let sub = cb.sub(j);
            // dL/dw_t = <g, c_t>; softmax Jacobian gives dL/ds_t.
            let dw: Vec<f64> = idx.iter().map(|&t| crate::numerics::dot(g, sub.row(t))).collect();
            let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            for (s, (&t, &wt)) in idx.iter().zip(w).enumerate() {
                let ds = wt * (dw[s] - mean) / temperature;
                let (_, gx, gc) = cosine_with_grad(x, sub.row(t), DEFAULT_COS_EPS);
                let dx = &mut input.row_mut(i)[j * d..(j + 1) * d];
                dx.iter_mut().zip(&gx).for_each(|(a, b)| *a += ds * b);
                let dc = codebook[j].row_mut(t);
                for k in 0..d {
                    dc[k] += wt * g[k] + ds * gc[k];
                }
            }
        }
    }
    Ok(QuantizeGrads { input, codebook })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommitmentLoss {
    pub loss: f64,
    /// Encoder-side gradient, `beta * 2 (Z - Zq) / rows`.
    pub grad_input: Matrix,
    /// Codebook-side gradient, `2 (Zq - Z) / rows`.
    pub grad_quantized: Matrix,
}

/// `beta * mean|Z - sg(Zq)|^2 + mean|sg(Z) - Zq|^2`, means taken over rows.
pub fn commitment_loss(z: &Matrix, z_hat: &Matrix, beta: f64) -> Result<CommitmentLoss> {
    if z.shape() != z_hat.shape() {
        return Err(Error::shape(format!(
            "commitment loss needs equal shapes, got {:?} and {:?}",
            z.shape(),
            z_hat.shape()
        )));
    }
    if !(beta >= 0.0) {
        return Err(Error::arg(format!("beta must be non-negative, got {beta}")));
    }
    let rows = z.rows().max(1) as f64;
    let sq: f64 = z.as_slice().iter().zip(z_hat.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    let mean = sq / rows;
    let mut grad_input = Matrix::zeros(z.rows(), z.cols());
    let mut grad_quantized = Matrix::zeros(z.rows(), z.cols());
    for ((gi, gq), (a, b)) in grad_input
        .as_mut_slice()
        .iter_mut()
        .zip(grad_quantized.as_mut_slice())
        .zip(z.as_slice().iter().zip(z_hat.as_slice()))
    {
        *gi = beta * 2.0 * (a - b) / rows;
        *gq = 2.0 * (b - a) / rows;
    }
    Ok(CommitmentLoss {
        loss: beta * mean + mean,
        grad_input,
        grad_quantized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, top_k_indices};
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_codebook() -> Matrix {
        Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
    }

    fn settings(mode: QuantizeMode) -> QuantizerSettings {
        QuantizerSettings { mode, k_pool: 4, temperature: 1.0, beta: 0.25 }
    }

    fn random(rows: usize, cols: usize, rng: &mut crate::rng::StreamRng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn chunking() {
        let z = Matrix::new(3, 8, (0..24).map(f64::from).collect()).unwrap();
        let chunks = chunk_embeddings(&z, 4).unwrap();
        assert_eq!(chunks.len(), 4);
        assert!(chunks.iter().all(|c| c.shape() == (3, 2)));
        assert_eq!(chunks[1].row(2), &[18.0, 19.0]);
        assert_eq!(concat_chunks(&chunks).unwrap(), z);
        assert_eq!(chunk_embeddings(&z, 1).unwrap()[0], z);
        assert!(matches!(chunk_embeddings(&z, 3), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_neighbor_limit() {
        let sub = Matrix::from_rows(&[vec![0.2, 0.9], vec![-1.0, 0.3], vec![0.5, 0.5]]).unwrap();
        let sel = quantize_chunk(&[-1.0, 0.3], &sub, 1, 2, 1.0).unwrap();
        assert_eq!(sel.indices, vec![1]);
        assert_eq!(sel.weights, vec![1.0]);
        assert_eq!(sel.output, vec![-1.0, 0.3]);
    }

    #[test]
    fn hand_evaluated_two_primitive_chunk() {
        let sel = quantize_chunk(&[0.9, 0.1], &unit_codebook(), 2, 2, 1.0).unwrap();
        let n = (0.82f64).sqrt();
        let (s1, s2) = (0.9 / n, 0.1 / n);
        assert!((s1 - 0.9939).abs() < 1e-4 && (s2 - 0.1104).abs() < 1e-4);
        let w1 = 1.0 / (1.0 + (s2 - s1).exp());
        assert_eq!(sel.indices, vec![0, 1]);
        assert!((sel.weights[0] - w1).abs() < 1e-12);
        assert!((sel.weights[0] - 0.7076).abs() < 1e-4 && (sel.weights[1] - 0.2924).abs() < 1e-4);
        assert!((sel.output[0] - w1).abs() < 1e-12 && (sel.output[1] - (1.0 - w1)).abs() < 1e-12);
    }

    #[test]
    fn full_pool_is_continuous_limit() {
        let mut rng = stream(4, "q");
        let sub = random(6, 3, &mut rng);
        let x = [0.3, -0.2, 0.8];
        let sel = quantize_chunk(&x, &sub, 6, 6, 1.0).unwrap();
        let sims: Vec<f64> = sub.row_iter().map(|c| crate::numerics::cosine(&x, c, 1e-8)).collect();
        let w = masked_softmax(&sims, &(0..6).collect::<Vec<_>>(), 1.0).unwrap();
        for k in 0..3 {
            let expect: f64 = (0..6).map(|t| w[t] * sub.get(t, k)).sum();
            assert!((sel.output[k] - expect).abs() < 1e-12);
        }
        let mut idx = sel.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn chunk_preconditions() {
        let sub = unit_codebook();
        assert!(quantize_chunk(&[1.0, 0.0], &sub, 0, 1, 1.0).is_err());
        assert!(quantize_chunk(&[1.0, 0.0], &sub, 2, 1, 1.0).is_err());
        assert!(quantize_chunk(&[1.0, 0.0], &sub, 1, 3, 1.0).is_err());
        assert!(quantize_chunk(&[1.0], &sub, 1, 1, 1.0).is_err());
    }

    #[test]
    fn warmup_forces_single_primitive() {
        let mut rng = stream(1, "q");
        let cb = Codebook::from_entries(vec![random(8, 2, &mut rng), random(8, 2, &mut rng)]).unwrap();
        let z = random(5, 4, &mut rng);
        let r = RatioVector(vec![0.9; 5]);
        let out = quantize(&z, &cb, Some(&r), &settings(QuantizeMode::Warmup)).unwrap();
        for p in &out.alloc.patches {
            assert_eq!(p.count, 1);
            assert!(p.selections.iter().all(|(i, w)| i.len() == 1 && w == &[1.0]));
        }
    }

    #[test]
    fn warmup_fixed_point() {
        let mut rng = stream(2, "q");
        let cb = Codebook::from_entries(vec![random(8, 2, &mut rng), random(8, 2, &mut rng)]).unwrap();
        let z = Matrix::from_rows(&[
            [cb.sub(0).row(3), cb.sub(1).row(5)].concat(),
            [cb.sub(0).row(0), cb.sub(1).row(7)].concat(),
        ])
        .unwrap();
        let out = quantize(&z, &cb, None, &settings(QuantizeMode::Warmup)).unwrap();
        assert_eq!(out.z_hat, z);
        assert_eq!(out.per_patch_error, vec![0.0, 0.0]);
        assert_eq!(out.commit_loss, 0.0);
    }

    #[test]
    fn two_patch_composition() {
        let cb = Codebook::from_entries(vec![unit_codebook()]).unwrap();
        let z = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let out = quantize(&z, &cb, None, &settings(QuantizeMode::FixedTopN(2))).unwrap();
        let a = quantize_chunk(&[0.9, 0.1], &unit_codebook(), 2, 2, 1.0).unwrap();
        let b = quantize_chunk(&[0.1, 0.9], &unit_codebook(), 2, 2, 1.0).unwrap();
        assert_eq!(out.z_hat.row(0), a.output.as_slice());
        assert_eq!(out.z_hat.row(1), b.output.as_slice());
        assert!((out.z_hat.get(0, 0) - 0.7076).abs() < 1e-4);
        assert!((out.z_hat.get(1, 1) - 0.7076).abs() < 1e-4);
    }

    #[test]
    fn mode_errors() {
        let cb = Codebook::from_entries(vec![unit_codebook()]).unwrap();
        let z = Matrix::from_rows(&[vec![0.9, 0.1]]).unwrap();
        assert!(matches!(
            quantize(&z, &cb, None, &settings(QuantizeMode::FixedTopN(3))),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            quantize(&z, &cb, None, &settings(QuantizeMode::Adaptive(2))),
            Err(Error::Config(_))
        ));
        let wide = Matrix::from_rows(&[vec![0.9, 0.1, 0.0]]).unwrap();
        assert!(quantize(&wide, &cb, None, &settings(QuantizeMode::Warmup)).is_err());
    }

    #[test]
    fn commitment_examples() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let zq = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(commitment_loss(&z, &z, 0.25).unwrap().loss, 0.0);
        let c = commitment_loss(&z, &zq, 0.25).unwrap();
        assert!((c.loss - 1.25).abs() < 1e-15);
        assert_eq!(c.grad_input.as_slice(), &[0.5, 0.0]);
        assert_eq!(c.grad_quantized.as_slice(), &[-2.0, 0.0]);
        let c0 = commitment_loss(&z, &zq, 0.0).unwrap();
        assert_eq!(c0.loss, 1.0);
        assert!(c0.grad_input.as_slice().iter().all(|&v| v == 0.0));
        assert!(commitment_loss(&z, &Matrix::zeros(2, 2), 0.25).is_err());
    }

    #[test]
    fn allocation_csv_round_trip() {
        let mut rng = stream(3, "q");
        let cb = Codebook::from_entries(vec![random(8, 2, &mut rng), random(8, 2, &mut rng)]).unwrap();
        let z = random(4, 4, &mut rng);
        let r = RatioVector(vec![0.1, 0.4, 0.6, 0.95]);
        let out = quantize(&z, &cb, Some(&r), &settings(QuantizeMode::Adaptive(4))).unwrap();
        let mut buf = Vec::new();
        out.alloc.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("patch_index,ratio,count,cb0,cb1\n"));
        assert_eq!(AllocationMap::read_csv(buf.as_slice()).unwrap(), out.alloc);
        let err = AllocationMap::read_csv("patch_index,ratio,count,cb0\n0,0.5\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 28, .. }), "{err}");
    }

    /// Exhaustive subset search: the subset with the largest total similarity
    /// (ties broken lexicographically on sorted indices) is the top-n set.
    fn brute_force_best_subset(sims: &[f64], n: usize) -> Vec<usize> {
        let v = sims.len();
        let mut best: Option<(Vec<usize>, Vec<f64>)> = None;
        for mask in 0u32..(1 << v) {
            if mask.count_ones() as usize != n {
                continue;
            }
            let subset: Vec<usize> = (0..v).filter(|i| mask & (1 << i) != 0).collect();
            // Compare by sorted-descending similarity profile, then by indices.
            let mut profile: Vec<f64> = subset.iter().map(|&i| sims[i]).collect();
            profile.sort_by(|a, b| b.total_cmp(a));
            let better = match &best {
                None => true,
                Some((bs, bp)) => {
                    let ord = profile.iter().zip(bp).map(|(a, b)| a.total_cmp(b)).find(|o| o.is_ne());
                    match ord {
                        Some(o) => o.is_gt(),
                        None => subset < *bs,
                    }
                }
            };
            if better {
                best = Some((subset, profile));
            }
        }
        best.unwrap().0
    }

    #[test]
    fn exhaustive_subset_oracle() {
        for seed in 0..40 {
            let mut rng = stream(seed, "oracle");
            let v = rng.gen_range(2..=8);
            let d = rng.gen_range(1..=4);
            let sub = random(v, d, &mut rng);
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sims: Vec<f64> = sub.row_iter().map(|c| crate::numerics::cosine(&x, c, 1e-8)).collect();
            for n in 1..=v.min(3) {
                let sel = quantize_chunk(&x, &sub, n, v, 1.0).unwrap();
                let mut got = sel.indices.clone();
                got.sort_unstable();
                assert_eq!(got, brute_force_best_subset(&sims, n), "seed {seed} n {n}");
                let w = masked_softmax(&sims, &sel.indices, 1.0).unwrap();
                for k in 0..d {
                    let expect: f64 = sel.indices.iter().zip(&w).map(|(&t, w)| w * sub.get(t, k)).sum();
                    assert!((sel.output[k] - expect).abs() <= 1e-12);
                }
            }
        }
    }

    /// Top-n selection margin for every chunk of every row.
    fn selection_margin(z: &Matrix, cb: &Codebook, n: usize) -> f64 {
        let d = cb.dim();
        let mut margin = f64::INFINITY;
        for row in z.row_iter() {
            for j in 0..cb.num_subcodebooks() {
                let sims: Vec<f64> =
                    cb.sub(j).row_iter().map(|c| crate::numerics::cosine(&row[j * d..(j + 1) * d], c, 1e-8)).collect();
                let order = top_k_indices(&sims, sims.len()).unwrap();
                margin = margin.min(sims[order[n - 1]] - sims[order[n]]);
            }
        }
        margin
    }

    #[test]
    fn weighted_sum_gradient_matches_finite_differences() {
        let mut checked = 0;
        let mut seed = 0;
        while checked < 5 {
            seed += 1;
            let mut rng = stream(seed, "gradcheck/quantizer");
            let cb = Codebook::from_entries(vec![random(6, 3, &mut rng), random(6, 3, &mut rng)]).unwrap();
            let z = random(3, 6, &mut rng);
            let n = 3;
            if selection_margin(&z, &cb, n) <= 1e-3 {
                continue;
            }
            let s = QuantizerSettings { mode: QuantizeMode::FixedTopN(n), k_pool: 4, temperature: 0.5, beta: 0.25 };
            let probe = random(3, 6, &mut rng);
            let objective = |z: &Matrix, cb: &Codebook| -> f64 {
                let out = quantize(z, cb, None, &s).unwrap();
                out.z_hat.as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
            };
            let out = quantize(&z, &cb, None, &s).unwrap();
            let grads = quantize_backward(&z, &cb, &out.alloc, &probe, s.temperature).unwrap();

            let rep = grad_check(|m| objective(m, &cb), |_| grads.input.clone(), &z, 1e-5, 1e-4).unwrap();
            assert!(rep.passed, "input seed {seed}: {rep:?}");
            for j in 0..2 {
                let rep = grad_check(
                    |m| {
                        let mut c = cb.clone();
                        c.entries_mut()[j] = m.clone();
                        objective(&z, &c)
                    },
                    |_| grads.codebook[j].clone(),
                    cb.sub(j),
                    1e-5,
                    1e-4,
                )
                .unwrap();
                assert!(rep.passed, "codebook {j} seed {seed}: {rep:?}");
            }
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn adaptive_k1_matches_warmup(seed in 0u64..500) {
            let mut rng = stream(seed, "prop");
            let cb = Codebook::from_entries(vec![random(8, 2, &mut rng), random(8, 2, &mut rng)]).unwrap();
            let z = random(6, 4, &mut rng);
            let r = RatioVector((0..6).map(|_| rng.gen_range(0.01..0.99)).collect());
            let a = quantize(&z, &cb, Some(&r), &settings(QuantizeMode::Adaptive(1))).unwrap();
            let w = quantize(&z, &cb, Some(&r), &settings(QuantizeMode::Warmup)).unwrap();
            prop_assert_eq!(a, w);
        }

        #[test]
        fn allocation_entries_are_well_formed(seed in 0u64..500) {
            let mut rng = stream(seed, "prop");
            let cb = Codebook::from_entries(vec![random(8, 3, &mut rng), random(8, 3, &mut rng)]).unwrap();
            let z = random(6, 6, &mut rng);
            let r = RatioVector((0..6).map(|_| rng.gen_range(0.01..0.99)).collect());
            let out = quantize(&z, &cb, Some(&r), &settings(QuantizeMode::Adaptive(5))).unwrap();
            for p in &out.alloc.patches {
                prop_assert!((1..=5).contains(&p.count));
                for (idx, w) in &p.selections {
                    prop_assert_eq!(idx.len(), p.count);
                    let mut u = idx.clone();
                    u.sort_unstable();
                    u.dedup();
                    prop_assert_eq!(u.len(), idx.len());
                    prop_assert!(w.iter().all(|&x| x > 0.0));
                    prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
                }
            }
            prop_assert!(out.per_patch_error.iter().all(|&e| e >= 0.0));
        }

        #[test]
        fn full_fixed_pool_ignores_ratio(seed in 0u64..200) {
            let mut rng = stream(seed, "prop");
            let cb = Codebook::from_entries(vec![random(5, 2, &mut rng)]).unwrap();
            let z = random(4, 2, &mut rng);
            let s = QuantizerSettings { mode: QuantizeMode::FixedTopN(5), k_pool: 5, temperature: 1.0, beta: 0.25 };
            let r1 = RatioVector((0..4).map(|_| rng.gen_range(0.01..0.99)).collect());
            let r2 = RatioVector((0..4).map(|_| rng.gen_range(0.01..0.99)).collect());
            let a = quantize(&z, &cb, Some(&r1), &s).unwrap();
            let b = quantize(&z, &cb, Some(&r2), &s).unwrap();
            prop_assert_eq!(a.z_hat, b.z_hat);
        }
    }
}
