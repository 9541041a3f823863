//! The full finite-difference suite run by `cddvt gradcheck`.
//!
//! Every analytic gradient in the training path is probed at 5 seeds with
//! central differences (eps 1e-5, rel_tol 1e-4). Random linear probes turn
//! vector-valued maps into scalars so every output coordinate is exercised.

use rand::Rng;

use crate::allocator::{allocator_backward, allocator_forward, dpa_loss, AllocatorParams, RatioTarget, RatioVector};
use crate::autoencoder::{reconstruction_loss, Mlp};
use crate::codebook::{diversity_loss, CentroidSet, Codebook};
use crate::error::Result;
use crate::numerics::{cosine, grad_check, top_k_indices, Matrix};
use crate::quantizer::{commitment_loss, quantize, quantize_backward, QuantizeMode, QuantizerSettings};
use crate::rng::{stream, StreamRng};

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const SEEDS: u64 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub seed: u64,
    pub max_rel_diff: f64,
    pub passed: bool,
}

fn random(rows: usize, cols: usize, rng: &mut StreamRng) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

fn row_vec(v: &[f64]) -> Matrix {
    Matrix::new(1, v.len(), v.to_vec()).expect("sized")
}

fn inner(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

struct Suite {
    rows: Vec<CheckRow>,
}

impl Suite {
    fn check(
        &mut self,
        name: &str,
        seed: u64,
        f: impl Fn(&Matrix) -> f64,
        analytic: Matrix,
        point: &Matrix,
    ) -> Result<()> {
        let rep = grad_check(f, |_| analytic.clone(), point, EPS, REL_TOL)?;
        self.rows.push(CheckRow {
            name: name.to_string(),
            seed,
            max_rel_diff: rep.max_rel_diff,
            passed: rep.passed,
        });
        Ok(())
    }
}

fn diversity(s: &mut Suite, seed: u64) -> Result<()> {
    let mut rng = stream(seed, "gradsuite/diversity");
    let c = random(4, 4, &mut rng);
    let (_, g) = diversity_loss(&CentroidSet { centroids: c.clone() });
    s.check("diversity loss", seed, |m| diversity_loss(&CentroidSet { centroids: m.clone() }).0, g, &c)
}

fn dpa(s: &mut Suite, seed: u64) -> Result<()> {
    let mut rng = stream(seed, "gradsuite/dpa");
    let r: Vec<f64> = (0..16).map(|_| rng.gen_range(0.01..0.99)).collect();
    let t = RatioTarget((0..16).map(|_| rng.gen_range(1.0 / 64.0..1.0)).collect());
    let (_, g) = dpa_loss(&RatioVector(r.clone()), &t)?;
    s.check(
        "DPA loss",
        seed,
        |m| dpa_loss(&RatioVector(m.as_slice().to_vec()), &t).map_or(f64::NAN, |x| x.0),
        row_vec(&g),
        &row_vec(&r),
    )
}

fn allocator(s: &mut Suite, seed: u64) -> Result<()> {
    let mut rng = stream(seed, "gradsuite/allocator");
    let p = AllocatorParams::init(8, 4, 3, 3, &mut rng)?;
    let z = random(12, 8, &mut rng);
    let target = RatioTarget((0..12).map(|_| rng.gen_range(1.0 / 64.0..1.0)).collect());
    let loss = |z: &Matrix, p: &AllocatorParams| -> f64 {
        let (r, _) = allocator_forward(z, p).expect("shapes");
        dpa_loss(&r, &target).expect("shapes").0
    };
    let (r, cache) = allocator_forward(&z, &p)?;
    let (_, dr) = dpa_loss(&r, &target)?;
    let (g, dz) = allocator_backward(&cache, &p, &dr)?;

    type Get = fn(&AllocatorParams) -> Vec<f64>;
    type Set = fn(&mut AllocatorParams, &[f64]);
    let blocks: [(&str, Get, Set); 4] = [
        ("allocator conv1 weights", |p| p.w1.clone(), |p, v| p.w1 = v.to_vec()),
        ("allocator conv1 bias", |p| p.b1.clone(), |p, v| p.b1 = v.to_vec()),
        ("allocator conv2 weights", |p| p.w2.clone(), |p, v| p.w2 = v.to_vec()),
        ("allocator conv2 bias", |p| vec![p.b2], |p, v| p.b2 = v[0]),
    ];
    for (name, get, set) in blocks {
        let f = |m: &Matrix| {
            let mut q = p.clone();
            set(&mut q, m.as_slice());
            loss(&z, &q)
        };
        s.check(name, seed, f, row_vec(&get(&g)), &row_vec(&get(&p)))?;
    }
    s.check("allocator input", seed, |m| loss(m, &p), dz, &z)
}

fn selection_margin(z: &Matrix, cb: &Codebook, n: usize) -> f64 {
    let d = cb.dim();
    let mut margin = f64::INFINITY;
    for row in z.row_iter() {
        for j in 0..cb.num_subcodebooks() {
            let sims: Vec<f64> = cb.sub(j).row_iter().map(|c| cosine(&row[j * d..(j + 1) * d], c, 1e-8)).collect();
            let order = top_k_indices(&sims, sims.len()).expect("non-empty");
            margin = margin.min(sims[order[n - 1]] - sims[order[n]]);
        }
    }
    margin
}

fn quantizer(s: &mut Suite, seed: u64) -> Result<()> {
    // Draw until the top-n selection is stable under the probe step.
    let mut rng = stream(seed, "gradsuite/quantizer");
    let n = 3;
    let (cb, z) = loop {
        let cb = Codebook::from_entries(vec![random(6, 3, &mut rng), random(6, 3, &mut rng)])?;
        let z = random(3, 6, &mut rng);
        if selection_margin(&z, &cb, n) > 1e-3 {
            break (cb, z);
        }
    };
    let settings = QuantizerSettings { mode: QuantizeMode::FixedTopN(n), k_pool: 4, temperature: 0.5, beta: 0.25 };
    let probe = random(3, 6, &mut rng);
    let objective = |z: &Matrix, cb: &Codebook| inner(&quantize(z, cb, None, &settings).expect("shapes").z_hat, &probe);
    let out = quantize(&z, &cb, None, &settings)?;
    let grads = quantize_backward(&z, &cb, &out.alloc, &probe, settings.temperature)?;
    s.check("quantizer weights (input)", seed, |m| objective(m, &cb), grads.input.clone(), &z)?;
    for j in 0..cb.num_subcodebooks() {
        let f = |m: &Matrix| {
            let mut c = cb.clone();
            c.entries_mut()[j] = m.clone();
            objective(&z, &c)
        };
        s.check(&format!("quantizer primitives (sub-codebook {j})"), seed, f, grads.codebook[j].clone(), cb.sub(j))?;
    }
    Ok(())
}

fn commitment(s: &mut Suite, seed: u64) -> Result<()> {
    let mut rng = stream(seed, "gradsuite/commitment");
    let z = random(5, 8, &mut rng);
    let zq = random(5, 8, &mut rng);
    let beta = 0.25;
    let c = commitment_loss(&z, &zq, beta)?;
    // Each side sees the other as a constant, so each gradient matches one term.
    let enc = |m: &Matrix| beta * commitment_loss(m, &zq, 0.0).map_or(f64::NAN, |x| x.loss);
    s.check("commitment (encoder side)", seed, enc, c.grad_input, &z)?;
    let cbs = |m: &Matrix| commitment_loss(&z, m, 0.0).map_or(f64::NAN, |x| x.loss);
    s.check("commitment (codebook side)", seed, cbs, c.grad_quantized, &zq)
}

fn mlp(s: &mut Suite, seed: u64, label: &str, dims: (usize, usize, usize)) -> Result<()> {
    let mut rng = stream(seed, &format!("gradsuite/{label}"));
    let net = Mlp::init(dims.0, dims.1, dims.2, &mut rng);
    let x = random(6, dims.0, &mut rng);
    let probe = random(6, dims.2, &mut rng);
    let objective = |net: &Mlp, x: &Matrix| inner(&net.forward(x).expect("shapes").0, &probe);
    let (_, cache) = net.forward(&x)?;
    let (g, dx) = net.backward(&cache, &probe)?;

    type Block = fn(&mut Mlp) -> &mut [f64];
    let blocks: [(&str, Block); 4] = [
        ("w1", |m| m.w1.as_mut_slice()),
        ("b1", |m| m.b1.as_mut_slice()),
        ("w2", |m| m.w2.as_mut_slice()),
        ("b2", |m| m.b2.as_mut_slice()),
    ];
    for (name, block) in blocks {
        let mut p0 = net.clone();
        let mut g0 = g.clone();
        let point = row_vec(block(&mut p0));
        let analytic = row_vec(block(&mut g0));
        let f = |m: &Matrix| {
            let mut q = net.clone();
            block(&mut q).copy_from_slice(m.as_slice());
            objective(&q, &x)
        };
        s.check(&format!("{label} {name}"), seed, f, analytic, &point)?;
    }
    s.check(&format!("{label} input"), seed, |m| objective(&net, m), dx, &x)
}

fn reconstruction(s: &mut Suite, seed: u64) -> Result<()> {
    let mut rng = stream(seed, "gradsuite/reconstruction");
    let target = random(4, 16, &mut rng);
    let recon = random(4, 16, &mut rng);
    let (_, g) = reconstruction_loss(&target, &recon)?;
    s.check(
        "reconstruction loss",
        seed,
        |m| reconstruction_loss(&target, m).map_or(f64::NAN, |x| x.0),
        g,
        &recon,
    )
}

/// Runs every check for seeds `0..SEEDS`.
pub fn run_suite() -> Result<Vec<CheckRow>> {
    let mut s = Suite { rows: Vec::new() };
    for seed in 0..SEEDS {
        diversity(&mut s, seed)?;
        dpa(&mut s, seed)?;
        allocator(&mut s, seed)?;
        quantizer(&mut s, seed)?;
        commitment(&mut s, seed)?;
        mlp(&mut s, seed, "encoder", (16, 32, 16))?;
        mlp(&mut s, seed, "decoder", (16, 32, 16))?;
        reconstruction(&mut s, seed)?;
    }
    s.rows.sort_by(|a, b| a.name.cmp(&b.name).then(a.seed.cmp(&b.seed)));
    Ok(s.rows)
}

/// One line per check plus a summary line.
pub fn format_table(rows: &[CheckRow]) -> String {
    let mut out = format!("{:<40} {:>4} {:>14}  result\n", "check", "seed", "max rel diff");
    for r in rows {
        out.push_str(&format!(
            "{:<40} {:>4} {:>14.3e}  {}\n",
            r.name,
            r.seed,
            r.max_rel_diff,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    out.push_str(&format!("{} checks, {} failed\n", rows.len(), failed));
    out
}
