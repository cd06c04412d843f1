//! Synthetic generative benchmark: draws a near-orthonormal basis, smooth
//! nonnegative loading trajectories (clipped Gaussian-process samples),
//! Bernoulli structural graphs, correlation sequences with
//! Laplacian-eigenbasis noise, and scores produced by a randomly initialized
//! predictor network. Ground truth stays available so recovery can be scored
//! exactly.

use crate::error::{Error, Result};
use crate::io::{normalized_laplacian, Cohort, ScoreVector, StructuralGraph, Subject};
use crate::linalg::{self, Mat};
use crate::optimizer::{self, derive_seed};
use crate::predictor::{forward, NetConfig, PredictorParams};
use crate::srddl::{scale_columns, HyperParams};
use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub k: usize,
    pub m: usize,
    /// Windows per subject.
    pub t: usize,
    /// Regions.
    pub p: usize,
    pub sigma_c: f64,
    pub sigma_b: f64,
    pub sigma_gamma: f64,
    pub sigma_y: f64,
    /// Uniform Bernoulli edge prior.
    pub edge_prior: f64,
    /// Gaussian-process length scale as a fraction of T.
    pub gp_length_frac: f64,
    /// Weight-range multiplier for the generator network, so generated
    /// scores have usable spread across subjects.
    pub gen_net_gain: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 60,
            k: 4,
            m: 3,
            t: 30,
            p: 30,
            sigma_c: 4.0,
            sigma_b: 0.0,
            sigma_gamma: 0.0,
            sigma_y: 0.0,
            edge_prior: 0.3,
            gp_length_frac: 0.1,
            gen_net_gain: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub basis: Mat,
    /// True loading tracks, T x K per subject.
    pub tracks: Vec<Mat>,
    pub gen_params: PredictorParams,
}

fn gaussian_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Orthonormalized Gaussian draw plus entrywise Gaussian corruption of
/// standard deviation `sigma_b`.
pub fn gen_basis(p: usize, k: usize, sigma_b: f64, seed: u64) -> Result<Mat> {
    if k > p {
        return Err(Error::contract(format!("gen_basis: k={k} exceeds p={p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = gaussian_mat(p, k, &mut rng);
    let svd = linalg::svd(&raw)?;
    let mut b = svd.u.dot(&svd.vt);
    if sigma_b > 0.0 {
        for v in b.iter_mut() {
            *v += sigma_b * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(b)
}

/// Zero-mean Gaussian-process draws (squared-exponential kernel, marginal
/// std `sigma_c`), clipped at zero. Returns the clipped T x K track.
pub fn gen_coeffs(t: usize, k: usize, sigma_c: f64, length_scale: f64, seed: u64) -> Mat {
    gen_coeffs_with_raw(t, k, sigma_c, length_scale, seed).0
}

/// Same, also returning the pre-clip samples (used to verify the marginal
/// spread).
pub fn gen_coeffs_with_raw(t: usize, k: usize, sigma_c: f64, length_scale: f64, seed: u64) -> (Mat, Mat) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if sigma_c == 0.0 {
        return (Mat::zeros((t, k)), Mat::zeros((t, k)));
    }
    let ell = length_scale.max(1e-9);
    let mut kernel = Mat::zeros((t, t));
    for i in 0..t {
        for j in 0..t {
            let d = (i as f64 - j as f64) / ell;
            kernel[[i, j]] = sigma_c * sigma_c * (-0.5 * d * d).exp();
        }
        kernel[[i, i]] += 1e-8 * sigma_c * sigma_c;
    }
    let chol = linalg::cholesky(&kernel).expect("GP kernel is positive definite");
    let mut raw = Mat::zeros((t, k));
    for kk in 0..k {
        let z = Array1::from_shape_fn(t, |_| rng.sample::<f64, _>(StandardNormal));
        let col = chol.dot(&z);
        for i in 0..t {
            raw[[i, kk]] = col[i];
        }
    }
    let clipped = raw.mapv(|v| v.max(0.0));
    (clipped, raw)
}

/// Bernoulli adjacency (uniform prior on every pair), symmetrized, with the
/// normalized Laplacian attached.
pub fn gen_laplacian(p: usize, edge_prior: f64, seed: u64) -> Result<StructuralGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Mat::zeros((p, p));
    for i in 0..p {
        for j in (i + 1)..p {
            if rng.random::<f64>() < edge_prior {
                a[[i, j]] = 1.0;
                a[[j, i]] = 1.0;
            }
        }
    }
    normalized_laplacian(&a)
}

/// `Γ_t = B diag(c_t) Bᵀ + σ_Γ X Xᵀ`, where `X` is the full orthonormal
/// eigenbasis of the subject's Laplacian (so the noise term is a spectral
/// shift that preserves positive semi-definiteness).
pub fn gen_correlations(b: &Mat, track: &Mat, laplacian: &Mat, sigma_gamma: f64) -> Result<Vec<Mat>> {
    let t = track.nrows();
    let p = b.nrows();
    let noise = if sigma_gamma > 0.0 {
        let (_, x) = linalg::sym_eig(laplacian)?;
        Some(x.dot(&x.t()) * sigma_gamma)
    } else {
        None
    };
    let mut out = Vec::with_capacity(t);
    for t_i in 0..t {
        let mut g = scale_columns(b, &track.row(t_i)).dot(&b.t());
        if let Some(n) = &noise {
            g += n;
        }
        // exact symmetry
        for i in 0..p {
            for j in (i + 1)..p {
                let v = 0.5 * (g[[i, j]] + g[[j, i]]);
                g[[i, j]] = v;
                g[[j, i]] = v;
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// `y = |F_Θ(track) + N(0, σ_y²)|` per score dimension.
pub fn gen_scores(
    gen_params: &PredictorParams,
    track: &Mat,
    sigma_y: f64,
    seed: u64,
    subject_id: &str,
) -> Result<ScoreVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace = forward(gen_params, track)?;
    let m = trace.final_pred.len();
    let mut y = Array1::zeros(m);
    for j in 0..m {
        let noise: f64 = rng.sample::<f64, _>(StandardNormal);
        y[j] = (trace.final_pred[j] + sigma_y * noise).abs();
    }
    Ok(ScoreVector {
        subject_id: subject_id.to_string(),
        y,
        observed: vec![true; m],
    })
}

/// Draw a full cohort plus its generating ground truth.
pub fn generate(cfg: &SynthConfig) -> Result<(Cohort, GroundTruth)> {
    if cfg.n_subjects == 0 {
        return Err(Error::contract("generate: zero subjects"));
    }
    let basis = gen_basis(cfg.p, cfg.k, cfg.sigma_b, derive_seed(cfg.seed, 10, 0))?;
    let gen_params = PredictorParams::init(
        NetConfig::standard(cfg.k, cfg.m),
        derive_seed(cfg.seed, 11, 0),
        cfg.gen_net_gain,
    );
    let ell = cfg.gp_length_frac * cfg.t as f64;
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    let mut tracks = Vec::with_capacity(cfg.n_subjects);
    for n in 0..cfg.n_subjects {
        let id = format!("sub{n:04}");
        let track = gen_coeffs(cfg.t, cfg.k, cfg.sigma_c, ell, derive_seed(cfg.seed, 12, n as u64));
        let graph = gen_laplacian(cfg.p, cfg.edge_prior, derive_seed(cfg.seed, 13, n as u64))?;
        let gammas = gen_correlations(&basis, &track, &graph.laplacian, cfg.sigma_gamma)?;
        let scores = gen_scores(&gen_params, &track, cfg.sigma_y, derive_seed(cfg.seed, 14, n as u64), &id)?;
        subjects.push(Subject {
            id,
            gammas,
            graph: Some(graph),
            scores,
        });
        tracks.push(track);
    }
    Ok((
        Cohort {
            p: cfg.p,
            m: cfg.m,
            subjects,
        },
        GroundTruth {
            basis,
            tracks,
            gen_params,
        },
    ))
}

// ---------------------------------------------------------------------------
// Recovery metrics
// ---------------------------------------------------------------------------

/// Minimum-cost assignment on a square cost matrix (potentials + augmenting
/// paths). Returns `assign[row] = col`.
fn hungarian_min(cost: &Mat) -> Vec<usize> {
    let n = cost.nrows();
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Matching {
    Hungarian,
    Greedy,
}

/// Mean absolute inner product between matched unit-normalized columns of the
/// true and recovered bases. Columns are matched by the assignment that
/// maximizes the total absolute inner product (greedy matching available for
/// comparison). Invariant to column permutation and sign flips of either
/// argument.
pub fn similarity_with(true_b: &Mat, recovered_b: &Mat, matching: Matching) -> Result<f64> {
    let (p, k) = true_b.dim();
    if recovered_b.dim() != (p, k) {
        return Err(Error::dim(format!(
            "similarity: shapes {:?} vs {:?}",
            true_b.dim(),
            recovered_b.dim()
        )));
    }
    let norm_cols = |m: &Mat| -> Mat {
        let mut out = m.clone();
        for j in 0..k {
            let norm = (0..p).map(|i| out[[i, j]] * out[[i, j]]).sum::<f64>().sqrt();
            if norm > 0.0 {
                for i in 0..p {
                    out[[i, j]] /= norm;
                }
            }
        }
        out
    };
    let a = norm_cols(true_b);
    let b = norm_cols(recovered_b);
    let mut gain = Mat::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            let dot: f64 = (0..p).map(|r| a[[r, i]] * b[[r, j]]).sum();
            gain[[i, j]] = dot.abs();
        }
    }
    let assign = match matching {
        Matching::Hungarian => hungarian_min(&gain.mapv(|v| -v)),
        Matching::Greedy => {
            let mut taken = vec![false; k];
            let mut assign = vec![0usize; k];
            for i in 0..k {
                let mut best = (0usize, f64::NEG_INFINITY);
                for j in 0..k {
                    if !taken[j] && gain[[i, j]] > best.1 {
                        best = (j, gain[[i, j]]);
                    }
                }
                taken[best.0] = true;
                assign[i] = best.0;
            }
            assign
        }
    };
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| gain[[i, j]]).sum();
    Ok(total / k as f64)
}

pub fn similarity(true_b: &Mat, recovered_b: &Mat) -> Result<f64> {
    similarity_with(true_b, recovered_b, Matching::Hungarian)
}

// ---------------------------------------------------------------------------
// Noise sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseAxis {
    SigmaB,
    SigmaGamma,
    SigmaY,
}

impl std::str::FromStr for NoiseAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma-b" => Ok(NoiseAxis::SigmaB),
            "sigma-gamma" => Ok(NoiseAxis::SigmaGamma),
            "sigma-y" => Ok(NoiseAxis::SigmaY),
            other => Err(Error::Config(format!("unknown noise axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub s_mean: f64,
    pub s_stderr: f64,
    /// Per-score (mean, stderr) of the training-set median absolute error.
    pub mae: Vec<(f64, f64)>,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Repeated generate-and-fit trials over a noise grid; reports recovery
/// similarity and per-score training MAE at each grid value.
pub fn noise_sweep(
    base: &SynthConfig,
    hp: &HyperParams,
    axis: NoiseAxis,
    grid: &[f64],
    trials: usize,
) -> Result<Vec<SweepPoint>> {
    if trials == 0 || grid.is_empty() {
        return Err(Error::contract("noise_sweep: empty grid or zero trials"));
    }
    let mut out = Vec::with_capacity(grid.len());
    for (gi, &value) in grid.iter().enumerate() {
        let mut s_vals = Vec::with_capacity(trials);
        let mut mae_vals: Vec<Vec<f64>> = vec![Vec::with_capacity(trials); base.m];
        for trial in 0..trials {
            let mut cfg = base.clone();
            match axis {
                NoiseAxis::SigmaB => cfg.sigma_b = value,
                NoiseAxis::SigmaGamma => cfg.sigma_gamma = value,
                NoiseAxis::SigmaY => cfg.sigma_y = value,
            }
            cfg.seed = derive_seed(base.seed, 20 + gi as u64, trial as u64);
            let (cohort, truth) = generate(&cfg)?;
            let state = optimizer::fit(&cohort, hp, derive_seed(cfg.seed, 21, 0))?;
            s_vals.push(similarity(&truth.basis, &state.dictionary.b)?);
            let preds = state.training_predictions()?;
            for m_i in 0..base.m {
                let mut errs: Vec<f64> = preds
                    .iter()
                    .zip(cohort.subjects.iter())
                    .map(|(p, s)| (p[m_i] - s.scores.y[m_i]).abs())
                    .collect();
                errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mid = errs.len() / 2;
                let med = if errs.len() % 2 == 0 {
                    0.5 * (errs[mid - 1] + errs[mid])
                } else {
                    errs[mid]
                };
                mae_vals[m_i].push(med);
            }
        }
        let (s_mean, s_stderr) = mean_stderr(&s_vals);
        out.push(SweepPoint {
            value,
            s_mean,
            s_stderr,
            mae: mae_vals.iter().map(|v| mean_stderr(v)).collect(),
        });
    }
    Ok(out)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let m = points.first().map(|p| p.mae.len()).unwrap_or(0);
    let mut out = String::from("value,s_mean,s_stderr");
    for i in 0..m {
        out.push_str(&format!(",mae_{}_mean,mae_{}_stderr", i + 1, i + 1));
    }
    out.push('\n');
    for p in points {
        out.push_str(&format!("{},{},{}", p.value, p.s_mean, p.s_stderr));
        for (mean, se) in &p.mae {
            out.push_str(&format!(",{mean},{se}"));
        }
        out.push('\n');
    }
    out
}
