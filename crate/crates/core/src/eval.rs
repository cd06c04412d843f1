//! Evaluation harness: median-absolute-error and normalized-mutual-information
//! metrics, five-fold cross validation with fold-local adjacency imputation,
//! the betweenness-centrality baseline, eigenspectrum export and
//! hyperparameter sweeps.

use crate::error::{Error, Result};
use crate::io::{Cohort, WindowSpec};
use crate::linalg::{self, Mat};
use crate::optimizer::{derive_seed, fit_variant, TrainState, Variant};
use crate::predictor::{self, forward, NetConfig, PredictorParams, TrainNetOpts};
use crate::qp;
use crate::srddl::HyperParams;
use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BinaryHeap;
use std::path::Path;

/// Median absolute error; an even count takes the midpoint of the central
/// pair.
pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let mut errs: Vec<f64> = pred.iter().zip(truth.iter()).map(|(p, t)| (p - t).abs()).collect();
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = errs.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        errs[n / 2]
    } else {
        0.5 * (errs[n / 2 - 1] + errs[n / 2])
    }
}

fn entropy(counts: &[usize], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information between two real-valued vectors after
/// equal-width discretization over their pooled range:
/// `(H(a) + H(b) - H(a,b)) / min(H(a), H(b))`, clipped to [0, 1].
/// A constant vector has zero entropy; the value is then defined as 1 when
/// both vectors are constant and equal, else 0.
pub fn nmi(a: &[f64], b: &[f64], bins: usize) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(a.len() >= 2, "nmi needs at least two samples");
    let bins = bins.max(1);
    let lo = a.iter().chain(b.iter()).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b.iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        // everything identical across both vectors
        return 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let bin_of = |x: f64| -> usize { (((x - lo) / width) as usize).min(bins - 1) };
    let mut ca = vec![0usize; bins];
    let mut cb = vec![0usize; bins];
    let mut cab = vec![0usize; bins * bins];
    for (&x, &y) in a.iter().zip(b.iter()) {
        let i = bin_of(x);
        let j = bin_of(y);
        ca[i] += 1;
        cb[j] += 1;
        cab[i * bins + j] += 1;
    }
    let n = a.len() as f64;
    let ha = entropy(&ca, n);
    let hb = entropy(&cb, n);
    if ha <= 0.0 || hb <= 0.0 {
        // one side constant: mutual information is zero unless both collapse
        // to the same single bin
        let same = ha <= 0.0 && hb <= 0.0 && a.iter().zip(b.iter()).all(|(x, y)| bin_of(*x) == bin_of(*y));
        log::warn!("nmi: degenerate marginal entropy; defined as {}", if same { 1.0 } else { 0.0 });
        return if same { 1.0 } else { 0.0 };
    }
    let hab = entropy(&cab, n);
    ((ha + hb - hab) / ha.min(hb)).clamp(0.0, 1.0)
}

/// Default bin count for score distributions.
pub fn default_bins(n: usize) -> usize {
    (n as f64).sqrt().ceil() as usize
}

// ---------------------------------------------------------------------------
// Betweenness centrality
// ---------------------------------------------------------------------------

#[derive(PartialEq)]
struct HeapItem {
    dist: f64,
    node: usize,
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // min-heap on distance, then node index for determinism
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap()
            .then(other.node.cmp(&self.node))
    }
}

/// Brandes betweenness on an undirected weighted graph. Edge weights are
/// strengths; traversal length is `1/weight` for positive weights, negative
/// or zero entries are treated as absent edges. Unreachable pairs contribute
/// nothing; scores are unnormalized pair counts.
pub fn betweenness_centrality(psi: &Mat) -> Vec<f64> {
    let p = psi.nrows();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); p];
    for i in 0..p {
        for j in 0..p {
            if i != j && psi[[i, j]] > 0.0 {
                adj[i].push((j, 1.0 / psi[[i, j]]));
            }
        }
    }
    let mut centrality = vec![0.0f64; p];
    let mut dist = vec![f64::INFINITY; p];
    let mut sigma = vec![0.0f64; p];
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); p];
    let mut delta = vec![0.0f64; p];
    for s in 0..p {
        for v in 0..p {
            dist[v] = f64::INFINITY;
            sigma[v] = 0.0;
            preds[v].clear();
            delta[v] = 0.0;
        }
        dist[s] = 0.0;
        sigma[s] = 1.0;
        let mut settled: Vec<usize> = Vec::with_capacity(p);
        let mut done = vec![false; p];
        let mut heap = BinaryHeap::new();
        heap.push(HeapItem { dist: 0.0, node: s });
        while let Some(HeapItem { dist: d, node: v }) = heap.pop() {
            if done[v] || d > dist[v] {
                continue;
            }
            done[v] = true;
            settled.push(v);
            for &(w, len) in &adj[v] {
                let alt = dist[v] + len;
                let tol = 1e-12 * (1.0 + alt.abs());
                if alt < dist[w] - tol {
                    dist[w] = alt;
                    sigma[w] = sigma[v];
                    preds[w].clear();
                    preds[w].push(v);
                    heap.push(HeapItem { dist: alt, node: w });
                } else if (alt - dist[w]).abs() <= tol && !done[w] {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }
        // dependency accumulation in reverse settle order
        for &w in settled.iter().rev() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                centrality[w] += delta[w];
            }
        }
    }
    // each unordered pair was counted from both endpoints
    for c in &mut centrality {
        *c *= 0.5;
    }
    centrality
}

// ---------------------------------------------------------------------------
// Cross validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSplit {
    /// subject index -> fold index
    pub assignment: Vec<usize>,
    pub folds: usize,
    pub seed: u64,
}

/// Seeded shuffle dealt round-robin: fold sizes differ by at most one and
/// every subject lands in exactly one test fold.
pub fn fold_split(n: usize, folds: usize, seed: u64) -> FoldSplit {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; n];
    for (pos, &subj) in order.iter().enumerate() {
        assignment[subj] = pos % folds;
    }
    FoldSplit {
        assignment,
        folds,
        seed,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub score: usize,
    pub mae_train: f64,
    pub mae_test: f64,
    pub nmi_train: f64,
    pub nmi_test: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldScoreReport {
    pub score: usize,
    pub mae_test: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub per_score: Vec<FoldScoreReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub folds: usize,
    pub seed: u64,
    pub per_score: Vec<ScoreReport>,
    pub per_fold: Vec<FoldReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub subject_id: String,
    pub fold: usize,
    pub split: String,
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
    pub observed: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: MetricReport,
    pub predictions: Vec<PredictionRow>,
    /// Test-time attention weights per subject (ragged rows).
    pub attention: Vec<(String, Vec<f64>)>,
}

struct SplitCohorts {
    train: Cohort,
    test: Cohort,
    train_count: usize,
}

fn split_fold(cohort: &Cohort, split: &FoldSplit, fold: usize) -> Result<SplitCohorts> {
    let train_idx: Vec<usize> = (0..cohort.len()).filter(|&i| split.assignment[i] != fold).collect();
    let test_idx: Vec<usize> = (0..cohort.len()).filter(|&i| split.assignment[i] == fold).collect();
    let mut train = Cohort {
        p: cohort.p,
        m: cohort.m,
        subjects: train_idx.iter().map(|&i| cohort.subjects[i].clone()).collect(),
    };
    let mut test = Cohort {
        p: cohort.p,
        m: cohort.m,
        subjects: test_idx.iter().map(|&i| cohort.subjects[i].clone()).collect(),
    };
    // fold-local imputation: only training graphs donate edges
    let train_donors: Vec<usize> = (0..train.len()).collect();
    train.impute_missing_graphs(&train_donors)?;
    let donor_graphs: Vec<crate::io::StructuralGraph> =
        train.subjects.iter().filter_map(|s| s.graph.clone()).collect();
    let refs: Vec<&crate::io::StructuralGraph> = donor_graphs.iter().collect();
    for s in &mut test.subjects {
        if s.graph.is_none() {
            s.graph = Some(crate::io::impute_adjacency(&s.id, &refs)?);
        }
    }
    Ok(SplitCohorts {
        train_count: train.len(),
        train,
        test,
    })
}

fn predict_test_subject(state: &TrainState, subj: &crate::io::Subject) -> Result<(Array1<f64>, Vec<f64>)> {
    let lap = match state.variant {
        // the identity-weighted variant never sees structure
        Variant::NoDti => Mat::eye(subj.gammas[0].nrows()),
        _ => subj.graph.as_ref().unwrap().laplacian.clone(),
    };
    let (_, trace, _) = qp::infer_subject(
        &state.dictionary.b,
        &state.predictor,
        &subj.gammas,
        &lap,
        qp::QP_DEFAULT_TOL,
    )?;
    Ok((trace.final_pred, trace.attention.to_vec()))
}

struct PooledScores {
    pred: Vec<f64>,
    truth: Vec<f64>,
}

fn aggregate(pooled: &[Vec<PooledScores>], m: usize) -> Vec<(f64, f64)> {
    // returns (mae, nmi) per score over the pooled observed pairs
    (0..m)
        .map(|s| {
            let preds: Vec<f64> = pooled[s].iter().flat_map(|p| p.pred.iter().cloned()).collect();
            let truths: Vec<f64> = pooled[s].iter().flat_map(|p| p.truth.iter().cloned()).collect();
            if preds.len() < 2 {
                return (mae(&preds, &truths), 0.0);
            }
            let bins = default_bins(preds.len());
            (mae(&preds, &truths), nmi(&truths, &preds, bins))
        })
        .collect()
}

/// Five-fold cross validation of a fitting variant: fit on each training
/// split (with fold-local imputation), infer held-out subjects through the
/// QP + forward path, report pooled train/test MAE and NMI per score.
pub fn run_cv(cohort: &Cohort, hp: &HyperParams, variant: Variant, folds: usize, seed: u64) -> Result<CvOutcome> {
    if cohort.len() < folds {
        return Err(Error::contract(format!(
            "cross validation needs at least {folds} subjects, got {}",
            cohort.len()
        )));
    }
    let split = fold_split(cohort.len(), folds, derive_seed(seed, 40, 0));
    let m = cohort.m;
    let mut train_pool: Vec<Vec<PooledScores>> = (0..m).map(|_| Vec::new()).collect();
    let mut test_pool: Vec<Vec<PooledScores>> = (0..m).map(|_| Vec::new()).collect();
    let mut predictions = Vec::new();
    let mut attention = Vec::new();
    let mut per_fold = Vec::new();

    for fold in 0..folds {
        let parts = split_fold(cohort, &split, fold)?;
        let state = fit_variant(&parts.train, hp, derive_seed(seed, 41, fold as u64), variant)?;
        if let Some(reason) = &state.aborted {
            return Err(Error::numeric(format!("fold {fold} aborted: {reason}")));
        }

        let train_preds = state.training_predictions()?;
        for (subj, pred) in parts.train.subjects.iter().zip(train_preds.iter()) {
            for s in 0..m {
                if subj.scores.observed[s] {
                    train_pool[s].push(PooledScores {
                        pred: vec![pred[s]],
                        truth: vec![subj.scores.y[s]],
                    });
                }
            }
            predictions.push(PredictionRow {
                subject_id: subj.id.clone(),
                fold,
                split: "train".into(),
                pred: pred.to_vec(),
                truth: subj.scores.y.to_vec(),
                observed: subj.scores.observed.clone(),
            });
        }

        let mut fold_scores: Vec<Vec<(f64, f64)>> = vec![Vec::new(); m];
        for subj in &parts.test.subjects {
            let (pred, attn) = predict_test_subject(&state, subj)?;
            for s in 0..m {
                if subj.scores.observed[s] {
                    test_pool[s].push(PooledScores {
                        pred: vec![pred[s]],
                        truth: vec![subj.scores.y[s]],
                    });
                    fold_scores[s].push((pred[s], subj.scores.y[s]));
                }
            }
            predictions.push(PredictionRow {
                subject_id: subj.id.clone(),
                fold,
                split: "test".into(),
                pred: pred.to_vec(),
                truth: subj.scores.y.to_vec(),
                observed: subj.scores.observed.clone(),
            });
            attention.push((subj.id.clone(), attn));
        }
        per_fold.push(FoldReport {
            fold,
            train_subjects: parts.train_count,
            test_subjects: parts.test.len(),
            per_score: (0..m)
                .map(|s| {
                    let preds: Vec<f64> = fold_scores[s].iter().map(|x| x.0).collect();
                    let truths: Vec<f64> = fold_scores[s].iter().map(|x| x.1).collect();
                    FoldScoreReport {
                        score: s,
                        mae_test: mae(&preds, &truths),
                    }
                })
                .collect(),
        });
    }

    let train_agg = aggregate(&train_pool, m);
    let test_agg = aggregate(&test_pool, m);
    let per_score = (0..m)
        .map(|s| ScoreReport {
            score: s,
            mae_train: train_agg[s].0,
            mae_test: test_agg[s].0,
            nmi_train: train_agg[s].1,
            nmi_test: test_agg[s].1,
        })
        .collect();

    Ok(CvOutcome {
        report: MetricReport {
            variant: variant.to_string(),
            folds,
            seed,
            per_score,
            per_fold,
        },
        predictions,
        attention,
    })
}

/// Betweenness-centrality baseline: per-window centrality of the
/// nonnegative-thresholded `A ∘ Γ` graphs feeds a wide LSTM predictor
/// directly; same folds, imputation and metrics as the main pipeline.
pub fn bc_baseline_cv(cohort: &Cohort, hp: &HyperParams, folds: usize, seed: u64) -> Result<CvOutcome> {
    if cohort.len() < folds {
        return Err(Error::contract("bc baseline: not enough subjects"));
    }
    let split = fold_split(cohort.len(), folds, derive_seed(seed, 40, 0));
    let m = cohort.m;
    let p = cohort.p;
    let mut train_pool: Vec<Vec<PooledScores>> = (0..m).map(|_| Vec::new()).collect();
    let mut test_pool: Vec<Vec<PooledScores>> = (0..m).map(|_| Vec::new()).collect();
    let mut predictions = Vec::new();
    let mut attention = Vec::new();
    let mut per_fold = Vec::new();

    let features_of = |subj: &crate::io::Subject| -> Mat {
        let a = &subj.graph.as_ref().unwrap().adjacency;
        let t_n = subj.gammas.len();
        let mut track = Mat::zeros((t_n, p));
        for (t, gamma) in subj.gammas.iter().enumerate() {
            let mut psi = gamma.clone();
            for i in 0..p {
                for j in 0..p {
                    psi[[i, j]] = (a[[i, j]] * psi[[i, j]]).max(0.0);
                }
            }
            let cb = betweenness_centrality(&psi);
            for i in 0..p {
                track[[t, i]] = cb[i];
            }
        }
        track
    };

    for fold in 0..folds {
        let parts = split_fold(cohort, &split, fold)?;
        let train_tracks: Vec<Mat> = parts.train.subjects.iter().map(&features_of).collect();
        let scores: Vec<crate::io::ScoreVector> =
            parts.train.subjects.iter().map(|s| s.scores.clone()).collect();
        let mut params = PredictorParams::init(
            NetConfig::wide(p, m),
            derive_seed(seed, 42, fold as u64),
            1.0,
        );
        let opts = TrainNetOpts {
            epochs: hp.net_epochs * hp.main_iters.max(1),
            lr0: hp.net_lr0,
            decay: hp.net_decay,
            decay_every: hp.net_decay_every,
            clip_norm: hp.clip_norm,
            seed: derive_seed(seed, 43, fold as u64),
        };
        predictor::train_network(&mut params, &train_tracks, &scores, &opts)?;

        for (subj, track) in parts.train.subjects.iter().zip(train_tracks.iter()) {
            let pred = forward(&params, track)?.final_pred;
            for s in 0..m {
                if subj.scores.observed[s] {
                    train_pool[s].push(PooledScores {
                        pred: vec![pred[s]],
                        truth: vec![subj.scores.y[s]],
                    });
                }
            }
            predictions.push(PredictionRow {
                subject_id: subj.id.clone(),
                fold,
                split: "train".into(),
                pred: pred.to_vec(),
                truth: subj.scores.y.to_vec(),
                observed: subj.scores.observed.clone(),
            });
        }
        let mut fold_scores: Vec<Vec<(f64, f64)>> = vec![Vec::new(); m];
        for subj in &parts.test.subjects {
            let track = features_of(subj);
            let trace = forward(&params, &track)?;
            let pred = trace.final_pred;
            for s in 0..m {
                if subj.scores.observed[s] {
                    test_pool[s].push(PooledScores {
                        pred: vec![pred[s]],
                        truth: vec![subj.scores.y[s]],
                    });
                    fold_scores[s].push((pred[s], subj.scores.y[s]));
                }
            }
            predictions.push(PredictionRow {
                subject_id: subj.id.clone(),
                fold,
                split: "test".into(),
                pred: pred.to_vec(),
                truth: subj.scores.y.to_vec(),
                observed: subj.scores.observed.clone(),
            });
            attention.push((subj.id.clone(), trace.attention.to_vec()));
        }
        per_fold.push(FoldReport {
            fold,
            train_subjects: parts.train_count,
            test_subjects: parts.test.len(),
            per_score: (0..m)
                .map(|s| {
                    let preds: Vec<f64> = fold_scores[s].iter().map(|x| x.0).collect();
                    let truths: Vec<f64> = fold_scores[s].iter().map(|x| x.1).collect();
                    FoldScoreReport {
                        score: s,
                        mae_test: mae(&preds, &truths),
                    }
                })
                .collect(),
        });
    }

    let train_agg = aggregate(&train_pool, m);
    let test_agg = aggregate(&test_pool, m);
    Ok(CvOutcome {
        report: MetricReport {
            variant: "bc".into(),
            folds,
            seed,
            per_score: (0..m)
                .map(|s| ScoreReport {
                    score: s,
                    mae_train: train_agg[s].0,
                    mae_test: test_agg[s].0,
                    nmi_train: train_agg[s].1,
                    nmi_test: test_agg[s].1,
                })
                .collect(),
            per_fold,
        },
        predictions,
        attention,
    })
}

// ---------------------------------------------------------------------------
// Scree and sweeps
// ---------------------------------------------------------------------------

/// Positional eigenvalue statistics across every (subject, window) matrix:
/// eigenvalues sorted descending per matrix, then mean and standard deviation
/// at each position.
pub fn scree_export(cohort: &Cohort) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = cohort.p;
    let mut sums = vec![0.0f64; p];
    let mut sq = vec![0.0f64; p];
    let mut count = 0.0f64;
    for subj in &cohort.subjects {
        for gamma in &subj.gammas {
            let (vals, _) = linalg::sym_eig(gamma)?;
            for i in 0..p {
                sums[i] += vals[i];
                sq[i] += vals[i] * vals[i];
            }
            count += 1.0;
        }
    }
    let mean: Vec<f64> = sums.iter().map(|s| s / count).collect();
    let std: Vec<f64> = sq
        .iter()
        .zip(mean.iter())
        .map(|(s, m)| (s / count - m * m).max(0.0).sqrt())
        .collect();
    Ok((mean, std))
}

pub fn scree_csv(mean: &[f64], std: &[f64]) -> String {
    let mut out = String::from("position,mean,std\n");
    for (i, (m, s)) in mean.iter().zip(std.iter()).enumerate() {
        out.push_str(&format!("{},{m},{s}\n", i + 1));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    Lambda,
    WindowLength,
    Stride,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "window-length" => Ok(SweepAxis::WindowLength),
            "stride" => Ok(SweepAxis::Stride),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamSweepPoint {
    pub value: f64,
    pub mae_test: Vec<f64>,
}

/// Repeated cross validation along one hyperparameter axis, all else fixed.
/// Window axes re-window the cohort from its manifest (they need raw time
/// series); the λ axis reuses the loaded cohort.
pub fn param_sweep(
    manifest_path: &Path,
    hp: &HyperParams,
    axis: SweepAxis,
    grid: &[f64],
    variant: Variant,
    folds: usize,
    seed: u64,
) -> Result<Vec<ParamSweepPoint>> {
    if grid.is_empty() {
        return Err(Error::contract("param_sweep: empty grid"));
    }
    let (base_cohort, manifest) = crate::io::load_cohort(manifest_path)?;
    let mut out = Vec::with_capacity(grid.len());
    for &value in grid {
        let (cohort, hp_local) = match axis {
            SweepAxis::Lambda => {
                let mut h = hp.clone();
                h.lambda_tradeoff = value;
                (base_cohort.clone(), h)
            }
            SweepAxis::WindowLength | SweepAxis::Stride => {
                let mut m2 = manifest.clone();
                if m2.subjects.iter().any(|s| s.timeseries.is_none()) {
                    return Err(Error::Config(
                        "window/stride sweeps need raw time series in the manifest".into(),
                    ));
                }
                match axis {
                    SweepAxis::WindowLength => m2.window.window_length = value as usize,
                    _ => m2.window.stride = value as usize,
                }
                let tmp = manifest_path.with_extension("sweep.json");
                crate::io::write_manifest(&tmp, &m2)?;
                let (c, _) = crate::io::load_cohort(&tmp)?;
                let _ = std::fs::remove_file(&tmp);
                (c, hp.clone())
            }
        };
        let outcome = run_cv(&cohort, &hp_local, variant, folds, seed)?;
        out.push(ParamSweepPoint {
            value,
            mae_test: outcome.report.per_score.iter().map(|s| s.mae_test).collect(),
        });
    }
    Ok(out)
}

pub fn param_sweep_csv(points: &[ParamSweepPoint]) -> String {
    let m = points.first().map(|p| p.mae_test.len()).unwrap_or(0);
    let mut out = String::from("value");
    for i in 0..m {
        out.push_str(&format!(",mae_test_{}", i + 1));
    }
    out.push('\n');
    for p in points {
        out.push_str(&format!("{}", p.value));
        for v in &p.mae_test {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// The window-spec actually used when sweeping windows must still validate.
pub fn validate_window_grid(spec: &WindowSpec) -> Result<()> {
    if spec.stride == 0 || spec.window_length == 0 {
        return Err(Error::Config("window grid values must be >= 1".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use ndarray::array;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        // errors {1, 2, 3}
        assert_eq!(mae(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]), 2.0);
        // errors {1, 3}: even count takes the midpoint
        assert_eq!(mae(&[2.0, 5.0], &[1.0, 2.0]), 2.0);
    }

    #[test]
    fn mae_permutation_invariant() {
        let pred = [3.0, 1.0, 7.0, 2.0];
        let truth = [2.5, 1.5, 6.0, 2.2];
        let base = mae(&pred, &truth);
        let pred_p = [7.0, 3.0, 2.0, 1.0];
        let truth_p = [6.0, 2.5, 2.2, 1.5];
        assert_eq!(base, mae(&pred_p, &truth_p));
    }

    #[test]
    fn nmi_perfect_and_degenerate() {
        let y: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let v = nmi(&y, &y, default_bins(y.len()));
        assert!((v - 1.0).abs() < 1e-12, "self NMI {v}");

        // two-value vectors perfectly aligned
        let a = vec![0.0, 0.0, 5.0, 5.0, 0.0, 5.0];
        assert!((nmi(&a, &a, 3) - 1.0).abs() < 1e-12);

        // constant vs non-constant -> 0; constant and equal -> 1
        let c = vec![2.0; 6];
        assert_eq!(nmi(&c, &a, 3), 0.0);
        assert_eq!(nmi(&c, &c, 3), 1.0);
    }

    #[test]
    fn nmi_shuffle_is_near_zero() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let mut shuffled = y.clone();
        shuffled.shuffle(&mut rng);
        let v = nmi(&y, &shuffled, default_bins(n));
        assert!(v < 0.1, "shuffle NMI {v}");
    }

    #[test]
    fn nmi_symmetric_and_affine_stable() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<f64> = (0..200).map(|_| rng.random::<f64>() * 4.0).collect();
        let b: Vec<f64> = a.iter().map(|x| x * 0.5 + rng.random::<f64>()).collect();
        let bins = default_bins(a.len());
        assert!((nmi(&a, &b, bins) - nmi(&b, &a, bins)).abs() < 1e-12);
        // identical affine relabeling of both arguments preserves every bin count
        let a2: Vec<f64> = a.iter().map(|x| 3.0 * x - 7.0).collect();
        let b2: Vec<f64> = b.iter().map(|x| 3.0 * x - 7.0).collect();
        assert!((nmi(&a, &b, bins) - nmi(&a2, &b2, bins)).abs() < 1e-12);
    }

    #[test]
    fn betweenness_path_and_star_and_clique() {
        // path a-b-c: the middle node bridges one pair
        let psi = array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let cb = betweenness_centrality(&psi);
        assert!((cb[1] - 1.0).abs() < 1e-12);
        assert_eq!(cb[0], 0.0);
        assert_eq!(cb[2], 0.0);

        // complete unit-weight K4: no strictly shortest through-paths
        let mut k4 = Mat::from_elem((4, 4), 1.0);
        for i in 0..4 {
            k4[[i, i]] = 0.0;
        }
        let cb = betweenness_centrality(&k4);
        assert!(cb.iter().all(|&v| v.abs() < 1e-12));

        // star: center carries every pair
        let p = 7;
        let mut star = Mat::zeros((p, p));
        for i in 1..p {
            star[[0, i]] = 1.0;
            star[[i, 0]] = 1.0;
        }
        let cb = betweenness_centrality(&star);
        let want = ((p - 1) * (p - 2) / 2) as f64;
        assert!((cb[0] - want).abs() < 1e-9, "{} vs {want}", cb[0]);

        // empty graph
        let cb = betweenness_centrality(&Mat::zeros((4, 4)));
        assert!(cb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn betweenness_weighted_prefers_strong_edges() {
        // strength 2 edges are length 1/2: the two-hop strong route beats the
        // direct weak edge, putting node 1 on the shortest path
        let psi = array![
            [0.0, 2.0, 0.5],
            [2.0, 0.0, 2.0],
            [0.5, 2.0, 0.0]
        ];
        let cb = betweenness_centrality(&psi);
        assert!((cb[1] - 1.0).abs() < 1e-12, "{cb:?}");
    }

    /// Floyd-Warshall shortest-path counting oracle for unit-weight graphs.
    fn fw_betweenness(adj: &Mat) -> Vec<f64> {
        let p = adj.nrows();
        let inf = f64::INFINITY;
        let mut dist = vec![vec![inf; p]; p];
        let mut paths = vec![vec![0.0f64; p]; p];
        for i in 0..p {
            dist[i][i] = 0.0;
            paths[i][i] = 1.0;
            for j in 0..p {
                if adj[[i, j]] > 0.0 {
                    dist[i][j] = 1.0;
                    paths[i][j] = 1.0;
                }
            }
        }
        for k in 0..p {
            for i in 0..p {
                for j in 0..p {
                    let alt = dist[i][k] + dist[k][j];
                    if alt < dist[i][j] - 1e-9 {
                        dist[i][j] = alt;
                        paths[i][j] = paths[i][k] * paths[k][j];
                    } else if (alt - dist[i][j]).abs() <= 1e-9 && alt.is_finite() && k != i && k != j {
                        paths[i][j] += paths[i][k] * paths[k][j];
                    }
                }
            }
        }
        let mut cb = vec![0.0f64; p];
        for v in 0..p {
            for s in 0..p {
                for u in (s + 1)..p {
                    if s == v || u == v || !dist[s][u].is_finite() || paths[s][u] == 0.0 {
                        continue;
                    }
                    if (dist[s][v] + dist[v][u] - dist[s][u]).abs() <= 1e-9 {
                        cb[v] += paths[s][v] * paths[v][u] / paths[s][u];
                    }
                }
            }
        }
        cb
    }

    #[test]
    fn betweenness_matches_floyd_warshall_oracle() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..50 {
            let p = 4 + (trial % 9);
            let mut adj = Mat::zeros((p, p));
            for i in 0..p {
                for j in (i + 1)..p {
                    if rng.random::<f64>() < 0.35 {
                        adj[[i, j]] = 1.0;
                        adj[[j, i]] = 1.0;
                    }
                }
            }
            let got = betweenness_centrality(&adj);
            let want = fw_betweenness(&adj);
            for v in 0..p {
                assert!(
                    (got[v] - want[v]).abs() < 1e-9,
                    "trial {trial} node {v}: {} vs {}",
                    got[v],
                    want[v]
                );
            }
        }
    }

    #[test]
    fn fold_split_partitions() {
        let split = fold_split(23, 5, 7);
        assert_eq!(split.assignment.len(), 23);
        let mut sizes = vec![0usize; 5];
        for &f in &split.assignment {
            sizes[f] += 1;
        }
        let max = *sizes.iter().max().unwrap();
        let min = *sizes.iter().min().unwrap();
        assert!(max - min <= 1, "{sizes:?}");
        // determinism
        assert_eq!(split.assignment, fold_split(23, 5, 7).assignment);
        assert_ne!(split.assignment, fold_split(23, 5, 8).assignment);
    }

    fn tiny_cv_cohort(seed: u64) -> Cohort {
        let cfg = SynthConfig {
            n_subjects: 10,
            p: 8,
            k: 2,
            m: 2,
            t: 6,
            sigma_b: 0.05,
            sigma_gamma: 0.05,
            sigma_y: 0.05,
            seed,
            ..Default::default()
        };
        generate(&cfg).unwrap().0
    }

    fn quick_hp() -> HyperParams {
        let mut hp = HyperParams::with_k(2);
        hp.main_iters = 2;
        hp.soft_init_iters = 5;
        hp.coeff_steps = 5;
        hp.net_epochs = 5;
        hp
    }

    #[test]
    fn cv_every_subject_tested_once() {
        let cohort = tiny_cv_cohort(2);
        let outcome = run_cv(&cohort, &quick_hp(), Variant::Srddl, 5, 3).unwrap();
        let mut tested: Vec<&str> = outcome
            .predictions
            .iter()
            .filter(|r| r.split == "test")
            .map(|r| r.subject_id.as_str())
            .collect();
        tested.sort();
        let mut all: Vec<&str> = cohort.subjects.iter().map(|s| s.id.as_str()).collect();
        all.sort();
        assert_eq!(tested, all);
        assert_eq!(outcome.report.per_score.len(), 2);
        assert_eq!(outcome.report.per_fold.len(), 5);
        for ps in &outcome.report.per_score {
            assert!(ps.mae_test.is_finite() && ps.mae_test >= 0.0);
            assert!((0.0..=1.0).contains(&ps.nmi_test));
        }
    }

    #[test]
    fn cv_ignores_test_scores_entirely() {
        let cohort = tiny_cv_cohort(4);
        let hp = quick_hp();
        let base = run_cv(&cohort, &hp, Variant::Srddl, 5, 9).unwrap();

        // corrupt the scores of fold-0 test subjects; training on the other
        // folds must not notice, so fold-0 training predictions are identical
        let split = fold_split(cohort.len(), 5, derive_seed(9, 40, 0));
        let mut corrupted = cohort.clone();
        for (i, subj) in corrupted.subjects.iter_mut().enumerate() {
            if split.assignment[i] == 0 {
                subj.scores.y.fill(1e6);
            }
        }
        let poisoned = run_cv(&corrupted, &hp, Variant::Srddl, 5, 9).unwrap();
        let trains = |o: &CvOutcome| -> Vec<(String, Vec<f64>)> {
            o.predictions
                .iter()
                .filter(|r| r.split == "train" && r.fold == 0)
                .map(|r| (r.subject_id.clone(), r.pred.clone()))
                .collect()
        };
        assert_eq!(trains(&base), trains(&poisoned));
    }

    #[test]
    fn cv_fold_local_imputation_handles_missing_graphs() {
        let mut cohort = tiny_cv_cohort(6);
        cohort.subjects[0].graph = None;
        cohort.subjects[7].graph = None;
        let outcome = run_cv(&cohort, &quick_hp(), Variant::Srddl, 5, 11).unwrap();
        assert_eq!(outcome.report.per_fold.len(), 5);
    }

    #[test]
    fn bc_baseline_runs_and_reports() {
        let cohort = tiny_cv_cohort(8);
        let mut hp = quick_hp();
        hp.main_iters = 1;
        hp.net_epochs = 3;
        let outcome = bc_baseline_cv(&cohort, &hp, 5, 13).unwrap();
        assert_eq!(outcome.report.variant, "bc");
        let mut tested: Vec<&str> = outcome
            .predictions
            .iter()
            .filter(|r| r.split == "test")
            .map(|r| r.subject_id.as_str())
            .collect();
        tested.sort();
        assert_eq!(tested.len(), 10);
        // determinism
        let again = bc_baseline_cv(&cohort, &hp, 5, 13).unwrap();
        assert_eq!(
            outcome.report.per_score[0].mae_test,
            again.report.per_score[0].mae_test
        );
    }

    #[test]
    fn scree_reflects_rank_and_noise() {
        // identical matrices: std = 0
        let cfg = SynthConfig {
            n_subjects: 3,
            p: 8,
            k: 2,
            m: 1,
            t: 4,
            ..Default::default()
        };
        let (cohort, _) = generate(&cfg).unwrap();
        let one = cohort.subjects[0].gammas[0].clone();
        let mut same = cohort.clone();
        for s in &mut same.subjects {
            for g in &mut s.gammas {
                *g = one.clone();
            }
        }
        let (_, std) = scree_export(&same).unwrap();
        assert!(std.iter().all(|&v| v < 1e-9));

        // rank-K clean: exactly K nonzero mean eigenvalues
        let (mean, _) = scree_export(&cohort).unwrap();
        for (i, &v) in mean.iter().enumerate() {
            if i < 2 {
                assert!(v > 1e-6, "position {i}: {v}");
            } else {
                assert!(v.abs() < 1e-8, "position {i}: {v}");
            }
        }

        // with noise the tail sits at the noise level
        let cfg_noisy = SynthConfig {
            sigma_gamma: 0.5,
            ..cfg
        };
        let (noisy, _) = generate(&cfg_noisy).unwrap();
        let (mean_n, _) = scree_export(&noisy).unwrap();
        for &v in &mean_n[2..] {
            assert!((v - 0.5).abs() < 1e-6, "tail {v}");
        }
    }
}
