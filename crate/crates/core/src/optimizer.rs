//! Joint alternating minimization: closed-form basis update, ADAM on the
//! loading pre-activations (constraint gradient plus the λ-scaled gradient
//! backpropagated from the network), network training, then primal/dual
//! constraint repair — cycled per main iteration with seeded determinism.

use crate::error::{Error, Result};
use crate::io::{Cohort, ScoreVector};
use crate::linalg::{self, Mat};
use crate::predictor::{
    self, forward, input_gradients, AdamState, NetConfig, PredictorParams, TrainNetOpts,
};
use crate::srddl::{
    augmented_objective, basis_target_exact, coeff_gradient_constraints, dual_step_size,
    scale_columns, update_basis, update_dual, CoefficientTrack, ConstraintState, Dictionary,
    HyperParams, ObjectiveTerms, PrimalSolver,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Srddl,
    NoDti,
    Decoupled,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "srddl" => Ok(Variant::Srddl),
            "no-dti" => Ok(Variant::NoDti),
            "decoupled" => Ok(Variant::Decoupled),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Srddl => "srddl",
            Variant::NoDti => "no-dti",
            Variant::Decoupled => "decoupled",
        };
        write!(f, "{s}")
    }
}

/// Constraint variables: one split per (subject, window) for the
/// structurally-regularized model, or a single global split `D = B` for the
/// identity-weighted variant.
#[derive(Debug, Clone)]
pub enum Constraints {
    PerWindow(ConstraintState),
    Global { d: Mat, lambda: Mat },
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub dictionary: Dictionary,
    pub tracks: Vec<CoefficientTrack>,
    pub constraints: Constraints,
    pub predictor: PredictorParams,
    pub hp: HyperParams,
    pub variant: Variant,
    pub seed: u64,
    /// Completed main iterations.
    pub iterations: usize,
    /// Objective at initialization, then after every main iteration.
    pub objective_history: Vec<ObjectiveTerms>,
    /// Max per-window `‖D - B diag(c)‖_F` right after the loading update,
    /// before the primal repair: the per-iteration feasibility stress.
    pub residual_history: Vec<f64>,
    /// Same residual after the primal/dual repair at the iteration's end.
    pub repaired_residual_history: Vec<f64>,
    pub net_loss_history: Vec<f64>,
    /// Set when a numeric failure stopped the run early; the state holds the
    /// last consistent iterate.
    pub aborted: Option<String>,
}

impl TrainState {
    /// Per-subject predictions from the fitted tracks.
    pub fn training_predictions(&self) -> Result<Vec<ndarray::Array1<f64>>> {
        self.tracks
            .iter()
            .map(|t| Ok(forward(&self.predictor, &t.loadings())?.final_pred))
            .collect()
    }

    pub fn net_loss(&self, cohort: &Cohort) -> Result<f64> {
        let mut total = 0.0;
        for (n, track) in self.tracks.iter().enumerate() {
            let trace = forward(&self.predictor, &track.loadings())?;
            total += predictor::masked_mse(&trace, &cohort.subjects[n].scores);
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: ObjectiveTerms,
    pub residual_pre_repair: f64,
    pub residual_post_repair: f64,
    pub net_loss: f64,
}

/// splitmix64-style seed derivation so every consumer of randomness gets an
/// independent, reproducible stream from the single run seed.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_graphs(cohort: &Cohort) -> Result<()> {
    for s in &cohort.subjects {
        if s.graph.is_none() {
            return Err(Error::contract(format!(
                "subject {} has no structural graph; impute before fitting",
                s.id
            )));
        }
    }
    Ok(())
}

fn laplacians(cohort: &Cohort) -> Vec<Mat> {
    cohort
        .subjects
        .iter()
        .map(|s| s.graph.as_ref().unwrap().laplacian.clone())
        .collect()
}

fn mean_gamma(cohort: &Cohort) -> Mat {
    let p = cohort.p;
    let mut acc = Mat::zeros((p, p));
    let mut count = 0.0;
    for s in &cohort.subjects {
        for g in &s.gammas {
            acc += g;
            count += 1.0;
        }
    }
    acc / count
}

/// Data-driven basis start: the top-K eigenvectors of the cohort-mean
/// correlation matrix.
fn eigen_init(cohort: &Cohort, k: usize) -> Result<Mat> {
    let mean = mean_gamma(cohort);
    let (_, vectors) = linalg::sym_eig(&mean)?;
    Ok(vectors.slice(ndarray::s![.., 0..k]).to_owned())
}

/// Exact separable minimizer of the weighted reconstruction loss in `c` for
/// one window: `c_k = max(0, q_k / (2 G_kk))` with `q = diag(Bᵀ(ΓL+LΓ)B)`,
/// `G = BᵀLB`.
fn closed_form_loadings(b: &Mat, gamma_t: &Mat, lb: &Mat, g_diag: &[f64]) -> Vec<f64> {
    let (p, k) = b.dim();
    let glb = gamma_t.dot(lb);
    let mut c = vec![0.0f64; k];
    for kk in 0..k {
        let mut q = 0.0;
        for i in 0..p {
            q += b[[i, kk]] * glb[[i, kk]];
        }
        q *= 2.0;
        if g_diag[kk] > 1e-12 {
            c[kk] = (q / (2.0 * g_diag[kk])).max(0.0);
        }
    }
    c
}

/// Soft initialization: 20 alternating rounds of exact per-window loading
/// solves and Procrustes basis updates on the reconstruction loss alone, then
/// a feasible constraint split (`D = B diag(c)`, `Λ = 0`).
pub fn soft_init(
    cohort: &Cohort,
    hp: &HyperParams,
) -> Result<(Dictionary, Vec<CoefficientTrack>, ConstraintState)> {
    if cohort.is_empty() {
        return Err(Error::contract("soft_init: empty cohort"));
    }
    check_graphs(cohort)?;
    let laps = laplacians(cohort);
    let k = hp.k;
    let mut b = eigen_init(cohort, k)?;
    let mut tracks: Vec<CoefficientTrack> = cohort
        .subjects
        .iter()
        .map(|s| CoefficientTrack {
            subject_id: s.id.clone(),
            c_hat: Mat::zeros((s.gammas.len(), k)),
        })
        .collect();

    for _round in 0..hp.soft_init_iters {
        // exact loading refresh
        for (n, subj) in cohort.subjects.iter().enumerate() {
            let lb = laps[n].dot(&b);
            let g_diag: Vec<f64> = (0..k)
                .map(|kk| (0..cohort.p).map(|i| b[[i, kk]] * lb[[i, kk]]).sum())
                .collect();
            for (t, gamma_t) in subj.gammas.iter().enumerate() {
                let c = closed_form_loadings(&b, gamma_t, &lb, &g_diag);
                for (kk, &v) in c.iter().enumerate() {
                    tracks[n].c_hat[[t, kk]] = v;
                }
            }
        }
        // half-quadratic basis refresh: Procrustes on Σ (2/T) Γ L B diag(c)
        let mut target = Mat::zeros((cohort.p, k));
        for (n, subj) in cohort.subjects.iter().enumerate() {
            let t_n = subj.gammas.len() as f64;
            let lb = laps[n].dot(&b);
            let c = tracks[n].loadings();
            for (t, gamma_t) in subj.gammas.iter().enumerate() {
                let glb = gamma_t.dot(&lb);
                let contrib = scale_columns(&glb, &c.row(t));
                target.scaled_add(2.0 / t_n, &contrib);
            }
        }
        b = update_basis(&target)?.b;
    }

    let state = ConstraintState::feasible(&b, &tracks);
    Ok((Dictionary { b }, tracks, state))
}

struct CoeffAdam {
    states: Vec<AdamState>,
}

impl CoeffAdam {
    fn new(tracks: &[CoefficientTrack]) -> Self {
        CoeffAdam {
            states: tracks
                .iter()
                .map(|t| AdamState::with_shapes(vec![t.c_hat.len()]))
                .collect(),
        }
    }
}

/// One main-iteration block of loading updates: `coeff_steps` ADAM steps per
/// subject on the pre-activations, driven by the constraint gradient plus the
/// λ-scaled network input gradient (both masked through the ReLU).
fn update_loadings(
    cohort: &Cohort,
    tracks: &mut [CoefficientTrack],
    state: &ConstraintState,
    b: &Mat,
    params: &PredictorParams,
    hp: &HyperParams,
) -> Result<()> {
    let mut adam = CoeffAdam::new(tracks);
    for step in 0..hp.coeff_steps {
        let lr = hp.coeff_lr0 * hp.coeff_decay.powi((step / hp.coeff_decay_every.max(1)) as i32);
        for (n, track) in tracks.iter_mut().enumerate() {
            let mut grad = coeff_gradient_constraints(track, &state.d[n], &state.lambda[n], b, hp);
            if hp.lambda_tradeoff > 0.0 {
                let loadings = track.loadings();
                let trace = forward(params, &loadings)?;
                let g_net = input_gradients(params, &loadings, &cohort.subjects[n].scores, &trace);
                for ((gv, &nv), &ch) in grad.iter_mut().zip(g_net.iter()).zip(track.c_hat.iter()) {
                    if ch > 0.0 {
                        *gv += hp.lambda_tradeoff * nv;
                    }
                }
            }
            let mut p = [track.c_hat.as_slice_mut().unwrap()];
            let g = [grad.as_slice().unwrap()];
            adam.states[n].step_slices(&mut p, &g, lr);
        }
    }
    Ok(())
}

fn primal_dual_cycles(
    cohort: &Cohort,
    tracks: &[CoefficientTrack],
    state: &mut ConstraintState,
    solvers: &[PrimalSolver],
    b: &Mat,
    hp: &HyperParams,
    eta: f64,
) {
    let laps = laplacians(cohort);
    for _cycle in 0..hp.primal_dual_cycles {
        for (n, subj) in cohort.subjects.iter().enumerate() {
            let c = tracks[n].loadings();
            for (t, gamma_t) in subj.gammas.iter().enumerate() {
                state.d[n][t] = solvers[n].solve(
                    gamma_t,
                    &laps[n],
                    b,
                    &c.row(t),
                    &state.lambda[n][t],
                    hp.gamma,
                );
                let d = state.d[n][t].clone();
                update_dual(&mut state.lambda[n][t], &d, b, &c.row(t), eta);
            }
        }
    }
}

fn cohort_scores(cohort: &Cohort) -> Vec<ScoreVector> {
    cohort.subjects.iter().map(|s| s.scores.clone()).collect()
}

fn total_net_loss(params: &PredictorParams, tracks: &[CoefficientTrack], cohort: &Cohort) -> Result<f64> {
    let mut total = 0.0;
    for (n, track) in tracks.iter().enumerate() {
        let trace = forward(params, &track.loadings())?;
        total += predictor::masked_mse(&trace, &cohort.subjects[n].scores);
    }
    Ok(total)
}

/// Full joint fit of the structurally regularized model.
pub fn fit(cohort: &Cohort, hp: &HyperParams, seed: u64) -> Result<TrainState> {
    fit_with_progress(cohort, hp, seed, &mut |_| {})
}

pub fn fit_with_progress(
    cohort: &Cohort,
    hp: &HyperParams,
    seed: u64,
    on_iter: &mut dyn FnMut(&IterationRecord),
) -> Result<TrainState> {
    hp.validate()?;
    check_graphs(cohort)?;
    run_joint(cohort, hp, seed, Variant::Srddl, on_iter)
}

/// Decoupled baseline: the generative model is fit with no network coupling,
/// then the network trains on the frozen tracks with the same total epoch
/// budget the joint fit would have used.
pub fn fit_decoupled(cohort: &Cohort, hp: &HyperParams, seed: u64) -> Result<TrainState> {
    hp.validate()?;
    check_graphs(cohort)?;
    let mut hp0 = hp.clone();
    hp0.lambda_tradeoff = 0.0;
    let mut state = run_joint(cohort, &hp0, seed, Variant::Decoupled, &mut |_| {})?;
    let frozen_before: Vec<Mat> = state.tracks.iter().map(|t| t.c_hat.clone()).collect();

    let tracks_load: Vec<Mat> = state.tracks.iter().map(|t| t.loadings()).collect();
    let scores = cohort_scores(cohort);
    let opts = TrainNetOpts {
        epochs: hp.net_epochs * state.iterations.max(1),
        lr0: hp.net_lr0,
        decay: hp.net_decay,
        decay_every: hp.net_decay_every,
        clip_norm: hp.clip_norm,
        seed: derive_seed(seed, 3, 0),
    };
    let history = predictor::train_network(&mut state.predictor, &tracks_load, &scores, &opts)?;
    state.net_loss_history.extend(history.iter().map(|l| l * cohort.len() as f64));
    for (track, before) in state.tracks.iter().zip(frozen_before.iter()) {
        debug_assert_eq!(&track.c_hat, before);
    }
    state.hp = hp.clone();
    Ok(state)
}

fn run_joint(
    cohort: &Cohort,
    hp: &HyperParams,
    seed: u64,
    variant: Variant,
    on_iter: &mut dyn FnMut(&IterationRecord),
) -> Result<TrainState> {
    let (dict, mut tracks, mut state) = soft_init(cohort, hp)?;
    let mut b = dict.b;
    let laps = laplacians(cohort);
    let solvers: Vec<PrimalSolver> = laps
        .iter()
        .map(|l| PrimalSolver::new(l, hp.gamma))
        .collect::<Result<_>>()?;

    let net_cfg = NetConfig::standard(hp.k, cohort.m);
    let mut params = PredictorParams::init(net_cfg, derive_seed(seed, 1, 0), 1.0);
    let scores = cohort_scores(cohort);

    let mut objective_history = Vec::new();
    let mut residual_history = Vec::new();
    let mut repaired_residual_history = Vec::new();
    let mut net_loss_history = Vec::new();
    let mut aborted = None;

    let net0 = total_net_loss(&params, &tracks, cohort)?;
    objective_history.push(augmented_objective(&b, &tracks, &state, cohort, net0, hp)?);
    net_loss_history.push(net0);

    let mut iterations = 0;
    let mut stall = 0usize;
    for iter in 0..hp.main_iters {
        let result: Result<(f64, f64, f64)> = (|| {
            // Step 1: closed-form Procrustes basis refresh
            let target = basis_target_exact(&tracks, &state, cohort, hp)?;
            b = update_basis(&target)?.b;

            // Step 2: loading pre-activation updates
            update_loadings(cohort, &mut tracks, &state, &b, &params, hp)?;
            let pre = state.max_residual(&b, &tracks);

            // Step 3: network training on the current loadings
            if hp.lambda_tradeoff > 0.0 {
                let tracks_load: Vec<Mat> = tracks.iter().map(|t| t.loadings()).collect();
                let opts = TrainNetOpts {
                    epochs: hp.net_epochs,
                    lr0: hp.net_lr0,
                    decay: hp.net_decay,
                    decay_every: hp.net_decay_every,
                    clip_norm: hp.clip_norm,
                    seed: derive_seed(seed, 2, iter as u64),
                };
                predictor::train_network(&mut params, &tracks_load, &scores, &opts)?;
            }

            // Step 4: primal/dual repair
            let eta = dual_step_size(hp, iter);
            primal_dual_cycles(cohort, &tracks, &mut state, &solvers, &b, hp, eta);
            let post = state.max_residual(&b, &tracks);

            let net = total_net_loss(&params, &tracks, cohort)?;
            Ok((pre, post, net))
        })();

        match result {
            Ok((pre, post, net)) => {
                let obj = augmented_objective(&b, &tracks, &state, cohort, net, hp)?;
                residual_history.push(pre);
                repaired_residual_history.push(post);
                net_loss_history.push(net);
                objective_history.push(obj);
                iterations = iter + 1;
                on_iter(&IterationRecord {
                    iteration: iterations,
                    objective: obj,
                    residual_pre_repair: pre,
                    residual_post_repair: post,
                    net_loss: net,
                });
                let prev = objective_history[objective_history.len() - 2].total();
                let rel = (prev - obj.total()) / prev.abs().max(1e-12);
                if rel.abs() < hp.early_stop_rel {
                    stall += 1;
                    if stall >= hp.early_stop_patience {
                        break;
                    }
                } else {
                    stall = 0;
                }
            }
            Err(Error::Numeric(msg)) => {
                log::error!("numeric failure at main iteration {}: {msg}", iter + 1);
                aborted = Some(msg);
                break;
            }
            Err(other) => return Err(other),
        }
    }

    Ok(TrainState {
        dictionary: Dictionary { b },
        tracks,
        constraints: Constraints::PerWindow(state),
        predictor: params,
        hp: hp.clone(),
        variant,
        seed,
        iterations,
        objective_history,
        residual_history,
        repaired_residual_history,
        net_loss_history,
        aborted,
    })
}

// ---------------------------------------------------------------------------
// Identity-weighted variant: a single global split D = B
// ---------------------------------------------------------------------------

fn no_dti_objective(
    b: &Mat,
    tracks: &[CoefficientTrack],
    d: &Mat,
    lambda: &Mat,
    cohort: &Cohort,
    net_loss: f64,
    hp: &HyperParams,
) -> ObjectiveTerms {
    let mut data = 0.0;
    for (n, subj) in cohort.subjects.iter().enumerate() {
        let c = tracks[n].loadings();
        let t_n = subj.gammas.len() as f64;
        for (t, gamma) in subj.gammas.iter().enumerate() {
            let recon = scale_columns(d, &c.row(t)).dot(&b.t());
            let resid = gamma - &recon;
            data += resid.iter().map(|v| v * v).sum::<f64>() / t_n;
        }
    }
    let gap = d - b;
    let dual: f64 = hp.gamma * lambda.iter().zip(gap.iter()).map(|(a, b)| a * b).sum::<f64>();
    let penalty: f64 = hp.gamma * 0.5 * gap.iter().map(|v| v * v).sum::<f64>();
    ObjectiveTerms {
        data,
        net: hp.lambda_tradeoff * net_loss,
        dual,
        penalty,
    }
}

/// Identity-weighted fit (`ℓ2` reconstruction penalty, no structural
/// regularization). Uses a single constraint `D = B` with one multiplier.
pub fn fit_no_dti(cohort: &Cohort, hp: &HyperParams, seed: u64) -> Result<TrainState> {
    fit_no_dti_with_progress(cohort, hp, seed, &mut |_| {})
}

pub fn fit_no_dti_with_progress(
    cohort: &Cohort,
    hp: &HyperParams,
    seed: u64,
    on_iter: &mut dyn FnMut(&IterationRecord),
) -> Result<TrainState> {
    hp.validate()?;
    if cohort.is_empty() {
        return Err(Error::contract("fit_no_dti: empty cohort"));
    }
    let p = cohort.p;
    let k = hp.k;

    // soft init on the plain reconstruction loss
    let mut b = eigen_init(cohort, k)?;
    let mut tracks: Vec<CoefficientTrack> = cohort
        .subjects
        .iter()
        .map(|s| CoefficientTrack {
            subject_id: s.id.clone(),
            c_hat: Mat::zeros((s.gammas.len(), k)),
        })
        .collect();
    for _round in 0..hp.soft_init_iters {
        for (n, subj) in cohort.subjects.iter().enumerate() {
            for (t, gamma_t) in subj.gammas.iter().enumerate() {
                let gb = gamma_t.dot(&b);
                for kk in 0..k {
                    let q: f64 = (0..p).map(|i| b[[i, kk]] * gb[[i, kk]]).sum();
                    tracks[n].c_hat[[t, kk]] = q.max(0.0);
                }
            }
        }
        let mut target = Mat::zeros((p, k));
        for (n, subj) in cohort.subjects.iter().enumerate() {
            let t_n = subj.gammas.len() as f64;
            let c = tracks[n].loadings();
            for (t, gamma_t) in subj.gammas.iter().enumerate() {
                let gb = gamma_t.dot(&b);
                target.scaled_add(2.0 / t_n, &scale_columns(&gb, &c.row(t)));
            }
        }
        b = update_basis(&target)?.b;
    }

    let mut d = b.clone();
    let mut lambda = Mat::zeros((p, k));
    let net_cfg = NetConfig::standard(k, cohort.m);
    let mut params = PredictorParams::init(net_cfg, derive_seed(seed, 1, 0), 1.0);
    let scores = cohort_scores(cohort);

    let mut objective_history = Vec::new();
    let mut residual_history = Vec::new();
    let mut repaired_residual_history = Vec::new();
    let mut net_loss_history = Vec::new();
    let mut aborted = None;

    let net0 = total_net_loss(&params, &tracks, cohort)?;
    objective_history.push(no_dti_objective(&b, &tracks, &d, &lambda, cohort, net0, hp));
    net_loss_history.push(net0);

    let mut iterations = 0;
    let mut stall = 0usize;
    for iter in 0..hp.main_iters {
        let result: Result<(f64, f64, f64)> = (|| {
            // Step 1: Procrustes on N = Σ (2/T) Γ D diag(c) + γΛ + γD
            let mut target = Mat::zeros((p, k));
            for (n, subj) in cohort.subjects.iter().enumerate() {
                let t_n = subj.gammas.len() as f64;
                let c = tracks[n].loadings();
                for (t, gamma_t) in subj.gammas.iter().enumerate() {
                    let gd = gamma_t.dot(&d);
                    target.scaled_add(2.0 / t_n, &scale_columns(&gd, &c.row(t)));
                }
            }
            target.scaled_add(hp.gamma, &lambda);
            target.scaled_add(hp.gamma, &d);
            b = update_basis(&target)?.b;

            // Step 2: loading updates; the data term now carries the c dependence
            let mut adam = CoeffAdam::new(&tracks);
            for step in 0..hp.coeff_steps {
                let lr = hp.coeff_lr0 * hp.coeff_decay.powi((step / hp.coeff_decay_every.max(1)) as i32);
                for (n, track) in tracks.iter_mut().enumerate() {
                    let t_n = track.windows() as f64;
                    let c = track.loadings();
                    let mut grad = Mat::zeros((track.windows(), k));
                    for (t, gamma_t) in cohort.subjects[n].gammas.iter().enumerate() {
                        let recon = scale_columns(&d, &c.row(t)).dot(&b.t());
                        let resid = gamma_t - &recon;
                        let rb = resid.dot(&b);
                        for kk in 0..k {
                            if track.c_hat[[t, kk]] <= 0.0 {
                                continue;
                            }
                            let mut dq: f64 = (0..p).map(|i| d[[i, kk]] * rb[[i, kk]]).sum();
                            dq *= -2.0 / t_n;
                            grad[[t, kk]] = dq;
                        }
                    }
                    if hp.lambda_tradeoff > 0.0 {
                        let loadings = track.loadings();
                        let trace = forward(&params, &loadings)?;
                        let g_net = input_gradients(&params, &loadings, &cohort.subjects[n].scores, &trace);
                        for ((gv, &nv), &ch) in grad.iter_mut().zip(g_net.iter()).zip(track.c_hat.iter()) {
                            if ch > 0.0 {
                                *gv += hp.lambda_tradeoff * nv;
                            }
                        }
                    }
                    let mut pslice = [track.c_hat.as_slice_mut().unwrap()];
                    let gslice = [grad.as_slice().unwrap()];
                    adam.states[n].step_slices(&mut pslice, &gslice, lr);
                }
            }
            let pre = linalg::frob_norm(&(&d - &b));

            // Step 3
            if hp.lambda_tradeoff > 0.0 {
                let tracks_load: Vec<Mat> = tracks.iter().map(|t| t.loadings()).collect();
                let opts = TrainNetOpts {
                    epochs: hp.net_epochs,
                    lr0: hp.net_lr0,
                    decay: hp.net_decay,
                    decay_every: hp.net_decay_every,
                    clip_norm: hp.clip_norm,
                    seed: derive_seed(seed, 2, iter as u64),
                };
                predictor::train_network(&mut params, &tracks_load, &scores, &opts)?;
            }

            // Step 4: closed-form D, then dual ascent on the single multiplier
            let eta = dual_step_size(hp, iter);
            for _cycle in 0..hp.primal_dual_cycles {
                let mut s_diag = vec![0.0f64; k];
                let mut r = Mat::zeros((p, k));
                for (n, subj) in cohort.subjects.iter().enumerate() {
                    let t_n = subj.gammas.len() as f64;
                    let c = tracks[n].loadings();
                    for (t, gamma_t) in subj.gammas.iter().enumerate() {
                        let gb = gamma_t.dot(&b);
                        r.scaled_add(1.0 / t_n, &scale_columns(&gb, &c.row(t)));
                        for kk in 0..k {
                            s_diag[kk] += c[[t, kk]] * c[[t, kk]] / t_n;
                        }
                    }
                }
                // D (2S + γI) = 2R + γ(B - Λ), S diagonal
                let mut rhs = &r * 2.0;
                rhs.scaled_add(hp.gamma, &b);
                rhs.scaled_add(-hp.gamma, &lambda);
                for kk in 0..k {
                    let denom = 2.0 * s_diag[kk] + hp.gamma;
                    for i in 0..p {
                        d[[i, kk]] = rhs[[i, kk]] / denom;
                    }
                }
                let gap = &d - &b;
                lambda.scaled_add(eta, &gap);
            }
            let post = linalg::frob_norm(&(&d - &b));
            let net = total_net_loss(&params, &tracks, cohort)?;
            Ok((pre, post, net))
        })();

        match result {
            Ok((pre, post, net)) => {
                let obj = no_dti_objective(&b, &tracks, &d, &lambda, cohort, net, hp);
                residual_history.push(pre);
                repaired_residual_history.push(post);
                net_loss_history.push(net);
                objective_history.push(obj);
                iterations = iter + 1;
                on_iter(&IterationRecord {
                    iteration: iterations,
                    objective: obj,
                    residual_pre_repair: pre,
                    residual_post_repair: post,
                    net_loss: net,
                });
                let prev = objective_history[objective_history.len() - 2].total();
                let rel = (prev - obj.total()) / prev.abs().max(1e-12);
                if rel.abs() < hp.early_stop_rel {
                    stall += 1;
                    if stall >= hp.early_stop_patience {
                        break;
                    }
                } else {
                    stall = 0;
                }
            }
            Err(Error::Numeric(msg)) => {
                log::error!("numeric failure at main iteration {}: {msg}", iter + 1);
                aborted = Some(msg);
                break;
            }
            Err(other) => return Err(other),
        }
    }

    Ok(TrainState {
        dictionary: Dictionary { b },
        tracks,
        constraints: Constraints::Global { d, lambda },
        predictor: params,
        hp: hp.clone(),
        variant: Variant::NoDti,
        seed,
        iterations,
        objective_history,
        residual_history,
        repaired_residual_history,
        net_loss_history,
        aborted,
    })
}

/// Dispatch on the variant name used by the CLI.
pub fn fit_variant(cohort: &Cohort, hp: &HyperParams, seed: u64, variant: Variant) -> Result<TrainState> {
    match variant {
        Variant::Srddl => fit(cohort, hp, seed),
        Variant::NoDti => fit_no_dti(cohort, hp, seed),
        Variant::Decoupled => fit_decoupled(cohort, hp, seed),
    }
}
