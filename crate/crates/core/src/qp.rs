//! Inference for unseen subjects. With a trained basis, each window's
//! loadings solve a small nonnegativity-constrained convex QP
//! (`H = 2 BᵀLB`, `f = -diag(Bᵀ(ΓL + LΓ)B)`); the windows decouple, and a
//! forward pass through the predictor turns the assembled track into scores.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::predictor::{forward, ForwardTrace, PredictorParams};
use crate::srddl::CoefficientTrack;
use ndarray::Array1;

/// `minimize ½ cᵀHc + fᵀc  s.t.  c >= 0` with symmetric PSD `H`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: Mat,
    pub f: Array1<f64>,
}

/// Assemble the per-window problem from the trained basis, one correlation
/// window and the subject's Laplacian.
pub fn build_qp(b: &Mat, gamma_t: &Mat, laplacian: &Mat) -> Result<QpProblem> {
    let (p, k) = b.dim();
    if gamma_t.dim() != (p, p) || laplacian.dim() != (p, p) {
        return Err(Error::dim(format!(
            "build_qp: basis is {p}x{k}, window {:?}, laplacian {:?}",
            gamma_t.dim(),
            laplacian.dim()
        )));
    }
    let lb = laplacian.dot(b);
    let mut h = b.t().dot(&lb) * 2.0;
    // symmetrize roundoff
    for i in 0..k {
        for j in (i + 1)..k {
            let v = 0.5 * (h[[i, j]] + h[[j, i]]);
            h[[i, j]] = v;
            h[[j, i]] = v;
        }
    }
    // f = -diag(Bᵀ(ΓL + LΓ)B) = -diag(BᵀΓ(LB)) - diag((LB)ᵀΓB); the two
    // diagonals are equal, so compute one and double it
    let glb = gamma_t.dot(&lb);
    let mut f = Array1::zeros(k);
    for kk in 0..k {
        let mut acc = 0.0;
        for i in 0..p {
            acc += b[[i, kk]] * glb[[i, kk]];
        }
        f[kk] = -2.0 * acc;
    }
    let (eigs, _) = linalg::sym_eig(&h)?;
    let min_eig = eigs[eigs.len() - 1];
    if min_eig < -1e-8 {
        return Err(Error::numeric(format!(
            "build_qp: H has eigenvalue {min_eig} < -1e-8; basis or Laplacian is broken"
        )));
    }
    Ok(QpProblem { h, f })
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub c: Array1<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub kkt_residual: f64,
}

pub const QP_DEFAULT_TOL: f64 = 1e-8;
pub const QP_MAX_ITERS: usize = 10_000;

fn qp_objective(p: &QpProblem, c: &Array1<f64>) -> f64 {
    0.5 * c.dot(&p.h.dot(c)) + p.f.dot(c)
}

fn kkt_residual(grad: &Array1<f64>, c: &Array1<f64>) -> f64 {
    let mut worst = 0.0f64;
    for (g, x) in grad.iter().zip(c.iter()) {
        worst = worst.max(-g).max((x * g).abs());
    }
    worst.max(0.0)
}

/// Projected gradient with Nesterov acceleration, fixed step `1/λmax(H)`,
/// and a monotone restart safeguard. Stops at the KKT tolerance; past the
/// iteration cap it returns the best iterate seen with `converged = false`.
pub fn solve_qp_nonneg(problem: &QpProblem, tol: f64) -> Result<QpSolution> {
    let k = problem.f.len();
    if problem.h.dim() != (k, k) {
        return Err(Error::dim("solve_qp_nonneg: H/f size mismatch"));
    }
    let (eigs, _) = linalg::sym_eig(&problem.h)?;
    let lipschitz = eigs[0].max(1e-12);
    let step = 1.0 / lipschitz;

    let mut c: Array1<f64> = Array1::zeros(k);
    let mut y = c.clone();
    let mut t_k = 1.0f64;
    let mut best = c.clone();
    let mut best_obj = qp_objective(problem, &c);
    let mut best_kkt = f64::INFINITY;

    for iter in 0..QP_MAX_ITERS {
        let grad_c = problem.h.dot(&c) + &problem.f;
        let kkt = kkt_residual(&grad_c, &c);
        if kkt < best_kkt {
            best_kkt = kkt;
        }
        if kkt <= tol {
            return Ok(QpSolution {
                c,
                converged: true,
                iterations: iter,
                kkt_residual: kkt,
            });
        }
        let grad_y = problem.h.dot(&y) + &problem.f;
        let c_next = (&y - &(grad_y * step)).mapv(|v| v.max(0.0));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
        let momentum = (t_k - 1.0) / t_next;
        let mut y_next = &c_next + &((&c_next - &c) * momentum);
        // restart acceleration whenever the objective stops decreasing
        let obj_next = qp_objective(problem, &c_next);
        if obj_next > qp_objective(problem, &c) {
            y_next = c_next.clone();
            t_k = 1.0;
        } else {
            t_k = t_next;
        }
        if obj_next < best_obj {
            best_obj = obj_next;
            best = c_next.clone();
        }
        c = c_next;
        y = y_next;
    }
    log::warn!("solve_qp_nonneg: iteration cap reached, kkt residual {best_kkt:.3e}");
    Ok(QpSolution {
        c: best,
        converged: false,
        iterations: QP_MAX_ITERS,
        kkt_residual: best_kkt,
    })
}

/// Per-window QP solves assembled into a loading track, then one forward
/// pass. Returns the per-window convergence flags alongside.
pub fn infer_subject(
    b: &Mat,
    params: &PredictorParams,
    gammas: &[Mat],
    laplacian: &Mat,
    tol: f64,
) -> Result<(CoefficientTrack, ForwardTrace, Vec<bool>)> {
    if gammas.is_empty() {
        return Err(Error::contract("infer_subject: no windows"));
    }
    let k = b.ncols();
    let mut c_hat = Mat::zeros((gammas.len(), k));
    let mut converged = Vec::with_capacity(gammas.len());
    for (t, gamma_t) in gammas.iter().enumerate() {
        let problem = build_qp(b, gamma_t, laplacian)?;
        let sol = solve_qp_nonneg(&problem, tol)?;
        c_hat.row_mut(t).assign(&sol.c);
        converged.push(sol.converged);
    }
    let track = CoefficientTrack {
        subject_id: String::new(),
        c_hat,
    };
    let trace = forward(params, &track.loadings())?;
    Ok((track, trace, converged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::NetConfig;
    use crate::srddl::scale_columns;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn orthonormal(p: usize, k: usize, rng: &mut ChaCha8Rng) -> Mat {
        let m = Mat::from_shape_fn((p, k), |_| rng.random::<f64>() * 2.0 - 1.0);
        let svd = linalg::svd(&m).unwrap();
        svd.u.dot(&svd.vt)
    }

    #[test]
    fn build_qp_identity_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = orthonormal(5, 3, &mut rng);
        let gamma = Mat::eye(5);
        let p = build_qp(&b, &gamma, &Mat::eye(5)).unwrap();
        let want = Mat::eye(3) * 2.0;
        assert!(linalg::frob_norm(&(&p.h - &want)) < 1e-10);
    }

    #[test]
    fn build_qp_exact_recovery_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = orthonormal(6, 2, &mut rng);
        let c_star = array![1.5, 0.7];
        let gamma = scale_columns(&b, &c_star.view()).dot(&b.t());
        let p = build_qp(&b, &gamma, &Mat::eye(6)).unwrap();
        let want_f = &c_star * -2.0;
        assert!((&p.f - &want_f).iter().all(|v| v.abs() < 1e-10));
        let sol = solve_qp_nonneg(&p, QP_DEFAULT_TOL).unwrap();
        assert!(sol.converged);
        assert!((&sol.c - &c_star).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn build_qp_h_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let b = orthonormal(6, 3, &mut rng);
            let a = Mat::from_shape_fn((6, 6), |_| rng.random::<f64>() - 0.5);
            let lap = a.dot(&a.t());
            let gamma = {
                let g = Mat::from_shape_fn((6, 6), |_| rng.random::<f64>() - 0.5);
                (&g + &g.t()) * 0.5
            };
            let p = build_qp(&b, &gamma, &lap).unwrap();
            let (eigs, _) = linalg::sym_eig(&p.h).unwrap();
            assert!(eigs[eigs.len() - 1] >= -1e-8);
        }
    }

    #[test]
    fn solve_scalar_cases() {
        let p = QpProblem {
            h: array![[2.0]],
            f: array![-4.0],
        };
        let sol = solve_qp_nonneg(&p, QP_DEFAULT_TOL).unwrap();
        assert!((sol.c[0] - 2.0).abs() < 1e-8);
        assert!(sol.converged);

        let p = QpProblem {
            h: array![[2.0]],
            f: array![4.0],
        };
        let sol = solve_qp_nonneg(&p, QP_DEFAULT_TOL).unwrap();
        assert_eq!(sol.c[0], 0.0);
        assert!(sol.converged);
    }

    /// Exhaustive active-set oracle: try every subset of variables pinned at
    /// zero, solve the unconstrained problem on the rest, keep KKT points.
    fn active_set_oracle(p: &QpProblem) -> Array1<f64> {
        let k = p.f.len();
        let mut best: Option<(f64, Array1<f64>)> = None;
        for mask in 0..(1usize << k) {
            let free: Vec<usize> = (0..k).filter(|i| mask & (1 << i) == 0).collect();
            let mut c = Array1::zeros(k);
            if !free.is_empty() {
                let nf = free.len();
                let mut hf = Mat::zeros((nf, nf));
                let mut ff = Array1::zeros(nf);
                for (a, &i) in free.iter().enumerate() {
                    ff[a] = -p.f[i];
                    for (b, &j) in free.iter().enumerate() {
                        hf[[a, b]] = p.h[[i, j]];
                    }
                }
                let chol = match linalg::cholesky(&hf) {
                    Ok(c) => c,
                    Err(_) => continue,
                };
                let sol = linalg::cholesky_solve(&chol, &ff.clone().insert_axis(ndarray::Axis(1)).to_owned());
                for (a, &i) in free.iter().enumerate() {
                    c[i] = sol[[a, 0]];
                }
            }
            if c.iter().any(|&v| v < -1e-12) {
                continue;
            }
            let grad = p.h.dot(&c) + &p.f;
            if grad.iter().zip(c.iter()).any(|(&g, &x)| x <= 1e-12 && g < -1e-9) {
                continue;
            }
            let obj = qp_objective(p, &c);
            if best.as_ref().map(|(b, _)| obj < *b).unwrap_or(true) {
                best = Some((obj, c));
            }
        }
        best.expect("oracle found no KKT point").1
    }

    #[test]
    fn solver_matches_active_set_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..200 {
            let k = 1 + (trial % 4);
            let a = Mat::from_shape_fn((k + 2, k), |_| rng.random::<f64>() * 2.0 - 1.0);
            let mut h = a.t().dot(&a);
            for i in 0..k {
                h[[i, i]] += 1e-3;
            }
            let f = Array1::from_shape_fn(k, |_| rng.random::<f64>() * 4.0 - 2.0);
            let p = QpProblem { h, f };
            let sol = solve_qp_nonneg(&p, QP_DEFAULT_TOL).unwrap();
            let oracle = active_set_oracle(&p);
            let gap = (qp_objective(&p, &sol.c) - qp_objective(&p, &oracle)).abs();
            assert!(gap <= 1e-8, "trial {trial}: objective gap {gap}");
        }
    }

    #[test]
    fn qp_scaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Mat::from_shape_fn((5, 3), |_| rng.random::<f64>() - 0.5);
        let mut h = a.t().dot(&a);
        for i in 0..3 {
            h[[i, i]] += 0.1;
        }
        let f = array![-1.0, 0.4, -0.2];
        let base = solve_qp_nonneg(&QpProblem { h: h.clone(), f: f.clone() }, 1e-10).unwrap();
        let scaled = solve_qp_nonneg(
            &QpProblem {
                h: &h * 7.3,
                f: &f * 7.3,
            },
            1e-10,
        )
        .unwrap();
        assert!((&base.c - &scaled.c).iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn window_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = orthonormal(5, 2, &mut rng);
        let lap = Mat::eye(5);
        let params = PredictorParams::init(NetConfig::standard(2, 1), 1, 1.0);
        let gammas: Vec<Mat> = (0..4)
            .map(|_| {
                let g = Mat::from_shape_fn((5, 5), |_| rng.random::<f64>() - 0.5);
                (&g + &g.t()) * 0.5
            })
            .collect();
        let (track, _, _) = infer_subject(&b, &params, &gammas, &lap, QP_DEFAULT_TOL).unwrap();
        let reversed: Vec<Mat> = gammas.iter().rev().cloned().collect();
        let (track_rev, _, _) = infer_subject(&b, &params, &reversed, &lap, QP_DEFAULT_TOL).unwrap();
        for t in 0..4 {
            for k in 0..2 {
                assert_eq!(track.c_hat[[t, k]], track_rev.c_hat[[3 - t, k]]);
            }
        }
    }

    #[test]
    fn infer_noiseless_recovers_loadings() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = orthonormal(8, 3, &mut rng);
        let params = PredictorParams::init(NetConfig::standard(3, 2), 2, 1.0);
        let c_true = Mat::from_shape_fn((5, 3), |_| rng.random::<f64>() * 2.0);
        let gammas: Vec<Mat> = (0..5)
            .map(|t| scale_columns(&b, &c_true.row(t)).dot(&b.t()))
            .collect();
        let (track, trace, ok) = infer_subject(&b, &params, &gammas, &Mat::eye(8), 1e-10).unwrap();
        assert!(ok.iter().all(|&c| c));
        let c = track.loadings();
        for t in 0..5 {
            for k in 0..3 {
                assert!(
                    (c[[t, k]] - c_true[[t, k]]).abs() < 1e-4,
                    "({t},{k}): {} vs {}",
                    c[[t, k]],
                    c_true[[t, k]]
                );
            }
        }
        assert!(trace.final_pred.iter().all(|v| v.is_finite()));

        // single window: attention trivially [1.0]
        let (_, trace1, _) = infer_subject(&b, &params, &gammas[..1], &Mat::eye(8), 1e-10).unwrap();
        assert!((trace1.attention[0] - 1.0).abs() < 1e-15);
    }
}
