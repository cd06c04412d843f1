//! Dense matrix kernels: symmetric eigendecomposition, SVD, traces and
//! weighted norms. Everything here is deterministic for a fixed input; both
//! factorizations use Jacobi iterations with a fixed cyclic sweep order and a
//! sign convention (first nonzero entry of every vector is nonnegative) so
//! factorizations are reproducible across runs.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

pub type Mat = Array2<f64>;

const MAX_SWEEPS: usize = 64;

/// Result of `svd`: `m = u * diag(s) * vt` with orthonormal `u` columns and
/// orthonormal `vt` rows, singular values sorted descending.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Mat,
    pub s: Array1<f64>,
    pub vt: Mat,
    /// True when null directions had to be completed with an arbitrary
    /// orthonormal basis (rank-deficient input).
    pub rank_deficient: bool,
}

fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Thin SVD via one-sided Jacobi (Hestenes). Returns `min(rows, cols)`
/// singular triplets.
pub fn svd(m: &Mat) -> Result<SvdResult> {
    if !all_finite(m) {
        return Err(Error::contract("svd: input contains non-finite entries"));
    }
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::dim("svd: empty matrix"));
    }
    if rows >= cols {
        svd_tall(m)
    } else {
        // svd(Aᵀ) = (V, S, Uᵀ)
        let t = svd_tall(&m.t().to_owned())?;
        Ok(SvdResult {
            u: t.vt.t().to_owned(),
            s: t.s,
            vt: t.u.t().to_owned(),
            rank_deficient: t.rank_deficient,
        })
    }
}

fn svd_tall(m: &Mat) -> Result<SvdResult> {
    let (rows, cols) = m.dim();
    let mut a = m.clone();
    let mut v = Mat::eye(cols);
    let scale = a.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1e-300);
    let tol = 1e-15;

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..rows {
                    let ap = a[[i, p]];
                    let aq = a[[i, q]];
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                let denom = (alpha * beta).sqrt();
                if denom <= scale * scale * 1e-280 {
                    continue;
                }
                let ratio = gamma.abs() / denom;
                off = off.max(ratio);
                if ratio <= tol {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let ap = a[[i, p]];
                    let aq = a[[i, q]];
                    a[[i, p]] = c * ap - s * aq;
                    a[[i, q]] = s * ap + c * aq;
                }
                for i in 0..cols {
                    let vp = v[[i, p]];
                    let vq = v[[i, q]];
                    v[[i, p]] = c * vp - s * vq;
                    v[[i, q]] = s * vp + c * vq;
                }
            }
        }
        if off <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numeric("svd: Jacobi sweeps did not converge"));
    }

    let mut norms: Vec<(usize, f64)> = (0..cols)
        .map(|j| {
            let n = (0..rows).map(|i| a[[i, j]] * a[[i, j]]).sum::<f64>().sqrt();
            (j, n)
        })
        .collect();
    norms.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));

    let smax = norms[0].1;
    let rank_tol = smax * 1e-12;
    let mut u = Mat::zeros((rows, cols));
    let mut s = Array1::zeros(cols);
    let mut vt = Mat::zeros((cols, cols));
    let mut rank_deficient = false;
    for (out, &(j, n)) in norms.iter().enumerate() {
        s[out] = n;
        for i in 0..cols {
            vt[[out, i]] = v[[i, j]];
        }
        if n > rank_tol && n > 0.0 {
            for i in 0..rows {
                u[[i, out]] = a[[i, j]] / n;
            }
        } else {
            rank_deficient = true;
        }
    }
    if rank_deficient {
        log::warn!("svd: rank-deficient input, completing null directions deterministically");
        complete_orthonormal(&mut u, &s, rank_tol);
    }
    apply_sign_convention(&mut u, Some(&mut vt));
    Ok(SvdResult {
        u,
        s,
        vt,
        rank_deficient,
    })
}

/// Fill zero columns of `u` (where `s` is at noise level) with vectors
/// orthonormal to the rest, generated from coordinate vectors in index order.
fn complete_orthonormal(u: &mut Mat, s: &Array1<f64>, rank_tol: f64) {
    let (rows, cols) = u.dim();
    for j in 0..cols {
        if s[j] > rank_tol && s[j] > 0.0 {
            continue;
        }
        let mut filled = false;
        for seed in 0..rows {
            let mut cand = vec![0.0f64; rows];
            cand[seed] = 1.0;
            // two rounds of Gram-Schmidt for stability
            for _ in 0..2 {
                for k in 0..cols {
                    if k == j {
                        continue;
                    }
                    let proj: f64 = (0..rows).map(|i| cand[i] * u[[i, k]]).sum();
                    for i in 0..rows {
                        cand[i] -= proj * u[[i, k]];
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for i in 0..rows {
                    u[[i, j]] = cand[i] / norm;
                }
                filled = true;
                break;
            }
        }
        debug_assert!(filled, "could not complete orthonormal basis");
    }
}

fn apply_sign_convention(u: &mut Mat, mut vt: Option<&mut Mat>) {
    let (rows, cols) = u.dim();
    for j in 0..cols {
        let mut flip = false;
        for i in 0..rows {
            let x = u[[i, j]];
            if x.abs() > 1e-14 {
                flip = x < 0.0;
                break;
            }
        }
        if flip {
            for i in 0..rows {
                u[[i, j]] = -u[[i, j]];
            }
            if let Some(vt) = vt.as_deref_mut() {
                for i in 0..vt.ncols() {
                    vt[[j, i]] = -vt[[j, i]];
                }
            }
        }
    }
}

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
/// Returns eigenvalues sorted descending and the matching eigenvectors as
/// columns. Rejects inputs that are not symmetric within `1e-8`.
pub fn sym_eig(m: &Mat) -> Result<(Array1<f64>, Mat)> {
    let (rows, cols) = m.dim();
    if rows != cols {
        return Err(Error::dim(format!("sym_eig: {rows}x{cols} is not square")));
    }
    if !all_finite(m) {
        return Err(Error::contract("sym_eig: non-finite entries"));
    }
    let maxabs = m.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let sym_tol = 1e-8 * (1.0 + maxabs);
    for i in 0..rows {
        for j in (i + 1)..rows {
            if (m[[i, j]] - m[[j, i]]).abs() > sym_tol {
                return Err(Error::contract(format!(
                    "sym_eig: asymmetric input at ({i},{j}): {} vs {}",
                    m[[i, j]],
                    m[[j, i]]
                )));
            }
        }
    }
    let n = rows;
    // symmetrize to kill roundoff-scale asymmetry before rotating
    let mut a = Mat::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            a[[i, j]] = 0.5 * (m[[i, j]] + m[[j, i]]);
        }
    }
    let mut v = Mat::eye(n);
    let mut converged = n <= 1;
    for _sweep in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off.sqrt() <= 1e-14 * (1.0 + maxabs) {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let aip = a[[i, p]];
                    let aiq = a[[i, q]];
                    a[[i, p]] = c * aip - s * aiq;
                    a[[i, q]] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[[p, i]];
                    let aqi = a[[q, i]];
                    a[[p, i]] = c * api - s * aqi;
                    a[[q, i]] = s * api + c * aqi;
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::numeric("sym_eig: Jacobi sweeps did not converge"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).unwrap().then(i.cmp(&j)));
    let mut values = Array1::zeros(n);
    let mut vectors = Mat::zeros((n, n));
    for (out, &j) in order.iter().enumerate() {
        values[out] = a[[j, j]];
        for i in 0..n {
            vectors[[i, out]] = v[[i, j]];
        }
    }
    apply_sign_convention(&mut vectors, None);
    Ok((values, vectors))
}

/// Weighted squared Frobenius norm `Tr(RᵀLR)` of a residual `R` under a
/// symmetric PSD weight `L`. For symmetric residuals this is `Tr(R·L·R)`;
/// the transposed form keeps the value nonnegative for any `R` and reduces to
/// the plain squared Frobenius norm when `L` is the identity.
pub fn weighted_frob_sq(r: &Mat, l: &Mat) -> Result<f64> {
    let (n, m) = r.dim();
    if n != m {
        return Err(Error::dim("weighted_frob_sq: residual not square"));
    }
    if l.dim() != (n, m) {
        return Err(Error::dim(format!(
            "weighted_frob_sq: weight is {:?}, residual is {:?}",
            l.dim(),
            r.dim()
        )));
    }
    // Tr(RᵀLR) = Σ_ij (LR)_ij R_ij
    let lr = l.dot(r);
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += lr[[i, j]] * r[[i, j]];
        }
    }
    Ok(acc)
}

/// Cholesky factor (lower triangular) of a symmetric positive definite matrix.
pub fn cholesky(m: &Mat) -> Result<Mat> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::dim("cholesky: not square"));
    }
    let mut l = Mat::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::numeric(format!(
                        "cholesky: matrix not positive definite at pivot {i} ({sum})"
                    )));
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve `M x = b` for every column of `b`, given the Cholesky factor of `M`.
pub fn cholesky_solve(l: &Mat, b: &Mat) -> Mat {
    let n = l.nrows();
    let k = b.ncols();
    let mut x = b.clone();
    for col in 0..k {
        // forward: L y = b
        for i in 0..n {
            let mut sum = x[[i, col]];
            for j in 0..i {
                sum -= l[[i, j]] * x[[j, col]];
            }
            x[[i, col]] = sum / l[[i, i]];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut sum = x[[i, col]];
            for j in (i + 1)..n {
                sum -= l[[j, i]] * x[[j, col]];
            }
            x[[i, col]] = sum / l[[i, i]];
        }
    }
    x
}

/// `‖m‖_F`
pub fn frob_norm(m: &Mat) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}
