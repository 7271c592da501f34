//! Dense linear algebra kernels used by the estimation pipeline.
//!
//! Everything here is deliberately dependency-free (no LAPACK): a Householder
//! tridiagonalization + implicit-shift QL eigensolver for symmetric matrices,
//! and a column-pivoted Householder QR for least squares. Sizes in this crate
//! stay in the low hundreds, where these O(n³) kernels are more than fast
//! enough and keep outputs bitwise-reproducible across runs.

use ndarray::{Array1, Array2, ArrayView2};

/// Eigen decomposition of a symmetric matrix, eigenvalues descending.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Eigenvalues in nonincreasing order (full spectrum).
    pub values: Vec<f64>,
    /// Matching eigenvectors as columns; each column's largest-magnitude
    /// entry is positive (ties broken by lowest row index).
    pub vectors: Array2<f64>,
}

/// Symmetric eigendecomposition of `(M + Mᵀ)/2`.
///
/// Householder reduction to tridiagonal form followed by the implicit-shift
/// QL iteration (EISPACK tred2/tql2 scheme). Panics only if the QL iteration
/// fails to converge within 60 sweeps per eigenvalue, which does not happen
/// for finite inputs.
pub fn sym_eigen(m: ArrayView2<f64>) -> SymEigen {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "sym_eigen requires a square matrix");
    // symmetrize up front so callers can pass accumulations with roundoff skew
    let mut v = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            v[[i, j]] = 0.5 * (m[[i, j]] + m[[j, i]]);
        }
    }
    let mut d = vec![0.0f64; n];
    let mut e = vec![0.0f64; n];
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e);

    // sort descending, stable in index for reproducibility
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].partial_cmp(&d[a]).unwrap().then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&k| d[k]).collect();
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (new_col, &old_col) in order.iter().enumerate() {
        // sign rule: largest-magnitude entry positive, lowest index on ties
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for i in 0..n {
            let a = v[[i, old_col]].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        let flip = if v[[best, old_col]] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[[i, new_col]] = flip * v[[i, old_col]];
        }
    }
    SymEigen { values, vectors }
}

/// Householder reduction of `v` (symmetric) to tridiagonal form.
/// On exit `d` holds the diagonal, `e` the subdiagonal (e[0] = 0) and `v`
/// the accumulated orthogonal transformation.
fn tred2(v: &mut Array2<f64>, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[[n - 1, j]];
    }
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        let mut scale = 0.0;
        if l > 0 {
            for k in 0..=l {
                scale += d[k].abs();
            }
        }
        if scale == 0.0 {
            e[i] = d[l];
            for j in 0..=l {
                d[j] = v[[l, j]];
                v[[i, j]] = 0.0;
                v[[j, i]] = 0.0;
            }
        } else {
            for k in 0..=l {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let f = d[l];
            let mut g = if f > 0.0 { -h.sqrt() } else { h.sqrt() };
            e[i] = scale * g;
            h -= f * g;
            d[l] = f - g;
            for j in 0..=l {
                e[j] = 0.0;
            }
            for j in 0..=l {
                let f = d[j];
                v[[j, i]] = f;
                g = e[j] + v[[j, j]] * f;
                for k in (j + 1)..=l {
                    g += v[[k, j]] * d[k];
                    e[k] += v[[k, j]] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..=l {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..=l {
                e[j] -= hh * d[j];
            }
            for j in 0..=l {
                let f = d[j];
                let g = e[j];
                for k in j..=l {
                    v[[k, j]] -= f * e[k] + g * d[k];
                }
                d[j] = v[[l, j]];
                v[[i, j]] = 0.0;
            }
        }
        d[i] = h;
    }
    // accumulate transformations
    for i in 0..n - 1 {
        v[[n - 1, i]] = v[[i, i]];
        v[[i, i]] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[[k, i + 1]] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[[k, i + 1]] * v[[k, j]];
                }
                for k in 0..=i {
                    v[[k, j]] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[[k, i + 1]] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[[n - 1, j]];
        v[[n - 1, j]] = 0.0;
    }
    v[[n - 1, n - 1]] = 1.0;
    e[0] = 0.0;
}

/// Implicit-shift QL iteration on the tridiagonal (d, e), accumulating
/// eigenvectors into `v`.
fn tql2(v: &mut Array2<f64>, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    if n == 0 {
        return;
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0f64;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                assert!(iter <= 60, "QL iteration failed to converge");
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for i in (l + 2)..n {
                    d[i] -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0f64;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0f64;
                let mut s2 = 0.0f64;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let h = v[[k, i + 1]];
                        v[[k, i + 1]] = s * v[[k, i]] + c * h;
                        v[[k, i]] = c * v[[k, i]] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
}

/// Least-squares solution of `A·X = B` by column-pivoted Householder QR.
#[derive(Clone, Debug)]
pub struct Lstsq {
    /// Minimizer, shape (cols(A), cols(B)).
    pub solution: Array2<f64>,
    /// |R[i,i]| of the pivoted factorization, nonincreasing; a cheap
    /// rank/conditioning probe.
    pub r_diag: Vec<f64>,
    /// Numerical rank at relative tolerance `rank_tol`.
    pub rank: usize,
}

impl Lstsq {
    /// Ratio of largest to smallest |R[i,i]| (∞ if rank-deficient).
    pub fn condition_estimate(&self) -> f64 {
        let last = *self.r_diag.last().unwrap_or(&0.0);
        if last == 0.0 {
            f64::INFINITY
        } else {
            self.r_diag[0] / last
        }
    }
}

/// Solves min ‖A·X − B‖_F with column-pivoted Householder QR.
///
/// `rank_tol` is relative to |R[0,0]|; columns with smaller pivots are
/// treated as dependent and their coefficients set to zero (basic solution).
pub fn lstsq(a: ArrayView2<f64>, b: ArrayView2<f64>, rank_tol: f64) -> Lstsq {
    let m = a.nrows();
    let n = a.ncols();
    assert_eq!(m, b.nrows(), "lstsq: row mismatch");
    let nrhs = b.ncols();
    let mut qr = a.to_owned();
    let mut rhs = b.to_owned();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut col_norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| qr[[i, j]] * qr[[i, j]]).sum::<f64>())
        .collect();

    let kmax = m.min(n);
    let mut r_diag = vec![0.0f64; kmax];
    for k in 0..kmax {
        // pivot: bring the largest remaining column norm to position k
        let (jmax, _) = col_norms
            .iter()
            .enumerate()
            .skip(k)
            .fold((k, -1.0), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        if jmax != k {
            perm.swap(k, jmax);
            col_norms.swap(k, jmax);
            for i in 0..m {
                let t = qr[[i, k]];
                qr[[i, k]] = qr[[i, jmax]];
                qr[[i, jmax]] = t;
            }
        }
        // recompute the pivot norm exactly to dodge cancellation drift
        let norm: f64 = (k..m).map(|i| qr[[i, k]] * qr[[i, k]]).sum::<f64>().sqrt();
        if norm == 0.0 {
            r_diag[k] = 0.0;
            continue;
        }
        let alpha = if qr[[k, k]] >= 0.0 { -norm } else { norm };
        // Householder vector u = x - alpha*e1, stored in place below the diagonal
        qr[[k, k]] -= alpha;
        let unorm2: f64 = (k..m).map(|i| qr[[i, k]] * qr[[i, k]]).sum();
        if unorm2 > 0.0 {
            for j in (k + 1)..n {
                let dot: f64 = (k..m).map(|i| qr[[i, k]] * qr[[i, j]]).sum();
                let beta = 2.0 * dot / unorm2;
                for i in k..m {
                    qr[[i, j]] -= beta * qr[[i, k]];
                }
            }
            for j in 0..nrhs {
                let dot: f64 = (k..m).map(|i| qr[[i, k]] * rhs[[i, j]]).sum();
                let beta = 2.0 * dot / unorm2;
                for i in k..m {
                    rhs[[i, j]] -= beta * qr[[i, k]];
                }
            }
        }
        qr[[k, k]] = alpha;
        r_diag[k] = alpha.abs();
        for (j, cn) in col_norms.iter_mut().enumerate().skip(k + 1) {
            *cn -= qr[[k, j]] * qr[[k, j]];
            if *cn < 0.0 {
                *cn = 0.0;
            }
        }
    }

    let rank = if r_diag.is_empty() || r_diag[0] == 0.0 {
        0
    } else {
        r_diag.iter().take_while(|&&d| d > rank_tol * r_diag[0]).count()
    };

    // back-substitute the leading rank×rank triangle; dependent columns get 0
    let mut x_perm = Array2::<f64>::zeros((n, nrhs));
    for j in 0..nrhs {
        for i in (0..rank).rev() {
            let mut s = rhs[[i, j]];
            for l in (i + 1)..rank {
                s -= qr[[i, l]] * x_perm[[l, j]];
            }
            x_perm[[i, j]] = s / qr[[i, i]];
        }
    }
    let mut solution = Array2::<f64>::zeros((n, nrhs));
    for (k, &orig) in perm.iter().enumerate() {
        for j in 0..nrhs {
            solution[[orig, j]] = x_perm[[k, j]];
        }
    }
    Lstsq {
        solution,
        r_diag,
        rank,
    }
}

/// Orthonormal basis of the column space of `a` (thin Q of an unpivoted QR).
/// Requires full column rank; used for projector-based space distances.
pub fn orthonormal_columns(a: ArrayView2<f64>) -> Array2<f64> {
    let m = a.nrows();
    let n = a.ncols();
    assert!(m >= n, "orthonormal_columns: need rows >= cols");
    let mut qr = a.to_owned();
    let mut alphas = vec![0.0f64; n];
    for k in 0..n {
        let norm: f64 = (k..m).map(|i| qr[[i, k]] * qr[[i, k]]).sum::<f64>().sqrt();
        let alpha = if qr[[k, k]] >= 0.0 { -norm } else { norm };
        qr[[k, k]] -= alpha;
        let unorm2: f64 = (k..m).map(|i| qr[[i, k]] * qr[[i, k]]).sum();
        if unorm2 > 0.0 {
            for j in (k + 1)..n {
                let dot: f64 = (k..m).map(|i| qr[[i, k]] * qr[[i, j]]).sum();
                let beta = 2.0 * dot / unorm2;
                for i in k..m {
                    qr[[i, j]] -= beta * qr[[i, k]];
                }
            }
        }
        alphas[k] = alpha;
    }
    // apply the reflectors to the first n columns of I, in reverse
    let mut q = Array2::<f64>::zeros((m, n));
    for j in 0..n {
        q[[j, j]] = 1.0;
    }
    for k in (0..n).rev() {
        let unorm2: f64 = (k..m).map(|i| qr[[i, k]] * qr[[i, k]]).sum();
        if unorm2 > 0.0 {
            for j in 0..n {
                let dot: f64 = (k..m).map(|i| qr[[i, k]] * q[[i, j]]).sum();
                let beta = 2.0 * dot / unorm2;
                for i in k..m {
                    q[[i, j]] -= beta * qr[[i, k]];
                }
            }
        }
    }
    q
}

/// Column-major vectorization (stacks columns), matching vec(Φ_R Z Φ_C) =
/// (Φ_C'⊗Φ_R)·vec(Z).
pub fn vec_cm(z: ArrayView2<f64>) -> Array1<f64> {
    let (d, r) = z.dim();
    let mut out = Array1::<f64>::zeros(d * r);
    for c in 0..r {
        for i in 0..d {
            out[c * d + i] = z[[i, c]];
        }
    }
    out
}

/// Inverse of [`vec_cm`]: reshape a length d·r vector into a d×r matrix.
pub fn unvec_cm(v: &Array1<f64>, d: usize, r: usize) -> Array2<f64> {
    assert_eq!(v.len(), d * r);
    let mut out = Array2::<f64>::zeros((d, r));
    for c in 0..r {
        for i in 0..d {
            out[[i, c]] = v[c * d + i];
        }
    }
    out
}

/// Kronecker product a ⊗ b.
pub fn kron(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::<f64>::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[[i, j]];
            for k in 0..br {
                for l in 0..bc {
                    out[[i * br + k, j * bc + l]] = aij * b[[k, l]];
                }
            }
        }
    }
    out
}
