//! Prediction over space and time: kriging at new sites through the sieve
//! loading functions, h-step factor forecasting with VAR(1)/MAR(1) dynamics,
//! and reconstruction of the model-implied spatio-temporal covariance.

use crate::dataset::SiteSet;
use crate::error::{Error, Result};
use crate::factor::{FactorFit, FactorSeries};
use crate::linalg::{self, unvec_cm, vec_cm};
use crate::sieve::{self, SieveFit};
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// VAR(1) on the column-major vectorized factor matrix:
/// `vec(Z_t) = Φ vec(Z_{t−1}) + u_t`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarModel {
    pub d: usize,
    pub r: usize,
    /// (dr × dr)
    #[serde(with = "mat_serde")]
    pub phi: Array2<f64>,
    /// Residual sample covariance of the innovations, (dr × dr).
    #[serde(with = "mat_serde")]
    pub innovation_cov: Array2<f64>,
}

/// MAR(1): `Z_t = Φ_R Z_{t−1} Φ_C + U_t`, with ‖Φ_R‖_F = 1 after fitting
/// (the scale lives in Φ_C; the pair is only identified up to that scale).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarModel {
    pub d: usize,
    pub r: usize,
    #[serde(with = "mat_serde")]
    pub phi_r: Array2<f64>,
    #[serde(with = "mat_serde")]
    pub phi_c: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final residual sum of squares Σ_t ‖Z_t − Φ_R Z_{t−1} Φ_C‖²_F.
    pub objective: f64,
}

mod mat_serde {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Flat {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        Flat {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().copied().collect(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let f = Flat::deserialize(d)?;
        Array2::from_shape_vec((f.rows, f.cols), f.data).map_err(serde::de::Error::custom)
    }
}

/// Either temporal model, for the forecasting entry points.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemporalModel {
    Var(VarModel),
    Mar(MarModel),
}

impl TemporalModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<TemporalModel> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Kriging predictor at a new site: `ξ̂_t(s₀) = Q̂_B Ẑ_t' q̂_a(s₀)`.
pub fn predict_site(
    fit: &FactorFit,
    sieve_fit: &SieveFit,
    s0: (f64, f64),
    t: usize,
) -> Result<Array1<f64>> {
    if t >= fit.t_len {
        return Err(Error::InvalidArgument(format!(
            "time index {t} out of range for T={}",
            fit.t_len
        )));
    }
    let qa_s0 = sieve::evaluate_loading(sieve_fit, s0)?;
    if qa_s0.len() != fit.d {
        return Err(Error::Shape(format!(
            "sieve fit has {} functions but factor fit has d={}",
            qa_s0.len(),
            fit.d
        )));
    }
    let zt = fit.z.at(t);
    Ok(fit.qb.q.dot(&zt.t().dot(&qa_s0)))
}

/// Least-squares VAR(1) fit on the vectorized factor series.
pub fn fit_var1(z: &FactorSeries) -> Result<VarModel> {
    let (t_len, d, r) = (z.t_len(), z.d(), z.r());
    let dr = d * r;
    if t_len < dr + 2 {
        return Err(Error::Underdetermined {
            rows: t_len,
            cols: dr + 2,
        });
    }
    let rows = t_len - 1;
    let mut x = Array2::<f64>::zeros((rows, dr));
    let mut y = Array2::<f64>::zeros((rows, dr));
    for t in 0..rows {
        let zl = vec_cm(z.at(t));
        let zn = vec_cm(z.at(t + 1));
        for k in 0..dr {
            x[[t, k]] = zl[k];
            y[[t, k]] = zn[k];
        }
    }
    let sol = linalg::lstsq(x.view(), y.view(), 1e-10);
    if sol.rank < dr {
        return Err(Error::SingularDesign {
            context: "lagged factor design".into(),
        });
    }
    let phi = sol.solution.t().to_owned();
    let resid = &y - &x.dot(&sol.solution);
    let innovation_cov = resid.t().dot(&resid) / rows as f64;
    Ok(VarModel {
        d,
        r,
        phi,
        innovation_cov,
    })
}

fn frob_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Alternating least squares for the MAR(1) coefficient pair.
///
/// Each half-step is an exact linear solve, so the objective is
/// nonincreasing; iteration stops when its relative change drops below `tol`
/// or after `max_iter` sweeps (returned with `converged = false`, not an
/// error). Defaults: `tol = 1e-8`, `max_iter = 200`.
pub fn fit_mar1(z: &FactorSeries, tol: f64, max_iter: usize) -> Result<MarModel> {
    let (t_len, d, r) = (z.t_len(), z.d(), z.r());
    if t_len < d.max(r) + 2 {
        return Err(Error::Underdetermined {
            rows: t_len,
            cols: d.max(r) + 2,
        });
    }
    let total: f64 = z.z.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Err(Error::SingularDesign {
            context: "all-zero factor series".into(),
        });
    }
    let rows = t_len - 1;
    let mut phi_r;
    let mut phi_c = Array2::<f64>::eye(r);
    let mut objective = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    loop {
        // Φ_R step: stack W_t' over t, W_t = Z_{t-1}·Φ_C
        let mut xw = Array2::<f64>::zeros((rows * r, d));
        let mut yw = Array2::<f64>::zeros((rows * r, d));
        for t in 0..rows {
            let w = z.at(t).dot(&phi_c); // d×r
            for c in 0..r {
                for i in 0..d {
                    xw[[t * r + c, i]] = w[[i, c]];
                    yw[[t * r + c, i]] = z.at(t + 1)[[i, c]];
                }
            }
        }
        phi_r = linalg::lstsq(xw.view(), yw.view(), 1e-12).solution.t().to_owned();

        // Φ_C step: stack V_t over t, V_t = Φ_R·Z_{t-1}
        let mut xv = Array2::<f64>::zeros((rows * d, r));
        let mut yv = Array2::<f64>::zeros((rows * d, r));
        for t in 0..rows {
            let v = phi_r.dot(&z.at(t)); // d×r
            for i in 0..d {
                for c in 0..r {
                    xv[[t * d + i, c]] = v[[i, c]];
                    yv[[t * d + i, c]] = z.at(t + 1)[[i, c]];
                }
            }
        }
        phi_c = linalg::lstsq(xv.view(), yv.view(), 1e-12).solution;

        let mut obj = 0.0;
        for t in 0..rows {
            let pred = phi_r.dot(&z.at(t)).dot(&phi_c);
            let diff = &z.at(t + 1).to_owned() - &pred;
            obj += frob_sq(&diff);
        }
        iterations += 1;
        let rel_change = (objective - obj).abs() / objective.max(1e-300);
        let done = objective.is_finite() && rel_change < tol;
        objective = obj;
        if done {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
    }
    // identifiability: unit Frobenius norm on Φ_R, scale absorbed by Φ_C
    let f = frob_sq(&phi_r).sqrt();
    if f > 0.0 {
        phi_r /= f;
        phi_c *= f;
    }
    Ok(MarModel {
        d,
        r,
        phi_r,
        phi_c,
        iterations,
        converged,
        objective,
    })
}

fn mat_pow(m: ArrayView2<f64>, h: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::eye(m.nrows());
    for _ in 0..h {
        out = out.dot(&m);
    }
    out
}

/// Exact h-step factor forecast from the last observed factor matrix.
pub fn forecast_factor(
    model: &TemporalModel,
    z_last: ArrayView2<f64>,
    h: usize,
) -> Result<Array2<f64>> {
    if h < 1 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    match model {
        TemporalModel::Var(var) => {
            let (d, r) = (var.d, var.r);
            if z_last.dim() != (d, r) {
                return Err(Error::Shape(format!(
                    "factor matrix {:?} vs model ({d},{r})",
                    z_last.dim()
                )));
            }
            let v = mat_pow(var.phi.view(), h).dot(&vec_cm(z_last));
            Ok(unvec_cm(&v, d, r))
        }
        TemporalModel::Mar(mar) => {
            let (d, r) = (mar.d, mar.r);
            if z_last.dim() != (d, r) {
                return Err(Error::Shape(format!(
                    "factor matrix {:?} vs model ({d},{r})",
                    z_last.dim()
                )));
            }
            Ok(mat_pow(mar.phi_r.view(), h)
                .dot(&z_last)
                .dot(&mat_pow(mar.phi_c.view(), h)))
        }
    }
}

/// h-step-ahead signal prediction at a set of query sites:
/// `ξ̂_{T+h}(s) = Q̂_B Ẑ'_{T+h} q̂_a(s)`. Returns (n_query × p).
pub fn predict_future(
    fit: &FactorFit,
    sieve_fit: &SieveFit,
    model: &TemporalModel,
    sites: &SiteSet,
    h: usize,
) -> Result<Array2<f64>> {
    let z_last = fit.z.at(fit.t_len - 1);
    let z_ahead = forecast_factor(model, z_last, h)?;
    let mut out = Array2::<f64>::zeros((sites.len(), fit.p));
    for (i, &(x, y)) in sites.coords.iter().enumerate() {
        let qa_s = sieve::evaluate_loading(sieve_fit, (x, y))?;
        let pred = fit.qb.q.dot(&z_ahead.t().dot(&qa_s));
        for j in 0..fit.p {
            out[[i, j]] = pred[j];
        }
    }
    Ok(out)
}

/// Model-implied signal cross-covariance between sites `u` and `v` at signed
/// lag `h`:
/// `Σ̂_ξ,h(u,v) = Q̂_B [Σ_{i,j} q̂_i(u) q̂_j(v) Σ̂_{z,ij,h}] Q̂_B'`, where
/// `Σ̂_{z,ij,h}` is the lag-h sample cross-covariance of the (temporally
/// centered) factor rows i and j.
pub fn reconstruct_covariance(
    fit: &FactorFit,
    sieve_fit: &SieveFit,
    u: (f64, f64),
    v: (f64, f64),
    h: i64,
) -> Result<Array2<f64>> {
    let t_len = fit.t_len;
    if h.unsigned_abs() as usize > t_len.saturating_sub(2) {
        return Err(Error::LagOutOfRange { h, t: t_len });
    }
    let (d, r) = (fit.d, fit.r);
    // temporal means of the factor rows
    let mut zbar = Array2::<f64>::zeros((d, r));
    for t in 0..t_len {
        zbar = zbar + fit.z.at(t);
    }
    zbar /= t_len as f64;

    let qa_u = sieve::evaluate_loading(sieve_fit, u)?;
    let qa_v = sieve::evaluate_loading(sieve_fit, v)?;
    if qa_u.len() != d {
        return Err(Error::Shape(format!(
            "sieve fit has {} functions but factor fit has d={d}",
            qa_u.len()
        )));
    }

    let lag = h.unsigned_abs() as usize;
    let steps = t_len - lag;
    // S_f = Σ_ij a_i(u) a_j(v) Σ_z,ij,h, assembled as a weighted lag product
    let mut s_f = Array2::<f64>::zeros((r, r));
    for t in 0..steps {
        // rows at time t weighted by a(u), rows at t+lag weighted by a(v)
        let (first, second) = if h >= 0 { (t, t + lag) } else { (t + lag, t) };
        let mut wu = Array1::<f64>::zeros(r);
        let mut wv = Array1::<f64>::zeros(r);
        for i in 0..d {
            for c in 0..r {
                wu[c] += qa_u[i] * (fit.z.at(first)[[i, c]] - zbar[[i, c]]);
                wv[c] += qa_v[i] * (fit.z.at(second)[[i, c]] - zbar[[i, c]]);
            }
        }
        for a in 0..r {
            for b in 0..r {
                s_f[[a, b]] += wu[a] * wv[b];
            }
        }
    }
    s_f /= steps as f64;
    Ok(fit.qb.q.dot(&s_f).dot(&fit.qb.q.t()))
}
