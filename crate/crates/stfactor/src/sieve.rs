//! Tensor-product sieve approximation of the spatial loading functions.
//!
//! The rows of the fitted spatial loading matrix are samples of d smooth
//! functions q_{a,j}(s); projecting those samples onto a finite tensor-product
//! basis (clamped B-splines or polynomials) gives coefficient vectors that can
//! be evaluated anywhere in the domain, which is what spatial prediction at
//! unobserved sites needs.

use crate::dataset::SiteSet;
use crate::error::{Error, Result};
use crate::factor::LoadingSpace;
use crate::linalg;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Univariate basis family for the tensor product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    Polynomial,
    Bspline,
}

/// Tensor-product basis description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: BasisFamily,
    /// Spline degree per axis (ignored for polynomials, where the power grid
    /// is set by `knots_per_axis`).
    pub degree: (usize, usize),
    /// B-spline: number of knot positions per axis, endpoints included
    /// (so `knots_per_axis − 2` interior knots). Polynomial: maximum power.
    pub knots_per_axis: usize,
    /// [xmin, xmax, ymin, ymax]
    pub domain: [f64; 4],
}

impl BasisSpec {
    /// Univariate basis size along one axis.
    fn axis_count(&self, axis: usize) -> usize {
        match self.family {
            BasisFamily::Polynomial => self.knots_per_axis + 1,
            BasisFamily::Bspline => {
                let deg = if axis == 0 { self.degree.0 } else { self.degree.1 };
                // clamped: (interior knots) + degree + 1
                self.knots_per_axis - 2 + deg + 1
            }
        }
    }

    /// Total number of tensor-product basis functions J_n.
    pub fn basis_count(&self) -> usize {
        self.axis_count(0) * self.axis_count(1)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.domain[0] && x <= self.domain[1] && y >= self.domain[2] && y <= self.domain[3]
    }

    /// Default spec for a fitted site set: cubic tensor B-splines with
    /// J_n ≈ √n basis functions, on the bounding box expanded by 1% per side.
    pub fn default_for_sites(sites: &SiteSet) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::InvalidArgument("empty site set".into()));
        }
        let n = sites.len();
        let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &sites.coords {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        let ex = 0.01 * (xmax - xmin).max(1e-9);
        let ey = 0.01 * (ymax - ymin).max(1e-9);
        // per-axis count from J_n = ⌈√n⌉, floored at the cubic minimum of 4
        let target = (n as f64).sqrt().ceil();
        let mut per_axis = (target.sqrt().ceil() as usize).max(4);
        while per_axis > 4 && per_axis * per_axis > n {
            per_axis -= 1;
        }
        Ok(BasisSpec {
            family: BasisFamily::Bspline,
            degree: (3, 3),
            knots_per_axis: per_axis.saturating_sub(2).max(2),
            domain: [xmin - ex, xmax + ex, ymin - ey, ymax + ey],
        })
    }
}

/// Clamped uniform knot vector on [lo, hi] with `positions` distinct knots
/// (endpoints repeated degree+1 times).
fn clamped_knots(lo: f64, hi: f64, positions: usize, degree: usize) -> Vec<f64> {
    let mut knots = Vec::with_capacity(positions + 2 * degree);
    for _ in 0..degree {
        knots.push(lo);
    }
    for k in 0..positions {
        knots.push(lo + (hi - lo) * k as f64 / (positions - 1) as f64);
    }
    for _ in 0..degree {
        knots.push(hi);
    }
    knots
}

/// All B-spline basis values at `x` (Cox–de Boor). Returns a vector of
/// length `positions − 1 + degree`.
fn bspline_row(knots: &[f64], degree: usize, x: f64) -> Vec<f64> {
    let nb = knots.len() - degree - 1;
    let mut out = vec![0.0; nb];
    let x = x.clamp(knots[0], knots[knots.len() - 1]);
    // locate the knot span; the right endpoint belongs to the last span
    let mut span = if x >= knots[nb] {
        nb - 1
    } else {
        match knots[..=nb].binary_search_by(|k| k.partial_cmp(&x).unwrap()) {
            Ok(mut i) => {
                while i + 1 <= nb && knots[i + 1] <= x {
                    i += 1;
                }
                i.min(nb - 1)
            }
            Err(i) => i - 1,
        }
    };
    span = span.max(degree);
    let mut n = vec![0.0; degree + 1];
    n[0] = 1.0;
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let tmp = if denom != 0.0 { n[r] / denom } else { 0.0 };
            n[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        n[j] = saved;
    }
    out[span - degree..=span].copy_from_slice(&n);
    out
}

fn polynomial_row(max_power: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(max_power + 1);
    let mut v = 1.0;
    for _ in 0..=max_power {
        out.push(v);
        v *= x;
    }
    out
}

fn axis_row(spec: &BasisSpec, axis: usize, coord: f64) -> Vec<f64> {
    match spec.family {
        BasisFamily::Polynomial => polynomial_row(spec.knots_per_axis, coord),
        BasisFamily::Bspline => {
            let (lo, hi) = if axis == 0 {
                (spec.domain[0], spec.domain[1])
            } else {
                (spec.domain[2], spec.domain[3])
            };
            let deg = if axis == 0 { spec.degree.0 } else { spec.degree.1 };
            let knots = clamped_knots(lo, hi, spec.knots_per_axis, deg);
            bspline_row(&knots, deg, coord)
        }
    }
}

/// Tensor-product basis row at one site, enumerated row-major over
/// (axis-1 index, axis-2 index).
fn basis_row(spec: &BasisSpec, x: f64, y: f64) -> Result<Vec<f64>> {
    if spec.family == BasisFamily::Bspline && !spec.contains(x, y) {
        return Err(Error::OutOfDomain { x, y });
    }
    let r1 = axis_row(spec, 0, x);
    let r2 = axis_row(spec, 1, y);
    let mut out = Vec::with_capacity(r1.len() * r2.len());
    for a in &r1 {
        for b in &r2 {
            out.push(a * b);
        }
    }
    Ok(out)
}

/// Design matrix (n × J_n): column i holds basis function u_i at all sites.
pub fn build_basis(spec: &BasisSpec, sites: &SiteSet) -> Result<Array2<f64>> {
    let n = sites.len();
    let jn = spec.basis_count();
    if jn > n {
        return Err(Error::Underdetermined { rows: n, cols: jn });
    }
    let mut design = Array2::<f64>::zeros((n, jn));
    for (i, &(x, y)) in sites.coords.iter().enumerate() {
        let row = basis_row(spec, x, y)?;
        for (j, v) in row.into_iter().enumerate() {
            design[[i, j]] = v;
        }
    }
    Ok(design)
}

/// Sieve coefficients mapping basis functions to the d loading functions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SieveFit {
    pub spec: BasisSpec,
    /// (J_n × d), column j approximates loading function j.
    #[serde(with = "beta_serde")]
    pub beta: Array2<f64>,
    /// Per-function in-sample RMS residual ‖Q̂_{A,·j} − design·β̂_{·j}‖/√n.
    pub residual_rms: Vec<f64>,
    /// Set when the design's conditioning estimate exceeded 1e10; the fit is
    /// still returned since downstream kriging may remain usable.
    pub ill_conditioned: bool,
}

mod beta_serde {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Flat {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(b: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        Flat {
            rows: b.nrows(),
            cols: b.ncols(),
            data: b.iter().copied().collect(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let f = Flat::deserialize(d)?;
        Array2::from_shape_vec((f.rows, f.cols), f.data).map_err(serde::de::Error::custom)
    }
}

/// Fits the loading functions by least squares of the loading-matrix columns
/// on the design (orthogonal factorization; never the normal equations).
pub fn fit_loading_functions(
    spec: &BasisSpec,
    design: &Array2<f64>,
    qa: &LoadingSpace,
) -> Result<SieveFit> {
    let n = design.nrows();
    let jn = design.ncols();
    if qa.q.nrows() != n {
        return Err(Error::Shape(format!(
            "design has {n} rows but QA has {}",
            qa.q.nrows()
        )));
    }
    if n < jn {
        return Err(Error::Underdetermined { rows: n, cols: jn });
    }
    let sol = linalg::lstsq(design.view(), qa.q.view(), 1e-13);
    if sol.rank < jn.min(n) && sol.condition_estimate().is_infinite() {
        return Err(Error::SingularDesign {
            context: "sieve design".into(),
        });
    }
    let ill_conditioned = sol.condition_estimate() > 1e10;
    let fitted = design.dot(&sol.solution);
    let d = qa.rank();
    let mut residual_rms = Vec::with_capacity(d);
    for j in 0..d {
        let ss: f64 = (0..n)
            .map(|i| {
                let e = qa.q[[i, j]] - fitted[[i, j]];
                e * e
            })
            .sum();
        residual_rms.push((ss / n as f64).sqrt());
    }
    Ok(SieveFit {
        spec: spec.clone(),
        beta: sol.solution,
        residual_rms,
        ill_conditioned,
    })
}

impl SieveFit {
    pub fn d(&self) -> usize {
        self.beta.ncols()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<SieveFit> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Evaluates the d fitted loading functions at one coordinate.
pub fn evaluate_loading(fit: &SieveFit, s0: (f64, f64)) -> Result<Array1<f64>> {
    let row = basis_row(&fit.spec, s0.0, s0.1)?;
    let row = Array1::from_vec(row);
    Ok(fit.beta.t().dot(&row))
}
