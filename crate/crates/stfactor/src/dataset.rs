//! Data model, CSV ingestion and preprocessing.
//!
//! The canonical interchange format is the long CSV with header
//! `time,site_id,x,y,variable,value`; a wide reader (one row per (time, site),
//! one column per variable) is provided as a convenience. Grids must be
//! complete: every (time, site, variable) cell present exactly once.

use crate::error::{Error, Result};
use crate::linalg;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

/// Ordered set of 2-D sampling sites; ordering defines the row index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteSet {
    pub ids: Vec<String>,
    /// (x, y) coordinates, same order as `ids`.
    pub coords: Vec<(f64, f64)>,
}

impl SiteSet {
    pub fn new(ids: Vec<String>, coords: Vec<(f64, f64)>) -> Result<Self> {
        if ids.len() != coords.len() {
            return Err(Error::Shape(format!(
                "{} ids vs {} coordinates",
                ids.len(),
                coords.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &ids {
            if !seen.insert(id.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate site id {id:?}")));
            }
        }
        Ok(SiteSet { ids, coords })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Dense observation tensor of shape (T, n, p) with site/variable/time labels.
#[derive(Clone, Debug, PartialEq)]
pub struct STDataTensor {
    /// (T, n, p)
    pub values: Array3<f64>,
    pub sites: SiteSet,
    pub variables: Vec<String>,
    pub times: Vec<String>,
}

/// Noise-free signal tensor; same layout and invariants as [`STDataTensor`].
pub type SignalTensor = STDataTensor;

impl STDataTensor {
    /// Builds a tensor, enforcing shape consistency and rejecting NaN.
    pub fn new(
        values: Array3<f64>,
        sites: SiteSet,
        variables: Vec<String>,
        times: Vec<String>,
    ) -> Result<Self> {
        let (t, n, p) = values.dim();
        if t != times.len() || n != sites.len() || p != variables.len() {
            return Err(Error::Shape(format!(
                "values dims ({t},{n},{p}) vs labels ({},{},{})",
                times.len(),
                sites.len(),
                variables.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "non-finite entry in data tensor".into(),
            ));
        }
        Ok(STDataTensor {
            values,
            sites,
            variables,
            times,
        })
    }

    pub fn t_len(&self) -> usize {
        self.values.dim().0
    }

    pub fn n_sites(&self) -> usize {
        self.values.dim().1
    }

    pub fn p_vars(&self) -> usize {
        self.values.dim().2
    }
}

/// Per-(site, variable) location/scale used to standardize and to invert it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingParams {
    pub n: usize,
    pub p: usize,
    /// row-major (n × p)
    pub mean: Vec<f64>,
    /// row-major (n × p), strictly positive
    pub sd: Vec<f64>,
}

impl ScalingParams {
    pub fn mean_at(&self, i: usize, j: usize) -> f64 {
        self.mean[i * self.p + j]
    }

    pub fn sd_at(&self, i: usize, j: usize) -> f64 {
        self.sd[i * self.p + j]
    }

    /// Exact inverse of [`standardize`].
    pub fn restore(&self, data: &STDataTensor) -> Result<STDataTensor> {
        let (_, n, p) = data.values.dim();
        if n != self.n || p != self.p {
            return Err(Error::Shape(format!(
                "scaling params for ({},{}) applied to ({n},{p})",
                self.n, self.p
            )));
        }
        let mut out = data.clone();
        for ((_, i, j), v) in out.values.indexed_iter_mut() {
            *v = *v * self.sd_at(i, j) + self.mean_at(i, j);
        }
        Ok(out)
    }
}

/// Per-site least-squares coefficients of the covariate mean process,
/// shape (n, m, p).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoefficientField {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    /// row-major (n × m × p)
    pub c: Vec<f64>,
}

impl CoefficientField {
    pub fn at(&self, i: usize, k: usize, j: usize) -> f64 {
        self.c[(i * self.m + k) * self.p + j]
    }
}

/// CSV layout selector for [`load_csv`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsvLayout {
    Long,
    Wide,
}

/// Sort order for time labels: numeric when every label parses as an
/// integer, lexicographic otherwise (ISO dates such as `1992-07` sort
/// correctly either way).
fn sort_times(times: &mut [String]) {
    let all_int = times.iter().all(|t| t.parse::<i64>().is_ok());
    if all_int {
        times.sort_by_key(|t| t.parse::<i64>().unwrap());
    } else {
        times.sort();
    }
}

/// Reads a complete space-time grid from CSV.
pub fn load_csv(path: &Path, layout: CsvLayout) -> Result<STDataTensor> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, layout)
}

/// Same as [`load_csv`] but from any reader.
pub fn load_csv_reader<R: Read>(reader: R, layout: CsvLayout) -> Result<STDataTensor> {
    match layout {
        CsvLayout::Long => load_long(reader),
        CsvLayout::Wide => load_wide(reader),
    }
}

fn parse_f64(s: &str, row: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse {
        row,
        value: s.to_string(),
    })
}

fn load_long<R: Read>(reader: R) -> Result<STDataTensor> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let hdr = rdr.headers()?.clone();
        let want = ["time", "site_id", "x", "y", "variable", "value"];
        let got: Vec<&str> = hdr.iter().collect();
        if got != want {
            return Err(Error::InvalidArgument(format!(
                "long CSV header must be {}, got {}",
                want.join(","),
                got.join(",")
            )));
        }
    }
    let mut records = Vec::new();
    let mut time_set = Vec::new();
    let mut site_ids = Vec::new();
    let mut site_coords = Vec::new();
    let mut site_index: HashMap<String, usize> = HashMap::new();
    let mut time_seen: HashMap<String, ()> = HashMap::new();
    let mut var_ids = Vec::new();
    let mut var_index: HashMap<String, usize> = HashMap::new();
    for (rownum, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rownum + 2; // header is line 1
        let time = rec[0].to_string();
        let site = rec[1].to_string();
        let x = parse_f64(&rec[2], row)?;
        let y = parse_f64(&rec[3], row)?;
        let var = rec[4].to_string();
        let value = parse_f64(&rec[5], row)?;
        if !time_seen.contains_key(&time) {
            time_seen.insert(time.clone(), ());
            time_set.push(time.clone());
        }
        if !site_index.contains_key(&site) {
            site_index.insert(site.clone(), site_ids.len());
            site_ids.push(site.clone());
            site_coords.push((x, y));
        }
        if !var_index.contains_key(&var) {
            var_index.insert(var.clone(), var_ids.len());
            var_ids.push(var.clone());
        }
        records.push((time, site, var, value));
    }
    sort_times(&mut time_set);
    let time_index: HashMap<&str, usize> = time_set
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();

    let (t_len, n, p) = (time_set.len(), site_ids.len(), var_ids.len());
    let mut values = Array3::<f64>::zeros((t_len, n, p));
    let mut filled = vec![false; t_len * n * p];
    for (time, site, var, value) in records {
        let ti = time_index[time.as_str()];
        let si = site_index[&site];
        let vi = var_index[&var];
        let flat = (ti * n + si) * p + vi;
        if filled[flat] {
            return Err(Error::DuplicateRecord {
                time,
                site,
                variable: var,
            });
        }
        filled[flat] = true;
        values[[ti, si, vi]] = value;
    }
    if let Some(flat) = filled.iter().position(|&f| !f) {
        let ti = flat / (n * p);
        let si = (flat / p) % n;
        let vi = flat % p;
        return Err(Error::IncompleteGrid {
            time: time_set[ti].clone(),
            site: site_ids[si].clone(),
            variable: var_ids[vi].clone(),
        });
    }
    STDataTensor::new(values, SiteSet::new(site_ids, site_coords)?, var_ids, time_set)
}

fn load_wide<R: Read>(reader: R) -> Result<STDataTensor> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let hdr = rdr.headers()?.clone();
    let cols: Vec<&str> = hdr.iter().collect();
    if cols.len() < 5 || cols[0] != "time" || cols[1] != "site_id" || cols[2] != "x" || cols[3] != "y" {
        return Err(Error::InvalidArgument(
            "wide CSV header must start with time,site_id,x,y followed by variable columns".into(),
        ));
    }
    let var_ids: Vec<String> = cols[4..].iter().map(|s| s.to_string()).collect();
    let p = var_ids.len();

    let mut rows: Vec<(String, String, Vec<f64>)> = Vec::new();
    let mut time_set = Vec::new();
    let mut time_seen: HashMap<String, ()> = HashMap::new();
    let mut site_ids = Vec::new();
    let mut site_coords = Vec::new();
    let mut site_index: HashMap<String, usize> = HashMap::new();
    for (rownum, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rownum + 2;
        let time = rec[0].to_string();
        let site = rec[1].to_string();
        let x = parse_f64(&rec[2], row)?;
        let y = parse_f64(&rec[3], row)?;
        if rec.len() != 4 + p {
            return Err(Error::Shape(format!(
                "row {row} has {} fields, expected {}",
                rec.len(),
                4 + p
            )));
        }
        let mut vals = Vec::with_capacity(p);
        for k in 0..p {
            vals.push(parse_f64(&rec[4 + k], row)?);
        }
        if !time_seen.contains_key(&time) {
            time_seen.insert(time.clone(), ());
            time_set.push(time.clone());
        }
        if !site_index.contains_key(&site) {
            site_index.insert(site.clone(), site_ids.len());
            site_ids.push(site.clone());
            site_coords.push((x, y));
        }
        rows.push((time, site, vals));
    }
    sort_times(&mut time_set);
    let time_index: HashMap<&str, usize> = time_set
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    let (t_len, n) = (time_set.len(), site_ids.len());
    let mut values = Array3::<f64>::zeros((t_len, n, p));
    let mut filled = vec![false; t_len * n];
    for (time, site, vals) in rows {
        let ti = time_index[time.as_str()];
        let si = site_index[&site];
        if filled[ti * n + si] {
            return Err(Error::DuplicateRecord {
                time,
                site,
                variable: "*".into(),
            });
        }
        filled[ti * n + si] = true;
        for (k, v) in vals.into_iter().enumerate() {
            values[[ti, si, k]] = v;
        }
    }
    if let Some(flat) = filled.iter().position(|&f| !f) {
        return Err(Error::IncompleteGrid {
            time: time_set[flat / n].clone(),
            site: site_ids[flat % n].clone(),
            variable: "*".into(),
        });
    }
    STDataTensor::new(values, SiteSet::new(site_ids, site_coords)?, var_ids, time_set)
}

/// Writes a tensor to the long CSV format.
pub fn write_csv_long<W: std::io::Write>(data: &STDataTensor, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["time", "site_id", "x", "y", "variable", "value"])?;
    let (t_len, n, p) = data.values.dim();
    for t in 0..t_len {
        for i in 0..n {
            let (x, y) = data.sites.coords[i];
            for j in 0..p {
                w.write_record([
                    data.times[t].as_str(),
                    data.sites.ids[i].as_str(),
                    &format!("{x}"),
                    &format!("{y}"),
                    data.variables[j].as_str(),
                    &format!("{}", data.values[[t, i, j]]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Seasonal differencing: `out[t] = in[t+period] − in[t]`, shrinking T by
/// `period`. Output time labels are the later ones of each pair.
pub fn deseasonalize_monthly(data: &STDataTensor, period: usize) -> Result<STDataTensor> {
    let (t_len, n, p) = data.values.dim();
    if period == 0 {
        return Err(Error::InvalidArgument("period must be positive".into()));
    }
    if t_len <= period {
        return Err(Error::SeriesTooShort { t: t_len, period });
    }
    let t_out = t_len - period;
    let mut values = Array3::<f64>::zeros((t_out, n, p));
    for t in 0..t_out {
        for i in 0..n {
            for j in 0..p {
                values[[t, i, j]] = data.values[[t + period, i, j]] - data.values[[t, i, j]];
            }
        }
    }
    STDataTensor::new(
        values,
        data.sites.clone(),
        data.variables.clone(),
        data.times[period..].to_vec(),
    )
}

/// Standardizes every (site, variable) series to mean 0 and sample standard
/// deviation 1 (divisor T−1). Returns the parameters needed to invert.
pub fn standardize(data: &STDataTensor) -> Result<(STDataTensor, ScalingParams)> {
    let (t_len, n, p) = data.values.dim();
    if t_len < 2 {
        return Err(Error::SeriesTooShort { t: t_len, period: 1 });
    }
    let mut mean = vec![0.0; n * p];
    let mut sd = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..p {
            let mut mu = 0.0;
            for t in 0..t_len {
                mu += data.values[[t, i, j]];
            }
            mu /= t_len as f64;
            let mut ss = 0.0;
            for t in 0..t_len {
                let d = data.values[[t, i, j]] - mu;
                ss += d * d;
            }
            let s = (ss / (t_len as f64 - 1.0)).sqrt();
            if s <= 0.0 {
                return Err(Error::DegenerateSeries {
                    site: data.sites.ids[i].clone(),
                    variable: data.variables[j].clone(),
                });
            }
            mean[i * p + j] = mu;
            sd[i * p + j] = s;
        }
    }
    let params = ScalingParams { n, p, mean, sd };
    let mut out = data.clone();
    for ((_, i, j), v) in out.values.indexed_iter_mut() {
        *v = (*v - params.mean_at(i, j)) / params.sd_at(i, j);
    }
    Ok((out, params))
}

/// Removes the covariate mean process by per-site least squares.
///
/// `covariates` has shape (T, n, m); for each site the T×m design is
/// regressed against the T×p responses, and the fitted mean is subtracted.
pub fn remove_covariate_mean(
    data: &STDataTensor,
    covariates: &Array3<f64>,
) -> Result<(STDataTensor, CoefficientField)> {
    let (t_len, n, p) = data.values.dim();
    let (tc, nc, m) = covariates.dim();
    if tc != t_len || nc != n {
        return Err(Error::Shape(format!(
            "covariates ({tc},{nc},{m}) vs data ({t_len},{n},{p})"
        )));
    }
    if t_len < m {
        return Err(Error::Underdetermined { rows: t_len, cols: m });
    }
    let mut residuals = data.clone();
    let mut coeff = vec![0.0; n * m * p];
    for i in 0..n {
        let mut z = Array2::<f64>::zeros((t_len, m));
        let mut y = Array2::<f64>::zeros((t_len, p));
        for t in 0..t_len {
            for k in 0..m {
                z[[t, k]] = covariates[[t, i, k]];
            }
            for j in 0..p {
                y[[t, j]] = data.values[[t, i, j]];
            }
        }
        let sol = linalg::lstsq(z.view(), y.view(), 1e-10);
        if sol.rank < m {
            return Err(Error::SingularDesign {
                context: format!("covariates at site {}", data.sites.ids[i]),
            });
        }
        let fit = z.dot(&sol.solution);
        for t in 0..t_len {
            for j in 0..p {
                residuals.values[[t, i, j]] -= fit[[t, j]];
            }
        }
        for k in 0..m {
            for j in 0..p {
                coeff[(i * m + k) * p + j] = sol.solution[[k, j]];
            }
        }
    }
    Ok((residuals, CoefficientField { n, m, p, c: coeff }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_tensor(
        t: usize,
        n: usize,
        p: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> STDataTensor {
        let values = Array3::from_shape_fn((t, n, p), |(a, b, c)| f(a, b, c));
        let sites = SiteSet::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..n).map(|i| (i as f64 * 0.1, -(i as f64) * 0.1)).collect(),
        )
        .unwrap();
        STDataTensor::new(
            values,
            sites,
            (0..p).map(|j| format!("v{j}")).collect(),
            (0..t).map(|k| format!("{k}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn long_roundtrip_smallest_grid() {
        let csv = "time,site_id,x,y,variable,value\n\
                   0,a,0.1,0.2,tmp,1.5\n\
                   1,a,0.1,0.2,tmp,2.5\n";
        let t = load_csv_reader(csv.as_bytes(), CsvLayout::Long).unwrap();
        assert_eq!(t.values.dim(), (2, 1, 1));
        assert_eq!(t.values[[0, 0, 0]], 1.5);
        assert_eq!(t.values[[1, 0, 0]], 2.5);
    }

    #[test]
    fn long_missing_cell() {
        let csv = "time,site_id,x,y,variable,value\n\
                   0,a,0.1,0.2,tmp,1.5\n\
                   0,a,0.1,0.2,hum,0.5\n\
                   1,a,0.1,0.2,tmp,2.5\n";
        match load_csv_reader(csv.as_bytes(), CsvLayout::Long) {
            Err(Error::IncompleteGrid { time, variable, .. }) => {
                assert_eq!(time, "1");
                assert_eq!(variable, "hum");
            }
            other => panic!("expected IncompleteGrid, got {other:?}"),
        }
    }

    #[test]
    fn long_duplicate_and_parse_errors() {
        let dup = "time,site_id,x,y,variable,value\n\
                   0,a,0.1,0.2,tmp,1.5\n\
                   0,a,0.1,0.2,tmp,1.6\n";
        assert!(matches!(
            load_csv_reader(dup.as_bytes(), CsvLayout::Long),
            Err(Error::DuplicateRecord { .. })
        ));
        let bad = "time,site_id,x,y,variable,value\n\
                   0,a,0.1,0.2,tmp,oops\n";
        match load_csv_reader(bad.as_bytes(), CsvLayout::Long) {
            Err(Error::Parse { row, value }) => {
                assert_eq!(row, 2);
                assert_eq!(value, "oops");
            }
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn wide_shape() {
        let mut csv = String::from("time,site_id,x,y,v1,v2,v3\n");
        for t in 0..4 {
            for s in ["a", "b"] {
                csv.push_str(&format!("{t},{s},0.0,0.0,1,2,3\n"));
            }
        }
        let t = load_csv_reader(csv.as_bytes(), CsvLayout::Wide).unwrap();
        assert_eq!(t.values.dim(), (4, 2, 3));
        assert_eq!(t.variables, vec!["v1", "v2", "v3"]);
    }

    #[test]
    fn numeric_time_ordering() {
        // "10" must sort after "2" when labels are numeric
        let mut csv = String::from("time,site_id,x,y,variable,value\n");
        for t in [10, 2, 1] {
            csv.push_str(&format!("{t},a,0,0,v,{t}\n"));
        }
        let t = load_csv_reader(csv.as_bytes(), CsvLayout::Long).unwrap();
        assert_eq!(t.times, vec!["1", "2", "10"]);
        assert_eq!(t.values[[2, 0, 0]], 10.0);
    }

    #[test]
    fn deseasonalize_periodic_cancels() {
        let data = small_tensor(12, 2, 2, |t, i, j| ((t % 4) as f64) + i as f64 + j as f64);
        let out = deseasonalize_monthly(&data, 4).unwrap();
        assert_eq!(out.t_len(), 8);
        assert!(out.values.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn deseasonalize_direct_difference() {
        let data = small_tensor(4, 1, 1, |t, _, _| (t + 1) as f64);
        let out = deseasonalize_monthly(&data, 2).unwrap();
        assert_eq!(out.values[[0, 0, 0]], 2.0);
        assert_eq!(out.values[[1, 0, 0]], 2.0);
        assert!(matches!(
            deseasonalize_monthly(&data, 4),
            Err(Error::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn deseasonalize_ccds_length() {
        let data = small_tensor(132, 1, 1, |t, _, _| t as f64);
        let out = deseasonalize_monthly(&data, 12).unwrap();
        assert_eq!(out.t_len(), 120);
    }

    #[test]
    fn deseasonalize_twice_is_second_difference() {
        let data = small_tensor(10, 1, 1, |t, _, _| (t as f64).powi(2) + 0.5 * t as f64);
        let period = 3;
        let once = deseasonalize_monthly(&data, period).unwrap();
        let twice = deseasonalize_monthly(&once, period).unwrap();
        assert_eq!(twice.t_len(), 10 - 2 * period);
        for t in 0..twice.t_len() {
            let direct = data.values[[t + 2 * period, 0, 0]]
                - 2.0 * data.values[[t + period, 0, 0]]
                + data.values[[t, 0, 0]];
            assert!((twice.values[[t, 0, 0]] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_two_points() {
        let data = small_tensor(2, 1, 1, |t, _, _| 1.0 + 2.0 * t as f64); // (1, 3)
        let (out, params) = standardize(&data).unwrap();
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        assert!((out.values[[0, 0, 0]] + inv_sqrt2).abs() < 1e-12);
        assert!((out.values[[1, 0, 0]] - inv_sqrt2).abs() < 1e-12);
        assert!((params.sd_at(0, 0) - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn standardize_idempotent_and_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut data = small_tensor(30, 3, 2, |_, _, _| 0.0);
        for v in data.values.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let (std1, params) = standardize(&data).unwrap();
        let (std2, _) = standardize(&std1).unwrap();
        for (a, b) in std1.values.iter().zip(std2.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = params.restore(&std1).unwrap();
        for (a, b) in back.values.iter().zip(data.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_constant_series_fails() {
        let data = small_tensor(5, 2, 1, |t, i, _| if i == 0 { t as f64 } else { 7.0 });
        match standardize(&data) {
            Err(Error::DegenerateSeries { site, variable }) => {
                assert_eq!(site, "s1");
                assert_eq!(variable, "v0");
            }
            other => panic!("expected DegenerateSeries, got {other:?}"),
        }
    }

    #[test]
    fn covariate_intercept_only_centers() {
        let data = small_tensor(10, 2, 2, |t, i, j| t as f64 + (i + j) as f64);
        let z = Array3::from_elem((10, 2, 1), 1.0);
        let (resid, c) = remove_covariate_mean(&data, &z).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mean: f64 = (0..10).map(|t| data.values[[t, i, j]]).sum::<f64>() / 10.0;
                assert!((c.at(i, 0, j) - mean).abs() < 1e-10);
                let rmean: f64 = (0..10).map(|t| resid.values[[t, i, j]]).sum::<f64>() / 10.0;
                assert!(rmean.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn covariate_exact_fit_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (t_len, n, p, m) = (50, 3, 2, 2);
        let z = Array3::from_shape_fn((t_len, n, m), |_| rng.random_range(-1.0..1.0f64));
        let ctrue = Array3::from_shape_fn((n, m, p), |_| rng.random_range(-1.0..1.0f64));
        // exact mean process, no noise
        let mut data = small_tensor(t_len, n, p, |_, _, _| 0.0);
        for t in 0..t_len {
            for i in 0..n {
                for j in 0..p {
                    let mut v = 0.0;
                    for k in 0..m {
                        v += ctrue[[i, k, j]] * z[[t, i, k]];
                    }
                    data.values[[t, i, j]] = v;
                }
            }
        }
        let (resid, _) = remove_covariate_mean(&data, &z).unwrap();
        assert!(resid.values.iter().all(|v| v.abs() < 1e-10));

        // noisy case: residuals orthogonal to each covariate column per site
        let mut noisy = data.clone();
        for v in noisy.values.iter_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
        let (resid, _) = remove_covariate_mean(&noisy, &z).unwrap();
        for i in 0..n {
            for k in 0..m {
                for j in 0..p {
                    let dot: f64 = (0..t_len)
                        .map(|t| resid.values[[t, i, j]] * z[[t, i, k]])
                        .sum();
                    assert!(dot.abs() < 1e-8, "site {i} covariate {k} var {j}: {dot}");
                }
            }
        }
    }

    #[test]
    fn covariate_singular_design() {
        let data = small_tensor(10, 1, 1, |t, _, _| t as f64);
        let mut z = Array3::<f64>::zeros((10, 1, 2));
        for t in 0..10 {
            z[[t, 0, 0]] = t as f64;
            z[[t, 0, 1]] = 2.0 * t as f64; // dependent column
        }
        assert!(matches!(
            remove_covariate_mean(&data, &z),
            Err(Error::SingularDesign { .. })
        ));
    }

    #[test]
    fn nan_rejected() {
        let mut values = Array3::<f64>::zeros((2, 1, 1));
        values[[0, 0, 0]] = f64::NAN;
        let sites = SiteSet::new(vec!["a".into()], vec![(0.0, 0.0)]).unwrap();
        assert!(
            STDataTensor::new(values, sites, vec!["v".into()], vec!["0".into(), "1".into()])
                .is_err()
        );
    }
}
