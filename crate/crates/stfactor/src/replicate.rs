//! Seeded Monte Carlo replication over (n, p, T, γ) grids, producing the
//! rank-frequency, loading-space-distance and prediction-error tables.
//!
//! Replicates are parallelized with rayon; every replicate derives its own
//! seed from (base seed, cell index, replicate index), and aggregation sums
//! per-replicate records in replicate order, so thread scheduling never
//! changes the output bytes.

use crate::error::Result;
use crate::factor::{self, FitOptions, PartitionStrategy, RankSpec};
use crate::forecast::{self, TemporalModel};
use crate::metrics;
use crate::sieve::{self, BasisSpec};
use crate::simgen::{self, SimConfig};
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One grid cell of the experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellSpec {
    pub n: usize,
    pub p: usize,
    pub t_len: usize,
    pub gamma: f64,
}

/// Rank handling across replicates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPolicy {
    /// Eigen-ratio selection per replicate.
    Auto,
    /// Ranks pinned to the given pair (the convention behind the
    /// loading-distance and prediction tables).
    Fixed { d: usize, r: usize },
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy::Auto
    }
}

/// Experiment grid: the cross product of the lists, in list order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: Vec<usize>,
    pub p: Vec<usize>,
    #[serde(rename = "T")]
    pub t_len: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: Vec<f64>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub ranks: RankPolicy,
}

fn default_gamma() -> Vec<f64> {
    vec![0.0]
}

fn default_replicates() -> usize {
    20
}

impl ExperimentConfig {
    pub fn cells(&self) -> Vec<CellSpec> {
        let mut out = Vec::new();
        for &n in &self.n {
            for &p in &self.p {
                for &t_len in &self.t_len {
                    for &gamma in &self.gamma {
                        out.push(CellSpec {
                            n,
                            p,
                            t_len,
                            gamma,
                        });
                    }
                }
            }
        }
        out
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-replicate seed derivation; independent of execution order.
fn derive_seed(base: u64, cell_idx: usize, rep: usize) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(cell_idx as u64)) ^ rep as u64)
}

fn fit_options(policy: RankPolicy, seed: u64) -> FitOptions {
    FitOptions {
        ranks: match policy {
            RankPolicy::Auto => RankSpec::EigenRatio { k_max: None },
            RankPolicy::Fixed { d, r } => RankSpec::Fixed { d, r },
        },
        strategy: PartitionStrategy::Random,
        seed: splitmix64(seed ^ 0x7061_7274),
    }
}

/// Mean and sample standard deviation of a replicate sample.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd::default();
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

/// Relative frequency of each estimated rank pair over the replicates.
pub fn rank_freq_cell(
    cell: CellSpec,
    replicates: usize,
    base_seed: u64,
    cell_idx: usize,
) -> Result<BTreeMap<(usize, usize), f64>> {
    let pairs: Vec<(usize, usize)> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let seed = derive_seed(base_seed, cell_idx, rep);
            let cfg = SimConfig::new(cell.n, cell.p, cell.t_len, cell.gamma, seed);
            let (data, _) = simgen::generate(&cfg)?;
            let fit = factor::fit(&data, &fit_options(RankPolicy::Auto, seed))?;
            Ok((fit.d, fit.r))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut freq = BTreeMap::new();
    for pair in pairs {
        *freq.entry(pair).or_insert(0.0) += 1.0 / replicates as f64;
    }
    Ok(freq)
}

/// Loading-space distances for one cell.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SpaceDistStats {
    pub da1: MeanStd,
    pub da2: MeanStd,
    /// Average of the two first-stage distances.
    pub davg: MeanStd,
    /// Re-estimated spatial loading distance D(Â, A).
    pub da: MeanStd,
    pub db: MeanStd,
}

pub fn space_dist_cell(
    cell: CellSpec,
    replicates: usize,
    base_seed: u64,
    cell_idx: usize,
    ranks: RankPolicy,
) -> Result<SpaceDistStats> {
    let rows: Vec<[f64; 4]> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let seed = derive_seed(base_seed, cell_idx, rep);
            let cfg = SimConfig::new(cell.n, cell.p, cell.t_len, cell.gamma, seed);
            let (data, truth) = simgen::generate(&cfg)?;
            let fit = factor::fit(&data, &fit_options(ranks, seed))?;
            let idx1 = fit.partition.idx1_with_dropped();
            let a1 = gather_rows(&truth.a, &idx1);
            let a2 = gather_rows(&truth.a, &fit.partition.idx2);
            let da1 = metrics::space_distance(fit.qa1.q.view(), a1.view())?;
            let da2 = metrics::space_distance(fit.qa2.q.view(), a2.view())?;
            let da = metrics::space_distance(fit.qa.q.view(), truth.a.view())?;
            let db = metrics::space_distance(fit.qb.q.view(), truth.b.view())?;
            Ok([da1, da2, da, db])
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |k: usize| rows.iter().map(|r| r[k]).collect::<Vec<f64>>();
    let avg: Vec<f64> = rows.iter().map(|r| 0.5 * (r[0] + r[1])).collect();
    Ok(SpaceDistStats {
        da1: mean_std(&col(0)),
        da2: mean_std(&col(1)),
        davg: mean_std(&avg),
        da: mean_std(&col(2)),
        db: mean_std(&col(3)),
    })
}

fn gather_rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((idx.len(), a.ncols()));
    for (k, &i) in idx.iter().enumerate() {
        for j in 0..a.ncols() {
            out[[k, j]] = a[[i, j]];
        }
    }
    out
}

/// Prediction errors for one cell: spatial kriging MSPE at held-out sites
/// and 1-/2-step temporal MSPEs under MAR(1) and VAR(1).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PredictionStats {
    pub spatial: MeanStd,
    pub mar: [MeanStd; 2],
    pub var: [MeanStd; 2],
}

pub fn prediction_cell(
    cell: CellSpec,
    replicates: usize,
    base_seed: u64,
    cell_idx: usize,
    ranks: RankPolicy,
) -> Result<PredictionStats> {
    let rows: Vec<[f64; 5]> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let seed = derive_seed(base_seed, cell_idx, rep);
            let cfg = SimConfig::new(cell.n, cell.p, cell.t_len, cell.gamma, seed);
            let (data, truth) = simgen::generate(&cfg)?;
            let fit = factor::fit(&data, &fit_options(ranks, seed))?;

            let spec = BasisSpec::default_for_sites(&data.sites)?;
            let design = sieve::build_basis(&spec, &data.sites)?;
            let sfit = sieve::fit_loading_functions(&spec, &design, &fit.qa)?;

            // spatial kriging at the held-out sites, all time points
            let n_new = truth.new_sites.len();
            let mut qa_new = Array2::<f64>::zeros((n_new, fit.d));
            for (i, &(x, y)) in truth.new_sites.coords.iter().enumerate() {
                let q = sieve::evaluate_loading(&sfit, (x, y))?;
                for j in 0..fit.d {
                    qa_new[[i, j]] = q[j];
                }
            }
            let mut pred = Array3::<f64>::zeros((fit.t_len, n_new, fit.p));
            for t in 0..fit.t_len {
                let pt = qa_new.dot(&fit.z.at(t)).dot(&fit.qb.q.t());
                pred.index_axis_mut(ndarray::Axis(0), t).assign(&pt);
            }
            let spatial = metrics::mspe_spatial(&pred, &truth.new_site_truth)?;

            // temporal forecasting at the fitted sites
            let mar = TemporalModel::Mar(forecast::fit_mar1(&fit.z, 1e-8, 200)?);
            let var = TemporalModel::Var(forecast::fit_var1(&fit.z)?);
            let mut tmse = [[0.0f64; 2]; 2];
            for (mi, model) in [&mar, &var].into_iter().enumerate() {
                for h in 1..=2usize {
                    let pred = forecast::predict_future(&fit, &sfit, model, &data.sites, h)?;
                    let truth_h = truth.future_signal(h)?;
                    tmse[mi][h - 1] = metrics::mspe_temporal(&pred, &truth_h)?;
                }
            }
            Ok([spatial, tmse[0][0], tmse[0][1], tmse[1][0], tmse[1][1]])
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |k: usize| rows.iter().map(|r| r[k]).collect::<Vec<f64>>();
    Ok(PredictionStats {
        spatial: mean_std(&col(0)),
        mar: [mean_std(&col(1)), mean_std(&col(2))],
        var: [mean_std(&col(3)), mean_std(&col(4))],
    })
}

/// Which table to replicate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    RankFreq,
    SpaceDist,
    Prediction,
}

/// Runs a table over the whole grid and renders it as CSV (header included).
pub fn run_table(kind: TableKind, config: &ExperimentConfig) -> Result<String> {
    let cells = config.cells();
    let mut out = String::new();
    match kind {
        TableKind::RankFreq => {
            out.push_str("n,p,T,gamma,d_hat,r_hat,frequency\n");
            for (ci, cell) in cells.iter().enumerate() {
                let freq = rank_freq_cell(*cell, config.replicates, config.seed, ci)?;
                for ((d, r), f) in freq {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        cell.n, cell.p, cell.t_len, cell.gamma, d, r, f
                    ));
                }
            }
        }
        TableKind::SpaceDist => {
            out.push_str(
                "n,p,T,gamma,da1_mean,da1_std,da2_mean,da2_std,davg_mean,davg_std,da_mean,da_std,db_mean,db_std\n",
            );
            for (ci, cell) in cells.iter().enumerate() {
                let s =
                    space_dist_cell(*cell, config.replicates, config.seed, ci, config.ranks)?;
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    cell.n,
                    cell.p,
                    cell.t_len,
                    cell.gamma,
                    s.da1.mean,
                    s.da1.std,
                    s.da2.mean,
                    s.da2.std,
                    s.davg.mean,
                    s.davg.std,
                    s.da.mean,
                    s.da.std,
                    s.db.mean,
                    s.db.std
                ));
            }
        }
        TableKind::Prediction => {
            out.push_str(
                "n,p,T,gamma,spatial_mean,spatial_std,mar_h1_mean,mar_h1_std,mar_h2_mean,mar_h2_std,var_h1_mean,var_h1_std,var_h2_mean,var_h2_std\n",
            );
            for (ci, cell) in cells.iter().enumerate() {
                let s =
                    prediction_cell(*cell, config.replicates, config.seed, ci, config.ranks)?;
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    cell.n,
                    cell.p,
                    cell.t_len,
                    cell.gamma,
                    s.spatial.mean,
                    s.spatial.std,
                    s.mar[0].mean,
                    s.mar[0].std,
                    s.mar[1].mean,
                    s.mar[1].std,
                    s.var[0].mean,
                    s.var[0].std,
                    s.var[1].mean,
                    s.var[1].std
                ));
            }
        }
    }
    Ok(out)
}
