//! l1-graph spectral clustering and quantile sweeps.

use std::collections::HashMap;
use std::fmt::Write as _;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use pathfinding::kuhn_munkres::kuhn_munkres_min;
use pathfinding::matrix::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipsolve::{solve_code, SolverOptions};
use crate::penalties::{Misfit, PenaltySpec};
use crate::seeds;

/// Samples as columns of `x`, with ground-truth labels `0..k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringTask {
    pub x: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub k: usize,
}

impl ClusteringTask {
    pub fn new(x: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != x.ncols() {
            return Err(Error::dim(format!("{} labels for {} samples", labels.len(), x.ncols())));
        }
        let k = labels.iter().unique().count();
        Ok(Self { x, labels, k })
    }

    /// Builds a task from a samples-by-features table: features are
    /// standardized to zero mean and unit variance, then every sample is
    /// scaled to unit norm.
    pub fn from_table(table: &DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        let mut x = table.transpose();
        let n = x.ncols() as f64;
        for f in 0..x.nrows() {
            let mut row = x.row_mut(f);
            let mean = row.sum() / n;
            row.add_scalar_mut(-mean);
            let sd = (row.norm_squared() / n).sqrt();
            if sd > 0.0 {
                row /= sd;
            }
        }
        normalize_columns(&mut x);
        Self::new(x, labels)
    }
}

fn normalize_columns(x: &mut DMatrix<f64>) {
    for mut c in x.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
}

/// Codes each sample over all other samples: column `i` of the result is
/// the code of sample `i` with a structural zero at position `i`.
pub fn l1_graph(x: &DMatrix<f64>, misfit: &Misfit, lam: f64, opts: &SolverOptions) -> Result<DMatrix<f64>> {
    let t = x.ncols();
    if t < 2 {
        return Err(Error::dim("an l1 graph needs at least two samples"));
    }
    let mut x = x.clone();
    normalize_columns(&mut x);
    let cols: Vec<Result<DVector<f64>>> = (0..t)
        .into_par_iter()
        .map(|i| {
            let others = x.clone().remove_column(i);
            let (a, _) = solve_code(&others, &x.column(i).into_owned(), misfit, lam, None, opts)
                .map_err(|e| Error::Column {
                    index: i,
                    source: Box::new(e),
                })?;
            Ok(a.insert_row(i, 0.0))
        })
        .collect();
    let mut graph = DMatrix::zeros(t, t);
    for (i, c) in cols.into_iter().enumerate() {
        graph.set_column(i, &c?);
    }
    Ok(graph)
}

/// `(I - A)^T (I - A)`.
pub fn laplacian(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::dim(format!("graph matrix is {:?}", a.shape())));
    }
    let m = DMatrix::identity(a.nrows(), a.ncols()) - a;
    Ok(m.tr_mul(&m))
}

/// Symmetric to `1e-10` (relative to the largest entry) with smallest
/// eigenvalue at least `-1e-10`.
pub fn is_symmetric_psd(l: &DMatrix<f64>) -> bool {
    if !l.is_square() {
        return false;
    }
    let scale = l.amax().max(1.0);
    if (l - l.transpose()).amax() > 1e-10 * scale {
        return false;
    }
    l.clone().symmetric_eigenvalues().min() >= -1e-10
}

/// Lloyd's algorithm from k-means++ seeding; returns labels and inertia.
fn kmeans_once(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let (n, dim) = points.shape();
    let dist2 = |i: usize, c: &DMatrix<f64>, j: usize| -> f64 { (0..dim).map(|d| (points[(i, d)] - c[(j, d)]).powi(2)).sum() };
    let mut centers = DMatrix::zeros(k, dim);
    let first = rng.gen_range(0..n);
    centers.row_mut(0).copy_from(&points.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).copy_from(&points.row(pick));
        for (i, v) in nearest.iter_mut().enumerate() {
            *v = v.min(dist2(i, &centers, c));
        }
    }
    let mut labels = vec![0usize; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let best = (0..k)
                .map(|c| (c, dist2(i, &centers, c)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .unwrap_or(0);
            if best != *label {
                *label = best;
                changed = true;
            }
        }
        let mut sums = DMatrix::<f64>::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for d in 0..dim {
                sums[(l, d)] += points[(i, d)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centers[(c, d)] = sums[(c, d)] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = labels.iter().enumerate().map(|(i, &l)| dist2(i, &centers, l)).sum();
    (labels, inertia)
}

pub const KMEANS_RESTARTS: usize = 20;

/// Embeds samples with the `k` eigenvectors of smallest eigenvalue,
/// row-normalizes, and keeps the best of 20 seeded k-means runs.
pub fn spectral_cluster(l: &DMatrix<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let t = l.nrows();
    if !l.is_square() {
        return Err(Error::dim(format!("Laplacian is {:?}", l.shape())));
    }
    if k == 0 || k > t {
        return Err(Error::param(format!("cannot form {k} clusters from {t} samples")));
    }
    if k == 1 {
        return Ok(vec![0; t]);
    }
    let eig = SymmetricEigen::new(l.clone());
    let order: Vec<usize> = (0..t)
        .sorted_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))
        .take(k)
        .collect();
    let mut emb = DMatrix::from_fn(t, k, |i, j| eig.eigenvectors[(i, order[j])]);
    for mut row in emb.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    let mut rng = seeds::rng(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (labels, inertia) = kmeans_once(&emb, k, &mut rng);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((labels, inertia));
        }
    }
    Ok(best.expect("at least one restart").0)
}

fn dense_ids(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let ids = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

/// Percentage of samples correctly labeled under the best matching of
/// predicted to true labels. Exact permutation search up to 8 labels,
/// Hungarian assignment beyond.
pub fn cluster_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Ok(100.0);
    }
    let (p, kp) = dense_ids(pred);
    let (q, kq) = dense_ids(truth);
    let n = kp.max(kq);
    let mut counts = vec![vec![0i64; n]; n];
    for (a, b) in p.iter().zip(&q) {
        counts[*a][*b] += 1;
    }
    let matched = if n <= 8 {
        (0..n)
            .permutations(n)
            .map(|perm| perm.iter().enumerate().map(|(i, &j)| counts[i][j]).sum::<i64>())
            .max()
            .unwrap_or(0)
    } else {
        let weights = Matrix::from_rows(counts.iter().map(|r| r.iter().map(|c| -c).collect::<Vec<i64>>()))
            .map_err(|e| Error::Data(format!("contingency matrix: {e:?}")))?;
        -kuhn_munkres_min(&weights).0
    };
    Ok(100.0 * matched as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `qhuber`, or `l2` for the baseline.
    pub series: String,
    pub tau: Option<f64>,
    pub accuracy: f64,
    pub laplacian_psd: bool,
    pub zero_diagonal: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Range of accuracies over `tau` in `[0.25, 0.75]`: empirical limits on
    /// the median performance.
    pub band: Option<(f64, f64)>,
}

impl SweepReport {
    pub fn baseline(&self) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.series == "l2")
    }

    pub fn at_tau(&self, tau: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.tau == Some(tau))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("series,tau,accuracy\n");
        for r in &self.rows {
            let tau = r.tau.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", r.series, tau, r.accuracy);
        }
        if let Some((lo, hi)) = self.band {
            let _ = writeln!(out, "band_low,,{lo}");
            let _ = writeln!(out, "band_high,,{hi}");
        }
        out
    }
}

/// Default sparsity weight `0.01 / sqrt(T)`.
pub fn default_sweep_lambda(samples: usize) -> f64 {
    0.01 / (samples.max(1) as f64).sqrt()
}

/// Clusters with one graph per misfit and scores against the labels.
pub fn cluster_with(task: &ClusteringTask, misfit: &Misfit, lam: f64, seed: u64, opts: &SolverOptions) -> Result<SweepRow> {
    let graph = l1_graph(&task.x, misfit, lam, opts)?;
    let lap = laplacian(&graph)?;
    let labels = spectral_cluster(&lap, task.k, seed)?;
    Ok(SweepRow {
        series: String::new(),
        tau: None,
        accuracy: cluster_accuracy(&labels, &task.labels)?,
        laplacian_psd: is_symmetric_psd(&lap),
        zero_diagonal: graph.diagonal().iter().all(|&v| v == 0.0),
    })
}

/// Quantile-Huber l1 graphs for each `tau`, plus an l2 baseline.
pub fn quantile_sweep(
    task: &ClusteringTask,
    taus: &[f64],
    kappa: f64,
    lam: f64,
    seed: u64,
    opts: &SolverOptions,
) -> Result<SweepReport> {
    let cluster_seed = seeds::derive(seed, "spectral");
    let mut report = SweepReport::default();
    for &tau in taus {
        let misfit = Misfit::from(PenaltySpec::quantile_huber(tau, kappa)?);
        let mut row = cluster_with(task, &misfit, lam, cluster_seed, opts)?;
        row.series = "qhuber".into();
        row.tau = Some(tau);
        report.rows.push(row);
    }
    let mut base = cluster_with(task, &Misfit::from(PenaltySpec::L2), lam, cluster_seed, opts)?;
    base.series = "l2".into();
    report.rows.push(base);
    let inner: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.tau.is_some_and(|t| (0.25..=0.75).contains(&t)))
        .map(|r| r.accuracy)
        .collect();
    if !inner.is_empty() {
        report.band = Some((
            inner.iter().cloned().fold(f64::INFINITY, f64::min),
            inner.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laplacian_examples() {
        let z = DMatrix::zeros(3, 3);
        assert_eq!(laplacian(&z).unwrap(), DMatrix::identity(3, 3));
        assert_eq!(laplacian(&DMatrix::identity(3, 3)).unwrap(), DMatrix::zeros(3, 3));
        let a = DMatrix::from_fn(5, 5, |i, j| ((i * 3 + j * 7) % 5) as f64 * 0.3 - 0.5);
        assert!(is_symmetric_psd(&laplacian(&a).unwrap()));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(cluster_accuracy(&[0, 1, 1, 2], &[0, 1, 1, 2]).unwrap(), 100.0);
        assert_eq!(cluster_accuracy(&[1, 0, 0, 2], &[0, 1, 1, 2]).unwrap(), 100.0);
        assert_eq!(cluster_accuracy(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 50.0);
        assert!(cluster_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn hungarian_agrees_with_enumeration() {
        // Nine labels forces the assignment path; a relabeling must score 100.
        let truth: Vec<usize> = (0..27).map(|i| i % 9).collect();
        let pred: Vec<usize> = truth.iter().map(|l| (l * 4 + 1) % 9).collect();
        assert_eq!(cluster_accuracy(&pred, &truth).unwrap(), 100.0);
        let mut noisy = pred.clone();
        noisy[0] = (noisy[0] + 1) % 9;
        assert!((cluster_accuracy(&noisy, &truth).unwrap() - 100.0 * 26.0 / 27.0).abs() < 1e-12);
    }

    #[test]
    fn disconnected_graph_is_split_exactly() {
        let mut a = DMatrix::zeros(6, 6);
        for (i, j) in [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)] {
            a[(i, j)] = 0.5;
            a[(j, i)] = 0.5;
        }
        // Row-stochastic blocks make (I - A) singular on each component.
        for i in 0..6 {
            let s: f64 = a.row(i).sum();
            a.row_mut(i).scale_mut(1.0 / s);
        }
        let l = laplacian(&a.transpose()).unwrap();
        let labels = spectral_cluster(&l, 2, 1).unwrap();
        assert_eq!(cluster_accuracy(&labels, &[0, 0, 0, 1, 1, 1]).unwrap(), 100.0);
        assert_eq!(spectral_cluster(&l, 1, 1).unwrap(), vec![0; 6]);
        assert!(spectral_cluster(&l, 7, 1).is_err());
    }

    #[test]
    fn l1_graph_examples() {
        let opts = SolverOptions::default();
        let l2 = Misfit::from(PenaltySpec::L2);
        let twins = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let g = l1_graph(&twins, &l2, 1e-3, &opts).unwrap();
        assert!((g[(1, 0)] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((g[(0, 1)] - (1.0 - 1e-3)).abs() < 1e-6);
        assert_eq!(g[(0, 0)], 0.0);
        let ortho = DMatrix::identity(3, 3);
        let g = l1_graph(&ortho, &l2, 10.0, &opts).unwrap();
        assert!(g.amax() < 1e-8);
    }

    #[test]
    fn median_quantile_huber_matches_scaled_huber() {
        // qhuber(0.5, k) = huber(k/2) / k, so lambda scales by k.
        let x = DMatrix::from_fn(4, 9, |i, j| (((i + 1) * (j + 2)) % 7) as f64 - 3.0);
        let labels: Vec<usize> = (0..9).map(|j| j % 3).collect();
        let task = ClusteringTask::from_table(&x.transpose(), labels).unwrap();
        let opts = SolverOptions::default();
        let kappa = 0.2;
        let lam = 0.01;
        let q = cluster_with(&task, &Misfit::from(PenaltySpec::quantile_huber(0.5, kappa).unwrap()), lam, 3, &opts).unwrap();
        let h = cluster_with(&task, &Misfit::from(PenaltySpec::huber(kappa / 2.0).unwrap()), lam * kappa, 3, &opts).unwrap();
        assert_eq!(q.accuracy, h.accuracy);
    }

    #[test]
    fn single_class_is_perfect() {
        let x = DMatrix::from_fn(3, 6, |i, j| ((i * 5 + j * 2) % 7) as f64);
        let task = ClusteringTask::from_table(&x.transpose(), vec![4; 6]).unwrap();
        let report = quantile_sweep(&task, &[0.3, 0.7], 0.1, 0.01, 0, &SolverOptions::default()).unwrap();
        assert!(report.rows.iter().all(|r| r.accuracy == 100.0));
        assert_eq!(report.rows.len(), 3);
    }
}
