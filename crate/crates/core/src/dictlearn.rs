//! Dictionary learning by block-coordinate descent.
//!
//! Each outer iteration re-solves every code column with the interior-point
//! solver, then sweeps the dictionary columns in ascending order. A column
//! update splits into one smooth scalar problem per row, solved by L-BFGS.
//! Every block step is accepted only when it does not increase its part of
//! the objective, so the recorded history is nonincreasing.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipsolve::{solve_code_batch, SolverOptions};
use crate::lbfgs::{minimize_scalar, LbfgsOptions};
use crate::penalties::Misfit;
use crate::seeds;

/// How `Y_j = Y - D_{/j} A_{/j}` is formed during a dictionary sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Keep `Y - D A` and add back / subtract the current column.
    #[default]
    Incremental,
    /// Recompute from scratch for every column.
    Recompute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub atoms: usize,
    pub misfit: Misfit,
    pub lam: f64,
    /// Moreau parameter applied to a nonsmooth misfit before learning.
    pub smoothing_gamma: f64,
    pub outer_max: usize,
    pub outer_rtol: f64,
    pub seed: u64,
    /// Keep dictionary columns in the unit ball.
    pub normalize_columns: bool,
    pub solver: SolverOptions,
    pub residual_mode: ResidualMode,
    /// After learning with a smoothed misfit, re-solve the codes with the
    /// original one.
    pub resolve_unsmoothed: bool,
}

impl LearnConfig {
    pub fn new(atoms: usize, misfit: Misfit) -> Self {
        Self {
            atoms,
            misfit,
            lam: 0.1,
            smoothing_gamma: 0.0,
            outer_max: 100,
            outer_rtol: 1e-6,
            seed: 0,
            normalize_columns: true,
            solver: SolverOptions::default(),
            residual_mode: ResidualMode::Incremental,
            resolve_unsmoothed: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.atoms == 0 {
            return Err(Error::param("number of atoms must be >= 1"));
        }
        if !(self.lam >= 0.0 && self.lam.is_finite()) {
            return Err(Error::param(format!("lambda must be >= 0, got {}", self.lam)));
        }
        if !(self.smoothing_gamma >= 0.0 && self.smoothing_gamma.is_finite()) {
            return Err(Error::param("smoothing gamma must be >= 0"));
        }
        if self.outer_rtol.is_nan() || self.outer_rtol < 0.0 {
            return Err(Error::param("outer rtol must be >= 0"));
        }
        self.solver.validate()?;
        for loss in self.misfit.losses() {
            if let crate::penalties::Loss::Plain(p) = loss {
                p.validate()?;
            }
        }
        if !self.misfit.is_smooth() && self.smoothing_gamma == 0.0 {
            return Err(Error::param(format!(
                "misfit '{}' is nonsmooth; learning needs smoothing_gamma > 0",
                self.misfit
            )));
        }
        Ok(())
    }

    /// The misfit actually optimized: smoothed when the configured one is
    /// nonsmooth.
    pub fn effective_misfit(&self) -> Result<Misfit> {
        if self.misfit.is_smooth() {
            Ok(self.misfit.clone())
        } else {
            self.misfit.smoothed(self.smoothing_gamma)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    RelativeDecrease,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct LearnState {
    pub dictionary: DMatrix<f64>,
    pub codes: DMatrix<f64>,
    /// Objective before the first iteration followed by one entry per outer
    /// iteration.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    /// Atoms skipped in the last sweep because their code row was zero.
    pub dead_atoms: Vec<usize>,
    /// Columns whose code update failed in the last iteration.
    pub failed_columns: usize,
    pub misfit: Misfit,
    /// Codes re-solved with the unsmoothed misfit, when requested.
    pub unsmoothed_codes: Option<DMatrix<f64>>,
}

fn column_norm(d: &DMatrix<f64>, j: usize) -> f64 {
    d.column(j).norm()
}

/// Samples `k` distinct nonzero columns of `y` and scales them to unit norm.
/// When `y` has fewer than `k` nonzero columns, the rest are seeded random
/// unit vectors.
pub fn init_dictionary(y: &DMatrix<f64>, k: usize, seed: u64) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(Error::param("number of atoms must be >= 1"));
    }
    let nonzero: Vec<usize> = (0..y.ncols()).filter(|&t| column_norm(y, t) > 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::Data("all columns of the data matrix are zero".into()));
    }
    let mut rng = seeds::rng(seed);
    let take = k.min(nonzero.len());
    let picks = sample(&mut rng, nonzero.len(), take).into_vec();
    let mut d = DMatrix::zeros(y.nrows(), k);
    for (j, &p) in picks.iter().enumerate() {
        let col = y.column(nonzero[p]);
        d.set_column(j, &(col / col.norm()));
    }
    for j in take..k {
        let mut v = DVector::from_fn(y.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
        if v.norm() == 0.0 {
            v[0] = 1.0;
        }
        d.set_column(j, &(&v / v.norm()));
    }
    Ok(d)
}

/// `sum_t misfit(r_t)` over the columns of a residual matrix.
pub fn matrix_misfit(misfit: &Misfit, resid: &DMatrix<f64>) -> f64 {
    (0..resid.ncols())
        .map(|t| misfit.value(resid.column(t).as_slice()))
        .sum()
}

/// `misfit(Y - D A) + lam * |A|_1`.
pub fn objective(y: &DMatrix<f64>, d: &DMatrix<f64>, a: &DMatrix<f64>, misfit: &Misfit, lam: f64) -> f64 {
    matrix_misfit(misfit, &(y - d * a)) + lam * a.iter().map(|v| v.abs()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnUpdate {
    pub column: DVector<f64>,
    /// Largest quasi-Newton iteration count over the rows.
    pub iterations: usize,
    /// Infinity norm of the column gradient at the returned column.
    pub grad_norm: f64,
    /// The code row was zero and the column was left unchanged.
    pub dead: bool,
}

/// Minimizes `misfit(Y_j - d a_j^T)` over `d`, one independent scalar problem
/// per row.
pub fn update_column(
    yj: &DMatrix<f64>,
    aj: &DVector<f64>,
    dj_init: &DVector<f64>,
    misfit: &Misfit,
    opts: &LbfgsOptions,
) -> Result<ColumnUpdate> {
    let (m, t) = yj.shape();
    if aj.len() != t || dj_init.len() != m {
        return Err(Error::dim(format!(
            "column update with Y_j {:?}, code row of length {}, column of length {}",
            yj.shape(),
            aj.len(),
            dj_init.len()
        )));
    }
    misfit.check_len(m)?;
    if !misfit.is_smooth() {
        return Err(Error::Nonsmooth);
    }
    if aj.iter().all(|&v| v == 0.0) {
        return Ok(ColumnUpdate {
            column: dj_init.clone(),
            iterations: 0,
            grad_norm: 0.0,
            dead: true,
        });
    }
    let a: Vec<f64> = aj.iter().copied().collect();
    let rows: Vec<(f64, usize, f64)> = (0..m)
        .into_par_iter()
        .map(|k| {
            let loss = *misfit.loss_for_row(k).expect("misfit covers every row");
            let row: Vec<f64> = yj.row(k).iter().copied().collect();
            let eval = |d: f64| {
                let mut v = 0.0;
                let mut g = 0.0;
                for (y, at) in row.iter().zip(&a) {
                    let r = y - d * at;
                    v += loss.value(r);
                    g -= at * loss.derivative(r).expect("smooth loss");
                }
                (v, g)
            };
            let d0 = dj_init[k];
            let (v0, g0) = eval(d0);
            let res = minimize_scalar(eval, d0, opts);
            if res.value <= v0 {
                (res.x[0], res.iterations, res.grad_norm)
            } else {
                (d0, res.iterations, g0.abs())
            }
        })
        .collect();
    Ok(ColumnUpdate {
        column: DVector::from_iterator(m, rows.iter().map(|r| r.0)),
        iterations: rows.iter().map(|r| r.1).max().unwrap_or(0),
        grad_norm: rows.iter().map(|r| r.2).fold(0.0, f64::max),
        dead: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DictionaryOptions {
    pub normalize_columns: bool,
    pub residual_mode: ResidualMode,
    pub lbfgs: LbfgsOptions,
}

impl Default for DictionaryOptions {
    fn default() -> Self {
        Self {
            normalize_columns: true,
            residual_mode: ResidualMode::Incremental,
            lbfgs: LbfgsOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DictionaryUpdate {
    pub dictionary: DMatrix<f64>,
    pub dead_atoms: Vec<usize>,
    pub max_iterations: usize,
    /// Largest column-gradient norm over live atoms whose update was not
    /// changed by normalization.
    pub max_grad_norm: f64,
}

/// One ascending sweep of column updates.
pub fn update_dictionary(
    y: &DMatrix<f64>,
    d: &DMatrix<f64>,
    a: &DMatrix<f64>,
    misfit: &Misfit,
    opts: &DictionaryOptions,
) -> Result<DictionaryUpdate> {
    if y.nrows() != d.nrows() || d.ncols() != a.nrows() || a.ncols() != y.ncols() {
        return Err(Error::dim(format!(
            "Y {:?}, D {:?}, A {:?} are inconsistent",
            y.shape(),
            d.shape(),
            a.shape()
        )));
    }
    let mut d = d.clone();
    let mut resid = y - &d * a;
    let mut dead = Vec::new();
    let mut max_iterations = 0;
    let mut max_grad_norm: f64 = 0.0;
    for j in 0..d.ncols() {
        let aj: DVector<f64> = a.row(j).transpose();
        if aj.iter().all(|&v| v == 0.0) {
            dead.push(j);
            continue;
        }
        let old = d.column(j).into_owned();
        let yj = match opts.residual_mode {
            ResidualMode::Incremental => &resid + &old * aj.transpose(),
            ResidualMode::Recompute => {
                let mut others = d.clone();
                others.column_mut(j).fill(0.0);
                y - others * a
            }
        };
        let upd = update_column(&yj, &aj, &old, misfit, &opts.lbfgs)?;
        max_iterations = max_iterations.max(upd.iterations);
        let mut col = upd.column;
        let norm = col.norm();
        if opts.normalize_columns && norm > 1.0 {
            let projected = &col / norm;
            let before = matrix_misfit(misfit, &(&yj - &old * aj.transpose()));
            let after = matrix_misfit(misfit, &(&yj - &projected * aj.transpose()));
            col = if after <= before { projected } else { old.clone() };
        } else {
            max_grad_norm = max_grad_norm.max(upd.grad_norm);
        }
        d.set_column(j, &col);
        resid = match opts.residual_mode {
            ResidualMode::Incremental => yj - &col * aj.transpose(),
            ResidualMode::Recompute => y - &d * a,
        };
    }
    Ok(DictionaryUpdate {
        dictionary: d,
        dead_atoms: dead,
        max_iterations,
        max_grad_norm,
    })
}

/// Runs block-coordinate descent from a sampled initial dictionary.
pub fn learn(y: &DMatrix<f64>, config: &LearnConfig) -> Result<LearnState> {
    learn_with_observer(y, config, |_| Ok(()))
}

/// As [`learn`], calling `observer` after every outer iteration (used for
/// checkpointing).
pub fn learn_with_observer<F>(y: &DMatrix<f64>, config: &LearnConfig, mut observer: F) -> Result<LearnState>
where
    F: FnMut(&LearnState) -> Result<()>,
{
    config.validate()?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("data matrix has non-finite entries".into()));
    }
    config.misfit.check_len(y.nrows())?;
    let misfit = config.effective_misfit()?;
    let dictionary = init_dictionary(y, config.atoms, config.seed)?;
    let codes = DMatrix::zeros(config.atoms, y.ncols());
    let start = objective(y, &dictionary, &codes, &misfit, config.lam);
    let mut state = LearnState {
        dictionary,
        codes,
        objective_history: vec![start],
        iterations: 0,
        converged: false,
        stop_reason: StopReason::MaxIterations,
        dead_atoms: Vec::new(),
        failed_columns: 0,
        misfit: misfit.clone(),
        unsmoothed_codes: None,
    };
    let dict_opts = DictionaryOptions {
        normalize_columns: config.normalize_columns,
        residual_mode: config.residual_mode,
        lbfgs: LbfgsOptions::default(),
    };

    for iter in 1..=config.outer_max {
        state.failed_columns = code_step(y, &mut state, &misfit, config, iter)?;
        let upd = update_dictionary(y, &state.dictionary, &state.codes, &misfit, &dict_opts)?;
        state.dictionary = upd.dictionary;
        state.dead_atoms = upd.dead_atoms;
        state.iterations = iter;

        let prev = *state.objective_history.last().expect("history starts non-empty");
        let cur = objective(y, &state.dictionary, &state.codes, &misfit, config.lam);
        state.objective_history.push(cur);
        let rel = if prev.abs() > 0.0 { (prev - cur) / prev.abs() } else { 0.0 };
        if rel < config.outer_rtol {
            state.converged = true;
            state.stop_reason = StopReason::RelativeDecrease;
        }
        observer(&state)?;
        if state.converged {
            break;
        }
    }

    if config.resolve_unsmoothed && !config.misfit.is_smooth() {
        let batch = solve_code_batch(&state.dictionary, y, &config.misfit, config.lam, None, &config.solver)?;
        if let Some(err) = batch.failures.into_iter().next() {
            return Err(err);
        }
        state.unsmoothed_codes = Some(batch.codes);
    }
    Ok(state)
}

/// Re-solves all codes, keeping a column's previous code when the new one is
/// not at least as good. Returns the number of failed columns.
fn code_step(
    y: &DMatrix<f64>,
    state: &mut LearnState,
    misfit: &Misfit,
    config: &LearnConfig,
    iteration: usize,
) -> Result<usize> {
    let d = &state.dictionary;
    let batch = solve_code_batch(d, y, misfit, config.lam, None, &config.solver)?;
    let total = y.ncols();
    let failed = batch.failures.len();
    if 2 * failed > total {
        return Err(Error::CodeUpdateFailed {
            failed,
            total,
            iteration,
        });
    }
    let column_objective = |t: usize, a: &DVector<f64>| {
        let r = y.column(t) - d * a;
        misfit.value(r.as_slice()) + config.lam * a.lp_norm(1)
    };
    let keep: Vec<bool> = (0..total)
        .into_par_iter()
        .map(|t| {
            if batch.states[t].is_none() {
                return true;
            }
            let new = batch.codes.column(t).into_owned();
            let old = state.codes.column(t).into_owned();
            column_objective(t, &new) > column_objective(t, &old)
        })
        .collect();
    for (t, keep_old) in keep.into_iter().enumerate() {
        if !keep_old {
            state.codes.set_column(t, &batch.codes.column(t));
        }
    }
    Ok(failed)
}
