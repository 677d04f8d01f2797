//! Interior-point solver for `min_y rho(y)  s.t.  A y <= a` with `rho` given
//! in conjugate form.
//!
//! The solver works on the saddle-point KKT system
//!
//! ```text
//! 0 = B^T u + A^T w            (stationarity in y)
//! 0 = b + B y - M u - C^T q    (stationarity in u)
//! 0 = C u + s - c              (conjugate feasibility)
//! 0 = A y + r - a              (primal feasibility)
//! 0 = q_i s_i,  q, s >= 0
//! 0 = w_i r_i,  w, r >= 0
//! ```
//!
//! relaxing the two complementarity blocks to `mu` and taking damped Newton
//! steps. Each step eliminates `(s, q, r, w)` and then `u`, leaving a dense
//! symmetric `n x n` system. The `u`-block matrix `M + C^T diag(q/s) C` is
//! split into independent diagonal blocks found from the sparsity of `M` and
//! `C`, which for zoo penalties are all 1x1.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalties::{Misfit, PenaltySpec};
use crate::plq::PlqRep;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when every KKT block has infinity norm at most `tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Centering factor applied to `mu` after each Newton step.
    pub sigma: f64,
    /// Fraction-to-boundary factor keeping slacks and duals positive.
    pub boundary_fraction: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            sigma: 0.1,
            boundary_fraction: 0.995,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::param("solver tolerance must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::param("solver max_iter must be >= 1"));
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::param("centering sigma must lie in (0,1)"));
        }
        if !(self.boundary_fraction > 0.0 && self.boundary_fraction < 1.0) {
            return Err(Error::param("boundary fraction must lie in (0,1)"));
        }
        Ok(())
    }
}

/// `min_y rho(y)` subject to `acon * y <= arhs`.
#[derive(Debug, Clone)]
pub struct ModelProblem {
    rep: PlqRep,
    acon: DMatrix<f64>,
    arhs: DVector<f64>,
}

impl ModelProblem {
    pub fn new(rep: PlqRep, acon: DMatrix<f64>, arhs: DVector<f64>) -> Result<Self> {
        if acon.nrows() != arhs.len() || acon.ncols() != rep.n() {
            return Err(Error::dim(format!(
                "constraint matrix is {:?} with {} right-hand sides, problem dimension {}",
                acon.shape(),
                arhs.len(),
                rep.n()
            )));
        }
        Ok(Self { rep, acon, arhs })
    }

    pub fn unconstrained(rep: PlqRep) -> Self {
        let n = rep.n();
        Self {
            rep,
            acon: DMatrix::zeros(0, n),
            arhs: DVector::zeros(0),
        }
    }

    pub fn rep(&self) -> &PlqRep {
        &self.rep
    }

    pub fn constraint_matrix(&self) -> &DMatrix<f64> {
        &self.acon
    }

    pub fn constraint_rhs(&self) -> &DVector<f64> {
        &self.arhs
    }

    pub fn objective(&self, y: &DVector<f64>) -> Result<f64> {
        self.rep.eval(y)
    }
}

/// Infinity norms of the six KKT blocks, complementarity unrelaxed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity_y: f64,
    pub stationarity_u: f64,
    pub conjugate_feasibility: f64,
    pub primal_feasibility: f64,
    pub conjugate_complementarity: f64,
    pub primal_complementarity: f64,
}

impl KktResiduals {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.stationarity_y,
            self.stationarity_u,
            self.conjugate_feasibility,
            self.primal_feasibility,
            self.conjugate_complementarity,
            self.primal_complementarity,
        ]
    }

    pub fn max(&self) -> f64 {
        self.as_array().into_iter().fold(0.0, f64::max)
    }
}

/// Interior-point iterate together with its optimality certificate.
#[derive(Debug, Clone)]
pub struct IpState {
    pub y: DVector<f64>,
    pub u: DVector<f64>,
    pub q: DVector<f64>,
    pub s: DVector<f64>,
    pub w: DVector<f64>,
    pub r: DVector<f64>,
    pub mu: f64,
    pub kkt_residual: f64,
    pub residuals: KktResiduals,
    pub iterations: usize,
    pub mu_history: Vec<f64>,
    /// The point came from the active-set solve rather than the interior
    /// iteration; slacks and multipliers may then be exactly zero.
    pub polished: bool,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Borrowed view of the data the Newton iteration works on.
struct Kkt<'a> {
    cons: &'a DMatrix<f64>,
    bounds: &'a DVector<f64>,
    curvature: &'a DMatrix<f64>,
    offset: DVector<f64>,
    linear: &'a DMatrix<f64>,
    acon: &'a DMatrix<f64>,
    arhs: &'a DVector<f64>,
    layout: Layout,
}

struct UBlock {
    idx: Vec<usize>,
    crow: Vec<usize>,
}

/// Block partition of the `u` variables plus the row layout of `B` used to
/// assemble `B^T T^{-1} B`.
struct Layout {
    blocks: Vec<UBlock>,
    /// Singleton blocks whose `B` row is dense enough for a matrix product.
    dense_rows: Vec<usize>,
    dense_b: DMatrix<f64>,
    /// Singleton blocks with sparse `B` rows: (row, nonzero columns).
    sparse_rows: Vec<(usize, Vec<usize>)>,
    /// Blocks with more than one `u` coordinate.
    multi: Vec<usize>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        parent[ra.max(rb)] = ra.min(rb);
    }
}

impl Layout {
    fn new(cons: &DMatrix<f64>, curvature: &DMatrix<f64>, linear: &DMatrix<f64>) -> Self {
        let m = curvature.nrows();
        let n = linear.ncols();
        let mut parent: Vec<usize> = (0..m).collect();
        for j in 0..m {
            for i in (j + 1)..m {
                if curvature[(i, j)] != 0.0 {
                    union(&mut parent, i, j);
                }
            }
        }
        let mut row_anchor = vec![usize::MAX; cons.nrows()];
        for k in 0..cons.nrows() {
            let mut first = None;
            for j in 0..m {
                if cons[(k, j)] != 0.0 {
                    match first {
                        None => first = Some(j),
                        Some(f) => union(&mut parent, f, j),
                    }
                }
            }
            row_anchor[k] = first.unwrap_or(usize::MAX);
        }
        let mut block_of = vec![usize::MAX; m];
        let mut blocks: Vec<UBlock> = Vec::new();
        for i in 0..m {
            let root = find(&mut parent, i);
            if block_of[root] == usize::MAX {
                block_of[root] = blocks.len();
                blocks.push(UBlock {
                    idx: Vec::new(),
                    crow: Vec::new(),
                });
            }
            let b = block_of[root];
            block_of[i] = b;
            blocks[b].idx.push(i);
        }
        for (k, &anchor) in row_anchor.iter().enumerate() {
            // All-zero constraint rows do not couple anything; keep them with
            // the first block so their slack still takes part in the system.
            let b = if anchor == usize::MAX { 0 } else { block_of[anchor] };
            if let Some(block) = blocks.get_mut(b) {
                block.crow.push(k);
            }
        }

        let mut dense_rows = Vec::new();
        let mut sparse_rows = Vec::new();
        let mut multi = Vec::new();
        for (bi, block) in blocks.iter().enumerate() {
            if block.idx.len() > 1 {
                multi.push(bi);
                continue;
            }
            let row = block.idx[0];
            let nz: Vec<usize> = (0..n).filter(|&j| linear[(row, j)] != 0.0).collect();
            if nz.len() * 4 > n {
                dense_rows.push(row);
            } else if !nz.is_empty() {
                sparse_rows.push((row, nz));
            }
        }
        let mut dense_b = DMatrix::zeros(dense_rows.len(), n);
        for (k, &row) in dense_rows.iter().enumerate() {
            dense_b.row_mut(k).copy_from(&linear.row(row));
        }
        Layout {
            blocks,
            dense_rows,
            dense_b,
            sparse_rows,
            multi,
        }
    }
}

/// Factorization of one diagonal block of `T = M + C^T diag(q/s) C`.
enum BlockFactor {
    Scalar(f64),
    Chol(Cholesky<f64, Dyn>),
}

struct Iterate {
    y: DVector<f64>,
    u: DVector<f64>,
    q: DVector<f64>,
    s: DVector<f64>,
    w: DVector<f64>,
    r: DVector<f64>,
}

struct Residual {
    dual_y: DVector<f64>,
    dual_u: DVector<f64>,
    conj_feas: DVector<f64>,
    primal_feas: DVector<f64>,
    conj_comp: DVector<f64>,
    primal_comp: DVector<f64>,
}

impl Residual {
    fn norm(&self) -> f64 {
        [
            &self.dual_y,
            &self.dual_u,
            &self.conj_feas,
            &self.primal_feas,
            &self.conj_comp,
            &self.primal_comp,
        ]
        .iter()
        .map(|v| inf_norm(v))
        .fold(0.0, f64::max)
    }
}

impl<'a> Kkt<'a> {
    fn residual(&self, it: &Iterate, mu: f64) -> Residual {
        let dual_y = self.linear.tr_mul(&it.u) + self.acon.tr_mul(&it.w);
        let dual_u = &self.offset + self.linear * &it.y - self.curvature * &it.u - self.cons.tr_mul(&it.q);
        let conj_feas = self.cons * &it.u + &it.s - self.bounds;
        let primal_feas = self.acon * &it.y + &it.r - self.arhs;
        let conj_comp = it.q.component_mul(&it.s).add_scalar(-mu);
        let primal_comp = it.w.component_mul(&it.r).add_scalar(-mu);
        Residual {
            dual_y,
            dual_u,
            conj_feas,
            primal_feas,
            conj_comp,
            primal_comp,
        }
    }

    fn certificate(&self, it: &Iterate) -> KktResiduals {
        let res = self.residual(it, 0.0);
        KktResiduals {
            stationarity_y: inf_norm(&res.dual_y),
            stationarity_u: inf_norm(&res.dual_u),
            conjugate_feasibility: inf_norm(&res.conj_feas),
            primal_feasibility: inf_norm(&res.primal_feas),
            conjugate_complementarity: inf_norm(&res.conj_comp),
            primal_complementarity: inf_norm(&res.primal_comp),
        }
    }

    fn initial(&self) -> Iterate {
        let m = self.curvature.nrows();
        let n = self.linear.ncols();
        let y = DVector::zeros(n);
        let u = DVector::zeros(m);
        // u = 0 (and y = 0) when strictly feasible, otherwise an infeasible
        // start with unit-scale slacks.
        let s = DVector::from_fn(self.bounds.len(), |i, _| {
            let c = self.bounds[i];
            if c > 0.0 {
                c
            } else {
                c.abs().max(1.0)
            }
        });
        let r = DVector::from_fn(self.arhs.len(), |i, _| {
            let a = self.arhs[i];
            if a > 0.0 {
                a
            } else {
                a.abs().max(1.0)
            }
        });
        let pairs = s.len() + r.len();
        let mu0 = if pairs == 0 {
            0.0
        } else {
            (s.sum() + r.sum()) / pairs as f64
        };
        let q = s.map(|si| mu0 / si);
        let w = r.map(|ri| mu0 / ri);
        Iterate { y, u, q, s, w, r }
    }

    fn factor_blocks(&self, sigma_c: &DVector<f64>) -> Result<Vec<BlockFactor>> {
        self.layout
            .blocks
            .iter()
            .map(|block| {
                if block.idx.len() == 1 {
                    let j = block.idx[0];
                    let mut t = self.curvature[(j, j)];
                    for &k in &block.crow {
                        let cj = self.cons[(k, j)];
                        t += sigma_c[k] * cj * cj;
                    }
                    if !(t > 0.0 && t.is_finite()) {
                        return Err(Error::Singular(format!("conjugate block at u[{j}] has curvature {t:e}")));
                    }
                    Ok(BlockFactor::Scalar(t))
                } else {
                    let d = block.idx.len();
                    let mut t = DMatrix::from_fn(d, d, |a, b| self.curvature[(block.idx[a], block.idx[b])]);
                    for &k in &block.crow {
                        for a in 0..d {
                            let ca = self.cons[(k, block.idx[a])];
                            if ca == 0.0 {
                                continue;
                            }
                            for b in 0..d {
                                t[(a, b)] += sigma_c[k] * ca * self.cons[(k, block.idx[b])];
                            }
                        }
                    }
                    Cholesky::new(t).map(BlockFactor::Chol).ok_or_else(|| {
                        Error::Singular(format!("conjugate block of size {d} is not positive definite"))
                    })
                }
            })
            .collect()
    }

    /// Applies `T^{-1}` to a vector indexed like `u`.
    fn solve_t(&self, factors: &[BlockFactor], v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for (block, f) in self.layout.blocks.iter().zip(factors) {
            match f {
                BlockFactor::Scalar(t) => {
                    let j = block.idx[0];
                    out[j] = v[j] / t;
                }
                BlockFactor::Chol(ch) => {
                    let sub = DVector::from_iterator(block.idx.len(), block.idx.iter().map(|&j| v[j]));
                    let x = ch.solve(&sub);
                    for (k, &j) in block.idx.iter().enumerate() {
                        out[j] = x[k];
                    }
                }
            }
        }
        out
    }

    /// `B^T T^{-1} B + A^T diag(sigma_a) A`.
    fn reduced_matrix(&self, factors: &[BlockFactor], sigma_a: &DVector<f64>) -> DMatrix<f64> {
        let n = self.linear.ncols();
        let mut omega = DMatrix::zeros(n, n);
        let layout = &self.layout;
        // Scalar curvature per u-row, filled from the block factors.
        let mut tdiag = vec![0.0; self.curvature.nrows()];
        for (block, f) in layout.blocks.iter().zip(factors) {
            if let BlockFactor::Scalar(t) = f {
                tdiag[block.idx[0]] = *t;
            }
        }
        if !layout.dense_rows.is_empty() {
            let mut scaled = layout.dense_b.clone();
            for (k, &row) in layout.dense_rows.iter().enumerate() {
                let f = 1.0 / tdiag[row].sqrt();
                scaled.row_mut(k).scale_mut(f);
            }
            omega.gemm_tr(1.0, &scaled, &scaled, 0.0);
        }
        for (row, nz) in &layout.sparse_rows {
            let w = 1.0 / tdiag[*row];
            for &a in nz {
                let ba = self.linear[(*row, a)] * w;
                for &b in nz {
                    omega[(a, b)] += ba * self.linear[(*row, b)];
                }
            }
        }
        for &bi in &layout.multi {
            let block = &layout.blocks[bi];
            if let BlockFactor::Chol(ch) = &factors[bi] {
                let bb = DMatrix::from_fn(block.idx.len(), n, |a, j| self.linear[(block.idx[a], j)]);
                let x = ch.solve(&bb);
                omega.gemm_tr(1.0, &bb, &x, 1.0);
            }
        }
        if self.acon.nrows() > 0 {
            let mut scaled = self.acon.clone();
            for k in 0..scaled.nrows() {
                scaled.row_mut(k).scale_mut(sigma_a[k].sqrt());
            }
            omega.gemm_tr(1.0, &scaled, &scaled, 1.0);
        }
        omega
    }

    fn newton_direction(&self, it: &Iterate, res: &Residual) -> Result<Iterate> {
        let sigma_c = it.q.component_div(&it.s);
        let sigma_a = it.w.component_div(&it.r);
        let inner = sigma_c.component_mul(&res.conj_feas) - res.conj_comp.component_div(&it.s);
        let g2 = &res.dual_u - self.cons.tr_mul(&inner);
        let factors = self.factor_blocks(&sigma_c)?;
        let tg2 = self.solve_t(&factors, &g2);

        let n = self.linear.ncols();
        let dy = if n == 0 {
            DVector::zeros(0)
        } else {
            let omega = self.reduced_matrix(&factors, &sigma_a);
            let primal_inner = sigma_a.component_mul(&res.primal_feas) - res.primal_comp.component_div(&it.r);
            let rhs = -&res.dual_y - self.linear.tr_mul(&tg2) - self.acon.tr_mul(&primal_inner);
            match Cholesky::new(omega.clone()) {
                Some(ch) => ch.solve(&rhs),
                None => omega
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::Singular("reduced system is singular; is the penalty injective?".into()))?,
            }
        };
        let du = self.solve_t(&factors, &(self.linear * &dy + &g2));
        let ds = -&res.conj_feas - self.cons * &du;
        let dq = (-&res.conj_comp - it.q.component_mul(&ds)).component_div(&it.s);
        let dr = -&res.primal_feas - self.acon * &dy;
        let dw = (-&res.primal_comp - it.w.component_mul(&dr)).component_div(&it.r);
        Ok(Iterate {
            y: dy,
            u: du,
            q: dq,
            s: ds,
            w: dw,
            r: dr,
        })
    }

    fn max_step(it: &Iterate, d: &Iterate, fraction: f64) -> f64 {
        let mut alpha: f64 = 1.0;
        for (x, dx) in [(&it.q, &d.q), (&it.s, &d.s), (&it.w, &d.w), (&it.r, &d.r)] {
            for (xi, dxi) in x.iter().zip(dx.iter()) {
                if *dxi < 0.0 {
                    alpha = alpha.min(-fraction * xi / dxi);
                }
            }
        }
        alpha
    }

    /// Runs the damped Newton iteration. Returns the final iterate, its
    /// certificate, the mu history and the iteration count, or the best
    /// iterate seen when the budget runs out.
    fn run(&self, opts: &SolverOptions) -> Result<IpState> {
        let mut it = self.initial();
        let pairs = it.s.len() + it.r.len();
        let gap = |it: &Iterate| {
            if pairs == 0 {
                0.0
            } else {
                (it.q.dot(&it.s) + it.w.dot(&it.r)) / pairs as f64
            }
        };
        let floor = opts.tol / 10.0;
        let mut mu = gap(&it);
        let mut mu_history = vec![mu];
        let mut best: Option<IpState> = None;

        for iter in 0..=opts.max_iter {
            let cert = self.certificate(&it);
            let kkt = cert.max();
            let state = IpState {
                y: it.y.clone(),
                u: it.u.clone(),
                q: it.q.clone(),
                s: it.s.clone(),
                w: it.w.clone(),
                r: it.r.clone(),
                mu,
                kkt_residual: kkt,
                residuals: cert,
                iterations: iter,
                mu_history: mu_history.clone(),
                polished: false,
            };
            if kkt <= opts.tol {
                return Ok(state);
            }
            if !kkt.is_finite() || inf_norm(&it.u) > 1e12 {
                return Err(Error::InfiniteValue);
            }
            if inf_norm(&it.w) > 1e12 {
                return Err(Error::Infeasible);
            }
            if best.as_ref().is_none_or(|b| kkt < b.kkt_residual) {
                best = Some(state);
            }
            if iter == opts.max_iter {
                break;
            }

            let res = self.residual(&it, mu);
            let merit = res.norm();
            let d = self.newton_direction(&it, &res)?;
            let mut alpha = Self::max_step(&it, &d, opts.boundary_fraction);
            let mut trial = step(&it, &d, alpha);
            for _ in 0..30 {
                if self.residual(&trial, mu).norm() <= 10.0 * merit {
                    break;
                }
                alpha *= 0.5;
                trial = step(&it, &d, alpha);
            }
            it = trial;
            if pairs > 0 {
                mu = (opts.sigma * mu.min(gap(&it))).max(floor);
            }
            mu_history.push(mu);
        }

        let best = best.expect("at least one iterate is recorded");
        if best.residuals.primal_feasibility > opts.tol.sqrt() {
            return Err(Error::Infeasible);
        }
        Err(Error::NotConverged {
            iterations: opts.max_iter,
            residual: best.kkt_residual,
            best: Box::new(best),
        })
    }
}

impl Kkt<'_> {
    /// Solves the KKT equalities with the complementarity pairs fixed by the
    /// interior solution (`s < q` and `r < w` mark active constraints). The
    /// interior iterate sits on the central path at `mu = tol / 10`; the
    /// polished point is the exact solution when the active sets are right.
    fn polish(&self, state: &IpState) -> Option<Iterate> {
        let n = self.linear.ncols();
        let m = self.curvature.nrows();
        let crows: Vec<usize> = (0..state.s.len()).filter(|&i| state.s[i] < state.q[i]).collect();
        let arows: Vec<usize> = (0..state.r.len()).filter(|&i| state.r[i] < state.w[i]).collect();
        let (k, l) = (crows.len(), arows.len());
        let dim = n + m + k + l;
        let mut sys = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        // B^T u + A_B^T w_B = 0
        sys.view_mut((0, n), (n, m)).copy_from(&self.linear.transpose());
        // B y - M u - C_A^T q_A = -b
        sys.view_mut((n, 0), (m, n)).copy_from(self.linear);
        sys.view_mut((n, n), (m, m)).copy_from(&-self.curvature);
        rhs.rows_mut(n, m).copy_from(&-&self.offset);
        for (a, &i) in crows.iter().enumerate() {
            for j in 0..m {
                sys[(n + j, n + m + a)] = -self.cons[(i, j)];
                sys[(n + m + a, n + j)] = self.cons[(i, j)];
            }
            rhs[n + m + a] = self.bounds[i];
        }
        for (a, &i) in arows.iter().enumerate() {
            for j in 0..n {
                sys[(j, n + m + k + a)] = self.acon[(i, j)];
                sys[(n + m + k + a, j)] = self.acon[(i, j)];
            }
            rhs[n + m + k + a] = self.arhs[i];
        }
        let sol = sys.lu().solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let y = sol.rows(0, n).into_owned();
        let u = sol.rows(n, m).into_owned();
        let mut q = DVector::zeros(state.q.len());
        for (a, &i) in crows.iter().enumerate() {
            q[i] = sol[n + m + a];
        }
        let mut w = DVector::zeros(state.w.len());
        for (a, &i) in arows.iter().enumerate() {
            w[i] = sol[n + m + k + a];
        }
        let mut s = self.bounds - self.cons * &u;
        let mut r = self.arhs - self.acon * &y;
        for &i in &crows {
            s[i] = 0.0;
        }
        for &i in &arows {
            r[i] = 0.0;
        }
        let nonneg = |v: &DVector<f64>| v.iter().all(|&x| x >= 0.0);
        (nonneg(&q) && nonneg(&w) && nonneg(&s) && nonneg(&r)).then_some(Iterate { y, u, q, s, w, r })
    }
}

fn step(it: &Iterate, d: &Iterate, alpha: f64) -> Iterate {
    Iterate {
        y: &it.y + &d.y * alpha,
        u: &it.u + &d.u * alpha,
        q: &it.q + &d.q * alpha,
        s: &it.s + &d.s * alpha,
        w: &it.w + &d.w * alpha,
        r: &it.r + &d.r * alpha,
    }
}

/// Solves the model problem. On success the returned state certifies every
/// KKT block to `opts.tol`.
pub fn solve(prob: &ModelProblem, opts: &SolverOptions) -> Result<(DVector<f64>, IpState)> {
    opts.validate()?;
    let rep = &prob.rep;
    let kkt = Kkt {
        cons: rep.constraints(),
        bounds: rep.bounds(),
        curvature: rep.curvature(),
        offset: rep.offset().clone(),
        linear: rep.linear(),
        acon: &prob.acon,
        arhs: &prob.arhs,
        layout: Layout::new(rep.constraints(), rep.curvature(), rep.linear()),
    };
    let mut state = kkt.run(opts)?;
    if let Some(it) = kkt.polish(&state) {
        let cert = kkt.certificate(&it);
        if cert.max() <= opts.tol {
            state.kkt_residual = cert.max();
            state.residuals = cert;
            state.y = it.y;
            state.u = it.u;
            state.q = it.q;
            state.s = it.s;
            state.w = it.w;
            state.r = it.r;
            state.polished = true;
        }
    }
    Ok((state.y.clone(), state))
}

/// Maximizer of the conjugate QP `max <u, z> - 1/2 <u, M u>  s.t.  C u <= c`.
#[derive(Debug, Clone)]
pub(crate) struct ConjugateSolution {
    pub u: DVector<f64>,
    pub value: f64,
    /// Constraints judged active (`s_i < q_i` at the interior solution).
    pub active: Vec<bool>,
}

const CONJUGATE_TOL: f64 = 1e-11;

/// Solves the conjugate QP of `rep` at `z = b + B y` by the same Newton
/// iteration with no primal variable, then polishes on the detected active
/// set so the returned value is accurate to rounding.
pub(crate) fn conjugate_max(rep: &PlqRep, z: &DVector<f64>) -> Result<ConjugateSolution> {
    let empty_linear = DMatrix::zeros(rep.m(), 0);
    let empty_acon = DMatrix::zeros(0, 0);
    let empty_arhs = DVector::zeros(0);
    let kkt = Kkt {
        cons: rep.constraints(),
        bounds: rep.bounds(),
        curvature: rep.curvature(),
        offset: z.clone(),
        linear: &empty_linear,
        acon: &empty_acon,
        arhs: &empty_arhs,
        layout: Layout::new(rep.constraints(), rep.curvature(), &empty_linear),
    };
    let opts = SolverOptions {
        tol: CONJUGATE_TOL,
        max_iter: 300,
        ..SolverOptions::default()
    };
    let state = match kkt.run(&opts) {
        Ok(s) => s,
        Err(Error::NotConverged { best, .. }) if best.kkt_residual < 1e-7 => *best,
        Err(Error::Singular(_)) => return Err(Error::InfiniteValue),
        Err(e) => return Err(e),
    };
    let active: Vec<bool> = state.s.iter().zip(state.q.iter()).map(|(s, q)| s < q).collect();
    let objective = |u: &DVector<f64>| u.dot(z) - 0.5 * u.dot(&(rep.curvature() * u));
    let u = polish(rep, z, &active).unwrap_or_else(|| state.u.clone());
    Ok(ConjugateSolution {
        value: objective(&u),
        u,
        active,
    })
}

/// Solves the equality-constrained QP on the active set; returns `None` when
/// the result is not primal and dual feasible.
fn polish(rep: &PlqRep, z: &DVector<f64>, active: &[bool]) -> Option<DVector<f64>> {
    let m = rep.m();
    let rows: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
    let k = rows.len();
    let cons = rep.constraints();
    let mut kkt = DMatrix::zeros(m + k, m + k);
    kkt.view_mut((0, 0), (m, m)).copy_from(rep.curvature());
    let mut rhs = DVector::zeros(m + k);
    rhs.rows_mut(0, m).copy_from(z);
    for (a, &i) in rows.iter().enumerate() {
        for j in 0..m {
            kkt[(m + a, j)] = cons[(i, j)];
            kkt[(j, m + a)] = cons[(i, j)];
        }
        rhs[m + a] = rep.bounds()[i];
    }
    let scale = kkt.amax().max(1.0);
    let sol = kkt.clone().svd(true, true).solve(&rhs, 1e-12 * scale).ok()?;
    let fit = inf_norm(&(&kkt * &sol - &rhs));
    let rhs_scale = inf_norm(&rhs).max(1.0);
    if fit.is_nan() || fit > 1e-9 * rhs_scale {
        return None;
    }
    let u = sol.rows(0, m).into_owned();
    let slack = rep.bounds() - cons * &u;
    let feas_tol = 1e-9 * inf_norm(rep.bounds()).max(1.0);
    if slack.iter().any(|&s| s < -feas_tol) {
        return None;
    }
    if sol.rows(m, k).iter().any(|&q| q < -1e-9 * rhs_scale) {
        return None;
    }
    Some(u)
}

/// Sparse-coding problem `min_a misfit(y - D a) + lam * |a|_1`, optionally
/// subject to `acon * a <= arhs`.
#[derive(Debug, Clone)]
pub struct CodeProblem {
    pub dictionary: DMatrix<f64>,
    pub observation: DVector<f64>,
    pub misfit: Misfit,
    pub lam: f64,
    pub constraints: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl CodeProblem {
    pub fn new(dictionary: DMatrix<f64>, observation: DVector<f64>, misfit: Misfit, lam: f64) -> Self {
        Self {
            dictionary,
            observation,
            misfit,
            lam,
            constraints: None,
        }
    }

    pub fn with_constraints(mut self, acon: DMatrix<f64>, arhs: DVector<f64>) -> Self {
        self.constraints = Some((acon, arhs));
        self
    }

    /// Builds `misfit o (y - D .) + lam * l1` as one representation.
    pub fn to_model(&self) -> Result<ModelProblem> {
        let d = &self.dictionary;
        if d.nrows() != self.observation.len() {
            return Err(Error::dim(format!(
                "dictionary has {} rows, observation has length {}",
                d.nrows(),
                self.observation.len()
            )));
        }
        if d.iter().all(|&x| x == 0.0) {
            return Err(Error::param("dictionary is identically zero"));
        }
        if !(self.lam >= 0.0 && self.lam.is_finite()) {
            return Err(Error::param(format!("lambda must be >= 0, got {}", self.lam)));
        }
        let misfit = self
            .misfit
            .to_plq(d.nrows())?
            .affine_compose_unchecked(&(-d), &self.observation)?;
        let rep = if self.lam > 0.0 {
            misfit.add(&PenaltySpec::L1.to_plq(d.ncols())?.scale(self.lam)?)?
        } else {
            misfit
        };
        match &self.constraints {
            Some((acon, arhs)) => ModelProblem::new(rep, acon.clone(), arhs.clone()),
            None => Ok(ModelProblem::unconstrained(rep)),
        }
    }

    /// `misfit(y - D a) + lam * |a|_1` evaluated directly.
    pub fn objective(&self, a: &DVector<f64>) -> f64 {
        let resid = &self.observation - &self.dictionary * a;
        self.misfit.value(resid.as_slice()) + self.lam * a.lp_norm(1)
    }

    pub fn solve(&self, opts: &SolverOptions) -> Result<(DVector<f64>, IpState)> {
        solve(&self.to_model()?, opts)
    }
}

/// Solves one sparse-coding problem and returns the code with its certificate.
pub fn solve_code(
    d: &DMatrix<f64>,
    y: &DVector<f64>,
    misfit: &Misfit,
    lam: f64,
    constraints: Option<(&DMatrix<f64>, &DVector<f64>)>,
    opts: &SolverOptions,
) -> Result<(DVector<f64>, IpState)> {
    let mut prob = CodeProblem::new(d.clone(), y.clone(), misfit.clone(), lam);
    if let Some((acon, arhs)) = constraints {
        prob = prob.with_constraints(acon.clone(), arhs.clone());
    }
    prob.solve(opts)
}

/// Per-column outcome of [`solve_code_batch`].
#[derive(Debug)]
pub struct BatchSolution {
    /// Codes as columns; failed columns are left at zero.
    pub codes: DMatrix<f64>,
    pub states: Vec<Option<IpState>>,
    /// Failed columns, each wrapped in [`Error::Column`].
    pub failures: Vec<Error>,
}

impl BatchSolution {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Solves every column of `y` independently, in parallel. Output does not
/// depend on scheduling since each column's solve is deterministic.
pub fn solve_code_batch(
    d: &DMatrix<f64>,
    y: &DMatrix<f64>,
    misfit: &Misfit,
    lam: f64,
    constraints: Option<(&DMatrix<f64>, &DVector<f64>)>,
    opts: &SolverOptions,
) -> Result<BatchSolution> {
    if d.nrows() != y.nrows() {
        return Err(Error::dim(format!("dictionary has {} rows, data has {}", d.nrows(), y.nrows())));
    }
    let results: Vec<Result<(DVector<f64>, IpState)>> = (0..y.ncols())
        .into_par_iter()
        .map(|t| solve_code(d, &y.column(t).into_owned(), misfit, lam, constraints, opts))
        .collect();
    let mut codes = DMatrix::zeros(d.ncols(), y.ncols());
    let mut states = Vec::with_capacity(y.ncols());
    let mut failures = Vec::new();
    for (t, res) in results.into_iter().enumerate() {
        match res {
            Ok((a, st)) => {
                codes.set_column(t, &a);
                states.push(Some(st));
            }
            Err(e) => {
                states.push(None);
                failures.push(Error::Column {
                    index: t,
                    source: Box::new(e),
                });
            }
        }
    }
    Ok(BatchSolution {
        codes,
        states,
        failures,
    })
}
