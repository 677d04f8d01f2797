//! Piecewise linear-quadratic penalties in conjugate form.
//!
//! A [`PlqRep`] stores the tuple `(C, c, M, b, B)` of
//!
//! ```text
//! rho(y) = sup { <u, b + B y> - 1/2 <u, M u>  :  C u <= c }
//! ```
//!
//! together with the calculus that keeps the class closed: sums, affine
//! composition, block (product) action, positive scaling and Moreau-Yosida
//! smoothing, which only replaces `M` by `M + gamma * B * B^T`.
//!
//! Representations built from the penalty zoo carry a closed-form evaluator
//! alongside the matrices. `eval` uses it when present; `eval_conjugate`
//! always solves the inner concave QP, so the two routes can be compared.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipsolve;
use crate::penalties::Loss;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;
const RANK_TOL: f64 = 1e-10;
/// Largest `m` for which positive semidefiniteness is checked on construction.
const PSD_CHECK_MAX_DIM: usize = 64;

/// Closed-form evaluator mirroring how a representation was assembled.
#[derive(Debug, Clone)]
pub(crate) enum ClosedForm {
    Separable {
        loss: Loss,
        len: usize,
    },
    Sum(Arc<ClosedForm>, Arc<ClosedForm>),
    Affine {
        inner: Arc<ClosedForm>,
        map: Arc<DMatrix<f64>>,
        shift: DVector<f64>,
    },
    Scaled(f64, Arc<ClosedForm>),
    Zero,
}

impl ClosedForm {
    pub(crate) fn separable(loss: Loss, len: usize) -> Self {
        ClosedForm::Separable { loss, len }
    }

    fn value(&self, y: &DVector<f64>) -> f64 {
        match self {
            ClosedForm::Separable { loss, .. } => y.iter().map(|&r| loss.value(r)).sum(),
            ClosedForm::Sum(a, b) => a.value(y) + b.value(y),
            ClosedForm::Affine { inner, map, shift } => inner.value(&(map.as_ref() * y + shift)),
            ClosedForm::Scaled(w, inner) => w * inner.value(y),
            ClosedForm::Zero => 0.0,
        }
    }

    fn gradient(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            ClosedForm::Separable { loss, .. } => {
                let mut g = DVector::zeros(y.len());
                for (gi, &r) in g.iter_mut().zip(y.iter()) {
                    *gi = loss.derivative(r)?;
                }
                Ok(g)
            }
            ClosedForm::Sum(a, b) => Ok(a.gradient(y)? + b.gradient(y)?),
            ClosedForm::Affine { inner, map, shift } => {
                let inner_grad = inner.gradient(&(map.as_ref() * y + shift))?;
                Ok(map.tr_mul(&inner_grad))
            }
            ClosedForm::Scaled(w, inner) => Ok(inner.gradient(y)? * *w),
            ClosedForm::Zero => Ok(DVector::zeros(y.len())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "PlqDocument", into = "PlqDocument")]
pub struct PlqRep {
    constraints: DMatrix<f64>,
    bounds: DVector<f64>,
    curvature: DMatrix<f64>,
    offset: DVector<f64>,
    linear: DMatrix<f64>,
    closed: Option<ClosedForm>,
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Numerical rank with singular values below `RANK_TOL * max(1, sigma_max)`
/// treated as zero.
pub(crate) fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().fold(0.0f64, |a, &s| a.max(s));
    let cut = RANK_TOL * smax.max(1.0);
    sv.iter().filter(|&&s| s > cut).count()
}

fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), a.ncols()), b.shape()).copy_from(b);
    out
}

fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    out
}

fn vcat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

impl PlqRep {
    /// Validated constructor: shapes, symmetry of `M`, PSD of `M` for
    /// `m <= 64`, and full column rank of `B`.
    pub fn new(
        constraints: DMatrix<f64>,
        bounds: DVector<f64>,
        curvature: DMatrix<f64>,
        offset: DVector<f64>,
        linear: DMatrix<f64>,
    ) -> Result<Self> {
        let m = curvature.nrows();
        if curvature.ncols() != m {
            return Err(Error::InvalidRep(format!("M must be square, got {:?}", curvature.shape())));
        }
        if constraints.ncols() != m || constraints.nrows() != bounds.len() {
            return Err(Error::InvalidRep(format!(
                "C is {:?} but M is {m}x{m} and c has length {}",
                constraints.shape(),
                bounds.len()
            )));
        }
        if offset.len() != m || linear.nrows() != m {
            return Err(Error::InvalidRep(format!(
                "b has length {} and B is {:?}, expected {m} rows",
                offset.len(),
                linear.shape()
            )));
        }
        let finite = constraints.iter().chain(bounds.iter()).chain(curvature.iter());
        if !finite.chain(offset.iter()).chain(linear.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidRep("non-finite entry".into()));
        }
        if max_abs(&(&curvature - curvature.transpose())) >= SYMMETRY_TOL {
            return Err(Error::InvalidRep("M is not symmetric".into()));
        }
        if m > 0 && m <= PSD_CHECK_MAX_DIM {
            let min_eig = curvature.clone().symmetric_eigenvalues().min();
            if min_eig < -PSD_TOL {
                return Err(Error::InvalidRep(format!("M is not PSD (min eigenvalue {min_eig:.3e})")));
            }
        }
        let n = linear.ncols();
        let rank = numerical_rank(&linear);
        if rank < n {
            return Err(Error::NotInjective { rank, cols: n });
        }
        Ok(Self::from_parts_unchecked(constraints, bounds, curvature, offset, linear, None))
    }

    pub(crate) fn from_parts_unchecked(
        constraints: DMatrix<f64>,
        bounds: DVector<f64>,
        curvature: DMatrix<f64>,
        offset: DVector<f64>,
        linear: DMatrix<f64>,
        closed: Option<ClosedForm>,
    ) -> Self {
        PlqRep {
            constraints,
            bounds,
            curvature,
            offset,
            linear,
            closed,
        }
    }

    pub(crate) fn with_closed_form(mut self, closed: ClosedForm) -> Self {
        self.closed = Some(closed);
        self
    }

    /// The identically zero penalty on `R^n` (`m = 0`).
    pub fn zero(n: usize) -> Self {
        Self::from_parts_unchecked(
            DMatrix::zeros(0, 0),
            DVector::zeros(0),
            DMatrix::zeros(0, 0),
            DVector::zeros(0),
            DMatrix::zeros(0, n),
            Some(ClosedForm::Zero),
        )
    }

    /// Primal dimension.
    pub fn n(&self) -> usize {
        self.linear.ncols()
    }

    /// Conjugate dimension.
    pub fn m(&self) -> usize {
        self.curvature.nrows()
    }

    /// Number of polyhedral constraints on `u`.
    pub fn num_constraints(&self) -> usize {
        self.constraints.nrows()
    }

    pub fn constraints(&self) -> &DMatrix<f64> {
        &self.constraints
    }

    pub fn bounds(&self) -> &DVector<f64> {
        &self.bounds
    }

    pub fn curvature(&self) -> &DMatrix<f64> {
        &self.curvature
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn linear(&self) -> &DMatrix<f64> {
        &self.linear
    }

    pub fn has_closed_form(&self) -> bool {
        self.closed.is_some()
    }

    /// Drops the closed-form evaluator so every evaluation goes through the
    /// conjugate QP.
    pub fn without_closed_form(mut self) -> Self {
        self.closed = None;
        self
    }

    fn check_point(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.n() {
            return Err(Error::dim(format!("point has length {}, penalty expects {}", y.len(), self.n())));
        }
        Ok(())
    }

    /// `b + B y`.
    pub fn conjugate_argument(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.linear * y
    }

    pub fn eval(&self, y: &DVector<f64>) -> Result<f64> {
        self.check_point(y)?;
        match &self.closed {
            Some(cf) => Ok(cf.value(y)),
            None => self.eval_conjugate(y),
        }
    }

    /// Evaluates by maximizing over the conjugate variable, ignoring any
    /// closed form.
    pub fn eval_conjugate(&self, y: &DVector<f64>) -> Result<f64> {
        self.check_point(y)?;
        Ok(ipsolve::conjugate_max(self, &self.conjugate_argument(y))?.value)
    }

    /// A maximizer `u` of the conjugate problem at `y`.
    pub fn conjugate_argmax(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_point(y)?;
        Ok(ipsolve::conjugate_max(self, &self.conjugate_argument(y))?.u)
    }

    /// Representation of `self(y) + other(y)`.
    pub fn add(&self, other: &PlqRep) -> Result<PlqRep> {
        if self.n() != other.n() {
            return Err(Error::dim(format!("cannot add penalties on R^{} and R^{}", self.n(), other.n())));
        }
        let closed = match (&self.closed, &other.closed) {
            (Some(a), Some(b)) => Some(ClosedForm::Sum(Arc::new(a.clone()), Arc::new(b.clone()))),
            _ => None,
        };
        Ok(Self::from_parts_unchecked(
            block_diag(&self.constraints, &other.constraints),
            vcat(&self.bounds, &other.bounds),
            block_diag(&self.curvature, &other.curvature),
            vcat(&self.offset, &other.offset),
            vstack(&self.linear, &other.linear),
            closed,
        ))
    }

    /// Representation of `y -> self(D y + d)`; fails when `B D` loses rank.
    pub fn affine_compose(&self, map: &DMatrix<f64>, shift: &DVector<f64>) -> Result<PlqRep> {
        let out = self.affine_compose_unchecked(map, shift)?;
        let rank = numerical_rank(&out.linear);
        if rank < out.n() {
            return Err(Error::NotInjective { rank, cols: out.n() });
        }
        Ok(out)
    }

    /// Affine composition without the injectivity check. Used when the
    /// composed term is only one summand of an injective total, e.g. a misfit
    /// over an overcomplete dictionary plus an l1 regularizer.
    pub fn affine_compose_unchecked(&self, map: &DMatrix<f64>, shift: &DVector<f64>) -> Result<PlqRep> {
        if map.nrows() != self.n() || shift.len() != self.n() {
            return Err(Error::dim(format!(
                "map is {:?} with shift of length {}, penalty acts on R^{}",
                map.shape(),
                shift.len(),
                self.n()
            )));
        }
        let closed = self.closed.as_ref().map(|cf| ClosedForm::Affine {
            inner: Arc::new(cf.clone()),
            map: Arc::new(map.clone()),
            shift: shift.clone(),
        });
        Ok(Self::from_parts_unchecked(
            self.constraints.clone(),
            self.bounds.clone(),
            self.curvature.clone(),
            &self.offset + &self.linear * shift,
            &self.linear * map,
            closed,
        ))
    }

    /// `sum_i reps[i](y[selectors[i]])` on `R^n`. Selectors must be disjoint
    /// and in range; coordinates no selector touches are not penalized.
    pub fn block_sum(n: usize, parts: &[(PlqRep, Vec<usize>)]) -> Result<PlqRep> {
        let mut used = vec![false; n];
        let mut total = PlqRep::zero(n);
        for (rep, sel) in parts {
            if rep.n() != sel.len() {
                return Err(Error::dim(format!(
                    "penalty on R^{} given a selector of {} coordinates",
                    rep.n(),
                    sel.len()
                )));
            }
            let mut selection = DMatrix::zeros(sel.len(), n);
            for (row, &idx) in sel.iter().enumerate() {
                if idx >= n {
                    return Err(Error::dim(format!("selector index {idx} out of range for R^{n}")));
                }
                if used[idx] {
                    return Err(Error::dim(format!("coordinate {idx} selected twice")));
                }
                used[idx] = true;
                selection[(row, idx)] = 1.0;
            }
            let piece = rep.affine_compose_unchecked(&selection, &DVector::zeros(sel.len()))?;
            total = total.add(&piece)?;
        }
        Ok(total)
    }

    /// Representation of `w * self` for `w > 0`.
    pub fn scale(&self, w: f64) -> Result<PlqRep> {
        if !(w.is_finite() && w > 0.0) {
            return Err(Error::param(format!("scale must be > 0, got {w}")));
        }
        let closed = self.closed.as_ref().map(|cf| ClosedForm::Scaled(w, Arc::new(cf.clone())));
        Ok(Self::from_parts_unchecked(
            self.constraints.clone(),
            &self.bounds * w,
            &self.curvature / w,
            self.offset.clone(),
            self.linear.clone(),
            closed,
        ))
    }

    /// Moreau-Yosida envelope with parameter `gamma`: same representation
    /// with `M + gamma * B * B^T`.
    pub fn moreau(&self, gamma: f64) -> Result<PlqRep> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::param(format!("moreau parameter must be > 0, got {gamma}")));
        }
        let curvature = &self.curvature + (&self.linear * self.linear.transpose()) * gamma;
        let closed = match &self.closed {
            Some(ClosedForm::Separable { loss, len }) => {
                let env = match *loss {
                    Loss::Plain(base) => Loss::Envelope { base, gamma },
                    Loss::Envelope { base, gamma: g0 } => Loss::Envelope { base, gamma: g0 + gamma },
                };
                Some(ClosedForm::separable(env, *len))
            }
            _ => None,
        };
        Ok(Self::from_parts_unchecked(
            self.constraints.clone(),
            self.bounds.clone(),
            curvature,
            self.offset.clone(),
            self.linear.clone(),
            closed,
        ))
    }

    /// Gradient at `y`. The closed form is differentiated when available;
    /// otherwise the gradient is `B^T u` for the conjugate maximizer `u`,
    /// after checking that `B^T u` is the same for every maximizer.
    pub fn grad(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_point(y)?;
        if let Some(cf) = &self.closed {
            return cf.gradient(y);
        }
        let sol = ipsolve::conjugate_max(self, &self.conjugate_argument(y))?;
        if !self.gradient_is_unique(&sol.active) {
            return Err(Error::Nonsmooth);
        }
        Ok(self.linear.tr_mul(&sol.u))
    }

    /// The maximizer set of the conjugate QP moves only along
    /// `ker M ∩ ker C_active`; `B^T u` is unique when that space lies in
    /// `ker B^T`.
    fn gradient_is_unique(&self, active: &[bool]) -> bool {
        let m = self.m();
        if m == 0 {
            return true;
        }
        let rows: Vec<usize> = (0..self.num_constraints()).filter(|&i| active[i]).collect();
        let mut stacked = DMatrix::zeros(m + rows.len(), m);
        stacked.view_mut((0, 0), (m, m)).copy_from(&self.curvature);
        for (k, &i) in rows.iter().enumerate() {
            stacked.row_mut(m + k).copy_from(&self.constraints.row(i));
        }
        let svd = stacked.svd(false, true);
        let v_t = svd.v_t.expect("right singular vectors requested");
        let smax = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
        let cut = 1e-9 * smax.max(1.0);
        let scale = max_abs(&self.linear).max(1.0);
        // Rows of V^T beyond the numerical rank span the null space.
        (0..m).all(|k| {
            let sigma = if k < svd.singular_values.len() { svd.singular_values[k] } else { 0.0 };
            if sigma > cut {
                return true;
            }
            let dir = v_t.row(k).transpose();
            let img = self.linear.tr_mul(&dir);
            img.amax() <= 1e-8 * scale
        })
    }
}

/// JSON layout: row-major nested arrays plus the primal dimension `n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct PlqDocument {
    pub C: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub M: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub B: Vec<Vec<f64>>,
    pub n: usize,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::InvalidRep(format!(
            "{what}: row of length {} where {ncols} columns are expected",
            bad.len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl From<PlqRep> for PlqDocument {
    fn from(rep: PlqRep) -> Self {
        PlqDocument {
            C: to_rows(&rep.constraints),
            c: rep.bounds.iter().copied().collect(),
            M: to_rows(&rep.curvature),
            b: rep.offset.iter().copied().collect(),
            B: to_rows(&rep.linear),
            n: rep.n(),
        }
    }
}

impl TryFrom<PlqDocument> for PlqRep {
    type Error = Error;

    fn try_from(doc: PlqDocument) -> Result<Self> {
        let m = doc.M.len();
        PlqRep::new(
            from_rows(&doc.C, m, "C")?,
            DVector::from_vec(doc.c),
            from_rows(&doc.M, m, "M")?,
            DVector::from_vec(doc.b),
            from_rows(&doc.B, doc.n, "B")?,
        )
    }
}

impl PlqRep {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
