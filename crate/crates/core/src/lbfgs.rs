//! Limited-memory BFGS with Barzilai-Borwein initial scaling and a
//! nonmonotone Armijo line search.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    /// Number of recent objective values the Armijo test compares against.
    pub window: usize,
    pub c1: f64,
    /// Stop when the gradient infinity norm is at most this.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 5,
            window: 5,
            c1: 1e-4,
            grad_tol: 1e-6,
            max_iter: 200,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Minimizes `f`, which returns the value and writes the gradient into its
/// second argument.
///
/// The first step is `-g / |g|_inf`; afterwards the two-loop recursion is
/// seeded with the BB1 scaling `s's / s'y` of the most recent pair. A step is
/// accepted when `f(x + a p) <= max(recent values) + c1 a g'p`.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut history: VecDeque<f64> = VecDeque::from([fx]);
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];

    for iter in 0..opts.max_iter {
        let gnorm = inf_norm(&g);
        if gnorm <= opts.grad_tol {
            return LbfgsResult {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations: iter,
                converged: true,
            };
        }
        let mut p = direction(&g, &pairs);
        let mut slope = dot(&g, &p);
        if slope.is_nan() || slope >= 0.0 || pairs.is_empty() {
            pairs.clear();
            p = g.iter().map(|gi| -gi / gnorm).collect();
            slope = dot(&g, &p);
        }
        let reference = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut alpha = 1.0;
        let mut fnew = f64::INFINITY;
        for _ in 0..=opts.max_backtracks {
            for i in 0..n {
                xn[i] = x[i] + alpha * p[i];
            }
            fnew = f(&xn, &mut gn);
            if fnew.is_finite() && fnew <= reference + opts.c1 * alpha * slope {
                break;
            }
            alpha *= 0.5;
        }
        if !(fnew.is_finite() && fnew <= reference + opts.c1 * alpha * slope) {
            return LbfgsResult {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations: iter,
                converged: false,
            };
        }
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-300 {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, yv, 1.0 / sy));
        }
        x.copy_from_slice(&xn);
        g.copy_from_slice(&gn);
        fx = fnew;
        if history.len() == opts.window {
            history.pop_front();
        }
        history.push_back(fx);
    }
    let gnorm = inf_norm(&g);
    LbfgsResult {
        x,
        value: fx,
        grad_norm: gnorm,
        iterations: opts.max_iter,
        converged: gnorm <= opts.grad_tol,
    }
}

/// Two-loop recursion with `H0 = (s's / s'y) I` from the newest pair.
fn direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let Some((s_last, _, rho_last)) = pairs.back() else {
        return q.iter().map(|v| -v).collect();
    };
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    let h0 = dot(s_last, s_last) * rho_last;
    for qi in q.iter_mut() {
        *qi *= h0;
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Minimizes a convex differentiable scalar function. Runs [`minimize`] and,
/// if that stops short of `grad_tol`, finishes by bisection on the sign of the
/// derivative.
pub fn minimize_scalar<F>(mut f: F, x0: f64, opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(f64) -> (f64, f64),
{
    let mut wrapped = |x: &[f64], g: &mut [f64]| {
        let (v, d) = f(x[0]);
        g[0] = d;
        v
    };
    let res = minimize(&mut wrapped, &[x0], opts);
    if res.converged {
        return res;
    }
    let mut fd = |x: f64| f(x);
    let x = res.x[0];
    let (_, d) = fd(x);
    // Bracket a sign change of the derivative by doubling.
    let dir = if d > 0.0 { -1.0 } else { 1.0 };
    let mut step = x.abs().max(1.0);
    let (mut lo, mut hi) = (x, x);
    let mut bracketed = false;
    for _ in 0..200 {
        let z = x + dir * step;
        let (_, dz) = fd(z);
        if dz * dir >= 0.0 {
            if dir > 0.0 {
                hi = z;
            } else {
                lo = z;
            }
            bracketed = true;
            break;
        }
        if dir > 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        step *= 2.0;
    }
    if !bracketed {
        return res;
    }
    let mut iterations = res.iterations;
    let mut best = (res.value, x, d);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (v, dm) = fd(mid);
        iterations += 1;
        if v <= best.0 {
            best = (v, mid, dm);
        }
        if dm.abs() <= opts.grad_tol || mid == lo || mid == hi {
            break;
        }
        if dm > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    LbfgsResult {
        x: vec![best.1],
        value: best.0,
        grad_norm: best.2.abs(),
        iterations,
        converged: best.2.abs() <= opts.grad_tol,
    }
}
