#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use plq_learn::{Family, Loss, PenaltySpec, PlqRep};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Maps two unit-interval draws to valid parameters of `family`.
pub fn spec_for(family: Family, p: f64, q: f64) -> PenaltySpec {
    let pos = |u: f64| 0.1 + 2.0 * u;
    let tau = |u: f64| 0.05 + 0.9 * u;
    match family {
        Family::L2 => PenaltySpec::L2,
        Family::L1 => PenaltySpec::L1,
        Family::Huber => PenaltySpec::huber(pos(p)).unwrap(),
        Family::Quantile => PenaltySpec::quantile(tau(p)).unwrap(),
        Family::QuantileHuber => PenaltySpec::quantile_huber(tau(p), pos(q)).unwrap(),
        Family::Vapnik => PenaltySpec::vapnik(pos(p) / 2.0).unwrap(),
        Family::SmoothInsensitive => PenaltySpec::smooth_insensitive(pos(p) / 2.0, pos(q)).unwrap(),
    }
}

pub fn random_spec(rng: &mut ChaCha8Rng) -> PenaltySpec {
    let f = Family::ALL[rng.gen_range(0..Family::ALL.len())];
    spec_for(f, rng.gen(), rng.gen())
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(rng))
}

/// A random composite together with the pieces needed to evaluate it
/// directly, term by term, without the conjugate representation.
pub struct RandomComposite {
    pub rep: PlqRep,
    terms: Vec<Term>,
}

/// A loss applied to the selected rows of `map * y + shift`.
type Term = (Loss, Vec<usize>, DMatrix<f64>, DVector<f64>);

impl RandomComposite {
    pub fn direct(&self, y: &DVector<f64>) -> f64 {
        self.terms
            .iter()
            .map(|(loss, sel, map, shift)| {
                let z = map * y + shift;
                sel.iter().map(|&i| loss.value(z[i])).sum::<f64>()
            })
            .sum()
    }
}

/// `block_sum` of random zoo penalties over a random split of `R^p`,
/// composed with a random affine map from `R^n`, plus a second such term.
/// With `smoothing`, every penalty is replaced by its Moreau envelope.
pub fn random_composite_with(rng: &mut ChaCha8Rng, n: usize, smoothing: Option<f64>) -> RandomComposite {
    let mut rep = PlqRep::zero(n);
    let mut terms = Vec::new();
    for _ in 0..2 {
        let p = rng.gen_range(1..=6);
        let mut idx: Vec<usize> = (0..p).collect();
        for i in (1..p).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let map = random_matrix(rng, p, n);
        let shift = random_vector(rng, p);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < p {
            let len = rng.gen_range(1..=p - start);
            let sel = idx[start..start + len].to_vec();
            let spec = random_spec(rng);
            let loss = match smoothing {
                Some(g) => Loss::envelope(spec, g).unwrap(),
                None => Loss::from(spec),
            };
            parts.push((loss.to_plq(len).unwrap(), sel.clone()));
            terms.push((loss, sel, map.clone(), shift.clone()));
            start += len;
        }
        let block = PlqRep::block_sum(p, &parts).unwrap();
        rep = rep.add(&block.affine_compose_unchecked(&map, &shift).unwrap()).unwrap();
    }
    RandomComposite { rep, terms }
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, y: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(y.len(), |i, _| {
        let mut p = y.clone();
        let mut m = y.clone();
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

pub fn relative_error(g: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    (g - reference).amax() / reference.amax().max(1.0)
}

/// Minimum of `f` over a uniform grid on `[lo, hi]^n` (n <= 2).
pub fn grid_min(f: impl Fn(&DVector<f64>) -> f64, lo: &DVector<f64>, hi: &DVector<f64>, step: f64) -> f64 {
    let n = lo.len();
    assert!(n <= 2);
    let counts: Vec<usize> = (0..n).map(|i| ((hi[i] - lo[i]) / step).ceil() as usize + 1).collect();
    let mut best = f64::INFINITY;
    let mut point = lo.clone();
    match n {
        1 => {
            for i in 0..counts[0] {
                point[0] = lo[0] + i as f64 * step;
                best = best.min(f(&point));
            }
        }
        _ => {
            for i in 0..counts[0] {
                point[0] = lo[0] + i as f64 * step;
                for j in 0..counts[1] {
                    point[1] = lo[1] + j as f64 * step;
                    best = best.min(f(&point));
                }
            }
        }
    }
    best
}
