mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use plq_learn::dictlearn::{objective, update_dictionary, DictionaryOptions, LearnConfig};
use plq_learn::ipsolve::{solve_code, CodeProblem};
use plq_learn::{Family, Misfit, PenaltySpec, PlqRep, SolverOptions};
use proptest::prelude::*;

fn family() -> impl Strategy<Value = Family> {
    (0..Family::ALL.len()).prop_map(|i| Family::ALL[i])
}

fn spec() -> impl Strategy<Value = PenaltySpec> {
    (family(), 0.0..1.0f64, 0.0..1.0f64).prop_map(|(f, p, q)| spec_for(f, p, q))
}

fn vec_of(n: usize) -> impl Strategy<Value = DVector<f64>> {
    proptest::collection::vec(-4.0..4.0f64, n).prop_map(DVector::from_vec)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn penalties_are_nonnegative_convex_and_vanish_at_zero(p in spec(), a in -5.0..5.0f64, b in -5.0..5.0f64) {
        prop_assert!(p.value(0.0).abs() < 1e-15);
        prop_assert!(p.value(a) >= 0.0);
        let mid = p.value(0.5 * (a + b));
        prop_assert!(mid <= 0.5 * (p.value(a) + p.value(b)) + 1e-12);
    }

    #[test]
    fn spec_strings_round_trip(p in spec()) {
        let back: PenaltySpec = p.to_string().parse().unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn conjugate_value_matches_closed_form(p in spec(), y in vec_of(3)) {
        let rep = p.to_plq(3).unwrap();
        let closed = rep.eval(&y).unwrap();
        let qp = rep.eval_conjugate(&y).unwrap();
        prop_assert!((closed - qp).abs() <= 1e-8 * closed.abs().max(1.0), "{} vs {}", closed, qp);
    }

    #[test]
    fn sum_is_additive(p in spec(), q in spec(), y in vec_of(2)) {
        let (f, g) = (p.to_plq(2).unwrap(), q.to_plq(2).unwrap());
        let sum = f.add(&g).unwrap();
        let expect = f.eval(&y).unwrap() + g.eval(&y).unwrap();
        prop_assert!((sum.eval(&y).unwrap() - expect).abs() < 1e-10);
        prop_assert!((sum.without_closed_form().eval(&y).unwrap() - expect).abs() < 1e-7 * expect.max(1.0));
    }

    #[test]
    fn scaling_multiplies_the_value(p in spec(), w in 0.1..5.0f64, y in vec_of(2)) {
        let f = p.to_plq(2).unwrap();
        let expect = w * f.eval(&y).unwrap();
        let scaled = f.scale(w).unwrap().without_closed_form();
        prop_assert!((scaled.eval(&y).unwrap() - expect).abs() < 1e-7 * expect.max(1.0));
    }

    #[test]
    fn affine_composition_evaluates_at_the_image(p in spec(), y in vec_of(2), entries in proptest::collection::vec(-2.0..2.0f64, 6), shift in vec_of(3)) {
        let map = DMatrix::from_vec(3, 2, entries);
        let f = p.to_plq(3).unwrap();
        let comp = f.affine_compose_unchecked(&map, &shift).unwrap();
        let expect = f.eval(&(&map * &y + &shift)).unwrap();
        prop_assert!((comp.eval(&y).unwrap() - expect).abs() < 1e-10 * expect.max(1.0));
        prop_assert!((comp.without_closed_form().eval(&y).unwrap() - expect).abs() < 1e-7 * expect.max(1.0));
    }

    #[test]
    fn envelope_lies_below_and_decreases_in_gamma(p in spec(), r in -5.0..5.0f64, g1 in 0.05..2.0f64, dg in 0.01..2.0f64) {
        let y = DVector::from_element(1, r);
        let base = p.to_plq(1).unwrap();
        let e1 = base.moreau(g1).unwrap().eval(&y).unwrap();
        let e2 = base.moreau(g1 + dg).unwrap().eval(&y).unwrap();
        prop_assert!(e1 <= p.value(r) + 1e-12);
        prop_assert!(e2 <= e1 + 1e-12);
        let qp = base.moreau(g1).unwrap().without_closed_form().eval(&y).unwrap();
        prop_assert!((qp - e1).abs() < 1e-8 * e1.max(1.0));
    }

    #[test]
    fn envelope_is_the_infimal_convolution(p in spec(), r in -3.0..3.0f64, gamma in 0.1..2.0f64) {
        // min_x (x - r)^2 / (2 gamma) + p(x), by ternary search on the convex objective.
        let env = p.to_plq(1).unwrap().moreau(gamma).unwrap().eval(&DVector::from_element(1, r)).unwrap();
        let f = |x: f64| (x - r).powi(2) / (2.0 * gamma) + p.value(x);
        let (mut lo, mut hi) = (r - 10.0, r + 10.0);
        for _ in 0..200 {
            let (m1, m2) = (lo + (hi - lo) / 3.0, hi - (hi - lo) / 3.0);
            if f(m1) < f(m2) { hi = m2 } else { lo = m1 }
        }
        let direct = f(0.5 * (lo + hi));
        prop_assert!((direct - env).abs() < 1e-10 * env.max(1.0), "{} vs {}", direct, env);
    }

    #[test]
    fn soft_threshold_oracle(d in prop_oneof![-3.0..-0.2f64, 0.2..3.0f64], y in -5.0..5.0f64, lam in 0.01..3.0f64) {
        let dm = DMatrix::from_element(1, 1, d);
        let (a, _) = solve_code(&dm, &DVector::from_element(1, y), &Misfit::from(PenaltySpec::L2), lam, None, &SolverOptions::default()).unwrap();
        let expect = (d * y).signum() * ((d * y).abs() - lam).max(0.0) / (d * d);
        prop_assert!((a[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn nonnegative_codes_respect_constraints(p in spec(), y in vec_of(3), entries in proptest::collection::vec(-2.0..2.0f64, 6)) {
        let d = DMatrix::from_vec(3, 2, entries);
        prop_assume!(d.amax() > 0.1);
        let (a, st) = solve_code(&d, &y, &Misfit::from(p), 0.2, Some((&-DMatrix::identity(2, 2), &DVector::zeros(2))), &SolverOptions::default()).unwrap();
        prop_assert!(a.min() >= -1e-8);
        prop_assert!(st.kkt_residual <= 1e-8);
    }

    #[test]
    fn mu_decreases_monotonically(p in spec(), y in vec_of(2)) {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, -0.3, 1.2]);
        let prob = CodeProblem::new(d, y, Misfit::from(p), 0.3);
        let (_, st) = prob.solve(&SolverOptions::default()).unwrap();
        for w in st.mu_history.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        for block in st.residuals.as_array() {
            prop_assert!(block <= 1e-8);
        }
    }

    #[test]
    fn dictionary_sweep_never_increases_objective(seed in 0u64..1000, huber in proptest::bool::ANY) {
        let mut rng = plq_learn::seeds::rng(seed);
        let y = random_matrix(&mut rng, 4, 6);
        let mut d = random_matrix(&mut rng, 4, 3);
        for mut c in d.column_iter_mut() {
            c.unscale_mut(c.norm().max(1.0));
        }
        let a = random_matrix(&mut rng, 3, 6);
        let misfit = if huber { Misfit::from(PenaltySpec::huber(0.5).unwrap()) } else { Misfit::from(PenaltySpec::L2) };
        let before = objective(&y, &d, &a, &misfit, 0.1);
        let upd = update_dictionary(&y, &d, &a, &misfit, &DictionaryOptions::default()).unwrap();
        prop_assert!(objective(&y, &upd.dictionary, &a, &misfit, 0.1) <= before + 1e-10);
        for j in 0..3 {
            prop_assert!(upd.dictionary.column(j).norm() <= 1.0 + 1e-12);
        }
    }
}

/// For problems with up to five codes a dense grid is out of reach, so the
/// oracle is convexity: the solver's point must beat every random probe.
#[test]
fn random_small_problems_beat_probes_and_grids() {
    let mut rng = plq_learn::seeds::rng(42);
    let opts = SolverOptions::default();
    for trial in 0..50 {
        let k = 1 + trial % 5;
        let m = 2 + trial % 4;
        let d = random_matrix(&mut rng, m, k);
        let y = random_vector(&mut rng, m);
        let prob = CodeProblem::new(d, y, Misfit::from(random_spec(&mut rng)), 0.3);
        let (a, _) = prob.solve(&opts).unwrap();
        let best = prob.objective(&a);
        if k <= 2 {
            let lo = a.add_scalar(-0.5);
            let hi = a.add_scalar(0.5);
            let step = if k == 1 { 1e-4 } else { 1e-3 };
            let grid = grid_min(|x| prob.objective(x), &lo, &hi, step);
            assert!(best <= grid + 1e-4, "trial {trial}: {best} vs grid {grid}");
        }
        for _ in 0..2000 {
            let scale = 10f64.powf(-3.0 + 3.0 * rand::Rng::gen::<f64>(&mut rng));
            let probe = &a + random_vector(&mut rng, k) * scale;
            assert!(best <= prob.objective(&probe) + 1e-9, "trial {trial}: probe beats solver");
        }
    }
}

#[test]
fn learn_is_seed_deterministic() {
    let mut rng = plq_learn::seeds::rng(3);
    let y = random_matrix(&mut rng, 5, 12);
    let mut cfg = LearnConfig::new(3, Misfit::from(PenaltySpec::huber(1.0).unwrap()));
    cfg.outer_max = 10;
    let a = plq_learn::dictlearn::learn(&y, &cfg).unwrap();
    let b = plq_learn::dictlearn::learn(&y, &cfg).unwrap();
    assert_eq!(a.objective_history, b.objective_history);
    assert_eq!(a.dictionary, b.dictionary);
}

#[test]
fn zero_rep_is_additive_identity() {
    let f = PenaltySpec::huber(1.0).unwrap().to_plq(2).unwrap();
    let y = DVector::from_column_slice(&[0.3, -4.0]);
    assert_eq!(f.add(&PlqRep::zero(2)).unwrap().eval(&y).unwrap(), f.eval(&y).unwrap());
}
