//! End-to-end acceptance checks. Runs without the test harness so the
//! PASS/FAIL lines always reach the output; exits nonzero if any check fails.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use nalgebra::{DMatrix, DVector};
use plq_learn::apps::cluster::{quantile_sweep, ClusteringTask};
use plq_learn::apps::image::{robust_image_experiment, test_image, ImageExperimentConfig};
use plq_learn::apps::tags::{tag_flip_experiment, TagExperimentConfig};
use plq_learn::dictlearn::{learn, update_column, LearnConfig, StopReason};
use plq_learn::ipsolve::CodeProblem;
use plq_learn::lbfgs::LbfgsOptions;
use plq_learn::seeds::{derive, rng};
use plq_learn::{io, Family, Misfit, PenaltySpec, SolverOptions};
use rand::Rng;

const MASTER: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
    /// Exact rendering of every number the check depends on.
    fingerprint: String,
}

struct Check {
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn huber_over_gamma(x: f64, g: f64) -> f64 {
    if x.abs() <= g {
        x * x / (2.0 * g)
    } else {
        x.abs() - g / 2.0
    }
}

fn moreau_huber_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut fp = String::new();
    for g in [0.1, 0.5, 1.0, 2.0] {
        let env = PenaltySpec::L1.to_plq(1).unwrap().moreau(g).unwrap().without_closed_form();
        for i in 0..=1000 {
            let x = -5.0 + i as f64 * 0.01;
            let v = env.eval(&DVector::from_element(1, x)).unwrap();
            worst = worst.max((v - huber_over_gamma(x, g)).abs());
            fp.push_str(&format!("{v:?},"));
        }
    }
    Outcome {
        pass: worst < 1e-8,
        detail: format!("max |e - huber/gamma| = {worst:.3e}"),
        fingerprint: fp,
    }
}

fn calculus_consistency() -> Outcome {
    let mut r = rng(derive(MASTER, "calculus"));
    let mut worst: f64 = 0.0;
    let mut fp = String::new();
    for _ in 0..200 {
        let n = r.gen_range(1..=6);
        let c = random_composite_with(&mut r, n, None);
        let y = random_vector(&mut r, n);
        let qp = c.rep.clone().without_closed_form().eval(&y).unwrap();
        let direct = c.direct(&y);
        worst = worst.max((qp - direct).abs() / direct.abs().max(1.0));
        fp.push_str(&format!("{qp:?},"));
    }
    Outcome {
        pass: worst <= 1e-7,
        detail: format!("max relative gap = {worst:.3e} over 200 composites"),
        fingerprint: fp,
    }
}

fn kkt_certificate() -> Outcome {
    let mut r = rng(derive(MASTER, "kkt"));
    let opts = SolverOptions::default();
    let mut worst_block: f64 = 0.0;
    let mut worst_grid = f64::NEG_INFINITY;
    let mut failures = 0;
    let mut fp = String::new();
    for i in 0..100 {
        let k = 1 + i % 10;
        let m = r.gen_range(k.max(2)..=20);
        let spec = spec_for(Family::ALL[i % Family::ALL.len()], r.gen(), r.gen());
        let prob = CodeProblem::new(random_matrix(&mut r, m, k), random_vector(&mut r, m), Misfit::from(spec), 0.2);
        let Ok((a, st)) = prob.solve(&opts) else {
            failures += 1;
            continue;
        };
        worst_block = st.residuals.as_array().into_iter().fold(worst_block, f64::max);
        let obj = prob.objective(&a);
        if k <= 2 {
            let step = if k == 1 { 1e-4 } else { 2e-3 };
            let grid = grid_min(|x| prob.objective(x), &a.add_scalar(-1.0), &a.add_scalar(1.0), step);
            worst_grid = worst_grid.max(obj - grid);
        }
        fp.push_str(&format!("{:?},{obj:?},", a.as_slice()));
    }
    Outcome {
        pass: failures == 0 && worst_block <= 1e-8 && worst_grid <= 1e-4,
        detail: format!(
            "{failures} solver failures, worst KKT block {worst_block:.3e}, worst objective - grid {worst_grid:.3e}"
        ),
        fingerprint: fp,
    }
}

fn soft_threshold() -> Outcome {
    let mut r = rng(derive(MASTER, "soft-threshold"));
    let opts = SolverOptions::default();
    let l2 = Misfit::from(PenaltySpec::L2);
    let mut worst: f64 = 0.0;
    let mut fp = String::new();
    for _ in 0..100 {
        let diag: Vec<f64> = (0..10).map(|_| r.gen_range(0.2..3.0) * if r.gen() { 1.0 } else { -1.0 }).collect();
        let d = DMatrix::from_diagonal(&DVector::from_vec(diag.clone()));
        let y = random_vector(&mut r, 10) * 2.0;
        let lam = r.gen_range(0.01..2.0);
        let (a, _) = plq_learn::ipsolve::solve_code(&d, &y, &l2, lam, None, &opts).unwrap();
        for i in 0..10 {
            let z = diag[i] * y[i];
            let expect = z.signum() * (z.abs() - lam).max(0.0) / (diag[i] * diag[i]);
            worst = worst.max((a[i] - expect).abs());
        }
        fp.push_str(&format!("{:?},", a.as_slice()));
    }
    Outcome {
        pass: worst <= 1e-6,
        detail: format!("max |a - soft threshold| = {worst:.3e} over 1000 scalars"),
        fingerprint: fp,
    }
}

fn l2_column_update() -> Outcome {
    let mut r = rng(derive(MASTER, "column"));
    let l2 = Misfit::from(PenaltySpec::L2);
    let mut worst: f64 = 0.0;
    let mut max_iter = 0;
    let mut fp = String::new();
    for _ in 0..50 {
        let m = r.gen_range(2..=20);
        let t = r.gen_range(2..=40);
        let yj = random_matrix(&mut r, m, t);
        let aj = random_vector(&mut r, t);
        let init = random_vector(&mut r, m);
        let upd = update_column(&yj, &aj, &init, &l2, &LbfgsOptions::default()).unwrap();
        let exact = &yj * &aj / aj.norm_squared();
        worst = worst.max((&upd.column - exact).amax());
        max_iter = max_iter.max(upd.iterations);
        fp.push_str(&format!("{:?},{},", upd.column.as_slice(), upd.iterations));
    }
    Outcome {
        pass: worst <= 1e-8 && max_iter <= 2,
        detail: format!("max deviation {worst:.3e}, max iterations {max_iter}"),
        fingerprint: fp,
    }
}

fn planted_data(seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let mut d0 = random_matrix(&mut r, 16, 8);
    for mut c in d0.column_iter_mut() {
        c.normalize_mut();
    }
    let a0 = DMatrix::from_fn(8, 64, |_, _| if r.gen::<f64>() < 0.3 { normal(&mut r) } else { 0.0 });
    &d0 * a0 + random_matrix(&mut r, 16, 64) * 0.05
}

fn bcd_convergence() -> Outcome {
    let y = planted_data(derive(MASTER, "bcd-data"));
    let mut pass = true;
    let mut detail = Vec::new();
    let mut fp = String::new();
    for spec in ["l2", "huber:kappa=1", "qhuber:tau=0.25,kappa=1"] {
        let mut cfg = LearnConfig::new(8, spec.parse().unwrap());
        cfg.lam = 0.2;
        cfg.outer_max = 100;
        cfg.seed = derive(MASTER, "bcd-init");
        let st = learn(&y, &cfg).unwrap();
        let rise = st
            .objective_history
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max);
        let ok = rise <= 1e-10 && st.stop_reason == StopReason::RelativeDecrease && st.iterations <= 100;
        pass &= ok;
        detail.push(format!("{spec}: {} iterations, max rise {rise:.1e}", st.iterations));
        fp.push_str(&format!("{:?},", st.objective_history));
    }
    Outcome {
        pass,
        detail: detail.join("; "),
        fingerprint: fp,
    }
}

fn gradient_checks() -> Outcome {
    let mut r = rng(derive(MASTER, "gradients"));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut fp = String::new();
    for family in [Family::L2, Family::Huber, Family::QuantileHuber, Family::SmoothInsensitive] {
        for _ in 0..100 {
            let spec = spec_for(family, r.gen(), r.gen());
            let rep = spec.to_plq(3).unwrap();
            let y = random_vector(&mut r, 3) * 2.0;
            let g = rep.grad(&y).unwrap();
            let fd = fd_gradient(|z| z.iter().map(|&v| spec.value(v)).sum(), &y, h);
            worst = worst.max(relative_error(&g, &fd));
            fp.push_str(&format!("{:?},", g.as_slice()));
        }
    }
    for _ in 0..20 {
        let n = r.gen_range(1..=6);
        let gamma = r.gen_range(0.2..2.0);
        let c = random_composite_with(&mut r, n, Some(gamma));
        for _ in 0..100 {
            let y = random_vector(&mut r, n);
            let g = c.rep.grad(&y).unwrap();
            let fd = fd_gradient(|z| c.direct(z), &y, h);
            worst = worst.max(relative_error(&g, &fd));
            fp.push_str(&format!("{:?},", g.as_slice()));
        }
    }
    Outcome {
        pass: worst < 1e-5,
        detail: format!("max relative error {worst:.3e}"),
        fingerprint: fp,
    }
}

fn robust_image() -> Outcome {
    let cfg = ImageExperimentConfig {
        atoms: 16,
        lam: 0.01,
        repeats: 3,
        outer_max: 50,
        outer_rtol: 1e-4,
        seed: MASTER,
        ..Default::default()
    };
    let huber: Misfit = "huber:kappa=0.05".parse().unwrap();
    let misfits = [Misfit::from(PenaltySpec::L2), huber.clone()];
    let levels = [0.05, 0.1, 0.15];
    let report = robust_image_experiment(&test_image(64), &levels, &misfits, &cfg).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for lvl in levels {
        let l2 = report.mean_psnr(lvl, "l2").unwrap();
        let hb = report.mean_psnr(lvl, &huber.to_string()).unwrap();
        pass &= hb - l2 >= 1.0;
        detail.push(format!("{lvl}: huber {hb:.2} dB vs l2 {l2:.2} dB"));
    }
    Outcome {
        pass,
        detail: detail.join("; "),
        fingerprint: report.to_csv(),
    }
}

fn mixed_tags() -> Outcome {
    let cfg = TagExperimentConfig {
        seed: MASTER,
        ..Default::default()
    };
    let flips = [0.05, 0.1, 0.2];
    let report = tag_flip_experiment(&flips, 20, &cfg).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for f in flips {
        let l2 = report.mean_error(f, "l2").unwrap();
        let mixed = report.mean_error(f, "mixed").unwrap();
        pass &= mixed <= l2;
        detail.push(format!("{f}: mixed {mixed:.4} vs l2 {l2:.4}"));
    }
    Outcome {
        pass,
        detail: detail.join("; "),
        fingerprint: report.to_csv(),
    }
}

fn wine_sweep() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/wine.csv");
    let table = io::read_labeled_csv(&path, false, None).unwrap();
    let task = ClusteringTask::from_table(&table.features, table.labels).unwrap();
    let taus = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    let report = quantile_sweep(&task, &taus, 0.1, 0.05, MASTER, &SolverOptions::default()).unwrap();
    let structural = report.rows.iter().all(|r| r.laplacian_psd && r.zero_diagonal);
    let base = report.baseline().unwrap().accuracy;
    let mid = report.at_tau(0.5).unwrap().accuracy;
    Outcome {
        pass: structural && report.rows.len() == 10 && (mid - base).abs() <= 10.0,
        detail: format!("structural checks {structural}, accuracy tau=0.5 {mid:.2}% vs l2 {base:.2}%"),
        fingerprint: format!("{:?}", report),
    }
}

const CHECKS: [Check; 10] = [
    Check { name: "moreau-huber identity", limit: Some(Duration::from_secs(1)), run: moreau_huber_identity },
    Check { name: "calculus consistency", limit: Some(Duration::from_secs(30)), run: calculus_consistency },
    Check { name: "kkt certificate", limit: Some(Duration::from_secs(60)), run: kkt_certificate },
    Check { name: "soft-threshold oracle", limit: Some(Duration::from_secs(5)), run: soft_threshold },
    Check { name: "l2 column update", limit: None, run: l2_column_update },
    Check { name: "bcd monotone convergence", limit: None, run: bcd_convergence },
    Check { name: "gradient checks", limit: None, run: gradient_checks },
    Check { name: "robust image modeling", limit: Some(Duration::from_secs(600)), run: robust_image },
    Check { name: "mixed-penalty tags", limit: Some(Duration::from_secs(300)), run: mixed_tags },
    Check { name: "quantile sweep on wine", limit: Some(Duration::from_secs(600)), run: wine_sweep },
];

fn main() -> ExitCode {
    let mut failed = Vec::new();
    let mut fingerprints = Vec::new();
    for check in &CHECKS {
        let start = Instant::now();
        let out = (check.run)();
        let elapsed = start.elapsed();
        let in_time = check.limit.is_none_or(|l| elapsed < l);
        let pass = out.pass && in_time;
        let limit = check.limit.map(|l| format!(" / limit {}s", l.as_secs())).unwrap_or_default();
        println!(
            "{} {}: {} ({:.2}s{limit})",
            if pass { "PASS" } else { "FAIL" },
            check.name,
            out.detail,
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(check.name);
        }
        fingerprints.push(out.fingerprint);
    }
    let mut drift = Vec::new();
    for (check, fp) in CHECKS.iter().zip(&fingerprints) {
        if (check.run)().fingerprint != *fp {
            drift.push(check.name);
        }
    }
    let deterministic = drift.is_empty();
    println!(
        "{} determinism: {}",
        if deterministic { "PASS" } else { "FAIL" },
        if deterministic { "every check reproduced bit for bit".to_string() } else { format!("drift in {drift:?}") }
    );
    if !deterministic {
        failed.push("determinism");
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", CHECKS.len() + 1);
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}
