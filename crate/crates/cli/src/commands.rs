//! Each command validates and loads every input before creating the output
//! directory, so a failed validation leaves nothing behind.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use nalgebra::{DMatrix, DVector};
use plq_learn::apps::cluster::{default_sweep_lambda, quantile_sweep, ClusteringTask};
use plq_learn::apps::image::{extract_patches, robust_image_experiment, test_image, ImageExperimentConfig};
use plq_learn::apps::tags::{tag_flip_experiment, TagExperimentConfig};
use plq_learn::dictlearn::{learn_with_observer, LearnConfig};
use plq_learn::ipsolve::solve_code_batch;
use plq_learn::seeds::derive;
use plq_learn::{io, Misfit, PenaltySpec, SolverOptions};
use serde_json::json;

use crate::output::{history_csv, RunDir};
use crate::{ClusterArgs, CodeArgs, ImageArgs, LearnArgs, SolverArgs, TagArgs};

fn parse_misfit(spec: &str) -> Result<Misfit> {
    spec.parse().with_context(|| format!("invalid misfit spec '{spec}'"))
}

fn read_matrix(path: &Path, header: bool) -> Result<DMatrix<f64>> {
    io::read_matrix_csv(path, header).with_context(|| format!("reading {}", path.display()))
}

fn solver(a: &SolverArgs) -> Result<SolverOptions> {
    let opts = SolverOptions {
        tol: a.ip_tol,
        max_iter: a.ip_max_iter,
        ..SolverOptions::default()
    };
    opts.validate()?;
    Ok(opts)
}

fn check_lambda(lam: f64) -> Result<()> {
    ensure!(lam.is_finite() && lam >= 0.0, "--lambda must be finite and nonnegative, got {lam}");
    Ok(())
}

fn check_fractions(name: &str, values: &[f64]) -> Result<()> {
    ensure!(!values.is_empty(), "{name} is empty");
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        bail!("{name} must lie in [0, 1], got {v}");
    }
    Ok(())
}

fn seeds(master: u64, parts: &[(&str, u64)]) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::from([("master".to_string(), master)]);
    out.extend(parts.iter().map(|(k, v)| (k.to_string(), *v)));
    out
}

pub fn learn(a: LearnArgs, threads: usize) -> Result<()> {
    let started = Instant::now();
    ensure!(a.atoms > 0, "--atoms must be positive");
    let misfit = parse_misfit(&a.misfit)?;
    let y = read_matrix(&a.input, a.header)?;
    let init_seed = derive(a.out.seed, "dictionary-init");
    let mut cfg = LearnConfig::new(a.atoms, misfit);
    cfg.lam = a.lambda;
    cfg.smoothing_gamma = a.gamma;
    cfg.outer_max = a.max_iter;
    cfg.outer_rtol = a.rtol;
    cfg.seed = init_seed;
    cfg.normalize_columns = !a.no_normalize;
    cfg.solver = solver(&a.solver)?;
    cfg.resolve_unsmoothed = a.resolve_unsmoothed;
    cfg.validate()?;
    cfg.effective_misfit()?.check_len(y.nrows())?;

    let mut dir = RunDir::create(&a.out.out_dir, started)?;
    let every = a.checkpoint_every;
    let config_json = serde_json::to_value(&cfg)?;
    let state = learn_with_observer(&y, &cfg, |st| {
        if every == 0 || st.iterations == 0 || st.iterations % every != 0 {
            return Ok(());
        }
        let sidecar = json!({
            "iteration": st.iterations,
            "objective_history": st.objective_history,
            "config": config_json,
        });
        dir.write_matrix("checkpoint/dictionary.csv", &st.dictionary)
            .and_then(|_| dir.write_matrix("checkpoint/codes.csv", &st.codes))
            .and_then(|_| dir.write_json("checkpoint/state.json", &sidecar))
            .map_err(|e| plq_learn::Error::Data(format!("{e:#}")))
    })?;

    let series = state.misfit.to_string();
    dir.write_matrix("dictionary.csv", &state.dictionary)?;
    dir.write_matrix("codes.csv", &state.codes)?;
    if let Some(codes) = &state.unsmoothed_codes {
        dir.write_matrix("codes_unsmoothed.csv", codes)?;
    }
    dir.write("objective_history.csv", history_csv(&state.objective_history, &io::csv_field(&series)))?;
    if !state.converged {
        eprintln!("warning: stopped after {} iterations without meeting --rtol", state.iterations);
    }
    let result = json!({
        "iterations": state.iterations,
        "converged": state.converged,
        "stop_reason": state.stop_reason,
        "final_objective": state.objective_history.last(),
        "dead_atoms": state.dead_atoms,
        "failed_columns": state.failed_columns,
        "optimized_misfit": series,
    });
    dir.finish("learn", config_json, seeds(a.out.seed, &[("dictionary-init", init_seed)]), result, threads)
}

pub fn code(a: CodeArgs, threads: usize) -> Result<()> {
    let started = Instant::now();
    let misfit = parse_misfit(&a.misfit)?;
    check_lambda(a.lambda)?;
    let opts = solver(&a.solver)?;
    let d = read_matrix(&a.dictionary, a.header)?;
    let y = read_matrix(&a.input, a.header)?;
    ensure!(
        d.nrows() == y.nrows(),
        "dictionary has {} rows but the data has {}",
        d.nrows(),
        y.nrows()
    );
    misfit.check_len(y.nrows())?;

    let k = d.ncols();
    let cons = a.nonneg.then(|| (-DMatrix::<f64>::identity(k, k), DVector::<f64>::zeros(k)));
    let mut dir = RunDir::create(&a.out.out_dir, started)?;
    let batch = solve_code_batch(&d, &y, &misfit, a.lambda, cons.as_ref().map(|(m, v)| (m, v)), &opts)?;
    dir.write_matrix("codes.csv", &batch.codes)?;
    let mut kkt = String::from("column,status,iterations,kkt_residual\n");
    for (j, st) in batch.states.iter().enumerate() {
        match st {
            Some(st) => kkt.push_str(&format!("{j},ok,{},{}\n", st.iterations, st.kkt_residual)),
            None => kkt.push_str(&format!("{j},failed,,\n")),
        }
    }
    dir.write("kkt.csv", kkt)?;
    let failures: Vec<String> = batch.failures.iter().map(|e| e.to_string()).collect();
    let config = json!({
        "dictionary": a.dictionary,
        "input": a.input,
        "header": a.header,
        "misfit": misfit.to_string(),
        "lambda": a.lambda,
        "nonneg": a.nonneg,
        "solver": opts,
    });
    let nfail = failures.len();
    dir.finish("code", config, seeds(a.out.seed, &[]), json!({ "failures": failures }), threads)?;
    ensure!(nfail == 0, "{nfail} of {} columns failed; see kkt.csv", y.ncols());
    Ok(())
}

pub fn image(a: ImageArgs, threads: usize) -> Result<()> {
    let started = Instant::now();
    let misfits = a.misfits.iter().map(|s| parse_misfit(s)).collect::<Result<Vec<_>>>()?;
    check_fractions("--noise-levels", &a.noise_levels)?;
    check_lambda(a.lambda)?;
    ensure!(a.atoms > 0 && a.repeats > 0, "--atoms and --repeats must be positive");
    let img = match &a.input {
        Some(p) => io::read_image(p, a.header).with_context(|| format!("reading {}", p.display()))?,
        None => test_image(a.synthetic_size),
    };
    let patches = extract_patches(&img, a.patch)?;
    for m in &misfits {
        m.check_len(patches.nrows())?;
        ensure!(m.is_smooth(), "misfit '{m}' is nonsmooth; dictionary learning needs a smooth misfit");
    }
    if a.atoms > patches.ncols() {
        eprintln!(
            "warning: {} atoms for {} patches; unused atoms are filled with random unit vectors",
            a.atoms,
            patches.ncols()
        );
    }
    let cfg = ImageExperimentConfig {
        patch: a.patch,
        atoms: a.atoms,
        lam: a.lambda,
        outer_max: a.max_iter,
        outer_rtol: a.rtol,
        repeats: a.repeats,
        seed: a.out.seed,
    };

    let mut dir = RunDir::create(&a.out.out_dir, started)?;
    let report = robust_image_experiment(&img, &a.noise_levels, &misfits, &cfg)?;
    dir.write("image_psnr.csv", report.to_csv())?;
    let mut means = Vec::new();
    for &lvl in &a.noise_levels {
        for name in std::iter::once("noisy".to_string()).chain(misfits.iter().map(|m| m.to_string())) {
            means.push(json!({ "noise_level": lvl, "misfit": name, "mean_psnr": report.mean_psnr(lvl, &name) }));
        }
    }
    let config = json!({
        "input": a.input,
        "synthetic_size": a.input.is_none().then_some(a.synthetic_size),
        "noise_levels": a.noise_levels,
        "misfits": misfits.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
        "experiment": cfg,
    });
    dir.finish("image-experiment", config, seeds(a.out.seed, &[]), json!({ "mean_psnr": means }), threads)
}

pub fn tags(a: TagArgs, threads: usize) -> Result<()> {
    let started = Instant::now();
    check_fractions("--flips", &a.flips)?;
    check_lambda(a.lambda)?;
    ensure!(a.kappa > 0.0 && a.kappa.is_finite(), "--kappa must be positive");
    ensure!(a.gamma >= 0.0 && a.gamma.is_finite(), "--gamma must be nonnegative");
    ensure!(a.repeats > 0, "--repeats must be positive");
    let cfg = TagExperimentConfig {
        gamma_scale: a.gamma,
        kappa: a.kappa,
        lam: a.lambda,
        seed: a.out.seed,
        ..TagExperimentConfig::default()
    };

    let mut dir = RunDir::create(&a.out.out_dir, started)?;
    let report = tag_flip_experiment(&a.flips, a.repeats, &cfg)?;
    dir.write("tag_errors.csv", report.to_csv())?;
    let means: Vec<_> = a
        .flips
        .iter()
        .map(|&f| json!({ "flip": f, "l2": report.mean_error(f, "l2"), "mixed": report.mean_error(f, "mixed") }))
        .collect();
    let config = json!({ "flips": a.flips, "repeats": a.repeats, "experiment": cfg });
    dir.finish("tag-experiment", config, seeds(a.out.seed, &[]), json!({ "mean_error": means }), threads)
}

pub fn cluster(a: ClusterArgs, threads: usize) -> Result<()> {
    let started = Instant::now();
    ensure!(!a.taus.is_empty(), "--taus is empty");
    if let Some(t) = a.taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        bail!("--taus must lie in (0, 1), got {t}");
    }
    ensure!(a.kappa > 0.0 && a.kappa.is_finite(), "--kappa must be positive");
    let opts = solver(&a.solver)?;
    let table = io::read_labeled_csv(&a.input, a.header, a.label_col)
        .with_context(|| format!("reading {}", a.input.display()))?;
    let task = ClusteringTask::from_table(&table.features, table.labels)?;
    let lam = a.lambda.unwrap_or_else(|| default_sweep_lambda(task.x.ncols()));
    check_lambda(lam)?;
    PenaltySpec::quantile_huber(0.5, a.kappa)?;

    let mut dir = RunDir::create(&a.out.out_dir, started)?;
    let report = quantile_sweep(&task, &a.taus, a.kappa, lam, a.out.seed, &opts)?;
    dir.write("cluster_sweep.csv", report.to_csv())?;
    let checks_ok = report.rows.iter().all(|r| r.laplacian_psd && r.zero_diagonal);
    let config = json!({
        "input": a.input,
        "header": a.header,
        "label_col": a.label_col,
        "taus": a.taus,
        "kappa": a.kappa,
        "lambda": lam,
        "solver": opts,
        "samples": task.x.ncols(),
        "classes": task.k,
    });
    let result = json!({
        "baseline_accuracy": report.baseline().map(|r| r.accuracy),
        "band": report.band,
        "laplacians_psd_and_zero_diagonal": checks_ok,
    });
    let spectral = derive(a.out.seed, "spectral");
    dir.finish("cluster-sweep", config, seeds(a.out.seed, &[("spectral", spectral)]), result, threads)?;
    ensure!(checks_ok, "a Laplacian failed the symmetric-PSD or zero-diagonal check");
    Ok(())
}

fn huber_over_gamma(x: f64, g: f64) -> f64 {
    if x.abs() <= g {
        x * x / (2.0 * g)
    } else {
        x.abs() - g / 2.0
    }
}

/// Closed-form oracles: the soft-threshold solution of scalar l2 + l1
/// coding, and the Moreau envelope of |x| against scaled Huber.
pub fn selftest() -> Result<()> {
    let mut rows = Vec::new();

    let l2 = Misfit::from(PenaltySpec::L2);
    let opts = SolverOptions::default();
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let d = 0.25 + (i % 7) as f64 * 0.4;
        let y = -4.0 + (i as f64) * 0.04;
        let lam = 0.05 + (i % 11) as f64 * 0.15;
        let (a, _) = plq_learn::ipsolve::solve_code(
            &DMatrix::from_element(1, 1, d),
            &DVector::from_element(1, y),
            &l2,
            lam,
            None,
            &opts,
        )?;
        let z = d * y;
        let expect = z.signum() * (z.abs() - lam).max(0.0) / (d * d);
        worst = worst.max((a[0] - expect).abs());
    }
    rows.push(("soft-threshold", worst <= 1e-6, format!("max error {worst:.2e} (tol 1e-6)")));

    let mut worst: f64 = 0.0;
    for g in [0.1, 0.5, 1.0, 2.0] {
        let env = PenaltySpec::L1.to_plq(1)?.moreau(g)?.without_closed_form();
        for i in 0..=1000 {
            let x = -5.0 + i as f64 * 0.01;
            worst = worst.max((env.eval(&DVector::from_element(1, x))? - huber_over_gamma(x, g)).abs());
        }
    }
    rows.push(("moreau-huber", worst < 1e-8, format!("max error {worst:.2e} (tol 1e-8)")));

    println!("{:<16} {:<6} detail", "check", "result");
    for (name, ok, detail) in &rows {
        println!("{name:<16} {:<6} {detail}", if *ok { "PASS" } else { "FAIL" });
    }
    ensure!(rows.iter().all(|r| r.1), "selftest failed");
    Ok(())
}
