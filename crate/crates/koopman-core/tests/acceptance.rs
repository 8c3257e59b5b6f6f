//! Acceptance criteria, one report line each.
//!
//! Runs as a plain binary so the report is always printed. Criterion 7 is
//! reported but only enforced with `KOOPMAN_STRICT=1`; see the README.

mod common;

use std::time::{Duration, Instant};

use common::*;
use koopman_core::config::ExperimentConfig;
use koopman_core::dataset::NoiseSpec;
use koopman_core::evaluation::{fit_edmd, fit_method, forecast, lambda_sweep, monte_carlo, Family, SweepRow, SweepSpec};
use koopman_core::solvers::{ConstraintSpec, LearningProblem, MethodSpec, RegularizerSpec, SolverOptions};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn top3(rows: &[SweepRow], family: &str, lambda: f64) -> Vec<f64> {
    rows.iter().find(|r| r.family == family && r.lambda == lambda).expect("sweep row").gammas.clone()
}

fn example1() -> (ExperimentConfig, koopman_core::dataset::TrainingData) {
    let cfg = ExperimentConfig::bundled("example1").unwrap();
    let data = cfg.scenario().unwrap().training_data(NoiseSpec::none()).unwrap();
    (cfg, data)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let (cfg, data) = example1();
    let spec = SweepSpec { lambdas: vec![1e-8, 1e4], families: vec![Family::Operator, Family::Frobenius, Family::Nuclear], top_k: 3 };
    let rows = lambda_sweep(&data, &spec, &cfg.solver).map_err(|e| e.to_string())?;
    let edmd = top3(&rows, "edmd", 0.0);
    let limit = data.y.norm() / 1e2;
    for f in ["operator", "frobenius", "nuclear"] {
        let small = top3(&rows, f, 1e-8);
        if let Some(i) = (0..3).find(|&i| (small[i] - edmd[i]).abs() > 1e-3) {
            return Err(format!("{f} at 1e-8: |gamma{}| = {} vs EDMD {}", i + 1, small[i], edmd[i]));
        }
        let large = top3(&rows, f, 1e4);
        if let Some(g) = large.iter().find(|&&g| g > limit) {
            return Err(format!("{f} at 1e4: magnitude {g} > {limit}"));
        }
    }
    let t = start.elapsed();
    if t > Duration::from_secs(30) {
        return Err(format!("runtime {t:?}"));
    }
    Ok(())
}

/// First sweep weight at which `gamma_k` drops below 1% of its EDMD value.
fn crossing(rows: &[&SweepRow], k: usize, edmd: f64) -> Option<f64> {
    rows.iter().find(|r| r.gammas[k] < 0.01 * edmd).map(|r| r.lambda)
}

fn criterion_2() -> Check {
    let (cfg, data) = example1();
    let spec = cfg.evaluation.sweep.clone().ok_or("example1 has no sweep")?;
    let rows = lambda_sweep(&data, &spec, &cfg.solver).map_err(|e| e.to_string())?;
    let edmd = top3(&rows, "edmd", 0.0);
    let family = |f: &str| -> Vec<&SweepRow> {
        let mut v: Vec<&SweepRow> = rows.iter().filter(|r| r.family == f).collect();
        v.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        v
    };
    let nuclear = family("nuclear");
    if nuclear.windows(2).any(|w| w[1].rank > w[0].rank) {
        return Err("nuclear rank increases".into());
    }
    let mut tail = Vec::new();
    for f in ["nuclear", "frobenius", "operator"] {
        let sums: Vec<f64> = family(f).iter().map(|r| r.gammas.iter().sum()).collect();
        if sums.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-9)) {
            return Err(format!("{f}: magnitude sum increases along the sweep: {sums:?}"));
        }
        if sums.last() >= sums.first() {
            return Err(format!("{f}: no decay"));
        }
        tail.push(*sums.last().unwrap());
    }
    if !(tail[0] <= tail[1] && tail[1] <= tail[2]) {
        return Err(format!("magnitude sums at the largest weight not ordered nuclear <= frobenius <= operator: {tail:?}"));
    }
    for k in 1..3 {
        let c: Vec<f64> = ["nuclear", "frobenius", "operator"]
            .iter()
            .map(|f| crossing(&family(f), k, edmd[k]).unwrap_or(f64::INFINITY))
            .collect();
        if !(c[0] <= c[1] && c[1] <= c[2]) {
            return Err(format!("gamma{} reaches 1% of EDMD out of order: {c:?}", k + 1));
        }
    }
    Ok(())
}

fn spd(n: usize, lo: f64, hi: f64, r: &mut rand_chacha::ChaCha8Rng) -> DMatrix<f64> {
    let q = random_matrix(n, n, r).qr().q();
    let d = DVector::from_fn(n, |_, _| r.random_range(lo..hi));
    &q * DMatrix::from_diagonal(&d) * q.transpose()
}

fn psd_root(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt())) * e.eigenvectors.transpose()
}

/// `min |Z^{1/2} B G^{1/2} - Y|^2 + lambda |B|^2` by nested box searches in B.
fn grid_oracle(zr: &DMatrix<f64>, gr: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64, start: &DMatrix<f64>) -> f64 {
    let f = |b: &DMatrix<f64>| {
        let op = b.singular_values().max();
        (zr * b * gr - y).norm_squared() + lambda * op * op
    };
    let mut best = start.clone();
    let mut fbest = f(&best);
    let mut pitch = 0.1;
    while pitch >= 1e-3 * 0.999 {
        loop {
            let centre = best.clone();
            let mut moved = false;
            for i0 in -10i32..=10 {
                for i1 in -10i32..=10 {
                    for i2 in -10i32..=10 {
                        for i3 in -10i32..=10 {
                            let step = [i0, i1, i2, i3].map(|i| i as f64 * pitch);
                            let cand = &centre + DMatrix::from_row_slice(2, 2, &step);
                            let fc = f(&cand);
                            if fc < fbest {
                                fbest = fc;
                                best = cand;
                                moved = true;
                            }
                        }
                    }
                }
            }
            if !moved {
                break;
            }
        }
        pitch /= 10.0;
    }
    fbest
}

fn criterion_3() -> Check {
    let mut r = rng(3);
    let opts = SolverOptions::default();
    for inst in 0..20 {
        let (ns, ng) = (r.random_range(2..6), r.random_range(1..4));
        let z = spd(ns, 0.2, 2.0, &mut r);
        let g = spd(ng, 0.2, 2.0, &mut r);
        let y = random_matrix(ns, ng, &mut r);
        let lambda = 10f64.powf(r.random_range(-2.0..0.5));
        let p = LearningProblem::base(&z, &g, &y, opts).map_err(|e| e.to_string())?;
        let solves = [
            (RegularizerSpec::FrobeniusSq { lambda }, p.frobenius(lambda), None),
            (RegularizerSpec::OperatorNormSq { lambda }, p.operator_norm(lambda, &ConstraintSpec::default()), None),
            (RegularizerSpec::Nuclear { lambda }, p.nuclear(lambda), None),
            (RegularizerSpec::FrobeniusSq { lambda }, p.frobenius_stable(lambda, 0.3), Some(0.3)),
        ];
        for (reg, s, bound) in solves {
            let s = s.map_err(|e| e.to_string())?;
            let f0 = p.objective(&s.a, &reg);
            let scale = s.a.norm().max(1e-12);
            for i in 0..200 {
                let d = random_matrix(ns, ng, &mut r);
                let pert = &s.a + &d * ([1e-3, 1e-1][i % 2] * scale / d.norm());
                if let Some(rho) = bound {
                    if p.transform(&pert).singular_values().max() > rho {
                        continue;
                    }
                }
                let f1 = p.objective(&pert, &reg);
                if f0 > f1 + 1e-12 * (1.0 + f0) {
                    return Err(format!("instance {inst}, {reg:?}: perturbation improves {f0} to {f1}"));
                }
            }
        }
        let fro = p.frobenius(lambda).map_err(|e| e.to_string())?;
        let a = &fro.a;
        let stat = (&z * (&z * a * &g - &y) * &g + &z * a * &g * lambda).norm() / (1.0 + (&z * &y * &g).norm());
        if stat > 1e-8 {
            return Err(format!("instance {inst}: Frobenius stationarity residual {stat:e}"));
        }
        let nuc = p.nuclear(lambda).map_err(|e| e.to_string())?;
        let res = nuclear_subgradient_residual(&z, &g, &y, lambda, &nuc.b);
        if res > 1e-6 {
            return Err(format!("instance {inst}: nuclear subgradient residual {res:e}"));
        }
    }
    for inst in 0..10 {
        let z = spd(2, 0.3, 1.5, &mut r);
        let g = spd(2, 0.3, 1.5, &mut r);
        let y = random_matrix(2, 2, &mut r);
        let lambda = 10f64.powf(r.random_range(-1.5..0.5));
        let p = LearningProblem::base(&z, &g, &y, opts).map_err(|e| e.to_string())?;
        let s = p.operator_norm(lambda, &ConstraintSpec::default()).map_err(|e| e.to_string())?;
        let start = p.frobenius(lambda).map_err(|e| e.to_string())?.b;
        let oracle = grid_oracle(&psd_root(&z), &psd_root(&g), &y, lambda, &start);
        if (s.objective - oracle).abs() > 1e-3 {
            return Err(format!("2x2 instance {inst}: solver {} vs grid {oracle}", s.objective));
        }
    }
    Ok(())
}

/// Distance of `-grad/lambda` from the nuclear-norm subdifferential at `b`.
fn nuclear_subgradient_residual(z: &DMatrix<f64>, g: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64, b: &DMatrix<f64>) -> f64 {
    let (zr, gr) = (psd_root(z), psd_root(g));
    let grad = &zr * (&zr * b * &gr - y) * &gr * 2.0;
    let m = grad / -lambda;
    let svd = koopman_core::linalg::svd(b).unwrap();
    let top = svd.s.get(0).cloned().unwrap_or(0.0);
    let keep: Vec<usize> = (0..svd.s.len()).filter(|&i| svd.s[i] > 1e-8 * top).collect();
    let ur = svd.u.select_columns(&keep);
    let vr = svd.v_t.select_rows(&keep).transpose();
    let pu = DMatrix::identity(b.nrows(), b.nrows()) - &ur * ur.transpose();
    let pv = DMatrix::identity(b.ncols(), b.ncols()) - &vr * vr.transpose();
    let on_support = (ur.transpose() * &m * &vr - DMatrix::identity(keep.len(), keep.len())).norm();
    let mixed = (ur.transpose() * &m * &pv).norm() + (&pu * &m * &vr).norm();
    let off = (&pu * &m * &pv).singular_values().iter().cloned().fold(0.0, f64::max);
    on_support + mixed + (off - 1.0).max(0.0)
}

fn criterion_4() -> Check {
    let mut r = rng(4);
    for inst in 0..50 {
        let (ns, ng) = (r.random_range(1..8), r.random_range(1..6));
        let z = spd(ns, 0.2, 3.0, &mut r);
        let g = spd(ng, 0.2, 3.0, &mut r);
        let y = random_matrix(ns, ng, &mut r);
        let rank = r.random_range(0..=ns.min(ng) + 1);
        let p = LearningProblem::base(&z, &g, &y, SolverOptions::default()).map_err(|e| e.to_string())?;
        let s = p.rank(rank).map_err(|e| e.to_string())?;
        let mut sv: Vec<f64> = y.singular_values().iter().cloned().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let want = sv.iter().skip(rank).map(|v| v * v).sum::<f64>().sqrt();
        let got = s.diag("residual").ok_or("no residual diagnostic")?;
        if (got - want).abs() > 1e-9 {
            return Err(format!("instance {inst} (r={rank}): residual {got} vs {want}"));
        }
    }
    Ok(())
}

fn criterion_5() -> Check {
    let cfg = ExperimentConfig::bundled("example3").unwrap();
    let scenario = cfg.scenario().map_err(|e| e.to_string())?;
    let rho = cfg.method.rho().ok_or("example3 method has no bound")?;
    let limit = 1.0 - 1e-5 + 1e-7;
    let starts = [vec![0.5, 0.05], vec![0.35, 0.1], vec![0.45, 0.2]];
    for seed in 0..20u64 {
        let data = scenario.training_data(NoiseSpec { snr_db: 30.0, seed }).map_err(|e| e.to_string())?;
        let fit = fit_method(&data, &cfg.method, &cfg.solver, &cfg.cv).map_err(|e| format!("seed {seed}: {e}"))?;
        let top = fit.estimate.eigenvalues().map_err(|e| e.to_string())?[0].norm();
        if top > limit {
            return Err(format!("seed {seed}: max |eigenvalue| {top}"));
        }
        let smax = fit.estimate.b().map_err(|e| e.to_string())?.singular_values().max();
        let decay = smax.max(rho);
        for x0 in &starts {
            let kx = cfg.kernel.eval(x0, x0).unwrap().sqrt();
            let phis = fit.estimate.predict_observables(x0, 50).map_err(|e| e.to_string())?;
            for (n, phi) in phis.iter().enumerate() {
                for (l, pl) in data.anchors_g.iter().enumerate() {
                    let bound = decay.powi(n as i32) * kx * cfg.kernel.eval(pl, pl).unwrap().sqrt();
                    if phi[l].abs() > bound * (1.0 + 1e-9) {
                        return Err(format!("seed {seed}: step {n} observable {l}: {} > {bound}", phi[l]));
                    }
                }
            }
        }
        if smax > rho * (1.0 + 1e-9) {
            return Err(format!("seed {seed}: |B| = {smax} exceeds {rho}"));
        }
    }
    Ok(())
}

fn criterion_6() -> Check {
    let start = Instant::now();
    let cfg = ExperimentConfig::bundled("example2").unwrap();
    let mut mc = cfg.monte_carlo(false).map_err(|e| e.to_string())?;
    mc.snr_db = vec![20.0];
    mc.realizations = 20;
    mc.methods.retain(|m| matches!(m, MethodSpec::Edmd | MethodSpec::OperatorNorm { .. } | MethodSpec::Frobenius { .. }));
    let out = monte_carlo(&mc, &cfg.scenario().unwrap(), &cfg.mc_evaluation().unwrap(), &cfg.solver, &cfg.cv)
        .map_err(|e| e.to_string())?;
    if out.failures > 0 {
        return Err(format!("{} failed fits", out.failures));
    }
    let med = |m: &str| out.median(m, 20.0).unwrap_or(f64::NAN);
    let (edmd, op, fro) = (med("edmd"), med("operator"), med("frobenius"));
    println!("    medians: edmd {edmd:.4e}, operator {op:.4e}, frobenius {fro:.4e}");
    if !(op <= edmd && fro <= edmd) {
        return Err(format!("medians edmd {edmd}, operator {op}, frobenius {fro}"));
    }
    let t = start.elapsed();
    if t > Duration::from_secs(600) {
        return Err(format!("runtime {t:?}"));
    }
    Ok(())
}

fn criterion_7() -> Check {
    let cfg = ExperimentConfig::bundled("example4").unwrap();
    let fc = cfg.evaluation.forecast.clone().ok_or("example4 has no forecast")?;
    let scenario = cfg.scenario().map_err(|e| e.to_string())?;
    let data = scenario.training_data(NoiseSpec::none()).map_err(|e| e.to_string())?;
    let obs = scenario.observable_set().map_err(|e| e.to_string())?;
    let x0 = fc.initial_state.resolve(&cfg.system).map_err(|e| e.to_string())?;
    let run = |est: &koopman_core::operator::KoopmanEstimate| {
        forecast(est, &obs, &cfg.system, &x0, fc.steps, fc.dxi, fc.dt).map(|f| f.l2_error).map_err(|e| e.to_string())
    };
    let (_, edmd) = fit_edmd(&data).map_err(|e| e.to_string())?;
    let e_edmd = run(&edmd)?;
    let fit = fit_method(&data, &cfg.method, &cfg.solver, &cfg.cv).map_err(|e| e.to_string())?;
    let e_fro = run(&fit.estimate)?;
    println!("    EDMD error {e_edmd:.4e}, Frobenius error {e_fro:.4e} (lambda {:?}), ratio {:.3}", fit.lambda, e_edmd / e_fro);
    if e_edmd < 5.0 * e_fro {
        return Err(format!("EDMD/Frobenius error ratio {:.3} < 5", e_edmd / e_fro));
    }
    if !(1e-3..=1e-1).contains(&e_fro) {
        return Err(format!("Frobenius error {e_fro:e} outside [1e-3, 1e-1]"));
    }
    Ok(())
}

fn criterion_8() -> Check {
    let start = Instant::now();
    for seed in 0..100u64 {
        kernel_invariants(seed).map_err(|e| format!("seed {seed}: {e}"))?;
        let snr = [-3.0, 0.0, 10.0, 20.0, 30.0, 45.0][seed as usize % 6];
        snr_calibration(seed, snr).map_err(|e| format!("seed {seed}: {e}"))?;
        block_structure(seed).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    let t = start.elapsed();
    if t > Duration::from_secs(60) {
        return Err(format!("runtime {t:?}"));
    }
    Ok(())
}

fn main() {
    let strict = std::env::var("KOOPMAN_STRICT").is_ok_and(|v| v == "1");
    let criteria: [(u32, &str, fn() -> Check, bool); 8] = [
        (1, "small-weight limit matches EDMD, large-weight decay", criterion_1, true),
        (2, "weight sweep monotonicity and family ordering", criterion_2, true),
        (3, "solver optimality", criterion_3, true),
        (4, "Eckart-Young residual", criterion_4, true),
        (5, "stability constraint on Nicholson-Bailey", criterion_5, true),
        (6, "Van der Pol Monte Carlo medians", criterion_6, true),
        (7, "PDE forecast error ratio", criterion_7, strict),
        (8, "kernel and data invariants over 100 seeds", criterion_8, true),
    ];
    let mut failed = Vec::new();
    for (n, name, check, enforced) in criteria {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match &outcome {
            Ok(()) => println!("criterion {n}: PASS  {name} ({secs:.1} s)"),
            Err(e) => {
                let note = if enforced { "" } else { " [reported, not enforced]" };
                println!("criterion {n}: FAIL  {name} ({secs:.1} s): {e}{note}");
                if enforced {
                    failed.push(n);
                }
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
