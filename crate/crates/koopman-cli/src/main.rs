//! `koopman`: simulate, learn, analyze and benchmark Koopman estimates from experiment manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use koopman_core::config::ExperimentConfig;
use koopman_core::dataset::{TrainingData, Trajectory};
use koopman_core::evaluation::{self, fit_method, forecast, lambda_sweep, monte_carlo, snr_format, Fit};
use koopman_core::operator::{reconstruct_states_linear, KoopmanEstimate};
use koopman_core::kernels::KernelSpec;
use koopman_core::{KoopmanError, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "koopman", version, about = "Kernel Koopman operator learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment manifest, or the name of a bundled one (example1..example4).
    #[arg(long)]
    config: String,
    /// Output directory (defaults to the manifest's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed for noise and Monte Carlo streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Regularization weight of the configured method.
    #[arg(long)]
    lambda: Option<f64>,
    /// Method name: edmd, operator, operator_stable, frobenius, nuclear, rank, frobenius_stable, general_loss.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured trajectories as CSV.
    Simulate(Common),
    /// Fit the configured method; writes estimate.json and diagnostics.json.
    Learn {
        #[command(flatten)]
        common: Common,
        /// Trajectory CSV files used instead of simulating.
        #[arg(long = "data")]
        data: Vec<PathBuf>,
    },
    /// Eigenvalues of an estimate.
    Eigs {
        #[command(flatten)]
        common: Common,
        /// Estimate JSON written by `learn`; fitted from the manifest when absent.
        #[arg(long)]
        estimate: Option<PathBuf>,
    },
    /// Iterate an estimate from an initial state.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimate: Option<PathBuf>,
        /// Number of steps (defaults to the manifest's forecast or trajectory length).
        #[arg(long)]
        steps: Option<usize>,
        /// Comma-separated initial state.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
    },
    /// Eigenvalue magnitudes, rank and norms across regularization weights.
    Sweep(Common),
    /// Monte Carlo comparison of methods under noise.
    Mc {
        #[command(flatten)]
        common: Common,
        /// Use the full number of realizations.
        #[arg(long)]
        full: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &KoopmanError) -> u8 {
    match e {
        KoopmanError::Io(_) => 3,
        KoopmanError::Numerical(_) => 1,
        _ => 2,
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    hash: String,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Ctx> {
        let path = Path::new(&c.config);
        let mut cfg = if path.exists() {
            ExperimentConfig::load(path)?
        } else if ExperimentConfig::bundled_names().contains(&c.config.as_str()) {
            ExperimentConfig::bundled(&c.config)?
        } else {
            return Err(KoopmanError::Config(format!("config '{}' not found", c.config)));
        };
        if let Some(s) = c.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(m) = &c.method {
            cfg = cfg.with_method(m)?;
        }
        if let Some(l) = c.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(KoopmanError::Config(format!("--lambda must be positive, got {l}")));
            }
            cfg = cfg.with_lambda(l);
        }
        let out = c.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        fs::create_dir_all(&out)?;
        let hash = cfg.hash();
        Ok(Ctx { cfg, hash, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data(&self) -> Result<TrainingData> {
        self.cfg.scenario()?.training_data(self.cfg.noise_spec())
    }

    fn fit(&self, data: &TrainingData) -> Result<Fit> {
        fit_method(data, &self.cfg.method, &self.cfg.solver, &self.cfg.cv)
    }

    fn estimate(&self, file: &Option<PathBuf>) -> Result<KoopmanEstimate> {
        match file {
            Some(p) => KoopmanEstimate::from_json(&fs::read_to_string(p)?),
            None => Ok(self.fit(&self.data()?)?.estimate),
        }
    }

    /// CSV with a provenance comment line, a header and preformatted rows.
    fn write_csv(&self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut text = format!("# config_hash={}\n{}\n", self.hash, header.join(","));
        for r in rows {
            writeln!(text, "{}", r.join(",")).expect("string write");
        }
        fs::write(self.path(name), text)?;
        Ok(())
    }

    fn write_json(&self, name: &str, value: &serde_json::Value) -> Result<()> {
        fs::write(self.path(name), serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(c) => simulate(&Ctx::new(&c)?),
        Command::Learn { common, data } => learn(&Ctx::new(&common)?, &data),
        Command::Eigs { common, estimate } => eigs(&Ctx::new(&common)?, &estimate),
        Command::Predict { common, estimate, steps, x0 } => predict(&Ctx::new(&common)?, &estimate, steps, x0),
        Command::Sweep(c) => sweep(&Ctx::new(&c)?),
        Command::Mc { common, full } => mc(&Ctx::new(&common)?, full),
    }
}

fn simulate(ctx: &Ctx) -> Result<()> {
    let sc = ctx.cfg.scenario()?;
    let clean = sc.clean_trajectories()?;
    let noise = ctx.cfg.noise_spec();
    for (j, t) in clean.iter().enumerate() {
        t.save(&ctx.path(&format!("trajectory_{j}.csv")))?;
        if !noise.is_none() {
            let seed = evaluation::mix_seed(noise.seed, j as u64);
            let noisy = koopman_core::dataset::add_noise(t, koopman_core::dataset::NoiseSpec { seed, ..noise })?;
            noisy.save(&ctx.path(&format!("trajectory_{j}_noisy.csv")))?;
        }
    }
    println!("wrote {} trajectories to {}", clean.len(), ctx.out.display());
    Ok(())
}

fn learn(ctx: &Ctx, files: &[PathBuf]) -> Result<()> {
    let data = if files.is_empty() {
        ctx.data()?
    } else {
        let trajs = files.iter().map(|p| Trajectory::load(p)).collect::<Result<Vec<_>>>()?;
        ctx.cfg.scenario()?.build(&trajs)?
    };
    let fit = ctx.fit(&data)?;
    fs::write(ctx.path("estimate.json"), fit.estimate.to_json()?)?;
    let diag = json!({
        "config_hash": ctx.hash,
        "method": fit.method,
        "lambda": fit.lambda,
        "objective": fit.result.objective,
        "iterations": fit.result.iterations,
        "converged": fit.result.converged,
        "diagnostics": fit.result.diagnostics,
    });
    ctx.write_json("diagnostics.json", &diag)?;
    if !fit.result.converged {
        log::warn!("solver stopped after {} iterations without meeting the tolerance", fit.result.iterations);
    }
    println!("{} fit: objective {:.6e}, converged {}", fit.method.label(), fit.result.objective, fit.result.converged);
    Ok(())
}

fn eigs(ctx: &Ctx, estimate: &Option<PathBuf>) -> Result<()> {
    let est = ctx.estimate(estimate)?;
    let rows: Vec<Vec<String>> = est
        .eigenvalues()?
        .iter()
        .enumerate()
        .map(|(i, v)| vec![(i + 1).to_string(), num(v.re), num(v.im), num(v.norm())])
        .collect();
    ctx.write_csv("eigs.csv", &["index", "re", "im", "abs"].map(String::from), &rows)?;
    println!("wrote {} eigenvalues", rows.len());
    Ok(())
}

fn predict(ctx: &Ctx, estimate: &Option<PathBuf>, steps: Option<usize>, x0: Option<Vec<f64>>) -> Result<()> {
    let est = ctx.estimate(estimate)?;
    let fc = ctx.cfg.evaluation.forecast.as_ref();
    let x0 = match (x0, fc) {
        (Some(x), _) => x,
        (None, Some(f)) => f.initial_state.resolve(&ctx.cfg.system)?,
        (None, None) => ctx.cfg.trajectories.initial_states[0].resolve(&ctx.cfg.system)?,
    };
    let steps = steps.unwrap_or_else(|| fc.map_or(ctx.cfg.trajectories.steps, |f| f.steps));
    let phis = est.predict_observables(&x0, steps)?;
    let header: Vec<String> =
        std::iter::once("step".to_string()).chain((1..=est.anchors_g().len()).map(|l| format!("g{l}"))).collect();
    let rows: Vec<Vec<String>> = phis
        .iter()
        .enumerate()
        .map(|(n, p)| std::iter::once(n.to_string()).chain(p.iter().map(|&v| num(v))).collect())
        .collect();
    ctx.write_csv("predictions.csv", &header, &rows)?;
    if *est.kernel() == KernelSpec::LinearAffine {
        let obs = ctx.cfg.scenario()?.observable_set()?;
        let states = reconstruct_states_linear(&obs, &phis)?;
        let header: Vec<String> =
            std::iter::once("step".to_string()).chain((1..=x0.len()).map(|i| format!("x{i}"))).collect();
        let rows: Vec<Vec<String>> = states
            .iter()
            .enumerate()
            .map(|(n, s)| std::iter::once(n.to_string()).chain(s.iter().map(|&v| num(v))).collect())
            .collect();
        ctx.write_csv("states.csv", &header, &rows)?;
        if let Some(f) = fc {
            let report = forecast(&est, &obs, &ctx.cfg.system, &x0, steps, f.dxi, f.dt)?;
            ctx.write_json("forecast.json", &json!({ "config_hash": ctx.hash, "steps": steps, "l2_error": report.l2_error }))?;
            println!("forecast L2 error {:.4e}", report.l2_error);
        }
    }
    println!("wrote {} predicted steps", steps);
    Ok(())
}

fn sweep(ctx: &Ctx) -> Result<()> {
    let spec = ctx
        .cfg
        .evaluation
        .sweep
        .as_ref()
        .ok_or_else(|| KoopmanError::Config("config has no sweep section".into()))?;
    let rows = lambda_sweep(&ctx.data()?, spec, &ctx.cfg.solver)?;
    let mut header = vec!["lambda".to_string(), "family".to_string()];
    header.extend((1..=spec.top_k).map(|k| format!("gamma{k}")));
    header.extend(["rank", "norm_op", "norm_fro", "norm_nuc"].map(String::from));
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![num(r.lambda), r.family.clone()];
            v.extend(r.gammas.iter().map(|&g| num(g)));
            v.extend([r.rank.to_string(), num(r.norm_op), num(r.norm_fro), num(r.norm_nuc)]);
            v
        })
        .collect();
    for r in rows.iter().filter(|r| r.error.is_some()) {
        log::warn!("{} at lambda={}: {}", r.family, r.lambda, r.error.as_deref().unwrap_or(""));
    }
    ctx.write_csv("sweep.csv", &header, &table)?;
    println!("wrote {} sweep rows", table.len());
    Ok(())
}

fn mc(ctx: &Ctx, full: bool) -> Result<()> {
    let cfg = ctx.cfg.monte_carlo(full)?;
    let res = monte_carlo(&cfg, &ctx.cfg.scenario()?, &ctx.cfg.mc_evaluation()?, &ctx.cfg.solver, &ctx.cfg.cv)?;
    let rows: Vec<Vec<String>> = res
        .samples
        .iter()
        .map(|s| {
            vec![
                s.method.clone(),
                s.lambda.map_or_else(String::new, num),
                snr_format::format(s.snr_db),
                s.seed.to_string(),
                num(s.mse),
            ]
        })
        .collect();
    ctx.write_csv("mc.csv", &["method", "lambda", "snr_db", "seed", "mse"].map(String::from), &rows)?;
    let summary: Vec<serde_json::Value> = res
        .summary
        .iter()
        .map(|s| {
            json!({
                "method": s.method, "snr_db": snr_format::format(s.snr_db), "count": s.count,
                "median": s.median, "q1": s.q1, "q3": s.q3,
            })
        })
        .collect();
    ctx.write_json(
        "mc_summary.json",
        &json!({ "config_hash": ctx.hash, "realizations": cfg.realizations, "failures": res.failures, "summary": summary }),
    )?;
    for s in &res.summary {
        println!("{:>16} snr={:>4} median={:.4e} [{:.4e}, {:.4e}]", s.method, snr_format::format(s.snr_db), s.median, s.q1, s.q3);
    }
    Ok(())
}
