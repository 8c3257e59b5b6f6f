//! Grid MSE, regularization sweeps, cross-validation and Monte Carlo studies.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{add_noise, add_observable_noise, build_subspace_data, build_training_data, NoiseSpec, ObservableSet, TrainingData, Trajectory};
use crate::dynamics::{simulate, SystemSpec};
use crate::error::{input, KoopmanError, Result};
use crate::kernels::{gram_matrix, KernelSpec, Point};
use crate::operator::KoopmanEstimate;
use crate::solvers::{solve_edmd, LambdaChoice, LearningProblem, MethodSpec, SolveResult, SolverOptions};

/// Axis-aligned box split into cells of width `spacing`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub spacing: Vec<f64>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.lower.len();
        if d == 0 || self.upper.len() != d || self.spacing.len() != d {
            return input("grid bounds and spacing must have one matching entry per coordinate");
        }
        for i in 0..d {
            if !(self.spacing[i] > 0.0 && self.upper[i] > self.lower[i]) {
                return input(format!("grid axis {i}: need lower < upper and spacing > 0"));
            }
        }
        Ok(())
    }

    /// Cells per axis.
    pub fn counts(&self) -> Vec<usize> {
        (0..self.lower.len())
            .map(|i| (((self.upper[i] - self.lower[i]) / self.spacing[i]).round() as usize).max(1))
            .collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Cell centres, first coordinate varying slowest.
    pub fn centers(&self) -> Vec<Point> {
        let counts = self.counts();
        let total: usize = counts.iter().product();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; counts.len()];
        for _ in 0..total {
            out.push((0..counts.len()).map(|i| self.lower[i] + (idx[i] as f64 + 0.5) * self.spacing[i]).collect());
            for i in (0..counts.len()).rev() {
                idx[i] += 1;
                if idx[i] < counts[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
        out
    }
}

const CHUNK: usize = 4096;

/// `(1/n) sum_l int_R ((K h_l)(x) - h_l(F(x)))^2 dx` by the midpoint rule.
pub fn mse_grid(est: &KoopmanEstimate, sys: &SystemSpec, test_obs: &ObservableSet, grid: &GridSpec) -> Result<f64> {
    grid.validate()?;
    if &test_obs.kernel != est.kernel() {
        return input("test observables must use the estimate's kernel");
    }
    if grid.lower.len() != sys.dim() {
        return Err(KoopmanError::Dimension { expected: sys.dim(), got: grid.lower.len() });
    }
    let right = est.a() * gram_matrix(est.kernel(), est.anchors_g(), &test_obs.anchors)?;
    let centers = grid.centers();
    let mut total = 0.0;
    for chunk in centers.chunks(CHUNK) {
        let images = chunk.iter().map(|x| sys.step(x)).collect::<Result<Vec<Point>>>()?;
        let pred = gram_matrix(est.kernel(), chunk, est.anchors_z())? * &right;
        let truth = gram_matrix(est.kernel(), &images, &test_obs.anchors)?;
        total += (pred - truth).norm_squared();
    }
    Ok(total * grid.cell_volume() / test_obs.len() as f64)
}

/// Cross-validation settings used when a method asks for `"cv"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvSettings {
    pub grid: Vec<f64>,
    pub folds: usize,
}

impl Default for CvSettings {
    fn default() -> Self {
        CvSettings { grid: (0..=8).map(|i| 10f64.powi(i - 8)).collect(), folds: 5 }
    }
}

/// A fitted method.
#[derive(Clone, Debug)]
pub struct Fit {
    pub method: MethodSpec,
    pub lambda: Option<f64>,
    pub result: SolveResult,
    pub estimate: KoopmanEstimate,
}

/// EDMD on `data`; the estimate lives on the observable anchors.
pub fn fit_edmd(data: &TrainingData) -> Result<(SolveResult, KoopmanEstimate)> {
    let r = solve_edmd(&data.observable_design()?, &data.y, &data.g)?;
    let est = KoopmanEstimate::new(data.kernel.clone(), data.anchors_g.clone(), data.anchors_g.clone(), r.a.clone())?;
    Ok((r, est))
}

pub fn fit_method(data: &TrainingData, method: &MethodSpec, opts: &SolverOptions, cv: &CvSettings) -> Result<Fit> {
    if let MethodSpec::Edmd = method {
        let (result, estimate) = fit_edmd(data)?;
        return Ok(Fit { method: method.clone(), lambda: None, result, estimate });
    }
    let resolved = match method.lambda() {
        Some(LambdaChoice::Cv(_)) => {
            let l = select_lambda(data, method, &cv.grid, cv.folds, opts)?;
            method.with_lambda(l)
        }
        _ => method.clone(),
    };
    let lambda = match resolved.lambda() {
        Some(LambdaChoice::Value(v)) => Some(v),
        _ => None,
    };
    let problem = LearningProblem::from_data(data, *opts)?;
    let result = resolved.solve(&problem)?;
    let estimate = KoopmanEstimate::from_solve(data, &result)?;
    Ok(Fit { method: resolved, lambda, result, estimate })
}

/// Contiguous index blocks `0..n` split into `folds` parts.
fn blocks(n: usize, folds: usize) -> Vec<std::ops::Range<usize>> {
    (0..folds).map(|f| (f * n / folds)..((f + 1) * n / folds)).collect()
}

/// Weight minimizing the mean held-out error over contiguous time blocks.
///
/// Ties go to the smaller weight.
pub fn select_lambda(
    data: &TrainingData,
    method: &MethodSpec,
    grid: &[f64],
    folds: usize,
    opts: &SolverOptions,
) -> Result<f64> {
    if grid.is_empty() {
        return input("empty lambda grid");
    }
    if method.lambda().is_none() {
        return input(format!("method '{}' has no regularization weight", method.label()));
    }
    if grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return input("lambda grid values must be positive");
    }
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let n = data.n_samples();
    if folds < 2 || folds > n {
        return input(format!("need 2 <= folds <= {n}, got {folds}"));
    }
    let splits = blocks(n, folds);
    let mut errors = vec![0.0; grid.len()];
    for held in &splits {
        let train: Vec<usize> = (0..n).filter(|k| !held.contains(k)).collect();
        let test: Vec<usize> = held.clone().collect();
        let sub = data.subset_rows(&train)?;
        let problem = LearningProblem::from_data(&sub, *opts)?;
        let left = match &data.subspace {
            Some(s) => s.p_w.select_rows(&test),
            None => {
                let pts: Vec<Point> = test.iter().map(|&k| data.preimages[k].clone()).collect();
                gram_matrix(&data.kernel, &pts, &sub.anchors_z)?
            }
        };
        let y_test = data.y.select_rows(&test);
        let fold_err = grid
            .par_iter()
            .map(|&l| {
                let r = method.with_lambda(l).solve(&problem)?;
                Ok((&left * &r.a * &data.g - &y_test).norm_squared())
            })
            .collect::<Result<Vec<f64>>>()?;
        for (e, f) in errors.iter_mut().zip(fold_err) {
            *e += f / folds as f64;
        }
    }
    let mut best = 0;
    for i in 1..grid.len() {
        let (ei, eb) = (errors[i], errors[best]);
        if ei < eb || (ei == eb && grid[i] < grid[best]) {
            best = i;
        }
    }
    Ok(grid[best])
}

/// Regularizer families compared in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Operator,
    Frobenius,
    Nuclear,
}

impl Family {
    pub fn method(self, lambda: f64) -> MethodSpec {
        let lambda = LambdaChoice::Value(lambda);
        match self {
            Family::Operator => MethodSpec::OperatorNorm { lambda, rho: None },
            Family::Frobenius => MethodSpec::Frobenius { lambda },
            Family::Nuclear => MethodSpec::Nuclear { lambda },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Operator => "operator",
            Family::Frobenius => "frobenius",
            Family::Nuclear => "nuclear",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub lambdas: Vec<f64>,
    pub families: Vec<Family>,
    pub top_k: usize,
}

impl SweepSpec {
    /// `10^lo, 10^(lo+1), ..., 10^hi`.
    pub fn log_grid(lo: i32, hi: i32, families: Vec<Family>, top_k: usize) -> Self {
        SweepSpec { lambdas: (lo..=hi).map(|e| 10f64.powi(e)).collect(), families, top_k }
    }
}

/// One sweep row; the EDMD row has `lambda = 0` and family `"edmd"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub family: String,
    pub gammas: Vec<f64>,
    pub rank: usize,
    pub norm_op: f64,
    pub norm_fro: f64,
    pub norm_nuc: f64,
    pub converged: bool,
    pub error: Option<String>,
}

fn sweep_row(lambda: f64, family: &str, top_k: usize, fitted: Result<(SolveResult, KoopmanEstimate)>) -> SweepRow {
    let row = fitted.and_then(|(r, est)| {
        let eig = est.eigenvalues()?;
        let mut gammas: Vec<f64> = eig.iter().take(top_k).map(|v| v.norm()).collect();
        gammas.resize(top_k, 0.0);
        let norms = est.operator_norms()?;
        let rank = crate::linalg::singular_values(&r.b).iter().filter(|&&s| s > 1e-8).count();
        Ok(SweepRow {
            lambda,
            family: family.to_string(),
            gammas,
            rank,
            norm_op: norms.operator,
            norm_fro: norms.frobenius,
            norm_nuc: norms.nuclear,
            converged: r.converged,
            error: None,
        })
    });
    row.unwrap_or_else(|e| SweepRow {
        lambda,
        family: family.to_string(),
        gammas: vec![f64::NAN; top_k],
        rank: 0,
        norm_op: f64::NAN,
        norm_fro: f64::NAN,
        norm_nuc: f64::NAN,
        converged: false,
        error: Some(e.to_string()),
    })
}

/// Eigenvalue magnitudes, rank and norms of each family across the weights, plus an EDMD row.
pub fn lambda_sweep(data: &TrainingData, spec: &SweepSpec, opts: &SolverOptions) -> Result<Vec<SweepRow>> {
    if !data.anchors_match() {
        return input("the sweep needs representer anchors equal to the observable anchors");
    }
    if spec.lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return input("sweep weights must be positive");
    }
    let problem = LearningProblem::from_data(data, *opts)?;
    let tasks: Vec<(Family, f64)> =
        spec.families.iter().flat_map(|&f| spec.lambdas.iter().map(move |&l| (f, l))).collect();
    let mut rows: Vec<SweepRow> = tasks
        .par_iter()
        .map(|&(f, l)| {
            let fitted = f.method(l).solve(&problem).and_then(|r| {
                let est = KoopmanEstimate::from_solve(data, &r)?;
                Ok((r, est))
            });
            sweep_row(l, f.name(), spec.top_k, fitted)
        })
        .collect();
    rows.push(sweep_row(0.0, "edmd", spec.top_k, fit_edmd(data)));
    Ok(rows)
}

/// Which representers span the estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representers {
    /// Subspace spanned by the observables themselves (`W = G`).
    Observables,
    /// Pre-images of the training data.
    Trajectory,
    /// An explicit list of subspace anchors.
    Points(Vec<Point>),
}

/// Where noise enters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    #[default]
    States,
    Observables,
}

/// A complete data-generation recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub system: SystemSpec,
    pub kernel: KernelSpec,
    /// Initial states, one trajectory each.
    pub initial_states: Vec<Point>,
    /// Transitions per trajectory.
    pub steps: usize,
    pub observables: Vec<Point>,
    pub representers: Representers,
    #[serde(default)]
    pub noise_target: NoiseTarget,
}

/// Derived seed for stream `index` of `base`.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = (base ^ index).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Scenario {
    pub fn observable_set(&self) -> Result<ObservableSet> {
        ObservableSet::new(self.kernel.clone(), self.observables.clone())
    }

    pub fn clean_trajectories(&self) -> Result<Vec<Trajectory>> {
        self.initial_states.iter().map(|x0| simulate(&self.system, x0, self.steps)).collect()
    }

    /// Training data with the given noise; trajectory `j` uses seed `mix_seed(noise.seed, j)`.
    pub fn training_data(&self, noise: NoiseSpec) -> Result<TrainingData> {
        let clean = self.clean_trajectories()?;
        let trajs = match self.noise_target {
            NoiseTarget::States => clean
                .iter()
                .enumerate()
                .map(|(j, t)| add_noise(t, NoiseSpec { snr_db: noise.snr_db, seed: mix_seed(noise.seed, j as u64) }))
                .collect::<Result<Vec<_>>>()?,
            NoiseTarget::Observables => clean,
        };
        let data = self.build(&trajs)?;
        Ok(match self.noise_target {
            NoiseTarget::States => data,
            NoiseTarget::Observables => add_observable_noise(&data, noise),
        })
    }

    pub fn build(&self, trajs: &[Trajectory]) -> Result<TrainingData> {
        let obs = self.observable_set()?;
        match &self.representers {
            Representers::Observables => build_subspace_data(&self.kernel, trajs, &obs, &obs.anchors),
            Representers::Trajectory => build_training_data(&self.kernel, trajs, &obs),
            Representers::Points(w) => build_subspace_data(&self.kernel, trajs, &obs, w),
        }
    }
}

/// Signal-to-noise ratio in dB; serialized as a number or `"inf"`.
pub mod snr_format {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn parse(raw: &str) -> Option<f64> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "+inf" | "none" => Some(f64::INFINITY),
            s => s.parse().ok(),
        }
    }

    pub fn format(v: f64) -> String {
        if v == f64::INFINITY {
            "inf".into()
        } else {
            format!("{v}")
        }
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|&x| if x.is_finite() { serde_json::json!(x) } else { serde_json::json!(format(x)) }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<Raw>::deserialize(d)?;
        raw.into_iter()
            .map(|r| match r {
                Raw::Num(v) => Ok(v),
                Raw::Text(t) => parse(&t).ok_or_else(|| serde::de::Error::custom(format!("bad SNR '{t}'"))),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    #[serde(with = "snr_format")]
    pub snr_db: Vec<f64>,
    pub realizations: usize,
    pub base_seed: u64,
    pub methods: Vec<MethodSpec>,
}

/// Evaluation region and test observables of a Monte Carlo study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEvaluation {
    pub test_observables: Vec<Point>,
    pub grid: GridSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSample {
    pub method: String,
    pub lambda: Option<f64>,
    pub snr_db: f64,
    pub seed: u64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub method: String,
    pub snr_db: f64,
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McResult {
    pub samples: Vec<McSample>,
    pub summary: Vec<McSummary>,
    pub failures: usize,
}

impl McResult {
    pub fn median(&self, method: &str, snr_db: f64) -> Option<f64> {
        self.summary.iter().find(|s| s.method == method && s.snr_db == snr_db).map(|s| s.median)
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Runs every method on every noise realization and scores it with [`mse_grid`].
pub fn monte_carlo(
    config: &MonteCarloConfig,
    scenario: &Scenario,
    eval: &McEvaluation,
    opts: &SolverOptions,
    cv: &CvSettings,
) -> Result<McResult> {
    if config.realizations == 0 {
        return input("realizations must be at least 1");
    }
    if config.methods.is_empty() || config.snr_db.is_empty() {
        return input("Monte Carlo needs at least one method and one SNR level");
    }
    let test_obs = ObservableSet::new(scenario.kernel.clone(), eval.test_observables.clone())?;
    let tasks: Vec<(f64, u64)> = config
        .snr_db
        .iter()
        .enumerate()
        .flat_map(|(si, &snr)| {
            (0..config.realizations).map(move |r| (snr, config.base_seed ^ (si * config.realizations + r) as u64))
        })
        .collect();
    let per_task: Vec<(Vec<McSample>, usize)> = tasks
        .par_iter()
        .map(|&(snr, seed)| {
            let data = match scenario.training_data(NoiseSpec { snr_db: snr, seed }) {
                Ok(d) => d,
                Err(e) => {
                    log::warn!("realization seed={seed} snr={snr}: {e}");
                    return (Vec::new(), config.methods.len());
                }
            };
            let mut samples = Vec::new();
            let mut failures = 0;
            for m in &config.methods {
                let scored = fit_method(&data, m, opts, cv)
                    .and_then(|fit| Ok((fit.lambda, mse_grid(&fit.estimate, &scenario.system, &test_obs, &eval.grid)?)));
                match scored {
                    Ok((lambda, mse)) => samples.push(McSample { method: m.label().into(), lambda, snr_db: snr, seed, mse }),
                    Err(e) => {
                        log::warn!("{} seed={seed} snr={snr}: {e}", m.label());
                        failures += 1;
                    }
                }
            }
            (samples, failures)
        })
        .collect();
    let failures = per_task.iter().map(|t| t.1).sum();
    let mut samples: Vec<McSample> = per_task.into_iter().flat_map(|t| t.0).collect();
    let order: BTreeMap<&str, usize> = config.methods.iter().enumerate().map(|(i, m)| (m.label(), i)).collect();
    samples.sort_by(|a, b| {
        a.snr_db
            .total_cmp(&b.snr_db)
            .then(order[a.method.as_str()].cmp(&order[b.method.as_str()]))
            .then(a.seed.cmp(&b.seed))
    });
    let mut summary = Vec::new();
    for &snr in &config.snr_db {
        for m in &config.methods {
            let mut v: Vec<f64> = samples
                .iter()
                .filter(|s| s.snr_db == snr && s.method == m.label())
                .map(|s| s.mse)
                .collect();
            v.sort_by(f64::total_cmp);
            summary.push(McSummary {
                method: m.label().into(),
                snr_db: snr,
                count: v.len(),
                median: quantile(&v, 0.5),
                q1: quantile(&v, 0.25),
                q3: quantile(&v, 0.75),
            });
        }
    }
    Ok(McResult { samples, summary, failures })
}

/// Discrete L2 norm `sqrt(sum_i sum_n e^2 dxi dt)` of a space-time error field.
pub fn space_time_l2(errors: &[Vec<f64>], dxi: f64, dt: f64) -> f64 {
    (errors.iter().flatten().map(|e| e * e).sum::<f64>() * dxi * dt).sqrt()
}

/// States forecast by iterating the estimate and reading the state back from
/// linear-affine observables, next to the simulated truth.
#[derive(Clone, Debug)]
pub struct Forecast {
    pub predicted: Vec<Point>,
    pub truth: Vec<Point>,
    pub l2_error: f64,
}

/// Forecasts `steps` steps from `x0` and scores the space-time L2 error with cell sizes `dxi`, `dt`.
pub fn forecast(
    est: &KoopmanEstimate,
    obs: &ObservableSet,
    sys: &SystemSpec,
    x0: &[f64],
    steps: usize,
    dxi: f64,
    dt: f64,
) -> Result<Forecast> {
    let phis = est.predict_observables(x0, steps)?;
    let predicted = crate::operator::reconstruct_states_linear(obs, &phis)?;
    let truth = simulate(sys, x0, steps.max(1))?.states()[..=steps].to_vec();
    let errors: Vec<Vec<f64>> = predicted
        .iter()
        .zip(&truth)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| a - b).collect())
        .collect();
    Ok(Forecast { l2_error: space_time_l2(&errors, dxi, dt), predicted, truth })
}
