//! Experiment manifests: everything needed to regenerate data, fits and tables.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::NoiseSpec;
use crate::dynamics::{pde_initial, PdeProfile, SystemSpec};
use crate::error::{KoopmanError, Result};
use crate::evaluation::{
    snr_format, CvSettings, GridSpec, McEvaluation, MonteCarloConfig, NoiseTarget, Representers, Scenario, SweepSpec,
};
use crate::kernels::{KernelSpec, Point};
use crate::solvers::{LambdaChoice, MethodSpec, SolverOptions};

/// A set of points given explicitly or by a generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PointSource {
    Explicit(Vec<Point>),
    /// `origin + step * (i_1, ..., i_d)` with `0 <= i_k < counts[k]`, first coordinate slowest.
    Grid { origin: Vec<f64>, step: Vec<f64>, counts: Vec<usize> },
    /// `count` independent standard normal vectors in dimension `dim`.
    RandomNormal { count: usize, dim: usize, seed: u64 },
}

impl PointSource {
    pub fn resolve(&self) -> Result<Vec<Point>> {
        match self {
            PointSource::Explicit(p) => Ok(p.clone()),
            PointSource::Grid { origin, step, counts } => {
                let d = origin.len();
                if d == 0 || step.len() != d || counts.len() != d {
                    return Err(KoopmanError::Config("grid origin, step and counts must have equal length".into()));
                }
                let total: usize = counts.iter().product();
                let mut idx = vec![0usize; d];
                let mut out = Vec::with_capacity(total);
                for _ in 0..total {
                    out.push((0..d).map(|k| origin[k] + step[k] * idx[k] as f64).collect());
                    for k in (0..d).rev() {
                        idx[k] += 1;
                        if idx[k] < counts[k] {
                            break;
                        }
                        idx[k] = 0;
                    }
                }
                Ok(out)
            }
            PointSource::RandomNormal { count, dim, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok((0..*count).map(|_| (0..*dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect())
            }
        }
    }
}

/// An initial state, either explicit or a named profile of the PDE benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialState {
    Point(Point),
    Profile(PdeProfile),
}

impl InitialState {
    pub fn resolve(&self, system: &SystemSpec) -> Result<Point> {
        match self {
            InitialState::Point(p) => Ok(p.clone()),
            InitialState::Profile(p) => pde_initial(*p, system.dim()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub initial_states: Vec<InitialState>,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RepresenterSource {
    Observables,
    Trajectory,
    Points(PointSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(with = "snr_scalar")]
    pub snr_db: f64,
    #[serde(default)]
    pub target: NoiseTarget,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { snr_db: f64::INFINITY, target: NoiseTarget::States }
    }
}

mod snr_scalar {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::snr_format::format(*v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        match &v {
            serde_json::Value::Number(n) => n.as_f64().ok_or_else(|| serde::de::Error::custom("bad SNR")),
            serde_json::Value::String(t) => {
                super::snr_format::parse(t).ok_or_else(|| serde::de::Error::custom(format!("bad SNR '{t}'")))
            }
            _ => Err(serde::de::Error::custom("SNR must be a number or \"inf\"")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSpec {
    #[serde(with = "snr_format")]
    pub snr_db: Vec<f64>,
    pub realizations: usize,
    /// Realizations used with `--full`.
    pub full_realizations: usize,
    pub methods: Vec<MethodSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastSpec {
    pub initial_state: InitialState,
    pub steps: usize,
    /// Cell sizes of the space-time error norm.
    pub dxi: f64,
    pub dt: f64,
    pub methods: Vec<MethodSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_observables: Option<PointSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<MonteCarloSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forecast: Option<ForecastSpec>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_representers() -> RepresenterSource {
    RepresenterSource::Observables
}

/// A complete experiment manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub system: SystemSpec,
    pub kernel: KernelSpec,
    pub trajectories: TrajectorySpec,
    pub observables: PointSource,
    #[serde(default = "default_representers")]
    pub representers: RepresenterSource,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub method: MethodSpec,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub cv: CvSettings,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

const BUNDLED: [(&str, &str); 4] = [
    ("example1", include_str!("../../../configs/example1.json")),
    ("example2", include_str!("../../../configs/example2.json")),
    ("example3", include_str!("../../../configs/example3.json")),
    ("example4", include_str!("../../../configs/example4.json")),
];

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| KoopmanError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// One of the bundled manifests `example1` .. `example4`.
    pub fn bundled(name: &str) -> Result<Self> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_json(text))
            .unwrap_or_else(|| Err(KoopmanError::Config(format!("no bundled config named '{name}'"))))
    }

    pub fn bundled_names() -> Vec<&'static str> {
        BUNDLED.iter().map(|(n, _)| *n).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: KoopmanError| KoopmanError::Config(e.to_string());
        self.system.validate().map_err(cfg)?;
        self.kernel.validate().map_err(cfg)?;
        if self.trajectories.initial_states.is_empty() || self.trajectories.steps == 0 {
            return Err(KoopmanError::Config("need at least one trajectory with at least one step".into()));
        }
        if let Some(g) = &self.evaluation.grid {
            g.validate().map_err(cfg)?;
        }
        if let Some(mc) = &self.evaluation.monte_carlo {
            if mc.realizations == 0 || mc.full_realizations == 0 || mc.methods.is_empty() {
                return Err(KoopmanError::Config("monte_carlo needs realizations >= 1 and methods".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.method = self.method.with_lambda(lambda);
        self
    }

    /// Replaces the method by name, keeping the configured weight and bound where they apply.
    pub fn with_method(mut self, name: &str) -> Result<Self> {
        let lambda = self.method.lambda().unwrap_or(LambdaChoice::Value(1e-6));
        let r = match self.method {
            MethodSpec::Rank { r } => Some(r),
            _ => None,
        };
        self.method = MethodSpec::from_name(name, lambda, self.method.rho(), r, self.method.loss())?;
        Ok(self)
    }

    pub fn initial_states(&self) -> Result<Vec<Point>> {
        self.trajectories.initial_states.iter().map(|s| s.resolve(&self.system)).collect()
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let representers = match &self.representers {
            RepresenterSource::Observables => Representers::Observables,
            RepresenterSource::Trajectory => Representers::Trajectory,
            RepresenterSource::Points(p) => Representers::Points(p.resolve()?),
        };
        Ok(Scenario {
            system: self.system.clone(),
            kernel: self.kernel.clone(),
            initial_states: self.initial_states()?,
            steps: self.trajectories.steps,
            observables: self.observables.resolve()?,
            representers,
            noise_target: self.noise.target,
        })
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec { snr_db: self.noise.snr_db, seed: self.seed }
    }

    pub fn monte_carlo(&self, full: bool) -> Result<MonteCarloConfig> {
        let mc = self
            .evaluation
            .monte_carlo
            .as_ref()
            .ok_or_else(|| KoopmanError::Config("config has no monte_carlo section".into()))?;
        Ok(MonteCarloConfig {
            snr_db: mc.snr_db.clone(),
            realizations: if full { mc.full_realizations } else { mc.realizations },
            base_seed: self.seed,
            methods: mc.methods.clone(),
        })
    }

    pub fn mc_evaluation(&self) -> Result<McEvaluation> {
        let grid = self
            .evaluation
            .grid
            .clone()
            .ok_or_else(|| KoopmanError::Config("config has no evaluation grid".into()))?;
        let test = self
            .evaluation
            .test_observables
            .as_ref()
            .ok_or_else(|| KoopmanError::Config("config has no test observables".into()))?
            .resolve()?;
        Ok(McEvaluation { test_observables: test, grid })
    }
}
