//! Trajectories, observables and the matrices consumed by the solvers.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{input, KoopmanError, Result};
use crate::kernels::{gram_matrix, point_dim, KernelSpec, Point};

/// States `x_0..x_{n_s}` of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    states: Vec<Point>,
}

impl Trajectory {
    pub fn new(states: Vec<Point>) -> Result<Self> {
        if states.len() < 2 {
            return input(format!("a trajectory needs at least 2 states, got {}", states.len()));
        }
        point_dim(&states)?;
        if states.iter().flatten().any(|v| !v.is_finite()) {
            return input("trajectory contains non-finite values");
        }
        Ok(Trajectory { states })
    }

    pub fn states(&self) -> &[Point] {
        &self.states
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// Number of transitions `n_s`.
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn preimages(&self) -> &[Point] {
        &self.states[..self.n_steps()]
    }

    pub fn images(&self) -> &[Point] {
        &self.states[1..]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let header: Vec<String> = (1..=self.dim()).map(|i| format!("x{i}")).collect();
        let rows: Vec<Vec<f64>> = self.states.clone();
        write_table(w, &header, &rows)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let (_, rows) = read_table(r)?;
        Trajectory::new(rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Writes a header plus numeric rows with LF line endings.
pub fn write_table<W: Write>(w: W, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    out.write_record(header)?;
    for row in rows {
        out.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a numeric CSV with a header; lines starting with `#` are skipped.
pub fn read_table<R: Read>(r: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| KoopmanError::Input(format!("bad number '{f}': {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Kernel sections `g_l = k(p_l, .)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableSet {
    pub kernel: KernelSpec,
    pub anchors: Vec<Point>,
}

impl ObservableSet {
    pub fn new(kernel: KernelSpec, anchors: Vec<Point>) -> Result<Self> {
        kernel.validate()?;
        point_dim(&anchors)?;
        warn_duplicates(&anchors, "observable");
        Ok(ObservableSet { kernel, anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// `g_l(x)` for a zero-based index `l`.
    pub fn eval(&self, l: usize, x: &[f64]) -> Result<f64> {
        let p = self.anchors.get(l).ok_or(KoopmanError::Index { index: l, len: self.len() })?;
        self.kernel.eval(p, x)
    }

    /// All observables at `x`.
    pub fn eval_all(&self, x: &[f64]) -> Result<Vec<f64>> {
        (0..self.len()).map(|l| self.eval(l, x)).collect()
    }
}

fn warn_duplicates(points: &[Point], what: &str) {
    for i in 0..points.len() {
        if points[..i].contains(&points[i]) {
            log::warn!("duplicate {what} anchor at index {i}; its Gram matrix is singular");
            return;
        }
    }
}

/// Left data matrix and Gram of a finite subspace `W`.
#[derive(Clone, Debug)]
pub struct SubspaceBlock {
    /// `(P_W)_{kl} = w_l(x_{k-1})`
    pub p_w: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub anchors_w: Vec<Point>,
}

/// Finite matrices of a learning problem.
///
/// In the base case the representer anchors are the trajectory pre-images
/// and `Z` is their Gram. With a subspace block the anchors are the
/// subspace anchors, `Z = W`, and the data term uses `P_W` in place of `Z`.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub kernel: KernelSpec,
    pub y: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub gcross: DMatrix<f64>,
    pub anchors_z: Vec<Point>,
    pub anchors_g: Vec<Point>,
    pub preimages: Vec<Point>,
    /// Number of transitions contributed by each trajectory, in stacking order.
    pub segments: Vec<usize>,
    pub subspace: Option<SubspaceBlock>,
}

impl TrainingData {
    pub fn n_samples(&self) -> usize {
        self.y.nrows()
    }

    /// Matrix multiplying `A` from the left in the data term.
    pub fn eval_matrix(&self) -> &DMatrix<f64> {
        match &self.subspace {
            Some(s) => &s.p_w,
            None => &self.z,
        }
    }

    /// EDMD data matrix `P_G = [g_l(x_{k-1})]`.
    pub fn observable_design(&self) -> Result<DMatrix<f64>> {
        gram_matrix(&self.kernel, &self.preimages, &self.anchors_g)
    }

    /// True when representer and observable anchors coincide.
    pub fn anchors_match(&self) -> bool {
        self.anchors_z == self.anchors_g
    }

    /// Writes `Y.csv`, `Z.csv`, `G.csv`, `Gcross.csv` (and `P_W.csv`, `W.csv`).
    pub fn dump_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut mats = vec![("Y", &self.y), ("Z", &self.z), ("G", &self.g), ("Gcross", &self.gcross)];
        if let Some(s) = &self.subspace {
            mats.push(("P_W", &s.p_w));
            mats.push(("W", &s.w));
        }
        for (name, m) in mats {
            let header: Vec<String> = (1..=m.ncols()).map(|j| format!("c{j}")).collect();
            let f = std::fs::File::create(dir.join(format!("{name}.csv")))?;
            write_table(f, &header, &crate::linalg::to_rows(m))?;
        }
        Ok(())
    }

    /// Restricts to the given sample rows.
    ///
    /// In the base case the representer anchors shrink with the rows; with a
    /// subspace block they are kept.
    pub fn subset_rows(&self, rows: &[usize]) -> Result<TrainingData> {
        if rows.is_empty() {
            return input("row subset is empty");
        }
        let pre: Vec<Point> = rows.iter().map(|&k| self.preimages[k].clone()).collect();
        let y = self.y.select_rows(rows);
        let segments = vec![rows.len()];
        match &self.subspace {
            Some(s) => Ok(TrainingData {
                y,
                preimages: pre,
                segments,
                subspace: Some(SubspaceBlock { p_w: s.p_w.select_rows(rows), ..s.clone() }),
                ..self.clone()
            }),
            None => {
                let z = gram_matrix(&self.kernel, &pre, &pre)?;
                let gcross = gram_matrix(&self.kernel, &self.anchors_g, &pre)?;
                Ok(TrainingData {
                    y,
                    z,
                    gcross,
                    anchors_z: pre.clone(),
                    preimages: pre,
                    segments,
                    subspace: None,
                    ..self.clone()
                })
            }
        }
    }
}

fn check_inputs(kernel: &KernelSpec, trajectories: &[Trajectory], obs: &ObservableSet) -> Result<()> {
    kernel.validate()?;
    if trajectories.is_empty() {
        return input("at least one trajectory is required");
    }
    let d = point_dim(&obs.anchors)?;
    for t in trajectories {
        if t.dim() != d {
            return Err(KoopmanError::Dimension { expected: d, got: t.dim() });
        }
    }
    Ok(())
}

fn stack(trajectories: &[Trajectory]) -> (Vec<Point>, Vec<Point>, Vec<usize>) {
    let mut pre = Vec::new();
    let mut post = Vec::new();
    let mut segments = Vec::new();
    for t in trajectories {
        pre.extend_from_slice(t.preimages());
        post.extend_from_slice(t.images());
        segments.push(t.n_steps());
    }
    (pre, post, segments)
}

/// Base-case data: representers are the stacked pre-images of all trajectories.
pub fn build_training_data(
    kernel: &KernelSpec,
    trajectories: &[Trajectory],
    obs: &ObservableSet,
) -> Result<TrainingData> {
    check_inputs(kernel, trajectories, obs)?;
    let (pre, post, segments) = stack(trajectories);
    warn_duplicates(&pre, "representer");
    let y = gram_matrix(kernel, &post, &obs.anchors)?;
    let z = gram_matrix(kernel, &pre, &pre)?;
    let g = gram_matrix(kernel, &obs.anchors, &obs.anchors)?;
    let gcross = gram_matrix(kernel, &obs.anchors, &pre)?;
    Ok(TrainingData {
        kernel: kernel.clone(),
        y,
        z,
        g,
        gcross,
        anchors_z: pre.clone(),
        anchors_g: obs.anchors.clone(),
        preimages: pre,
        segments,
        subspace: None,
    })
}

/// Data for learning within the span of `k(w_j, .)`.
pub fn build_subspace_data(
    kernel: &KernelSpec,
    trajectories: &[Trajectory],
    obs: &ObservableSet,
    w_anchors: &[Point],
) -> Result<TrainingData> {
    check_inputs(kernel, trajectories, obs)?;
    let d = point_dim(w_anchors)?;
    if d != obs.anchors[0].len() {
        return Err(KoopmanError::Dimension { expected: obs.anchors[0].len(), got: d });
    }
    warn_duplicates(w_anchors, "subspace");
    let (pre, post, segments) = stack(trajectories);
    let y = gram_matrix(kernel, &post, &obs.anchors)?;
    let p_w = gram_matrix(kernel, &pre, w_anchors)?;
    let w = gram_matrix(kernel, w_anchors, w_anchors)?;
    let g = gram_matrix(kernel, &obs.anchors, &obs.anchors)?;
    let gcross = gram_matrix(kernel, &obs.anchors, w_anchors)?;
    Ok(TrainingData {
        kernel: kernel.clone(),
        y,
        z: w.clone(),
        g,
        gcross,
        anchors_z: w_anchors.to_vec(),
        anchors_g: obs.anchors.clone(),
        preimages: pre,
        segments,
        subspace: Some(SubspaceBlock { p_w, w, anchors_w: w_anchors.to_vec() }),
    })
}

/// Additive white Gaussian noise at a given SNR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Infinite means no noise.
    pub snr_db: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec { snr_db: f64::INFINITY, seed: 0 }
    }

    pub fn is_none(&self) -> bool {
        self.snr_db == f64::INFINITY
    }

    /// Noise standard deviation for a signal of mean power `p_sig`.
    pub fn sigma(&self, p_sig: f64) -> f64 {
        if self.is_none() {
            0.0
        } else {
            (p_sig * 10f64.powf(-self.snr_db / 10.0)).sqrt()
        }
    }
}

fn perturb(values: &mut [f64], sigma: f64, seed: u64) {
    if sigma == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for v in values {
        *v += normal.sample(&mut rng);
    }
}

/// Adds i.i.d. noise to every coordinate of every state.
///
/// The reference power is the mean squared entry of the clean trajectory.
pub fn add_noise(traj: &Trajectory, spec: NoiseSpec) -> Result<Trajectory> {
    if spec.snr_db.is_nan() {
        return input("snr_db must not be NaN");
    }
    if spec.is_none() {
        return Ok(traj.clone());
    }
    let mut flat: Vec<f64> = traj.states.iter().flatten().cloned().collect();
    let p_sig = flat.iter().map(|v| v * v).sum::<f64>() / flat.len() as f64;
    perturb(&mut flat, spec.sigma(p_sig), spec.seed);
    let d = traj.dim();
    Trajectory::new(flat.chunks(d).map(<[f64]>::to_vec).collect())
}

/// Adds noise to the observable values `Y` instead of the states.
pub fn add_observable_noise(data: &TrainingData, spec: NoiseSpec) -> TrainingData {
    let mut out = data.clone();
    let n = out.y.len().max(1);
    let p_sig = out.y.iter().map(|v| v * v).sum::<f64>() / n as f64;
    perturb(out.y.as_mut_slice(), spec.sigma(p_sig), spec.seed);
    out
}
