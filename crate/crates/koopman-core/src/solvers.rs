//! Finite-dimensional learning problems and their solvers.
//!
//! Every problem has the form
//! `min_A  sum L([P A G - Y]_kl) + reg(Z^{1/2} A G^{1/2})`
//! where `P = Z` for trajectory representers and `P = P_W` for subspace data.
//! With `Z = Qz Lz Qz'` and `G = Qg Lg Qg'` (eigenvalues below the rank
//! cut-off dropped) and `B~ = Lz^{1/2} Qz' A Qg Lg^{1/2}`, the data term is
//! `P Qz Lz^{-1/2} B~ Lg^{1/2} Qg'`. A thin SVD `U D V'` of the left factor
//! turns the quadratic loss into `|D C E - U' Y Qg|^2 + const` with
//! `B~ = V C`, `E = Lg^{1/2}`; all unitarily invariant norms of `B` equal
//! those of `C`. The solvers below work on `C`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{input, KoopmanError, Result};
use crate::linalg::{self, scale_cols, scale_rows, sym_eig, RANK_RTOL};

pub use crate::linalg::{pinv, psd_sqrt};

/// Penalty applied to `B = Z^{1/2} A G^{1/2}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegularizerSpec {
    OperatorNormSq { lambda: f64 },
    FrobeniusSq { lambda: f64 },
    Nuclear { lambda: f64 },
    RankAtMost { r: usize },
    None,
}

impl RegularizerSpec {
    fn validate(&self) -> Result<()> {
        match *self {
            RegularizerSpec::OperatorNormSq { lambda }
            | RegularizerSpec::FrobeniusSq { lambda }
            | RegularizerSpec::Nuclear { lambda } => check_lambda(lambda),
            _ => Ok(()),
        }
    }

    /// Penalty value at `b`; the rank constraint contributes nothing.
    pub fn penalty(&self, b: &DMatrix<f64>) -> f64 {
        let (op, fro, nuc) = linalg::norms(b);
        match *self {
            RegularizerSpec::OperatorNormSq { lambda } => lambda * op * op,
            RegularizerSpec::FrobeniusSq { lambda } => lambda * fro * fro,
            RegularizerSpec::Nuclear { lambda } => lambda * nuc,
            RegularizerSpec::RankAtMost { .. } | RegularizerSpec::None => 0.0,
        }
    }
}

/// Optional bound `|B| <= rho` on the spectral norm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub spectral_bound: Option<f64>,
}

impl ConstraintSpec {
    pub fn stable(rho: f64) -> Self {
        ConstraintSpec { spectral_bound: Some(rho) }
    }
}

/// Entrywise loss on the residual `PAG - Y`.
///
/// Huber and pseudo-Huber are scaled to agree with `e^2` for small residuals:
/// Huber is `e^2` for `|e| <= rho` and `2 rho |e| - rho^2` beyond,
/// pseudo-Huber is `2 rho (sqrt(e^2 + rho^2) - rho)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Quadratic,
    PseudoHuber { rho: f64 },
    Huber { rho: f64 },
}

impl LossSpec {
    fn validate(&self) -> Result<()> {
        match *self {
            LossSpec::Quadratic => Ok(()),
            LossSpec::PseudoHuber { rho } | LossSpec::Huber { rho } => {
                if rho.is_finite() && rho > 0.0 {
                    Ok(())
                } else {
                    input(format!("loss parameter must be positive, got {rho}"))
                }
            }
        }
    }

    pub fn value(&self, e: f64) -> f64 {
        match *self {
            LossSpec::Quadratic => e * e,
            LossSpec::Huber { rho } => {
                if e.abs() <= rho {
                    e * e
                } else {
                    2.0 * rho * e.abs() - rho * rho
                }
            }
            LossSpec::PseudoHuber { rho } => 2.0 * rho * ((e * e + rho * rho).sqrt() - rho),
        }
    }

    pub fn derivative(&self, e: f64) -> f64 {
        match *self {
            LossSpec::Quadratic => 2.0 * e,
            LossSpec::Huber { rho } => {
                if e.abs() <= rho {
                    2.0 * e
                } else {
                    2.0 * rho * e.signum()
                }
            }
            LossSpec::PseudoHuber { rho } => 2.0 * rho * e / (e * e + rho * rho).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Relative eigenvalue cut-off for `Z`, `G` and their square roots.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { max_iters: 5000, rel_tol: 1e-9, jitter: 1e-10, seed: 0 }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.rel_tol > 0.0 && self.jitter > 0.0) {
            return input("solver options must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diagnostics: BTreeMap<String, f64>,
    /// EDMD matrix `M* = pinv(P_G) Y`, set by the EDMD solver only.
    pub m_star: Option<DMatrix<f64>>,
}

impl SolveResult {
    pub fn diag(&self, key: &str) -> Option<f64> {
        self.diagnostics.get(key).cloned()
    }
}

impl Serialize for SolveResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Out<'a> {
            objective: f64,
            iterations: usize,
            converged: bool,
            diagnostics: &'a BTreeMap<String, f64>,
            a: Vec<Vec<f64>>,
            b: Vec<Vec<f64>>,
            #[serde(skip_serializing_if = "Option::is_none")]
            m_star: Option<Vec<Vec<f64>>>,
        }
        Out {
            objective: self.objective,
            iterations: self.iterations,
            converged: self.converged,
            diagnostics: &self.diagnostics,
            a: linalg::to_rows(&self.a),
            b: linalg::to_rows(&self.b),
            m_star: self.m_star.as_ref().map(linalg::to_rows),
        }
        .serialize(s)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        input(format!("lambda must be positive, got {lambda}"))
    }
}

/// Quadratic loss `|diag(d) C diag(e) - y|^2` in reduced coordinates, up to a constant.
#[derive(Clone, Debug)]
struct Canonical {
    d: DVector<f64>,
    e: DVector<f64>,
    y: DMatrix<f64>,
}

impl Canonical {
    fn fit(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| self.d[i] * c[(i, j)] * self.e[j])
    }

    fn grad(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let r = self.fit(c) - &self.y;
        DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| 2.0 * self.d[i] * r[(i, j)] * self.e[j])
    }

    fn lipschitz(&self) -> f64 {
        let dm = self.d.iter().cloned().fold(0.0, f64::max);
        let em = self.e.iter().cloned().fold(0.0, f64::max);
        2.0 * dm * dm * em * em
    }

    fn zeros(&self) -> DMatrix<f64> {
        DMatrix::zeros(self.d.len(), self.e.len())
    }
}

/// Clips singular values at `beta`.
fn project_ball(c: &DMatrix<f64>, beta: f64) -> Result<DMatrix<f64>> {
    map_singular_values(c, |s| s.min(beta))
}

/// Soft-thresholds singular values by `tau`.
fn shrink(c: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    map_singular_values(c, |s| (s - tau).max(0.0))
}

/// Applies a shrinking map `f` (with `0 <= f(s) <= s`) to the singular values of `c`.
fn map_singular_values(c: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let sp = Spectral::of(c)?;
    let s = sp.values.clone();
    Ok(sp.apply(c, &s.iter().map(|&v| f(v)).collect::<Vec<_>>()))
}

/// Singular values of `c` with the singular vectors of its shorter side,
/// taken from the eigenvectors of the smaller Gram matrix. Only the leading
/// part is accurate, which is all the shrinking maps below need.
struct Spectral {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
    wide: bool,
}

impl Spectral {
    fn of(c: &DMatrix<f64>) -> Result<Spectral> {
        let wide = c.nrows() <= c.ncols();
        if c.is_empty() {
            return Ok(Spectral { values: Vec::new(), vectors: DMatrix::zeros(0, 0), wide });
        }
        let gram = if wide { c * c.transpose() } else { c.transpose() * c };
        let eig = gram.symmetric_eigen();
        if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(KoopmanError::Numerical("non-finite singular values".into()));
        }
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        Ok(Spectral {
            values: order.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()).collect(),
            vectors: eig.eigenvectors.select_columns(&order),
            wide,
        })
    }

    /// `c` with singular values replaced by `new`; entries equal to the old value are untouched.
    fn apply(&self, c: &DMatrix<f64>, new: &[f64]) -> DMatrix<f64> {
        let k = self
            .values
            .iter()
            .zip(new)
            .rposition(|(&s, &t)| t != s)
            .map_or(0, |p| p + 1);
        if k == 0 {
            return c.clone();
        }
        let vk = self.vectors.columns(0, k);
        let scale = DVector::from_fn(k, |i, _| if self.values[i] > 0.0 { 1.0 - new[i] / self.values[i] } else { 1.0 });
        let mut scaled = vk.clone_owned();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= scale[j];
        }
        if self.wide {
            c - scaled * (vk.transpose() * c)
        } else {
            c - (c * vk) * scaled.transpose()
        }
    }
}

/// Proximal map of `kappa |.|_op^2` restricted to `|.|_op <= bound`, on singular values.
///
/// The result clips every singular value at the level `m` solving
/// `sum_i (s_i - m)_+ = 2 kappa m`.
fn op_sq_level(s: &[f64], kappa: f64, bound: Option<f64>) -> f64 {
    let mut m = s.first().cloned().unwrap_or(0.0);
    if kappa > 0.0 {
        let mut acc = 0.0;
        for (k, &sk) in s.iter().enumerate() {
            acc += sk;
            let cand = acc / (k as f64 + 1.0 + 2.0 * kappa);
            let next = s.get(k + 1).cloned().unwrap_or(0.0);
            if cand >= next {
                m = cand;
                break;
            }
        }
    }
    match bound {
        Some(b) => m.min(b),
        None => m,
    }
}

fn prox_op_sq(c: &DMatrix<f64>, kappa: f64, bound: Option<f64>) -> Result<DMatrix<f64>> {
    let sp = Spectral::of(c)?;
    let m = op_sq_level(&sp.values, kappa, bound);
    Ok(sp.apply(c, &sp.values.iter().map(|&v| v.min(m)).collect::<Vec<_>>()))
}

struct SplitOut {
    x: DMatrix<f64>,
    iterations: usize,
    converged: bool,
}

/// ADMM on `loss(C) + ridge |C|_F^2 + h(X)` subject to `C = X`.
///
/// The `C` update is entrywise and exact; `prox(v, t)` is the proximal map
/// of `t h`. The penalty is adapted by residual balancing.
fn admm(
    can: &Canonical,
    ridge: f64,
    prox: &dyn Fn(&DMatrix<f64>, f64) -> Result<DMatrix<f64>>,
    opts: &SolverOptions,
) -> Result<SplitOut> {
    let (nr, nc) = (can.d.len(), can.e.len());
    if nr == 0 || nc == 0 {
        return Ok(SplitOut { x: can.zeros(), iterations: 0, converged: true });
    }
    let w2 = DMatrix::from_fn(nr, nc, |i, j| (can.d[i] * can.e[j]).powi(2));
    let wy = DMatrix::from_fn(nr, nc, |i, j| can.d[i] * can.e[j] * can.y[(i, j)]);
    let mut sorted: Vec<f64> = w2.iter().cloned().collect();
    sorted.sort_by(f64::total_cmp);
    let mut rho = (2.0 * sorted[sorted.len() / 2] + 2.0 * ridge).max(1e-12 * (2.0 * sorted[sorted.len() - 1]));
    let mut x = can.zeros();
    let mut u = can.zeros();
    let scale = (nr * nc) as f64;
    let eps_abs = opts.rel_tol * 1e-3 * (1.0 + can.y.norm()) / scale.sqrt();
    for it in 1..=opts.max_iters {
        let c = DMatrix::from_fn(nr, nc, |i, j| {
            (2.0 * wy[(i, j)] + rho * (x[(i, j)] - u[(i, j)])) / (2.0 * w2[(i, j)] + 2.0 * ridge + rho)
        });
        let x_new = prox(&(&c + &u), 1.0 / rho)?;
        let primal = (&c - &x_new).norm();
        let dual = rho * (&x_new - &x).norm();
        u += &c - &x_new;
        x = x_new;
        let eps_pri = eps_abs * scale.sqrt() + opts.rel_tol * c.norm().max(x.norm());
        let eps_dual = eps_abs * scale.sqrt() + opts.rel_tol * rho * u.norm();
        if it % 250 == 0 {
            log::trace!("it {it} primal {primal:.3e}/{eps_pri:.3e} dual {dual:.3e}/{eps_dual:.3e} rho {rho:.3e}");
        }
        if primal <= eps_pri && dual <= eps_dual {
            return Ok(SplitOut { x, iterations: it, converged: true });
        }
        if primal > 10.0 * dual {
            rho *= 2.0;
            u /= 2.0;
        } else if dual > 10.0 * primal {
            rho /= 2.0;
            u *= 2.0;
        }
    }
    Ok(SplitOut { x, iterations: opts.max_iters, converged: false })
}

/// Norm of the proximal-gradient map at `c`, relative to `1 + |grad(0)|`.
fn prox_residual(
    can: &Canonical,
    ridge: f64,
    prox: &dyn Fn(&DMatrix<f64>, f64) -> Result<DMatrix<f64>>,
    c: &DMatrix<f64>,
) -> Result<f64> {
    let lip = can.lipschitz() + 2.0 * ridge;
    if lip == 0.0 || c.is_empty() {
        return Ok(0.0);
    }
    let t = 1.0 / lip;
    let g = can.grad(c) + c * (2.0 * ridge);
    let mapped = prox(&(c - g * t), t)?;
    let scale = 1.0 + can.grad(&can.zeros()).norm();
    Ok((c - mapped).norm() / t / scale)
}

/// A learning problem reduced to the range spaces of `Z` and `G`.
#[derive(Clone, Debug)]
pub struct LearningProblem {
    eval: DMatrix<f64>,
    z: DMatrix<f64>,
    g: DMatrix<f64>,
    y: DMatrix<f64>,
    sz: DMatrix<f64>,
    sg: DMatrix<f64>,
    /// `Qz Lz^{-1/2} V`, maps `C` rows to `A` rows.
    left_a: DMatrix<f64>,
    /// `Qz V`, maps `C` rows to `B` rows.
    left_b: DMatrix<f64>,
    qg: DMatrix<f64>,
    lg: DVector<f64>,
    u: DMatrix<f64>,
    can: Canonical,
    opts: SolverOptions,
}

impl LearningProblem {
    /// `eval` is `P` (n_s x n_z), `z` is n_z x n_z, `g` is n_g x n_g, `y` is n_s x n_g.
    pub fn new(eval: DMatrix<f64>, z: DMatrix<f64>, g: DMatrix<f64>, y: DMatrix<f64>, opts: SolverOptions) -> Result<Self> {
        opts.validate()?;
        let (ns, nz, ng) = (y.nrows(), z.nrows(), g.nrows());
        if eval.shape() != (ns, nz) {
            return input(format!("data matrix is {:?}, expected {:?}", eval.shape(), (ns, nz)));
        }
        if y.ncols() != ng {
            return Err(KoopmanError::Dimension { expected: ng, got: y.ncols() });
        }
        for (name, m) in [("Z", &z), ("G", &g)] {
            if !linalg::is_psd(m, 1e-8) {
                return input(format!("{name} is not symmetric positive semidefinite"));
            }
        }
        if eval.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return input("non-finite entries in data");
        }
        let ez = sym_eig(&z)?.truncated(opts.jitter);
        let eg = sym_eig(&g)?.truncated(opts.jitter);
        let sz = scale_cols(&ez.vectors, &ez.values.map(f64::sqrt)) * ez.vectors.transpose();
        let sg = scale_cols(&eg.vectors, &eg.values.map(f64::sqrt)) * eg.vectors.transpose();
        let inv_root_z = ez.values.map(|v| 1.0 / v.sqrt());
        let l = scale_cols(&(&eval * &ez.vectors), &inv_root_z);
        let svd = linalg::svd(&l)?;
        let top = svd.s.get(0).cloned().unwrap_or(0.0);
        let keep: Vec<usize> = (0..svd.s.len()).filter(|&i| top > 0.0 && svd.s[i] > RANK_RTOL * top).collect();
        let u = svd.u.select_columns(&keep);
        let d = DVector::from_iterator(keep.len(), keep.iter().map(|&i| svd.s[i]));
        let v = svd.v_t.select_rows(&keep).transpose();
        let e = eg.values.map(f64::sqrt);
        let yc = u.transpose() * &y * &eg.vectors;
        Ok(LearningProblem {
            left_a: scale_rows(&ez.vectors.transpose(), &inv_root_z).transpose() * &v,
            left_b: &ez.vectors * &v,
            eval,
            z,
            g,
            y,
            sz,
            sg,
            qg: eg.vectors,
            lg: eg.values,
            u,
            can: Canonical { d, e, y: yc },
            opts,
        })
    }

    /// Problem with trajectory representers (`P = Z`).
    pub fn base(z: &DMatrix<f64>, g: &DMatrix<f64>, y: &DMatrix<f64>, opts: SolverOptions) -> Result<Self> {
        Self::new(z.clone(), z.clone(), g.clone(), y.clone(), opts)
    }

    pub fn from_data(data: &crate::dataset::TrainingData, opts: SolverOptions) -> Result<Self> {
        Self::new(data.eval_matrix().clone(), data.z.clone(), data.g.clone(), data.y.clone(), opts)
    }

    pub fn options(&self) -> &SolverOptions {
        &self.opts
    }

    /// `A = Qz Lz^{-1/2} V C Lg^{-1/2} Qg'`.
    fn to_a(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let right = scale_rows(&self.qg.transpose(), &self.lg.map(|v| 1.0 / v.sqrt()));
        &self.left_a * c * right
    }

    /// `B = Qz V C Qg'`.
    fn to_b(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        &self.left_b * c * self.qg.transpose()
    }

    /// `Z^{1/2} A G^{1/2}`.
    pub fn transform(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        &self.sz * a * &self.sg
    }

    /// `|P A G - Y|_F^2 + reg(Z^{1/2} A G^{1/2})`.
    pub fn objective(&self, a: &DMatrix<f64>, reg: &RegularizerSpec) -> f64 {
        let r = &self.eval * a * &self.g - &self.y;
        r.norm_squared() + reg.penalty(&self.transform(a))
    }

    fn finish(
        &self,
        c: &DMatrix<f64>,
        reg: &RegularizerSpec,
        iterations: usize,
        converged: bool,
        mut diagnostics: BTreeMap<String, f64>,
    ) -> SolveResult {
        let a = self.to_a(c);
        let b = self.to_b(c);
        let (op, fro, nuc) = linalg::norms(&b);
        diagnostics.insert("sigma_max_b".into(), op);
        diagnostics.insert("frobenius_b".into(), fro);
        diagnostics.insert("nuclear_b".into(), nuc);
        diagnostics.insert("rank_b".into(), singular_rank(&b) as f64);
        let residual = (&self.eval * &a * &self.g - &self.y).norm();
        diagnostics.insert("residual".into(), residual);
        SolveResult {
            objective: self.objective(&a, reg),
            a,
            b,
            iterations,
            converged,
            diagnostics,
            m_star: None,
        }
    }

    /// `|P' (P A G - Y) G + lambda Z A G|_F / (1 + |P' Y G|_F)`.
    pub fn stationarity_residual(&self, a: &DMatrix<f64>, lambda: f64) -> f64 {
        let r = self.eval.transpose() * (&self.eval * a * &self.g - &self.y) * &self.g
            + &self.z * a * &self.g * lambda;
        r.norm() / (1.0 + (self.eval.transpose() * &self.y * &self.g).norm())
    }

    pub fn frobenius(&self, lambda: f64) -> Result<SolveResult> {
        check_lambda(lambda)?;
        let can = &self.can;
        let c = DMatrix::from_fn(can.d.len(), can.e.len(), |i, j| {
            let w = can.d[i] * can.e[j];
            w * can.y[(i, j)] / (w * w + lambda)
        });
        let mut out = self.finish(&c, &RegularizerSpec::FrobeniusSq { lambda }, 0, true, BTreeMap::new());
        let stat = self.stationarity_residual(&out.a, lambda);
        out.diagnostics.insert("stationarity_residual".into(), stat);
        Ok(out)
    }

    /// Operator-norm regularization, optionally with `|B| <= rho`.
    pub fn operator_norm(&self, lambda: f64, constraint: &ConstraintSpec) -> Result<SolveResult> {
        let rho = constraint.spectral_bound;
        if let Some(r) = rho {
            if !(r > 0.0 && r <= 1.0) {
                return input(format!("spectral bound must lie in (0, 1], got {r}"));
            }
        }
        if !(lambda == 0.0 && rho.is_some()) {
            check_lambda(lambda)?;
        }
        let can = &self.can;
        let reg = RegularizerSpec::OperatorNormSq { lambda };
        let prox = move |v: &DMatrix<f64>, t: f64| prox_op_sq(v, t * lambda, rho);
        let out = admm(can, 0.0, &prox, &self.opts)?;
        let mut diag = BTreeMap::new();
        diag.insert("beta".into(), linalg::norms(&out.x).0);
        diag.insert("grad_norm".into(), prox_residual(can, 0.0, &prox, &out.x)?);
        Ok(self.finish(&out.x, &reg, out.iterations, out.converged, diag))
    }

    pub fn nuclear(&self, lambda: f64) -> Result<SolveResult> {
        check_lambda(lambda)?;
        let prox = move |v: &DMatrix<f64>, t: f64| shrink(v, t * lambda);
        let out = admm(&self.can, 0.0, &prox, &self.opts)?;
        let mut diag = BTreeMap::new();
        diag.insert("subgradient_residual".into(), prox_residual(&self.can, 0.0, &prox, &out.x)?);
        Ok(self.finish(&out.x, &RegularizerSpec::Nuclear { lambda }, out.iterations, out.converged, diag))
    }

    /// Best fit with `rank(P A G) <= r`.
    pub fn rank(&self, r: usize) -> Result<SolveResult> {
        let can = &self.can;
        let rt = r.min(can.d.len()).min(can.e.len());
        let mut c = can.zeros();
        if rt > 0 {
            let d = linalg::svd(&can.y)?;
            let k = rt.min(d.s.len());
            let x = scale_cols(&d.u.columns(0, k).into_owned(), &d.s.rows(0, k).into_owned())
                * d.v_t.rows(0, k);
            c = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] / (can.d[i] * can.e[j]));
        }
        let mut diag = BTreeMap::new();
        diag.insert("effective_rank".into(), rt as f64);
        Ok(self.finish(&c, &RegularizerSpec::RankAtMost { r }, 0, true, diag))
    }

    /// Frobenius regularization subject to `|B| <= rho`.
    pub fn frobenius_stable(&self, lambda: f64, rho: f64) -> Result<SolveResult> {
        check_lambda(lambda)?;
        if !(rho > 0.0 && rho <= 1.0) {
            return input(format!("spectral bound must lie in (0, 1], got {rho}"));
        }
        let prox = move |v: &DMatrix<f64>, _t: f64| project_ball(v, rho);
        let out = admm(&self.can, lambda, &prox, &self.opts)?;
        let mut diag = BTreeMap::new();
        diag.insert("kkt_residual".into(), prox_residual(&self.can, lambda, &prox, &out.x)?);
        Ok(self.finish(&out.x, &RegularizerSpec::FrobeniusSq { lambda }, out.iterations, out.converged, diag))
    }

    /// Entrywise loss plus `lambda |B|_F^2`, by accelerated gradient descent with backtracking.
    pub fn general_loss(&self, loss: &LossSpec, lambda: f64) -> Result<SolveResult> {
        loss.validate()?;
        check_lambda(lambda)?;
        let can = &self.can;
        let reg = RegularizerSpec::FrobeniusSq { lambda };
        // residual in original coordinates: U diag(d) C diag(e) Qg' - Y
        let residual = |c: &DMatrix<f64>| &self.u * can.fit(c) * self.qg.transpose() - &self.y;
        let value = |c: &DMatrix<f64>| {
            residual(c).iter().map(|&r| loss.value(r)).sum::<f64>() + lambda * c.norm_squared()
        };
        let grad = |c: &DMatrix<f64>| {
            let dl = residual(c).map(|r| loss.derivative(r));
            let w = self.u.transpose() * dl * &self.qg;
            DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| can.d[i] * w[(i, j)] * can.e[j]) + c * (2.0 * lambda)
        };
        let g0 = grad(&can.zeros()).norm();
        let mut lip = can.lipschitz() + 2.0 * lambda;
        let mut x = can.zeros();
        let mut fx = value(&x);
        let mut y = x.clone();
        let mut tk = 1.0f64;
        let mut converged = x.is_empty() || g0 == 0.0;
        let mut iterations = 0;
        while !converged && iterations < self.opts.max_iters {
            iterations += 1;
            let gy = grad(&y);
            let fy = value(&y);
            let (x_new, f_new) = loop {
                let cand = &y - &gy * (1.0 / lip);
                let fc = value(&cand);
                let step = &cand - &y;
                if fc <= fy + gy.dot(&step) + 0.5 * lip * step.norm_squared() + 1e-15 * fy.abs() {
                    break (cand, fc);
                }
                lip *= 2.0;
            };
            if f_new > fx {
                tk = 1.0;
                y = x.clone();
                continue;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
            y = &x_new + (&x_new - &x) * ((tk - 1.0) / t_next);
            tk = t_next;
            x = x_new;
            fx = f_new;
            if grad(&x).norm() <= self.opts.rel_tol * (1.0 + g0) {
                converged = true;
            }
        }
        let mut diag = BTreeMap::new();
        diag.insert("grad_norm".into(), grad(&x).norm());
        let mut out = self.finish(&x, &reg, iterations, converged, diag);
        let a = &out.a;
        let r = &self.eval * a * &self.g - &self.y;
        out.objective = r.iter().map(|&v| loss.value(v)).sum::<f64>() + reg.penalty(&self.transform(a));
        Ok(out)
    }
}

/// Regularization weight: a fixed value or `"cv"` for cross-validation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaChoice {
    Value(f64),
    Cv(CvTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvTag {
    Cv,
}

impl From<f64> for LambdaChoice {
    fn from(v: f64) -> Self {
        LambdaChoice::Value(v)
    }
}

/// A learning method with its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    Edmd,
    OperatorNorm {
        lambda: LambdaChoice,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho: Option<f64>,
    },
    Frobenius {
        lambda: LambdaChoice,
    },
    Nuclear {
        lambda: LambdaChoice,
    },
    Rank {
        r: usize,
    },
    FrobeniusStable {
        lambda: LambdaChoice,
        rho: f64,
    },
    GeneralLoss {
        lambda: LambdaChoice,
        loss: LossSpec,
    },
}

impl MethodSpec {
    /// Short name used in tables.
    pub fn label(&self) -> &'static str {
        match self {
            MethodSpec::Edmd => "edmd",
            MethodSpec::OperatorNorm { rho: None, .. } => "operator",
            MethodSpec::OperatorNorm { rho: Some(_), .. } => "operator_stable",
            MethodSpec::Frobenius { .. } => "frobenius",
            MethodSpec::Nuclear { .. } => "nuclear",
            MethodSpec::Rank { .. } => "rank",
            MethodSpec::FrobeniusStable { .. } => "frobenius_stable",
            MethodSpec::GeneralLoss { .. } => "general_loss",
        }
    }

    /// Builds a method from its table name; `rank` needs `r`, the stable
    /// variants need `rho` and `general_loss` needs `loss`.
    pub fn from_name(
        name: &str,
        lambda: LambdaChoice,
        rho: Option<f64>,
        r: Option<usize>,
        loss: Option<LossSpec>,
    ) -> Result<MethodSpec> {
        let need = |what: &str| KoopmanError::Config(format!("method '{name}' needs {what}"));
        Ok(match name {
            "edmd" => MethodSpec::Edmd,
            "operator" | "operator_norm" => MethodSpec::OperatorNorm { lambda, rho: None },
            "operator_stable" => MethodSpec::OperatorNorm { lambda, rho: Some(rho.ok_or_else(|| need("rho"))?) },
            "frobenius" => MethodSpec::Frobenius { lambda },
            "nuclear" => MethodSpec::Nuclear { lambda },
            "rank" => MethodSpec::Rank { r: r.ok_or_else(|| need("r"))? },
            "frobenius_stable" => MethodSpec::FrobeniusStable { lambda, rho: rho.ok_or_else(|| need("rho"))? },
            "general_loss" => MethodSpec::GeneralLoss { lambda, loss: loss.ok_or_else(|| need("a loss"))? },
            other => return Err(KoopmanError::Config(format!("unknown method '{other}'"))),
        })
    }

    pub fn rho(&self) -> Option<f64> {
        match *self {
            MethodSpec::OperatorNorm { rho, .. } => rho,
            MethodSpec::FrobeniusStable { rho, .. } => Some(rho),
            _ => None,
        }
    }

    pub fn loss(&self) -> Option<LossSpec> {
        match *self {
            MethodSpec::GeneralLoss { loss, .. } => Some(loss),
            _ => None,
        }
    }

    pub fn lambda(&self) -> Option<LambdaChoice> {
        match *self {
            MethodSpec::OperatorNorm { lambda, .. }
            | MethodSpec::Frobenius { lambda }
            | MethodSpec::Nuclear { lambda }
            | MethodSpec::FrobeniusStable { lambda, .. }
            | MethodSpec::GeneralLoss { lambda, .. } => Some(lambda),
            MethodSpec::Edmd | MethodSpec::Rank { .. } => None,
        }
    }

    /// Copy with the regularization weight replaced.
    pub fn with_lambda(&self, value: f64) -> MethodSpec {
        let mut m = self.clone();
        match &mut m {
            MethodSpec::OperatorNorm { lambda, .. }
            | MethodSpec::Frobenius { lambda }
            | MethodSpec::Nuclear { lambda }
            | MethodSpec::FrobeniusStable { lambda, .. }
            | MethodSpec::GeneralLoss { lambda, .. } => *lambda = LambdaChoice::Value(value),
            MethodSpec::Edmd | MethodSpec::Rank { .. } => {}
        }
        m
    }

    /// Solves on a prepared problem; `lambda` must already be fixed.
    pub fn solve(&self, problem: &LearningProblem) -> Result<SolveResult> {
        let fixed = |c: LambdaChoice| match c {
            LambdaChoice::Value(v) => Ok(v),
            LambdaChoice::Cv(_) => input("lambda must be resolved before solving"),
        };
        match *self {
            MethodSpec::Edmd => input("EDMD is solved from the observable design matrix"),
            MethodSpec::OperatorNorm { lambda, rho } => {
                problem.operator_norm(fixed(lambda)?, &ConstraintSpec { spectral_bound: rho })
            }
            MethodSpec::Frobenius { lambda } => problem.frobenius(fixed(lambda)?),
            MethodSpec::Nuclear { lambda } => problem.nuclear(fixed(lambda)?),
            MethodSpec::Rank { r } => problem.rank(r),
            MethodSpec::FrobeniusStable { lambda, rho } => problem.frobenius_stable(fixed(lambda)?, rho),
            MethodSpec::GeneralLoss { lambda, loss } => problem.general_loss(&loss, fixed(lambda)?),
        }
    }
}

fn singular_rank(b: &DMatrix<f64>) -> usize {
    linalg::singular_values(b).iter().filter(|&&s| s > 1e-8).count()
}

/// `M* = pinv(P_G) Y`, `C = M* pinv(G)`.
pub fn solve_edmd(p_g: &DMatrix<f64>, y: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<SolveResult> {
    let ng = g.nrows();
    if p_g.shape() != y.shape() || p_g.ncols() != ng || !g.is_square() {
        return input(format!(
            "EDMD shapes: P_G {:?}, Y {:?}, G {:?}",
            p_g.shape(),
            y.shape(),
            g.shape()
        ));
    }
    let rank = linalg::rank(p_g, RANK_RTOL);
    let mut diag = BTreeMap::new();
    if rank < ng {
        log::warn!("EDMD data matrix has rank {rank} < {ng}; the least-squares solution is not unique");
    }
    diag.insert("rank_p_g".into(), rank as f64);
    diag.insert("nonunique".into(), if rank < ng { 1.0 } else { 0.0 });
    let m = pinv(p_g, RANK_RTOL) * y;
    let c = &m * pinv(g, RANK_RTOL);
    let sg = psd_sqrt(g, 1e-10)?;
    let b = &sg * &c * &sg;
    let residual = (p_g * &m - y).norm();
    diag.insert("residual".into(), residual);
    diag.insert("sigma_max_b".into(), linalg::norms(&b).0);
    Ok(SolveResult {
        a: c,
        b,
        objective: residual * residual,
        iterations: 0,
        converged: true,
        diagnostics: diag,
        m_star: Some(m),
    })
}

pub fn solve_frobenius(z: &DMatrix<f64>, g: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<SolveResult> {
    check_lambda(lambda)?;
    LearningProblem::base(z, g, y, SolverOptions::default())?.frobenius(lambda)
}

pub fn solve_operator_norm(
    z: &DMatrix<f64>,
    g: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    constraint: &ConstraintSpec,
    opts: &SolverOptions,
) -> Result<SolveResult> {
    LearningProblem::base(z, g, y, *opts)?.operator_norm(lambda, constraint)
}

pub fn solve_nuclear(
    z: &DMatrix<f64>,
    g: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<SolveResult> {
    LearningProblem::base(z, g, y, *opts)?.nuclear(lambda)
}

pub fn solve_rank(z: &DMatrix<f64>, g: &DMatrix<f64>, y: &DMatrix<f64>, r: usize) -> Result<SolveResult> {
    LearningProblem::base(z, g, y, SolverOptions::default())?.rank(r)
}

pub fn solve_frobenius_stable(
    z: &DMatrix<f64>,
    g: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    rho: f64,
    opts: &SolverOptions,
) -> Result<SolveResult> {
    LearningProblem::base(z, g, y, *opts)?.frobenius_stable(lambda, rho)
}

pub fn solve_general_loss(
    z: &DMatrix<f64>,
    g: &DMatrix<f64>,
    y: &DMatrix<f64>,
    loss: &LossSpec,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<SolveResult> {
    LearningProblem::base(z, g, y, *opts)?.general_loss(loss, lambda)
}

/// `A = pinv(Z^{1/2}) B pinv(G^{1/2})`.
pub fn recover_a_from_b(z: &DMatrix<f64>, g: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.shape() != (z.nrows(), g.nrows()) {
        return input(format!("B is {:?}, expected {:?}", b.shape(), (z.nrows(), g.nrows())));
    }
    let sz = psd_sqrt(z, 1e-10)?;
    let sg = psd_sqrt(g, 1e-10)?;
    Ok(pinv(&sz, RANK_RTOL) * b * pinv(&sg, RANK_RTOL))
}

/// `|Z A G - Y|_F^2 + reg(Z^{1/2} A G^{1/2})`.
pub fn objective_value(
    z: &DMatrix<f64>,
    g: &DMatrix<f64>,
    y: &DMatrix<f64>,
    a: &DMatrix<f64>,
    reg: &RegularizerSpec,
) -> Result<f64> {
    reg.validate()?;
    if a.shape() != (z.nrows(), g.nrows()) || y.shape() != (z.nrows(), g.nrows()) {
        return input("objective_value: inconsistent shapes");
    }
    let b = psd_sqrt(z, 1e-10)? * a * psd_sqrt(g, 1e-10)?;
    Ok((z * a * g - y).norm_squared() + reg.penalty(&b))
}
