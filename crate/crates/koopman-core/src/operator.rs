//! The learned operator `K = sum a_kl z_k (x) g_l` with `z_k = k(q_k, .)`, `g_l = k(p_l, .)`.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{ObservableSet, TrainingData};
use crate::error::{input, KoopmanError, Result};
use crate::kernels::{gram_matrix, point_dim, KernelSpec, Point};
use crate::linalg::{self, scale_cols, scale_rows, sym_eig, RANK_RTOL};
use crate::solvers::SolveResult;

#[derive(Clone, Debug)]
pub struct KoopmanEstimate {
    kernel: KernelSpec,
    anchors_z: Vec<Point>,
    anchors_g: Vec<Point>,
    a: DMatrix<f64>,
    z: DMatrix<f64>,
    g: DMatrix<f64>,
    gcross: DMatrix<f64>,
}

/// On-disk form; Gram blocks are rebuilt on load.
#[derive(Serialize, Deserialize)]
struct EstimateFile {
    kernel: KernelSpec,
    anchors_z: Vec<Point>,
    anchors_g: Vec<Point>,
    a: Vec<Vec<f64>>,
}

impl Serialize for KoopmanEstimate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EstimateFile {
            kernel: self.kernel.clone(),
            anchors_z: self.anchors_z.clone(),
            anchors_g: self.anchors_g.clone(),
            a: linalg::to_rows(&self.a),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for KoopmanEstimate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = EstimateFile::deserialize(d)?;
        let a = linalg::from_rows(&f.a).map_err(serde::de::Error::custom)?;
        KoopmanEstimate::new(f.kernel, f.anchors_z, f.anchors_g, a).map_err(serde::de::Error::custom)
    }
}

/// Operator, Frobenius and nuclear norm of the estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorNorms {
    pub operator: f64,
    pub frobenius: f64,
    pub nuclear: f64,
}

impl KoopmanEstimate {
    pub fn new(kernel: KernelSpec, anchors_z: Vec<Point>, anchors_g: Vec<Point>, a: DMatrix<f64>) -> Result<Self> {
        kernel.validate()?;
        let dz = point_dim(&anchors_z)?;
        let dg = point_dim(&anchors_g)?;
        if dz != dg {
            return Err(KoopmanError::Dimension { expected: dg, got: dz });
        }
        if a.shape() != (anchors_z.len(), anchors_g.len()) {
            return input(format!(
                "coefficient matrix is {:?}, expected {:?}",
                a.shape(),
                (anchors_z.len(), anchors_g.len())
            ));
        }
        let z = gram_matrix(&kernel, &anchors_z, &anchors_z)?;
        let g = gram_matrix(&kernel, &anchors_g, &anchors_g)?;
        let gcross = gram_matrix(&kernel, &anchors_g, &anchors_z)?;
        Ok(KoopmanEstimate { kernel, anchors_z, anchors_g, a, z, g, gcross })
    }

    /// Estimate carrying the coefficients of a solve on `data`.
    pub fn from_solve(data: &TrainingData, result: &SolveResult) -> Result<Self> {
        Self::new(data.kernel.clone(), data.anchors_z.clone(), data.anchors_g.clone(), result.a.clone())
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }
    pub fn anchors_z(&self) -> &[Point] {
        &self.anchors_z
    }
    pub fn anchors_g(&self) -> &[Point] {
        &self.anchors_g
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
    pub fn gcross(&self) -> &DMatrix<f64> {
        &self.gcross
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `(K g_l)(x) = sum_k k(q_k, x) [A G]_{kl}` for a zero-based `l`.
    pub fn apply_observable(&self, l: usize, x: &[f64]) -> Result<f64> {
        if l >= self.anchors_g.len() {
            return Err(KoopmanError::Index { index: l, len: self.anchors_g.len() });
        }
        let ag = &self.a * self.g.column(l);
        let mut sum = 0.0;
        for (k, q) in self.anchors_z.iter().enumerate() {
            sum += self.kernel.eval(q, x)? * ag[k];
        }
        Ok(sum)
    }

    /// Values of `K g_l` at each point: an `n_points x n_g` matrix.
    pub fn apply_at(&self, points: &[Point]) -> Result<DMatrix<f64>> {
        Ok(gram_matrix(&self.kernel, points, &self.anchors_z)? * &self.a * &self.g)
    }

    /// Values of `K h_j` at each point for `h_j = k(r_j, .)`, `r_j` in `sections`.
    pub fn apply_sections_at(&self, sections: &[Point], points: &[Point]) -> Result<DMatrix<f64>> {
        let right = &self.a * gram_matrix(&self.kernel, &self.anchors_g, sections)?;
        Ok(gram_matrix(&self.kernel, points, &self.anchors_z)? * right)
    }

    /// `Z^{1/2} A G^{1/2}`.
    pub fn b(&self) -> Result<DMatrix<f64>> {
        Ok(linalg::psd_sqrt(&self.z, 1e-10)? * &self.a * linalg::psd_sqrt(&self.g, 1e-10)?)
    }

    pub fn operator_norms(&self) -> Result<OperatorNorms> {
        let (operator, frobenius, nuclear) = linalg::norms(&self.b()?);
        Ok(OperatorNorms { operator, frobenius, nuclear })
    }

    /// Eigenvalues of `A Gcross`, sorted by modulus (descending) then angle.
    ///
    /// Computed from the equivalent matrix `B~ T` in orthonormal coordinates of
    /// span{z} and span{g}, where `B~ = Lz^{1/2} Qz' A Qg Lg^{1/2}` and `T` is the
    /// cross Gram of the two bases (the identity when the anchor sets coincide).
    /// Directions of `Z` below the rank cut-off carry zero eigenvalues.
    pub fn eigenvalues(&self) -> Result<Vec<Complex<f64>>> {
        let n = self.anchors_z.len();
        let ez = sym_eig(&self.z)?.truncated(RANK_RTOL);
        let eg = sym_eig(&self.g)?.truncated(RANK_RTOL);
        let rz = ez.values.len();
        let mut vals: Vec<Complex<f64>> = Vec::with_capacity(n);
        if rz > 0 && !eg.values.is_empty() {
            let sz = ez.values.map(f64::sqrt);
            let sg = eg.values.map(f64::sqrt);
            let bt = scale_cols(&scale_rows(&(ez.vectors.transpose() * &self.a * &eg.vectors), &sz), &sg);
            let t = if self.anchors_z == self.anchors_g {
                DMatrix::identity(rz, rz)
            } else {
                let m = eg.vectors.transpose() * &self.gcross * &ez.vectors;
                scale_cols(&scale_rows(&m, &sg.map(|v| 1.0 / v)), &sz.map(|v| 1.0 / v))
            };
            let m = bt * t;
            vals.extend(m.complex_eigenvalues().iter().cloned());
        }
        vals.resize(n, Complex::new(0.0, 0.0));
        sort_spectrum(&mut vals);
        Ok(vals)
    }

    /// Predicted observable vectors `phi_0..phi_n` with `phi_{m+1}' = phi_m' A G`.
    ///
    /// Requires `anchors_z == anchors_g`. The recursion runs in orthonormal
    /// coordinates of span{g}, where it reads `c_{m+1} = c_m Lg^{1/2} Qg' A Qg Lg^{1/2}`.
    pub fn predict_observables(&self, x0: &[f64], n: usize) -> Result<Vec<DVector<f64>>> {
        if self.anchors_z != self.anchors_g {
            return input("prediction requires observable-invariant estimate (anchors_z == anchors_g)");
        }
        let phi0 = DVector::from_vec(
            self.anchors_g.iter().map(|p| self.kernel.eval(p, x0)).collect::<Result<Vec<f64>>>()?,
        );
        let eg = sym_eig(&self.g)?.truncated(RANK_RTOL);
        let root = eg.values.map(f64::sqrt);
        let m = scale_cols(&scale_rows(&(eg.vectors.transpose() * &self.a * &eg.vectors), &root), &root);
        let back = scale_rows(&eg.vectors.transpose(), &root);
        let mut c = (phi0.transpose() * &eg.vectors).component_div(&root.transpose());
        let mut out = Vec::with_capacity(n + 1);
        out.push(phi0);
        for _ in 0..n {
            c = c * &m;
            out.push((&c * &back).transpose());
        }
        Ok(out)
    }

    /// Orthogonal projection of the representers onto span{k(w_j, .)}.
    pub fn project(&self, w_anchors: &[Point]) -> Result<KoopmanEstimate> {
        let p_w = gram_matrix(&self.kernel, &self.anchors_z, w_anchors)?;
        let w = gram_matrix(&self.kernel, w_anchors, w_anchors)?;
        let q = p_w * linalg::pinv(&w, RANK_RTOL);
        let c = q.transpose() * &self.a;
        KoopmanEstimate::new(self.kernel.clone(), w_anchors.to_vec(), self.anchors_g.clone(), c)
    }
}

fn sort_spectrum(vals: &mut [Complex<f64>]) {
    vals.sort_by(|a, b| {
        let (ma, mb) = ((a.norm() * 1e10).round(), (b.norm() * 1e10).round());
        mb.total_cmp(&ma).then(a.arg().total_cmp(&b.arg()))
    });
}

/// State from linear-affine observables: `x = pinv(P) (phi - 1)`.
pub fn reconstruct_state_linear(obs: &ObservableSet, phi: &DVector<f64>) -> Result<Point> {
    if obs.kernel != KernelSpec::LinearAffine {
        return input("state reconstruction needs the linear-affine kernel");
    }
    let dim = point_dim(&obs.anchors)?;
    if obs.len() < dim {
        return input(format!("need at least {dim} observables, got {}", obs.len()));
    }
    if phi.len() != obs.len() {
        return Err(KoopmanError::Dimension { expected: obs.len(), got: phi.len() });
    }
    let p = linalg::from_rows(&obs.anchors)?;
    let x = linalg::pinv(&p, RANK_RTOL) * phi.add_scalar(-1.0);
    Ok(x.iter().cloned().collect())
}

/// Batch form of [`reconstruct_state_linear`] with a single pseudo-inverse.
pub fn reconstruct_states_linear(obs: &ObservableSet, phis: &[DVector<f64>]) -> Result<Vec<Point>> {
    if obs.kernel != KernelSpec::LinearAffine {
        return input("state reconstruction needs the linear-affine kernel");
    }
    let p = linalg::from_rows(&obs.anchors)?;
    let pinv = linalg::pinv(&p, RANK_RTOL);
    phis.iter()
        .map(|phi| {
            if phi.len() != obs.len() {
                return Err(KoopmanError::Dimension { expected: obs.len(), got: phi.len() });
            }
            Ok((&pinv * phi.add_scalar(-1.0)).iter().cloned().collect())
        })
        .collect()
}

/// Free-function form of [`KoopmanEstimate::apply_observable`].
pub fn apply_observable(est: &KoopmanEstimate, l: usize, x: &[f64]) -> Result<f64> {
    est.apply_observable(l, x)
}

pub fn eigenvalues(est: &KoopmanEstimate) -> Result<Vec<Complex<f64>>> {
    est.eigenvalues()
}

pub fn predict_observables(est: &KoopmanEstimate, x0: &[f64], n: usize) -> Result<Vec<DVector<f64>>> {
    est.predict_observables(x0, n)
}

pub fn project_estimate(est: &KoopmanEstimate, w_anchors: &[Point]) -> Result<KoopmanEstimate> {
    est.project(w_anchors)
}

pub fn operator_norms(est: &KoopmanEstimate) -> Result<OperatorNorms> {
    est.operator_norms()
}
