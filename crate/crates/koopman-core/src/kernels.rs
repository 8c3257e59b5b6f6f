//! Positive-definite kernels and Gram matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{input, KoopmanError, Result};

/// A point in state space.
pub type Point = Vec<f64>;

/// Kernel family. Serialized with a `kind` tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `exp(-|x-y|^2 / (2 l^2))`
    Gaussian { length_scale: f64 },
    /// Unit-variance Matérn kernel with smoothness 5/2.
    Matern52 { length_scale: f64 },
    /// `1 + x'y`
    LinearAffine,
    /// `h(x,y) - h(x,e) - h(e,y) + h(e,e)` for base kernel `h` and anchor `e`.
    Centered { base: Box<KernelSpec>, anchor: Point },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Gaussian { length_scale } | KernelSpec::Matern52 { length_scale } => {
                if !(length_scale.is_finite() && *length_scale > 0.0) {
                    return input(format!("length_scale must be positive, got {length_scale}"));
                }
                Ok(())
            }
            KernelSpec::LinearAffine => Ok(()),
            KernelSpec::Centered { base, anchor } => {
                if matches!(**base, KernelSpec::Centered { .. }) {
                    return input("a centered kernel cannot wrap another centered kernel");
                }
                if anchor.is_empty() {
                    return input("centering anchor is empty");
                }
                base.validate()
            }
        }
    }

    /// Input dimension fixed by the kernel, if any.
    pub fn fixed_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::Centered { anchor, .. } => Some(anchor.len()),
            _ => None,
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.validate()?;
        check_dim(self, x.len(), y.len())?;
        Ok(self.eval_unchecked(x, y))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            KernelSpec::Gaussian { length_scale } => {
                (-sq_dist(x, y) / (2.0 * length_scale * length_scale)).exp()
            }
            KernelSpec::Matern52 { length_scale } => {
                let r = 5f64.sqrt() * sq_dist(x, y).sqrt() / length_scale;
                (1.0 + r + r * r / 3.0) * (-r).exp()
            }
            KernelSpec::LinearAffine => 1.0 + x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>(),
            KernelSpec::Centered { base, anchor } => {
                base.eval_unchecked(x, y) - base.eval_unchecked(x, anchor)
                    - base.eval_unchecked(anchor, y)
                    + base.eval_unchecked(anchor, anchor)
            }
        }
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_dim(spec: &KernelSpec, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(KoopmanError::Dimension { expected: a, got: b });
    }
    if let Some(d) = spec.fixed_dim() {
        if d != a {
            return Err(KoopmanError::Dimension { expected: d, got: a });
        }
    }
    Ok(())
}

/// Common dimension of a nonempty point list.
pub fn point_dim(points: &[Point]) -> Result<usize> {
    let Some(first) = points.first() else {
        return input("empty point list");
    };
    let d = first.len();
    if d == 0 {
        return input("points must have at least one coordinate");
    }
    if let Some(bad) = points.iter().find(|p| p.len() != d) {
        return Err(KoopmanError::Dimension { expected: d, got: bad.len() });
    }
    Ok(d)
}

/// `K[i][j] = k(xs[i], ys[j])`.
pub fn gram_matrix(spec: &KernelSpec, xs: &[Point], ys: &[Point]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let dx = point_dim(xs)?;
    let dy = point_dim(ys)?;
    check_dim(spec, dx, dy)?;
    if std::ptr::eq(xs, ys) {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let v = spec.eval_unchecked(&xs[i], &xs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        return Ok(k);
    }
    Ok(DMatrix::from_fn(xs.len(), ys.len(), |i, j| spec.eval_unchecked(&xs[i], &ys[j])))
}
