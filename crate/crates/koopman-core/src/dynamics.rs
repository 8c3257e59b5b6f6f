//! Benchmark discrete-time systems.

use serde::{Deserialize, Serialize};

use crate::dataset::Trajectory;
use crate::error::{input, KoopmanError, Result};
use crate::kernels::Point;

/// A discrete-time map `x+ = F(x)`. Omitted JSON parameters take the benchmark values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// `(m1 x1, m2 x2 + (m1^2 - m2) x1^2)`
    #[serde(rename = "polymap2d")]
    PolyMap2D {
        #[serde(default = "d_mu1")]
        mu1: f64,
        #[serde(default = "d_mu2")]
        mu2: f64,
    },
    /// Forward-Euler Van der Pol oscillator with constant input `u`.
    #[serde(rename = "vanderpol")]
    VanDerPolEuler {
        #[serde(default = "d_vdp_mu")]
        mu: f64,
        #[serde(default = "d_vdp_dt")]
        dt: f64,
        #[serde(default)]
        u: f64,
    },
    /// Host–parasitoid model.
    NicholsonBailey {
        #[serde(default = "d_r0")]
        r0: f64,
        #[serde(default = "d_c")]
        c: f64,
    },
    /// Explicit Euler finite-difference scheme for `u_t = a u_xi + b u_xixi` on `[0, 1]`.
    ConvectionDiffusion {
        #[serde(default = "d_a")]
        a: f64,
        #[serde(default = "d_b")]
        b: f64,
        #[serde(default = "d_dxi")]
        dxi: f64,
        #[serde(default = "d_pde_dt")]
        dt: f64,
        #[serde(default = "d_nx")]
        n_x: usize,
    },
}

fn d_mu1() -> f64 {
    0.95
}
fn d_mu2() -> f64 {
    0.75
}
fn d_vdp_mu() -> f64 {
    0.5
}
fn d_vdp_dt() -> f64 {
    0.2
}
fn d_r0() -> f64 {
    1.1
}
fn d_c() -> f64 {
    3.0
}
fn d_a() -> f64 {
    1.0
}
fn d_b() -> f64 {
    0.1
}
fn d_dxi() -> f64 {
    1e-2
}
fn d_pde_dt() -> f64 {
    1e-4
}
fn d_nx() -> usize {
    101
}

impl SystemSpec {
    pub fn polymap() -> Self {
        SystemSpec::PolyMap2D { mu1: d_mu1(), mu2: d_mu2() }
    }

    pub fn vanderpol() -> Self {
        SystemSpec::VanDerPolEuler { mu: d_vdp_mu(), dt: d_vdp_dt(), u: 0.0 }
    }

    pub fn nicholson_bailey() -> Self {
        SystemSpec::NicholsonBailey { r0: d_r0(), c: d_c() }
    }

    pub fn convection_diffusion() -> Self {
        SystemSpec::ConvectionDiffusion { a: d_a(), b: d_b(), dxi: d_dxi(), dt: d_pde_dt(), n_x: d_nx() }
    }

    pub fn dim(&self) -> usize {
        match self {
            SystemSpec::ConvectionDiffusion { n_x, .. } => *n_x,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: f64, name: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                input(format!("{name} must be finite"))
            }
        };
        match *self {
            SystemSpec::PolyMap2D { mu1, mu2 } => {
                finite(mu1, "mu1")?;
                finite(mu2, "mu2")
            }
            SystemSpec::VanDerPolEuler { mu, dt, u } => {
                finite(mu, "mu")?;
                finite(u, "u")?;
                if !(dt > 0.0 && dt.is_finite()) {
                    return input("dt must be positive");
                }
                Ok(())
            }
            SystemSpec::NicholsonBailey { r0, c } => {
                finite(r0, "r0")?;
                finite(c, "c")
            }
            SystemSpec::ConvectionDiffusion { a, b, dxi, dt, n_x } => {
                finite(a, "a")?;
                finite(b, "b")?;
                if !(dt > 0.0 && dt.is_finite() && dxi > 0.0 && dxi.is_finite()) {
                    return input("dt and dxi must be positive");
                }
                if n_x < 3 {
                    return input("convection-diffusion needs at least 3 grid nodes");
                }
                if b * dt / (dxi * dxi) >= 0.5 || a.abs() * dt / dxi >= 1.0 {
                    log::warn!("explicit scheme outside its stability limits (dt={dt}, dxi={dxi})");
                }
                Ok(())
            }
        }
    }

    pub fn step(&self, x: &[f64]) -> Result<Point> {
        if x.len() != self.dim() {
            return Err(KoopmanError::Dimension { expected: self.dim(), got: x.len() });
        }
        match *self {
            SystemSpec::PolyMap2D { mu1, mu2 } => {
                Ok(vec![mu1 * x[0], mu2 * x[1] + (mu1 * mu1 - mu2) * x[0] * x[0]])
            }
            SystemSpec::VanDerPolEuler { mu, dt, u } => Ok(vec![
                x[0] + dt * x[1],
                x[1] + dt * (mu * (1.0 - x[0] * x[0]) * x[1] - x[0] + u),
            ]),
            SystemSpec::NicholsonBailey { r0, c } => {
                let s = 1.0 + 2.0 * x[1];
                if !(s > 0.0) {
                    return Err(KoopmanError::Domain(format!("1 + 2 x2 = {s} must be positive")));
                }
                let f = s.powf(-0.5);
                Ok(vec![r0 * x[0] * f, c * x[0] * (1.0 - f)])
            }
            SystemSpec::ConvectionDiffusion { a, b, dxi, dt, n_x } => {
                let n = n_x;
                let mut out = x.to_vec();
                for i in 0..n {
                    let (d1, d2) = if i == 0 {
                        ((x[1] - x[0]) / dxi, (x[0] - 2.0 * x[1] + x[2]) / (dxi * dxi))
                    } else if i == n - 1 {
                        (
                            (x[n - 1] - x[n - 2]) / dxi,
                            (x[n - 1] - 2.0 * x[n - 2] + x[n - 3]) / (dxi * dxi),
                        )
                    } else {
                        (
                            (x[i + 1] - x[i - 1]) / (2.0 * dxi),
                            (x[i + 1] - 2.0 * x[i] + x[i - 1]) / (dxi * dxi),
                        )
                    };
                    out[i] += dt * (a * d1 + b * d2);
                }
                Ok(out)
            }
        }
    }
}

/// States `x_0..x_n` obtained by iterating `step`.
pub fn simulate(sys: &SystemSpec, x0: &[f64], n: usize) -> Result<Trajectory> {
    if n == 0 {
        return input("simulation length must be at least 1");
    }
    sys.validate()?;
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.to_vec());
    for k in 0..n {
        let next = sys.step(&states[k])?;
        states.push(next);
    }
    Trajectory::new(states)
}

/// Initial profiles of the convection–diffusion benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeProfile {
    SinPi,
    OneMinusExp,
}

impl std::str::FromStr for PdeProfile {
    type Err = KoopmanError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sin_pi" => Ok(PdeProfile::SinPi),
            "one_minus_exp" => Ok(PdeProfile::OneMinusExp),
            other => input(format!("unknown initial profile '{other}'")),
        }
    }
}

/// Samples the profile at `xi_i = i / (n_x - 1)`.
pub fn pde_initial(profile: PdeProfile, n_x: usize) -> Result<Point> {
    if n_x < 2 {
        return input("n_x must be at least 2");
    }
    let h = 1.0 / (n_x - 1) as f64;
    Ok((0..n_x)
        .map(|i| {
            let xi = i as f64 * h;
            match profile {
                PdeProfile::SinPi => (std::f64::consts::PI * xi).sin(),
                PdeProfile::OneMinusExp => 1.0 - (-xi).exp(),
            }
        })
        .collect())
}
