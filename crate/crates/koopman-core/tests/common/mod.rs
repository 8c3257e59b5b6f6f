//! Shared fixtures and invariant checks for the integration tests.
#![allow(dead_code)]

use koopman_core::dataset::{add_noise, build_training_data, NoiseSpec, ObservableSet, Trajectory};
use koopman_core::dynamics::{simulate, SystemSpec};
use koopman_core::kernels::{gram_matrix, KernelSpec, Point};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points(n: usize, dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<Point> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

pub fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// One of the four kernel families with random parameters.
pub fn random_kernel(dim: usize, rng: &mut ChaCha8Rng) -> KernelSpec {
    let stationary = |rng: &mut ChaCha8Rng| {
        let length_scale = rng.random_range(0.2..3.0);
        if rng.random_bool(0.5) {
            KernelSpec::Gaussian { length_scale }
        } else {
            KernelSpec::Matern52 { length_scale }
        }
    };
    match rng.random_range(0..4) {
        0 | 1 => stationary(rng),
        2 => KernelSpec::LinearAffine,
        _ => {
            let base = if rng.random_bool(0.7) { stationary(rng) } else { KernelSpec::LinearAffine };
            KernelSpec::Centered { base: Box::new(base), anchor: random_points(1, dim, 1.0, rng).remove(0) }
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn psd_check(name: &str, m: &DMatrix<f64>) -> Check {
    let tr = m.trace();
    let lo = min_eigenvalue(m);
    if lo < -1e-8 * tr.abs().max(f64::MIN_POSITIVE) {
        return Err(format!("{name}: min eigenvalue {lo:e} with trace {tr:e}"));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(format!("{name}: not symmetric"));
    }
    Ok(())
}

/// Symmetry, centering, PSD and radial decay for a random kernel.
pub fn kernel_invariants(seed: u64) -> Check {
    let mut r = rng(seed);
    let dim = r.random_range(1..4);
    let k = random_kernel(dim, &mut r);
    for _ in 0..100 {
        let x = random_points(1, dim, 2.0, &mut r).remove(0);
        let y = random_points(1, dim, 2.0, &mut r).remove(0);
        let (a, b) = (k.eval(&x, &y).unwrap(), k.eval(&y, &x).unwrap());
        if (a - b).abs() > 1e-12 {
            return Err(format!("{k:?}: asymmetric {a} vs {b}"));
        }
    }
    if let KernelSpec::Centered { anchor, .. } = &k {
        for _ in 0..100 {
            let y = random_points(1, dim, 2.0, &mut r).remove(0);
            let (a, b) = (k.eval(anchor, &y).unwrap(), k.eval(&y, anchor).unwrap());
            if a.abs() > 1e-12 || b.abs() > 1e-12 {
                return Err(format!("{k:?}: centering violated ({a:e}, {b:e})"));
            }
        }
    }
    let n = r.random_range(1..=10);
    let pts = random_points(n, dim, 2.0, &mut r);
    psd_check(&format!("{k:?} gram"), &gram_matrix(&k, &pts, &pts).unwrap())?;
    if let KernelSpec::Gaussian { .. } | KernelSpec::Matern52 { .. } = k {
        let x = random_points(1, dim, 2.0, &mut r).remove(0);
        let u = random_points(1, dim, 1.0, &mut r).remove(0);
        let mut prev = f64::INFINITY;
        for i in 0..=200 {
            let t = i as f64 * 0.05;
            let y: Point = x.iter().zip(&u).map(|(a, b)| a + t * b).collect();
            let v = k.eval(&x, &y).unwrap();
            if v > prev {
                return Err(format!("{k:?}: increases along a ray at t={t}"));
            }
            prev = v;
        }
    }
    Ok(())
}

/// Empirical SNR of `add_noise` over 10^5 coordinates.
pub fn snr_calibration(seed: u64, snr_db: f64) -> Check {
    let mut r = rng(seed);
    let scale = r.random_range(0.1..10.0);
    let states: Vec<Point> = (0..50_000).map(|_| vec![scale * r.random_range(-1.0..1.0), scale * r.random_range(0.0..2.0)]).collect();
    let clean = Trajectory::new(states).unwrap();
    let noisy = add_noise(&clean, NoiseSpec { snr_db, seed }).unwrap();
    let (mut p_sig, mut p_noise) = (0.0, 0.0);
    for (c, n) in clean.states().iter().zip(noisy.states()) {
        for (a, b) in c.iter().zip(n) {
            p_sig += a * a;
            p_noise += (b - a) * (b - a);
        }
    }
    let measured = 10.0 * (p_sig / p_noise).log10();
    if (measured - snr_db).abs() > 0.2 {
        return Err(format!("requested {snr_db} dB, measured {measured} dB"));
    }
    Ok(())
}

/// Stacking several trajectories keeps each trajectory's blocks intact.
pub fn block_structure(seed: u64) -> Check {
    let mut r = rng(seed);
    let sys = if r.random_bool(0.5) { SystemSpec::polymap() } else { SystemSpec::vanderpol() };
    let k = KernelSpec::Gaussian { length_scale: r.random_range(0.5..2.0) };
    let n_traj = r.random_range(1..=3);
    let trajs: Vec<Trajectory> = (0..n_traj)
        .map(|_| {
            let x0 = random_points(1, 2, 1.5, &mut r).remove(0);
            simulate(&sys, &x0, r.random_range(1..15)).unwrap()
        })
        .collect();
    let obs = ObservableSet::new(k.clone(), random_points(r.random_range(1..6), 2, 2.0, &mut r)).unwrap();
    let data = build_training_data(&k, &trajs, &obs).unwrap();
    let total: usize = trajs.iter().map(Trajectory::n_steps).sum();
    let ng = obs.len();
    if data.y.shape() != (total, ng) || data.gcross.shape() != (ng, total) || data.z.shape() != (total, total) {
        return Err(format!("shapes Y {:?} Z {:?} Gcross {:?}", data.y.shape(), data.z.shape(), data.gcross.shape()));
    }
    let pre: Vec<Point> = trajs.iter().flat_map(|t| t.preimages().to_vec()).collect();
    if data.z != gram_matrix(&k, &pre, &pre).unwrap() {
        return Err("Z differs from the Gram of the stacked pre-images".into());
    }
    let mut start = 0;
    for t in &trajs {
        let single = build_training_data(&k, std::slice::from_ref(t), &obs).unwrap();
        let m = t.n_steps();
        if data.y.rows(start, m) != single.y {
            return Err(format!("Y block at row {start} differs"));
        }
        if data.z.view((start, start), (m, m)) != single.z {
            return Err(format!("Z diagonal block at {start} differs"));
        }
        start += m;
    }
    if data.segments != trajs.iter().map(Trajectory::n_steps).collect::<Vec<_>>() {
        return Err("segments".into());
    }
    psd_check("Z", &data.z)?;
    psd_check("G", &data.g)
}

pub fn example1_anchors() -> Vec<Point> {
    vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]]
}
