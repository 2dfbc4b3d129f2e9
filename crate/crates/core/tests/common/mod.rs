#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ptmap::component::{ComponentConfig, ComponentLayout};
use ptmap::objective::DesignCache;
use ptmap::spline::KnotRule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// x1 ~ N(0,1), x2 = sin(3 x1) + 0.25 e.
pub fn wavy_data(n: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let x1 = normals(&mut r, n);
    let e = normals(&mut r, n);
    DMatrix::from_fn(n, 2, |i, j| if j == 0 { x1[i] } else { (3.0 * x1[i]).sin() + 0.25 * e[i] })
}

/// Bivariate normal with unit variances and correlation `rho`.
pub fn gaussian_pair(n: usize, rho: f64, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let a = normals(&mut r, n);
    let b = normals(&mut r, n);
    let c = (1.0 - rho * rho).sqrt();
    DMatrix::from_fn(n, 2, |i, j| if j == 0 { a[i] } else { rho * a[i] + c * b[i] })
}

pub fn config_with_knots(knots: KnotRule) -> ComponentConfig {
    ComponentConfig {
        knots_nonmonotone: knots,
        knots_monotone: knots,
        ..Default::default()
    }
}

/// Design of component 1 with parent 0.
pub fn second_component_cache(data: &DMatrix<f64>, knots: KnotRule) -> DesignCache {
    let cfg = config_with_knots(knots);
    let layout = ComponentLayout::build(data, 1, &[0], &cfg).unwrap();
    layout.design(data, cfg.ridge).unwrap()
}

pub fn central_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |k, _| {
        let mut p = x.clone();
        let mut m = x.clone();
        p[k] += h;
        m[k] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Relative error of two vectors in the max norm, scaled by the larger one.
pub fn vec_rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / a.amax().max(b.amax()).max(1e-12)
}

pub fn mat_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / a.amax().max(b.amax()).max(1e-12)
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let n = a.len() as f64;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
    cov / (va * vb).sqrt()
}
