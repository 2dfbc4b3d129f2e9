mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use ptmap::linalg;
use ptmap::objective::{aicc_penalty, DesignCache, ImplicitSystem, PenaltyBlock};
use ptmap::spline::{make_knots, KnotRule, SplineBasis};
use rand::Rng;

fn monotone_only_cache(xs: &[f64]) -> (SplineBasis, DesignCache) {
    let basis = SplineBasis::new(make_knots(xs, 3, KnotRule::Auto).unwrap());
    let cache = DesignCache::from_bases(&[], &basis, xs, 1e-8).unwrap();
    (basis, cache)
}

fn identity_raw(basis: &SplineBasis) -> DVector<f64> {
    linalg::differences(&DVector::from_vec(basis.greville()))
}

#[test]
fn nll_of_identity_map_is_half_sum_of_squares() {
    let xs = normals(&mut rng(1), 500);
    let (basis, cache) = monotone_only_cache(&xs);
    let raw = identity_raw(&basis);
    let nll = cache.nll(&DVector::zeros(0), &raw).unwrap();
    let direct: f64 = xs.iter().map(|x| 0.5 * x * x).sum();
    assert!((nll - direct).abs() < 1e-10 * direct.max(1.0), "{nll} vs {direct}");
}

#[test]
fn nll_of_doubling_map() {
    let xs = normals(&mut rng(2), 300);
    let (basis, cache) = monotone_only_cache(&xs);
    let raw = identity_raw(&basis) * 2.0;
    let nll = cache.nll(&DVector::zeros(0), &raw).unwrap();
    let direct: f64 = xs.iter().map(|x| 2.0 * x * x).sum::<f64>() - xs.len() as f64 * 2f64.ln();
    assert!((nll - direct).abs() < 1e-10 * direct.abs().max(1.0));
}

#[test]
fn nll_matches_naive_per_sample_loop() {
    let data = wavy_data(80, 3);
    let x1: Vec<f64> = data.column(0).iter().copied().collect();
    let x2: Vec<f64> = data.column(1).iter().copied().collect();
    let b1 = SplineBasis::new(make_knots(&x1, 3, KnotRule::Fixed(6)).unwrap());
    let b2 = SplineBasis::new(make_knots(&x2, 3, KnotRule::Fixed(5)).unwrap());
    let cache = DesignCache::from_bases(&[(&b1, &x1)], &b2, &x2, 1e-8).unwrap();
    let mut r = rng(4);
    let beta: Vec<f64> = (0..b1.num_basis()).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut raw: Vec<f64> = (0..b2.num_basis()).map(|_| r.random_range(0.1..1.0)).collect();
    raw[0] = -0.3;
    let mono: Vec<f64> = raw
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect();
    let mut naive = 0.0;
    for i in 0..80 {
        let p1 = b1.eval(x1[i]).unwrap();
        let p2 = b2.eval(x2[i]).unwrap();
        let d2 = b2.eval_deriv(x2[i]).unwrap();
        let s: f64 = p1.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>()
            + p2.iter().zip(&mono).map(|(a, b)| a * b).sum::<f64>();
        let ds: f64 = d2.iter().zip(&mono).map(|(a, b)| a * b).sum();
        naive += 0.5 * s * s - ds.ln();
    }
    let nll = cache
        .nll(&DVector::from_vec(beta), &DVector::from_vec(raw))
        .unwrap();
    assert!((nll - naive).abs() < 1e-10 * naive.abs().max(1.0), "{nll} vs {naive}");
}

#[test]
fn nll_rejects_nonpositive_slope() {
    let xs = normals(&mut rng(5), 50);
    let (basis, cache) = monotone_only_cache(&xs);
    let raw = DVector::from_fn(basis.num_basis(), |k, _| if k == 0 { 1.0 } else { 0.0 });
    assert!(cache.nll(&DVector::zeros(0), &raw).is_err());
}

fn random_feasible(cache: &DesignCache, r: &mut impl Rng) -> DVector<f64> {
    let start = cache.default_start();
    DVector::from_fn(start.len(), |k, _| {
        if k == 0 {
            r.random_range(-1.0..1.0)
        } else {
            start[k] * r.random_range(0.3..2.0)
        }
    })
}

#[test]
fn closed_form_solve_zero_rhs_and_stationarity() {
    let data = wavy_data(100, 6);
    let cache = second_component_cache(&data, KnotRule::Fixed(8));
    let prob = cache.penalized(&[0.5, 1.0]).unwrap();
    let zero = prob.solve_non_closed_form(&DVector::zeros(cache.num_mon()));
    assert_eq!(zero.amax(), 0.0);

    let raw = random_feasible(&cache, &mut rng(7));
    let beta = prob.solve_non_closed_form(&raw);
    let pn = cache.p_non();
    let pm_t = linalg::right_mul_cumsum(cache.p_mon());
    let s = cache.penalized(&[0.5, 1.0]).unwrap();
    // stationarity of the penalized objective in beta_non, by finite differences
    let grad = central_gradient(|b| s.penalized_value(b, &raw).unwrap(), &beta, 1e-5);
    let rhs = pn.transpose() * (&pm_t * &raw);
    assert!(grad.norm() <= 1e-6 * rhs.norm(), "{} vs {}", grad.norm(), rhs.norm());
}

/// Plain BFGS with finite-difference gradients and backtracking.
fn bfgs_oracle<F: Fn(&DVector<f64>) -> f64>(f: F, x0: DVector<f64>) -> DVector<f64> {
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    let mut g = central_gradient(&f, &x, 1e-6);
    let mut h = DMatrix::<f64>::identity(n, n);
    for _ in 0..2000 {
        if g.norm() < 1e-9 {
            break;
        }
        let mut d = -(&h * &g);
        if d.dot(&g) >= 0.0 {
            h = DMatrix::identity(n, n);
            d = -g.clone();
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let xn = &x + t * &d;
            let fn_ = f(&xn);
            if fn_ <= fx + 1e-4 * t * g.dot(&d) {
                let gn = central_gradient(&f, &xn, 1e-6);
                let s = &xn - &x;
                let y = &gn - &g;
                let sy = s.dot(&y);
                if sy > 1e-14 {
                    let rho = 1.0 / sy;
                    let eye = DMatrix::<f64>::identity(n, n);
                    h = (&eye - rho * &s * y.transpose()) * &h * (&eye - rho * &y * s.transpose())
                        + rho * &s * s.transpose();
                }
                x = xn;
                fx = fn_;
                g = gn;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    x
}

#[test]
fn closed_form_solve_matches_generic_minimizer() {
    let data = wavy_data(100, 8);
    let cache = second_component_cache(&data, KnotRule::Fixed(8));
    let prob = cache.penalized(&[0.0, 0.0]).unwrap();
    let raw = random_feasible(&cache, &mut rng(9));
    let closed = prob.solve_non_closed_form(&raw);
    let oracle = bfgs_oracle(
        |b| prob.penalized_value(b, &raw).unwrap(),
        DVector::zeros(cache.num_non()),
    );
    let err = (&closed - &oracle).amax();
    assert!(err < 1e-6, "max coefficient difference {err:e}");
}

#[test]
fn reduced_value_equals_substituted_full_objective() {
    let data = wavy_data(100, 10);
    let cache = second_component_cache(&data, KnotRule::Fixed(8));
    let mut r = rng(11);
    for ll in [[-3.0, 2.0], [0.0, 0.0], [4.0, -1.0]] {
        let prob = cache.penalized(&ll).unwrap();
        for _ in 0..5 {
            let raw = random_feasible(&cache, &mut r);
            let reduced = prob.reduced_value(&raw).unwrap();
            let full = prob
                .penalized_value(&prob.solve_non_closed_form(&raw), &raw)
                .unwrap();
            assert!((reduced - full).abs() <= 1e-9 * full.abs().max(1.0), "{reduced} vs {full}");
        }
    }
}

#[test]
fn reduced_gradient_and_hessian_match_finite_differences() {
    let data = wavy_data(100, 12);
    let cache = second_component_cache(&data, KnotRule::Fixed(8));
    let prob = cache.penalized(&[1.0, -0.5]).unwrap();
    let mut r = rng(13);
    for _ in 0..10 {
        let raw = random_feasible(&cache, &mut r);
        let (_, g, h) = prob.reduced_derivatives(&raw).unwrap();
        let fd_g = central_gradient(|x| prob.reduced_value(x).unwrap(), &raw, 1e-6);
        assert!(vec_rel_err(&g, &fd_g) < 1e-6, "gradient rel err {}", vec_rel_err(&g, &fd_g));
        let mut fd_h = DMatrix::zeros(raw.len(), raw.len());
        for k in 0..raw.len() {
            let step = 1e-6;
            let mut p = raw.clone();
            let mut m = raw.clone();
            p[k] += step;
            m[k] -= step;
            let gp = prob.reduced_derivatives(&p).unwrap().1;
            let gm = prob.reduced_derivatives(&m).unwrap().1;
            fd_h.set_column(k, &((gp - gm) / (2.0 * step)));
        }
        assert!(mat_rel_err(&h, &fd_h) < 1e-5, "hessian rel err {}", mat_rel_err(&h, &fd_h));
    }
}

#[test]
fn inner_fit_satisfies_projected_optimality() {
    let data = wavy_data(100, 14);
    let cache = second_component_cache(&data, KnotRule::Fixed(8));
    let prob = cache.penalized(&[0.0, 2.0]).unwrap();
    let sol = prob.fit_inner(None).unwrap();
    assert!(sol.converged);
    for k in 0..sol.raw.len() {
        if k > 0 && sol.raw[k] == 0.0 {
            assert!(sol.gradient[k] >= -1e-8);
        } else {
            assert!(sol.gradient[k].abs() < 1e-6, "component {k}: {}", sol.gradient[k]);
        }
    }
    assert!(cache.slopes(&sol.raw).iter().all(|&s| s > 0.0));
}

/// Ridge regression: L = 1/2 |y - X beta|^2, S = lambda I.
/// With X = U diag(d) V^T: edf = sum d^2 / (d^2 + lambda).
#[test]
fn edf_and_hypergradient_match_ridge_closed_form() {
    let mut r = rng(15);
    let (n, p) = (40, 6);
    let x = DMatrix::from_fn(n, p, |_, _| r.random_range(-1.0..1.0));
    let y = DVector::from_fn(n, |_, _| r.random_range(-2.0..2.0));
    let svd = x.clone().svd(true, false);
    let u = svd.u.unwrap();
    let d = svd.singular_values;
    let z = u.transpose() * &y;
    for rho in [-2.0, 0.0, 1.5, 3.0] {
        let lam: f64 = f64::exp(rho);
        let h = x.transpose() * &x + DMatrix::identity(p, p) * lam;
        let beta = h.clone().cholesky().unwrap().solve(&(x.transpose() * &y));
        let grad_l = x.transpose() * (&x * &beta - &y);
        let system = ImplicitSystem::new(
            h,
            vec![PenaltyBlock {
                range: 0..p,
                matrix: DMatrix::identity(p, p) * lam,
            }],
            beta,
            grad_l,
            None,
        )
        .unwrap();
        let edf_closed: f64 = d.iter().map(|di| di * di / (di * di + lam)).sum();
        assert!((system.edf().total - edf_closed).abs() < 1e-8);

        // A(rho) = L(beta_hat) + k edf, for an arbitrary weight k
        let k = 1.7;
        let dl: f64 = d
            .iter()
            .zip(z.iter())
            .map(|(di, zi)| zi * zi * lam * di * di / (di * di + lam).powi(3))
            .sum();
        let dedf: f64 = d.iter().map(|di| -di * di / (di * di + lam).powi(2)).sum();
        let expect = lam * (dl + k * dedf);
        let got = system.outer_gradient(k).unwrap()[0];
        assert!((got - expect).abs() < 1e-6 * expect.abs().max(1.0), "{got} vs {expect}");
    }
}

#[test]
fn aicc_penalty_formula_and_domain() {
    let (v, dv) = aicc_penalty(3.0, 30).unwrap();
    assert!((v - (3.0 + 12.0 / 26.0)).abs() < 1e-14);
    let h = 1e-6;
    let fd = (aicc_penalty(3.0 + h, 30).unwrap().0 - aicc_penalty(3.0 - h, 30).unwrap().0) / (2.0 * h);
    assert!((dv - fd).abs() < 1e-7);
    assert!(aicc_penalty(29.0, 30).is_err());
}

#[test]
fn outer_gradient_matches_refit_finite_differences() {
    let data = wavy_data(100, 16);
    let cache = second_component_cache(&data, KnotRule::Fixed(8));
    let points = [[0.0, 0.0], [1.0, -1.0], [2.0, 3.0], [-2.0, 1.0], [3.0, 0.5]];
    let h = 1e-3;
    for ll in points {
        let base = cache.penalized(&ll).unwrap().outer_objective_with_gradient(None).unwrap();
        let grad = base.gradient.clone().unwrap();
        for b in 0..2 {
            let mut lp = ll;
            let mut lm = ll;
            lp[b] += h;
            lm[b] -= h;
            let fp = cache.penalized(&lp).unwrap().outer_objective(Some(&base.inner.raw)).unwrap().aicc;
            let fm = cache.penalized(&lm).unwrap().outer_objective(Some(&base.inner.raw)).unwrap().aicc;
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                rel_err(grad[b], fd) < 1e-3 || (grad[b] - fd).abs() < 1e-6,
                "log lambda {ll:?}, block {b}: ifT {} vs fd {}",
                grad[b],
                fd
            );
        }
    }
}

#[test]
fn edf_is_monotone_and_aicc_dominates_nll() {
    let data = wavy_data(200, 17);
    let cache = second_component_cache(&data, KnotRule::Auto);
    let mut prev: Option<f64> = None;
    for i in 0..=16 {
        let ll = -8.0 + i as f64;
        let eval = cache.penalized(&[ll, 3.0]).unwrap().outer_objective(None).unwrap();
        assert!(eval.aicc >= eval.nll);
        if let Some(p) = prev {
            assert!(eval.edf_blocks[0] <= p + 1e-6, "edf increased at log lambda {ll}");
        }
        prev = Some(eval.edf_blocks[0]);
    }
}
