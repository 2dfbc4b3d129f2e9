//! Optimizers used by the fitting code.
//!
//! * [`projected_newton`] minimizes a smooth convex objective with a subset of
//!   coordinates bounded below by zero (Bertsekas-style two-metric projection).
//! * [`minimize_bounded`] is a box-constrained quasi-Newton descent with Armijo
//!   backtracking, used for the smoothing parameters.

use nalgebra::{DMatrix, DVector};

use crate::linalg;

/// Objective for [`projected_newton`]. Coordinates where `is_bounded` is true
/// must stay nonnegative. `None` marks points outside the objective's domain.
pub trait BoundedObjective {
    fn dim(&self) -> usize;
    fn is_bounded(&self, k: usize) -> bool;
    fn value(&self, x: &DVector<f64>) -> Option<f64>;
    fn derivatives(&self, x: &DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)>;
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Stop when `|projected gradient| <= rel_tol * max(1, |f|)`.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub projected_grad_norm: f64,
}

fn projected_gradient<O: BoundedObjective>(obj: &O, x: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |k, _| {
        if obj.is_bounded(k) {
            x[k] - (x[k] - g[k]).max(0.0)
        } else {
            g[k]
        }
    })
}

/// Projected Newton with backtracking. `x0` must lie in the domain.
pub fn projected_newton<O: BoundedObjective>(
    obj: &O,
    x0: DVector<f64>,
    opts: NewtonOptions,
) -> Option<NewtonResult> {
    let n = obj.dim();
    let mut x = x0;
    for k in 0..n {
        if obj.is_bounded(k) && x[k] < 0.0 {
            x[k] = 0.0;
        }
    }
    let (mut f, mut g, mut h) = obj.derivatives(&x)?;
    let mut iterations = 0;
    let mut stalled = false;
    let mut flat_steps = 0;
    let mut flat_converged = false;
    loop {
        let pg = projected_gradient(obj, &x, &g);
        let pg_norm = pg.norm();
        let tol = opts.rel_tol * f.abs().max(1.0);
        if pg_norm <= tol || iterations >= opts.max_iter || stalled {
            let converged = pg_norm <= tol || flat_converged || (stalled && pg_norm <= 1e3 * tol);
            return Some(NewtonResult {
                x,
                value: f,
                gradient: g,
                iterations,
                converged,
                projected_grad_norm: pg_norm,
            });
        }
        iterations += 1;

        // epsilon-active set: bounded coordinates at (or near) zero pushed outward
        let eps = pg_norm.min(1e-8);
        let active: Vec<bool> = (0..n)
            .map(|k| obj.is_bounded(k) && x[k] <= eps && g[k] > 0.0)
            .collect();
        let free: Vec<usize> = (0..n).filter(|&k| !active[k]).collect();
        let mut dir = DVector::zeros(n);
        if !free.is_empty() {
            let hff = linalg::select_square(&h, &free);
            let gf = linalg::select(&g, &free);
            let step = match linalg::cholesky(&hff, "inner Newton system") {
                Ok(chol) => -chol.solve(&gf),
                Err(_) => {
                    // steepest descent scaled by the diagonal
                    DVector::from_fn(free.len(), |i, _| -gf[i] / hff[(i, i)].abs().max(1e-12))
                }
            };
            for (i, &k) in free.iter().enumerate() {
                dir[k] = step[i];
            }
        }
        for k in 0..n {
            if active[k] {
                dir[k] = -g[k] / h[(k, k)].abs().max(1e-12);
            }
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..80 {
            let mut trial = &x + alpha * &dir;
            for k in 0..n {
                if obj.is_bounded(k) && trial[k] < 0.0 {
                    trial[k] = 0.0;
                }
            }
            if let Some(ft) = obj.value(&trial) {
                let decrease = g.dot(&(&trial - &x));
                if ft <= f + 1e-4 * decrease.min(0.0) && ft.is_finite() {
                    accepted = Some(trial);
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some(next) => {
                x = next;
                let (fv, gv, hv) = obj.derivatives(&x)?;
                // value changes at rounding level: the gradient is noise
                if (f - fv).abs() <= 1e-14 * f.abs().max(1.0) {
                    flat_steps += 1;
                } else {
                    flat_steps = 0;
                }
                if flat_steps >= 3 {
                    stalled = true;
                    flat_converged = true;
                }
                f = fv;
                g = gv;
                h = hv;
            }
            None => stalled = true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OuterOptions {
    pub max_iter: usize,
    /// Stop when the accepted step changes the objective by at most this much.
    pub value_tol: f64,
    /// Stop when the projected gradient norm falls below this.
    pub grad_tol: f64,
    pub lower: f64,
    pub upper: f64,
    /// Largest coordinate change per iteration.
    pub max_step: f64,
}

impl Default for OuterOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            value_tol: 1e-6,
            grad_tol: 1e-4,
            lower: -15.0,
            upper: 15.0,
            max_step: 3.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OuterResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn bounded_gradient(x: &[f64], g: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| {
            if (xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Box-constrained BFGS descent with Armijo backtracking. `eval` returns the
/// value and gradient, or `None` where the objective is undefined.
pub fn minimize_bounded<F>(mut eval: F, x0: &[f64], opts: OuterOptions) -> Option<OuterResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let dim = x0.len();
    let clamp = |v: f64| v.clamp(opts.lower, opts.upper);
    let mut x: Vec<f64> = x0.iter().map(|&v| clamp(v)).collect();
    let (mut f, mut g) = eval(&x)?;
    if dim == 0 {
        return Some(OuterResult {
            x,
            value: f,
            gradient: g,
            iterations: 0,
            converged: true,
        });
    }
    let mut inv_h = DMatrix::<f64>::identity(dim, dim);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let pg = bounded_gradient(&x, &g, opts.lower, opts.upper);
        if norm(&pg) <= opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let gv = DVector::from_column_slice(&pg);
        let mut dir = -(&inv_h * &gv);
        if dir.dot(&gv) >= 0.0 {
            inv_h = DMatrix::identity(dim, dim);
            dir = -gv.clone();
        }
        // frozen coordinates stay put
        for k in 0..dim {
            if pg[k] == 0.0 {
                dir[k] = 0.0;
            }
        }
        let longest = dir.amax();
        if longest > opts.max_step {
            dir *= opts.max_step / longest;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = (0..dim).map(|k| clamp(x[k] + alpha * dir[k])).collect();
            let moved: f64 = (0..dim).map(|k| (trial[k] - x[k]).abs()).sum();
            if moved == 0.0 {
                break;
            }
            if let Some((ft, gt)) = eval(&trial) {
                let decrease: f64 = (0..dim).map(|k| g[k] * (trial[k] - x[k])).sum();
                if ft.is_finite() && ft <= f + 1e-4 * decrease.min(0.0) {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            // no descent possible along the quasi-Newton direction; retry once
            // with steepest descent before giving up
            if inv_h != DMatrix::identity(dim, dim) {
                inv_h = DMatrix::identity(dim, dim);
                continue;
            }
            converged = norm(&pg) <= 1e2 * opts.grad_tol;
            break;
        };
        let s = DVector::from_fn(dim, |k, _| xn[k] - x[k]);
        let y = DVector::from_fn(dim, |k, _| gn[k] - g[k]);
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(dim, dim);
            let left = &eye - rho * &s * y.transpose();
            let right = &eye - rho * &y * s.transpose();
            inv_h = &left * &inv_h * &right + rho * &s * s.transpose();
        }
        let change = (f - fn_).abs();
        x = xn;
        f = fn_;
        g = gn;
        if change <= opts.value_tol {
            converged = true;
            break;
        }
    }
    Some(OuterResult {
        x,
        value: f,
        gradient: g,
        iterations,
        converged,
    })
}
