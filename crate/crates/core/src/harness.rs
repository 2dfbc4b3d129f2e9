//! Lorenz-63 twin experiments with sequential scalar-observation updates.
//!
//! Every state variable is observed at each assimilation time. For observed
//! variable `v` with the other two `o1 < o2`, the joint ensemble is
//! `(y, x_v, x_o1, x_o2)` with `y = x_v + noise`, and the map
//!
//! ```text
//! S_2(y, x_v), S_3(x_v, x_o1), S_4(x_v, x_o1, x_o2)
//! ```
//!
//! is fitted for the lower block and conditioned on the observed value.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::component::{ComponentConfig, WarmStart};
use crate::error::{Error, Result};
use crate::map::{Ensemble, MapConfig, TriangularMap};

/// RMSE above which a run counts as diverged.
pub const DIVERGENCE_RMSE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lorenz63Params {
    pub sigma: f64,
    pub beta: f64,
    pub rho: f64,
    pub dt: f64,
    pub obs_interval: f64,
    pub obs_sigma: f64,
    /// Number of assimilation cycles.
    pub steps: usize,
    /// Integration steps before the first cycle.
    pub spinup: usize,
}

impl Default for Lorenz63Params {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            beta: 8.0 / 3.0,
            rho: 28.0,
            dt: 0.05,
            obs_interval: 0.1,
            obs_sigma: 0.25,
            steps: 1000,
            spinup: 250,
        }
    }
}

impl Lorenz63Params {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.sigma, self.beta, self.rho, self.dt, self.obs_interval, self.obs_sigma];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("Lorenz-63 parameters must be positive".into()));
        }
        let ratio = self.obs_interval / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(Error::Config(format!(
                "obs_interval {} is not a multiple of dt {}",
                self.obs_interval, self.dt
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        Ok(())
    }

    /// Integration steps per assimilation cycle.
    pub fn substeps(&self) -> usize {
        (self.obs_interval / self.dt).round() as usize
    }
}

pub fn vector_field(x: [f64; 3], p: &Lorenz63Params) -> [f64; 3] {
    [
        p.sigma * (x[1] - x[0]),
        x[0] * (p.rho - x[2]) - x[1],
        x[0] * x[1] - p.beta * x[2],
    ]
}

/// One classical fourth-order Runge-Kutta step.
pub fn rk4_step(x: [f64; 3], p: &Lorenz63Params, dt: f64) -> Result<[f64; 3]> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged);
    }
    let add = |a: [f64; 3], b: [f64; 3], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
    let k1 = vector_field(x, p);
    let k2 = vector_field(add(x, k1, 0.5 * dt), p);
    let k3 = vector_field(add(x, k2, 0.5 * dt), p);
    let k4 = vector_field(add(x, k3, dt), p);
    let out = [
        x[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        x[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        x[2] + dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
    ];
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Transport,
    LinearBaseline,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Transport => "transport",
            Method::LinearBaseline => "linear_baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub model: Lorenz63Params,
    pub component: ComponentConfig,
    /// Order in which the three observations are assimilated.
    pub update_order: [usize; 3],
    /// Reuse smoothing parameters from the previous cycle.
    pub warm_start: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            model: Lorenz63Params::default(),
            component: ComponentConfig::default(),
            update_order: [0, 1, 2],
            warm_start: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let mut seen = [false; 3];
        for &v in &self.update_order {
            if v > 2 || std::mem::replace(&mut seen[v], true) {
                return Err(Error::Config(format!(
                    "update order {:?} is not a permutation of 0, 1, 2",
                    self.update_order
                )));
            }
        }
        Ok(())
    }
}

/// One assimilation cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub rmse: f64,
    /// Mean over observed variables of edf / raw size for S_2, S_3, S_4
    /// (NaN for the linear baseline).
    pub edf_fractions: [f64; 3],
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRunResult {
    pub method: Method,
    pub n: usize,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    /// Mean of the per-step RMSE; infinite if the ensemble blew up.
    pub mean_rmse: f64,
    pub diverged: bool,
    /// Updates skipped because a map could not be fitted or inverted.
    pub failed_updates: usize,
}

/// Member-averaged RMSE: `mean_i sqrt(mean_j (x_ij - truth_j)^2)`.
pub fn ensemble_rmse(members: &DMatrix<f64>, truth: &[f64]) -> f64 {
    let n = members.nrows();
    let d = members.ncols();
    let mut acc = 0.0;
    for i in 0..n {
        let se: f64 = (0..d).map(|j| (members[(i, j)] - truth[j]).powi(2)).sum();
        acc += (se / d as f64).sqrt();
    }
    acc / n as f64
}

/// Perturbed-observation Kalman update for a scalar observation of
/// `members[:, obs_var]`: `x_i += K (y_star - y_pred_i)`,
/// `K = cov(x, h) / (var(h) + obs_sigma^2)`.
pub fn linear_baseline_update(
    members: &DMatrix<f64>,
    obs_var: usize,
    y_star: f64,
    y_pred: &[f64],
    obs_sigma: f64,
) -> Result<DMatrix<f64>> {
    let n = members.nrows();
    if y_pred.len() != n || obs_var >= members.ncols() || n < 2 {
        return Err(Error::Dimension("baseline update inputs disagree".into()));
    }
    let mean = |j: usize| members.column(j).sum() / n as f64;
    let h_mean = mean(obs_var);
    let var_h = members.column(obs_var).iter().map(|h| (h - h_mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let innovation = var_h + obs_sigma * obs_sigma;
    if !(innovation > 0.0) {
        return Err(Error::Singular("innovation variance".into()));
    }
    let mut out = members.clone();
    for j in 0..members.ncols() {
        let m = mean(j);
        let cov = (0..n)
            .map(|i| (members[(i, j)] - m) * (members[(i, obs_var)] - h_mean))
            .sum::<f64>()
            / (n - 1) as f64;
        let gain = cov / innovation;
        for i in 0..n {
            out[(i, j)] += gain * (y_star - y_pred[i]);
        }
    }
    Ok(out)
}

/// Variable order `(v, o1, o2)` of the joint ensemble for observed `v`.
fn ordering(v: usize) -> [usize; 3] {
    let mut others = (0..3).filter(|&k| k != v);
    [v, others.next().unwrap(), others.next().unwrap()]
}

/// Parent sets of the joint `(y, x_v, x_o1, x_o2)` map.
pub fn sparse_parent_sets() -> Vec<Vec<usize>> {
    vec![vec![], vec![0], vec![1], vec![1, 2]]
}

/// Transport update of the ensemble with scalar observation `y_star` of
/// variable `v`. Returns the updated members and the fit reports.
pub fn transport_update(
    members: &DMatrix<f64>,
    v: usize,
    y_star: f64,
    y_pred: &[f64],
    component: &ComponentConfig,
    warm: Option<&[WarmStart]>,
) -> Result<(DMatrix<f64>, Vec<crate::objective::FitReport>)> {
    let n = members.nrows();
    let order = ordering(v);
    let joint = DMatrix::from_fn(n, 4, |i, j| if j == 0 { y_pred[i] } else { members[(i, order[j - 1])] });
    let names = vec!["y".to_string(), format!("x{}", order[0]), format!("x{}", order[1]), format!("x{}", order[2])];
    let ens = Ensemble::new(joint, names)?;
    let config = MapConfig {
        component: *component,
        block_split: 1,
        fit_block_a: false,
    };
    let (map, reports) = TriangularMap::fit(&ens, &sparse_parent_sets(), &config, warm)?;
    let updated = map.conditional_update(ens.data(), &[y_star])?;
    let mut out = members.clone();
    for i in 0..n {
        for (k, &var) in order.iter().enumerate() {
            out[(i, var)] = updated[(i, k + 1)];
        }
    }
    Ok((out, reports))
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Runs one twin experiment.
pub fn run_filter(config: &FilterConfig, n: usize, seed: u64, method: Method) -> Result<FilterRunResult> {
    config.validate()?;
    if n < 16 {
        return Err(Error::Config(format!("ensemble size {n} is below 16")));
    }
    let p = &config.model;
    let (truths, observations) = truth_and_observations(p, seed)?;
    let mut ens_rng = ChaCha8Rng::seed_from_u64(seed);
    ens_rng.set_stream(1);
    let mut members = DMatrix::from_fn(n, 3, |_, _| 0.0);
    for i in 0..n {
        for j in 0..3 {
            members[(i, j)] = standard_normal(&mut ens_rng);
        }
    }
    let mut result = FilterRunResult {
        method,
        n,
        seed,
        steps: Vec::with_capacity(p.steps),
        mean_rmse: f64::NAN,
        diverged: false,
        failed_updates: 0,
    };
    if forecast(&mut members, p, p.spinup).is_err() {
        result.diverged = true;
        result.mean_rmse = f64::INFINITY;
        return Ok(result);
    }

    let mut warm: Vec<Vec<WarmStart>> = vec![vec![WarmStart::default(); 3]; 3];
    let mut blown_up = false;
    for step in 0..p.steps {
        let truth = truths[step];
        if forecast(&mut members, p, p.substeps()).is_err() {
            blown_up = true;
            break;
        }
        let obs = observations[step];
        let mut fractions = [0.0; 3];
        let mut step_failed = false;
        for &v in &config.update_order {
            let y_pred: Vec<f64> = (0..n)
                .map(|i| members[(i, v)] + p.obs_sigma * standard_normal(&mut ens_rng))
                .collect();
            let outcome = match method {
                Method::LinearBaseline => {
                    linear_baseline_update(&members, v, obs[v], &y_pred, p.obs_sigma).map(|m| (m, Vec::new()))
                }
                Method::Transport => {
                    let w = config.warm_start.then(|| warm[v].as_slice());
                    transport_update(&members, v, obs[v], &y_pred, &config.component, w)
                }
            };
            match outcome {
                Ok((updated, reports)) => {
                    members = updated;
                    for (k, rep) in reports.iter().enumerate() {
                        fractions[k] += rep.edf_fraction() / 3.0;
                        if config.warm_start {
                            warm[v][k] = WarmStart {
                                log_lambdas: Some(rep.log_lambdas.clone()),
                                mono_raw: None,
                            };
                        }
                    }
                }
                Err(e) => {
                    log::warn!("seed {seed}, n {n}, step {step}, variable {v}: update skipped: {e}");
                    result.failed_updates += 1;
                    step_failed = true;
                    fractions = [f64::NAN; 3];
                }
            }
        }
        if method == Method::LinearBaseline {
            fractions = [f64::NAN; 3];
        }
        let rmse = ensemble_rmse(&members, &truth);
        let diverged = step_failed || !rmse.is_finite() || rmse > DIVERGENCE_RMSE;
        result.diverged |= diverged;
        result.steps.push(StepRecord {
            step,
            rmse,
            edf_fractions: fractions,
            diverged,
        });
        if !members.iter().all(|v| v.is_finite()) {
            blown_up = true;
            break;
        }
    }
    if blown_up {
        result.diverged = true;
        result.mean_rmse = f64::INFINITY;
    } else {
        result.mean_rmse = result.steps.iter().map(|s| s.rmse).sum::<f64>() / result.steps.len() as f64;
    }
    Ok(result)
}

/// Truth at each assimilation time and its noisy observations. Depends only
/// on the model parameters and the seed.
pub fn truth_and_observations(p: &Lorenz63Params, seed: u64) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut truth = [0.0; 3];
    for v in truth.iter_mut() {
        *v = standard_normal(&mut rng);
    }
    for _ in 0..p.spinup {
        truth = rk4_step(truth, p, p.dt)?;
    }
    let mut truths = Vec::with_capacity(p.steps);
    let mut obs = Vec::with_capacity(p.steps);
    for _ in 0..p.steps {
        for _ in 0..p.substeps() {
            truth = rk4_step(truth, p, p.dt)?;
        }
        truths.push(truth);
        let mut y = truth;
        for v in y.iter_mut() {
            *v += p.obs_sigma * standard_normal(&mut rng);
        }
        obs.push(y);
    }
    Ok((truths, obs))
}

fn forecast(members: &mut DMatrix<f64>, p: &Lorenz63Params, steps: usize) -> Result<()> {
    for i in 0..members.nrows() {
        let mut x = [members[(i, 0)], members[(i, 1)], members[(i, 2)]];
        for _ in 0..steps {
            x = rk4_step(x, p, p.dt)?;
        }
        for j in 0..3 {
            members[(i, j)] = x[j];
        }
    }
    Ok(())
}
