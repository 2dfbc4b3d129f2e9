//! Bivariate "wavy" profiling study.
//!
//! The target density is defined here, not taken from elsewhere: by default
//! `x1 ~ N(0, 1)`, `x2 = sin(omega x1) + noise * e`. A two-component map is
//! fitted with the monotone blocks held at a fixed smoothing level while the
//! nonmonotone block of `S_2` sweeps a log-lambda grid.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::component::{fit_component, ComponentConfig, ComponentLayout};
use crate::error::{Error, Result};
use crate::map::{Ensemble, TriangularMap};
use crate::objective::{self, AdaptConfig, Adaptation, DEFAULT_RIDGE};
use crate::spline::KnotRule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum WavyGenerator {
    /// `x2 = sin(omega x1) + noise e`.
    Sine { omega: f64, noise: f64 },
    /// `x2 = curvature x1^2 + noise e`.
    Banana { curvature: f64, noise: f64 },
}

impl Default for WavyGenerator {
    fn default() -> Self {
        WavyGenerator::Sine { omega: 3.0, noise: 0.25 }
    }
}

impl WavyGenerator {
    pub fn name(&self) -> &'static str {
        match self {
            WavyGenerator::Sine { .. } => "sine",
            WavyGenerator::Banana { .. } => "banana",
        }
    }

    pub fn conditional_mean(&self, x1: f64) -> f64 {
        match *self {
            WavyGenerator::Sine { omega, .. } => (omega * x1).sin(),
            WavyGenerator::Banana { curvature, .. } => curvature * x1 * x1,
        }
    }

    fn noise(&self) -> f64 {
        match *self {
            WavyGenerator::Sine { noise, .. } | WavyGenerator::Banana { noise, .. } => noise,
        }
    }
}

pub fn sample_wavy(n: usize, seed: u64, generator: &WavyGenerator) -> Result<Ensemble> {
    if n < 8 {
        return Err(Error::Config(format!("wavy sample size {n} is below 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = DMatrix::zeros(n, 2);
    for i in 0..n {
        let x1: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        data[(i, 0)] = x1;
        data[(i, 1)] = generator.conditional_mean(x1) + generator.noise() * e;
    }
    Ensemble::new(data, vec!["x1".into(), "x2".into()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WavyConfig {
    pub n: usize,
    pub knots: usize,
    pub mono_log_lambda: f64,
    /// Ascending log-lambda grid for the nonmonotone block of `S_2`.
    pub grid: Vec<f64>,
    /// Grid values at which sample clouds are written.
    pub snapshots: Vec<f64>,
    pub pullback_samples: usize,
    pub seed: u64,
    pub generator: WavyGenerator,
    /// Start of the gradient-based search.
    pub initial_log_lambda: f64,
}

impl Default for WavyConfig {
    fn default() -> Self {
        Self {
            n: 30,
            knots: 50,
            mono_log_lambda: 10.0,
            grid: (0..=80).map(|i| -10.0 + 0.25 * i as f64).collect(),
            snapshots: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            pullback_samples: 1000,
            seed: 0,
            generator: WavyGenerator::default(),
            initial_log_lambda: 2.0,
        }
    }
}

impl WavyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 8 {
            return Err(Error::Config(format!("n = {} is below 8", self.n)));
        }
        if self.grid.is_empty() || self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("grid must be non-empty and strictly ascending".into()));
        }
        if self.grid.iter().chain(&self.snapshots).any(|v| !v.is_finite()) || !self.mono_log_lambda.is_finite() {
            return Err(Error::Config("log lambdas must be finite".into()));
        }
        if self.knots < 5 {
            return Err(Error::Config("at least 5 knots are needed".into()));
        }
        Ok(())
    }

    fn component_config(&self, adaptation: Adaptation) -> ComponentConfig {
        ComponentConfig {
            knots_nonmonotone: KnotRule::Fixed(self.knots),
            knots_monotone: KnotRule::Fixed(self.knots),
            ridge: DEFAULT_RIDGE,
            adapt: AdaptConfig {
                adaptation,
                initial_log_lambda: self.initial_log_lambda,
                ..Default::default()
            },
            ..Default::default()
        }
    }
}

/// One grid point. Missing values mean the fit failed (`error` says why)
/// or, for `aicc`, that the fit is too complex for the sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub log_lambda: f64,
    pub nll: Option<f64>,
    pub edf: Option<f64>,
    pub edf_nonmonotone: Option<f64>,
    pub aicc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub log_lambda: f64,
    /// `n x 2` pushforward of the training samples.
    pub pushforward: DMatrix<f64>,
    /// Inverse map applied to standard normal reference samples.
    pub pullback: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WavyProfile {
    pub samples: Ensemble,
    pub rows: Vec<ProfileRow>,
    pub snapshots: Vec<Snapshot>,
    /// Log lambda chosen by the gradient-based outer optimizer.
    pub optimized_log_lambda: Option<f64>,
    pub optimized_aicc: Option<f64>,
}

impl WavyProfile {
    /// Grid point with the smallest defined AICc.
    pub fn grid_argmin(&self) -> Option<&ProfileRow> {
        self.rows
            .iter()
            .filter(|r| r.aicc.is_some())
            .min_by(|a, b| a.aicc.unwrap().total_cmp(&b.aicc.unwrap()))
    }
}

struct GridFit {
    row: ProfileRow,
    beta_non: Option<(Vec<f64>, Vec<f64>)>,
}

fn profile_point(
    cache: &objective::DesignCache,
    log_lambda: f64,
    mono_log_lambda: f64,
) -> Result<(ProfileRow, Vec<f64>, Vec<f64>)> {
    let problem = cache.penalized(&[log_lambda, mono_log_lambda])?;
    let sol = problem.fit_inner(None)?;
    let nll = cache.nll(&sol.beta_non, &sol.raw)?;
    let edf = problem.implicit_system(&sol)?.edf();
    let aicc = objective::aicc_penalty(edf.total, cache.n()).ok().map(|(p, _)| nll + p);
    let row = ProfileRow {
        log_lambda,
        nll: Some(nll),
        edf: Some(edf.total),
        edf_nonmonotone: Some(edf.blocks[0]),
        aicc,
        error: None,
    };
    Ok((row, sol.beta_non.as_slice().to_vec(), sol.raw.as_slice().to_vec()))
}

/// Sweeps the grid, writes sample clouds at the snapshot values and runs the
/// gradient-based optimizer from `initial_log_lambda`.
pub fn profile_lambda(config: &WavyConfig) -> Result<WavyProfile> {
    config.validate()?;
    let samples = sample_wavy(config.n, config.seed, &config.generator)?;
    let data = samples.data();

    let fixed = config.component_config(Adaptation::Fixed {
        log_lambda: config.mono_log_lambda,
    });
    let (s1, _) = fit_component(data, 0, &[], &fixed, None)?;
    let layout = ComponentLayout::build(data, 1, &[0], &fixed)?;
    let cache = layout.design(data, DEFAULT_RIDGE)?;

    let fits: Vec<GridFit> = config
        .grid
        .par_iter()
        .map(|&ll| match profile_point(&cache, ll, config.mono_log_lambda) {
            Ok((row, b, r)) => GridFit {
                row,
                beta_non: Some((b, r)),
            },
            Err(e) => GridFit {
                row: ProfileRow {
                    log_lambda: ll,
                    nll: None,
                    edf: None,
                    edf_nonmonotone: None,
                    aicc: None,
                    error: Some(e.to_string()),
                },
                beta_non: None,
            },
        })
        .collect();

    let mut snapshots = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let reference = DMatrix::from_fn(config.pullback_samples, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    for &target in &config.snapshots {
        // nearest grid point
        let Some(fit) = fits
            .iter()
            .min_by(|a, b| (a.row.log_lambda - target).abs().total_cmp(&(b.row.log_lambda - target).abs()))
        else {
            continue;
        };
        let Some((beta_non, raw)) = &fit.beta_non else {
            log::warn!("no fit at log lambda {}; snapshot skipped", fit.row.log_lambda);
            continue;
        };
        let s2 = layout
            .clone()
            .into_component(beta_non, raw, vec![fit.row.log_lambda, config.mono_log_lambda])?;
        let map = TriangularMap::from_components(samples.names().to_vec(), 0, vec![s1.clone(), s2])?;
        let pushed = map.pushforward_ensemble(&samples)?;
        let pulled: Vec<Vec<f64>> = (0..reference.nrows())
            .into_par_iter()
            .map(|i| map.inverse(&[reference[(i, 0)], reference[(i, 1)]]))
            .collect::<Result<_>>()?;
        snapshots.push(Snapshot {
            log_lambda: fit.row.log_lambda,
            pushforward: pushed.data().clone(),
            pullback: DMatrix::from_fn(pulled.len(), 2, |i, j| pulled[i][j]),
        });
    }

    let adapt = AdaptConfig {
        adaptation: Adaptation::FixedMonotone {
            log_lambda: config.mono_log_lambda,
        },
        initial_log_lambda: config.initial_log_lambda,
        ..Default::default()
    };
    let (optimized_log_lambda, optimized_aicc) = match objective::adapt(&cache, &adapt, None, None::<&DVector<f64>>) {
        Ok(fit) => (Some(fit.report.log_lambdas[0]), Some(fit.report.aicc)),
        Err(e) => {
            log::warn!("outer optimization failed: {e}");
            (None, None)
        }
    };

    Ok(WavyProfile {
        samples,
        rows: fits.into_iter().map(|f| f.row).collect(),
        snapshots,
        optimized_log_lambda,
        optimized_aicc,
    })
}
