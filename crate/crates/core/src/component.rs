//! A single triangular map component
//! `S_j(x) = sum_{k in parents} g_k(x_k) + f(x_j)` with `f` monotone.
//!
//! Every term works on an affinely standardized copy of its input variable.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::{self, AdaptConfig, DesignCache, FitReport};
use crate::spline::{self, KnotRule, SplineBasis};

/// Ratio between the interquartile range and the standard deviation of a
/// normal distribution.
const IQR_TO_SD: f64 = 1.348_979_500_392_163_5;

/// `u = (x - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub center: f64,
    pub scale: f64,
}

impl Standardization {
    pub fn identity() -> Self {
        Self {
            center: 0.0,
            scale: 1.0,
        }
    }

    /// Median and normal-consistent IQR. Falls back to the standard deviation
    /// when the IQR vanishes.
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("standardization samples".into()));
        }
        if xs.is_empty() {
            return Err(Error::Ensemble("no samples".into()));
        }
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let center = spline::quantile_sorted(&sorted, 0.5);
        let iqr = spline::quantile_sorted(&sorted, 0.75) - spline::quantile_sorted(&sorted, 0.25);
        let mut scale = iqr / IQR_TO_SD;
        if !(scale > 0.0) {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            scale = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        }
        if !(scale > 0.0) {
            return Err(Error::ConstantDimension);
        }
        Ok(Self { center, scale })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.center) / self.scale
    }

    pub fn invert(&self, u: f64) -> f64 {
        self.center + self.scale * u
    }
}

/// A univariate spline term on one input variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineTerm {
    pub variable: usize,
    pub standardization: Standardization,
    pub basis: SplineBasis,
    pub coef: Vec<f64>,
}

impl SplineTerm {
    /// Value and derivative with respect to the original (unstandardized)
    /// variable.
    pub fn eval(&self, x: f64) -> Result<(f64, f64)> {
        let u = self.standardization.apply(x);
        let (f, df) = self.basis.eval_spline(&self.coef, u)?;
        Ok((f, df / self.standardization.scale))
    }
}

/// Standardizations and bases of a component before coefficients are known.
#[derive(Debug, Clone)]
pub struct ComponentLayout {
    pub index: usize,
    pub non_terms: Vec<(usize, Standardization, SplineBasis)>,
    pub mono: (Standardization, SplineBasis),
}

impl ComponentLayout {
    /// Builds standardizations and knots from the `n x d` sample matrix.
    /// Parents whose samples are constant are dropped with a warning.
    pub fn build(data: &DMatrix<f64>, index: usize, parents: &[usize], config: &ComponentConfig) -> Result<Self> {
        validate_parents(index, parents, data.ncols())?;
        let column = |k: usize| data.column(k).iter().copied().collect::<Vec<f64>>();
        let mut non_terms = Vec::with_capacity(parents.len());
        for &p in parents {
            let xs = column(p);
            let built = Standardization::from_samples(&xs).and_then(|s| {
                let us: Vec<f64> = xs.iter().map(|&x| s.apply(x)).collect();
                let knots = spline::make_knots(&us, config.degree, config.knots_nonmonotone)?;
                Ok((s, SplineBasis::new(knots)))
            });
            match built {
                Ok((s, b)) => non_terms.push((p, s, b)),
                Err(Error::ConstantDimension) => {
                    log::warn!("component {index}: parent {p} is constant; term dropped");
                }
                Err(e) => return Err(e),
            }
        }
        let xs = column(index);
        let s = Standardization::from_samples(&xs)?;
        let us: Vec<f64> = xs.iter().map(|&x| s.apply(x)).collect();
        let knots = spline::make_knots(&us, config.degree, config.knots_monotone)?;
        Ok(Self {
            index,
            non_terms,
            mono: (s, SplineBasis::new(knots)),
        })
    }

    /// Design matrices of this layout on the training samples.
    pub fn design(&self, data: &DMatrix<f64>, ridge: f64) -> Result<DesignCache> {
        let standardized = |k: usize, s: &Standardization| data.column(k).iter().map(|&x| s.apply(x)).collect::<Vec<f64>>();
        let parent_samples: Vec<Vec<f64>> = self.non_terms.iter().map(|(k, s, _)| standardized(*k, s)).collect();
        let terms: Vec<(&SplineBasis, &[f64])> = self
            .non_terms
            .iter()
            .zip(&parent_samples)
            .map(|((_, _, b), xs)| (b, xs.as_slice()))
            .collect();
        let mono_samples = standardized(self.index, &self.mono.0);
        DesignCache::from_bases(&terms, &self.mono.1, &mono_samples, ridge)
    }

    /// Attaches coefficients to the layout.
    pub fn into_component(self, beta_non: &[f64], mono_raw: &[f64], log_lambdas: Vec<f64>) -> Result<MapComponent> {
        let mut offset = 0;
        let mut terms = Vec::with_capacity(self.non_terms.len());
        for (variable, standardization, basis) in self.non_terms {
            let m = basis.num_basis();
            if offset + m > beta_non.len() {
                return Err(Error::Dimension("too few nonmonotone coefficients".into()));
            }
            terms.push(SplineTerm {
                variable,
                standardization,
                basis,
                coef: beta_non[offset..offset + m].to_vec(),
            });
            offset += m;
        }
        if offset != beta_non.len() {
            return Err(Error::Dimension("too many nonmonotone coefficients".into()));
        }
        MapComponent::from_parts(self.index, terms, self.mono.0, self.mono.1, mono_raw.to_vec(), log_lambdas)
    }
}

/// Checks that every parent precedes `index` and is listed once.
pub fn validate_parents(index: usize, parents: &[usize], dim: usize) -> Result<()> {
    if index >= dim {
        return Err(Error::ParentSet(format!("component {index} outside dimension {dim}")));
    }
    for (i, &p) in parents.iter().enumerate() {
        if p >= index {
            return Err(Error::ParentSet(format!(
                "component {index} lists parent {p}; parents must precede the component"
            )));
        }
        if parents[..i].contains(&p) {
            return Err(Error::ParentSet(format!("component {index} lists parent {p} twice")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComponentConfig {
    pub degree: usize,
    pub knots_nonmonotone: KnotRule,
    pub knots_monotone: KnotRule,
    pub ridge: f64,
    pub adapt: AdaptConfig,
}

impl Default for ComponentConfig {
    fn default() -> Self {
        Self {
            degree: spline::DEFAULT_DEGREE,
            knots_nonmonotone: KnotRule::Auto,
            knots_monotone: KnotRule::Auto,
            ridge: objective::DEFAULT_RIDGE,
            adapt: AdaptConfig::default(),
        }
    }
}

/// Smoothing parameters and monotone coefficients from a previous fit.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub log_lambdas: Option<Vec<f64>>,
    pub mono_raw: Option<Vec<f64>>,
}

/// Fits component `index` with the given parents to the rows of `data`.
pub fn fit_component(
    data: &DMatrix<f64>,
    index: usize,
    parents: &[usize],
    config: &ComponentConfig,
    warm: Option<&WarmStart>,
) -> Result<(MapComponent, FitReport)> {
    let layout = ComponentLayout::build(data, index, parents, config)?;
    let cache = layout.design(data, config.ridge)?;
    let warm_lambdas = warm.and_then(|w| w.log_lambdas.as_deref());
    let warm_raw = warm.and_then(|w| w.mono_raw.as_ref()).map(|r| DVector::from_column_slice(r));
    let fit = objective::adapt(&cache, &config.adapt, warm_lambdas, warm_raw.as_ref())?;
    let comp = layout.into_component(fit.beta_non.as_slice(), fit.raw.as_slice(), fit.report.log_lambdas.clone())?;
    Ok((comp, fit.report))
}

/// One fitted component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapComponent {
    index: usize,
    non_terms: Vec<SplineTerm>,
    mono: SplineTerm,
    mono_raw: Vec<f64>,
    log_lambdas: Vec<f64>,
}

impl MapComponent {
    /// Assembles a component. `mono_raw` is the level followed by nonnegative
    /// increments of the monotone coefficients.
    pub fn from_parts(
        index: usize,
        non_terms: Vec<SplineTerm>,
        mono_standardization: Standardization,
        mono_basis: SplineBasis,
        mono_raw: Vec<f64>,
        log_lambdas: Vec<f64>,
    ) -> Result<Self> {
        for t in &non_terms {
            if t.variable >= index {
                return Err(Error::ParentSet(format!(
                    "component {index} has a term on variable {}",
                    t.variable
                )));
            }
            if t.coef.len() != t.basis.num_basis() {
                return Err(Error::Dimension("term coefficients do not match basis".into()));
            }
        }
        if mono_raw.len() != mono_basis.num_basis() {
            return Err(Error::Dimension("monotone coefficients do not match basis".into()));
        }
        if mono_raw.iter().any(|v| !v.is_finite()) || mono_raw[1..].iter().any(|&v| v < 0.0) {
            return Err(Error::Dimension("monotone increments must be finite and nonnegative".into()));
        }
        let coef = linalg::cumsum(&DVector::from_column_slice(&mono_raw)).as_slice().to_vec();
        Ok(Self {
            index,
            non_terms,
            mono: SplineTerm {
                variable: index,
                standardization: mono_standardization,
                basis: mono_basis,
                coef,
            },
            mono_raw,
            log_lambdas,
        })
    }

    /// `S(x) = x_index` on the given basis (in standardized units), with no
    /// parent terms.
    pub fn identity(index: usize, standardization: Standardization, basis: SplineBasis) -> Self {
        let greville = DVector::from_vec(basis.greville());
        let mut raw = linalg::differences(&greville).as_slice().to_vec();
        // identity in original units: f(u) = center/scale + u
        raw[0] += standardization.center / standardization.scale;
        let scale = standardization.scale;
        let mut comp = Self::from_parts(index, Vec::new(), standardization, basis, raw, Vec::new())
            .expect("greville increments are positive");
        comp.scale_output(scale);
        comp
    }

    fn scale_output(&mut self, factor: f64) {
        for v in &mut self.mono_raw {
            *v *= factor;
        }
        for v in &mut self.mono.coef {
            *v *= factor;
        }
        for t in &mut self.non_terms {
            for v in &mut t.coef {
                *v *= factor;
            }
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn parents(&self) -> Vec<usize> {
        self.non_terms.iter().map(|t| t.variable).collect()
    }

    pub fn non_terms(&self) -> &[SplineTerm] {
        &self.non_terms
    }

    pub fn monotone_term(&self) -> &SplineTerm {
        &self.mono
    }

    pub fn mono_raw(&self) -> &[f64] {
        &self.mono_raw
    }

    pub fn log_lambdas(&self) -> &[f64] {
        &self.log_lambdas
    }

    /// Raw basis dimension (all coefficients).
    pub fn num_coefficients(&self) -> usize {
        self.mono.coef.len() + self.non_terms.iter().map(|t| t.coef.len()).sum::<usize>()
    }

    fn check_row(&self, x: &[f64], len: usize) -> Result<()> {
        if x.len() < len {
            return Err(Error::Dimension(format!(
                "component {} needs {} coordinates, got {}",
                self.index,
                len,
                x.len()
            )));
        }
        if x[..len].iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!("input to component {}", self.index)));
        }
        Ok(())
    }

    /// Sum of the parent terms; reads only `x[..index]`.
    pub fn parent_part(&self, x: &[f64]) -> Result<f64> {
        self.check_row(x, self.index)?;
        let mut acc = 0.0;
        for t in &self.non_terms {
            acc += t.eval(x[t.variable])?.0;
        }
        Ok(acc)
    }

    /// `S(x)` for a row with at least `index + 1` coordinates.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check_row(x, self.index + 1)?;
        Ok(self.parent_part(x)? + self.mono.eval(x[self.index])?.0)
    }

    /// `dS/dx_index`.
    pub fn ddx(&self, x: &[f64]) -> Result<f64> {
        self.check_row(x, self.index + 1)?;
        Ok(self.mono.eval(x[self.index])?.1)
    }

    /// Value and last-coordinate derivative together.
    pub fn eval_with_ddx(&self, x: &[f64]) -> Result<(f64, f64)> {
        self.check_row(x, self.index + 1)?;
        let (f, df) = self.mono.eval(x[self.index])?;
        Ok((self.parent_part(x)? + f, df))
    }

    /// Solves `S(x_prefix, t) = z` for `t`. Only `x_prefix[..index]` is read.
    pub fn invert_in_last(&self, x_prefix: &[f64], z: f64) -> Result<f64> {
        if !z.is_finite() {
            return Err(Error::NonFinite("inversion target".into()));
        }
        let g = self.parent_part(x_prefix)?;
        let u = invert_monotone(&self.mono.basis, &self.mono.coef, z - g, 1e-10 * z.abs().max(1.0))?;
        Ok(self.mono.standardization.invert(u))
    }
}

/// Root of `f(u) = target` for a non-decreasing spline with linear tails.
fn invert_monotone(basis: &SplineBasis, coef: &[f64], target: f64, tol: f64) -> Result<f64> {
    let lo = basis.knots().first();
    let hi = basis.knots().last();
    let (f_lo, d_lo) = basis.eval_spline(coef, lo)?;
    let (f_hi, d_hi) = basis.eval_spline(coef, hi)?;
    if !(f_hi > f_lo) {
        return Err(Error::NotInvertible);
    }
    if target < f_lo {
        return if d_lo > 0.0 {
            Ok(lo + (target - f_lo) / d_lo)
        } else {
            Err(Error::Bracket(target))
        };
    }
    if target > f_hi {
        return if d_hi > 0.0 {
            Ok(hi + (target - f_hi) / d_hi)
        } else {
            Err(Error::Bracket(target))
        };
    }
    // safeguarded Newton on the bracket [a, b]
    let (mut a, mut b) = (lo, hi);
    let mut u = lo + (hi - lo) * (target - f_lo) / (f_hi - f_lo);
    for _ in 0..200 {
        let (f, df) = basis.eval_spline(coef, u)?;
        let r = f - target;
        if r.abs() <= tol {
            return Ok(u);
        }
        if r < 0.0 {
            a = u;
        } else {
            b = u;
        }
        let newton = if df > 0.0 { u - r / df } else { f64::NAN };
        u = if newton > a && newton < b { newton } else { 0.5 * (a + b) };
        if b - a <= 4.0 * f64::EPSILON * u.abs().max(1.0) {
            return Ok(u);
        }
    }
    Err(Error::Bracket(target))
}
