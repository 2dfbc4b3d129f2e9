//! Triangular maps assembled from [`MapComponent`]s.
//!
//! Variables `0..block_split` form the conditioning block `a`, the rest the
//! updated block `b`. A map built only for conditioning holds components for
//! block `b` alone.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::component::{self, ComponentConfig, MapComponent, WarmStart};
use crate::error::{Error, Result};
use crate::objective::FitReport;
use crate::spline::SplineBasis;

pub const FORMAT_VERSION: u32 = 1;

/// Smallest ensemble accepted for fitting.
pub const MIN_MEMBERS: usize = 8;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `n x d` samples with variable names.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    data: DMatrix<f64>,
    names: Vec<String>,
}

impl Ensemble {
    pub fn new(data: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != data.ncols() {
            return Err(Error::Ensemble(format!(
                "{} names for {} columns",
                names.len(),
                data.ncols()
            )));
        }
        if data.nrows() < MIN_MEMBERS {
            return Err(Error::Ensemble(format!(
                "need at least {MIN_MEMBERS} members, got {}",
                data.nrows()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ensemble".into()));
        }
        Ok(Self { data, names })
    }

    /// Names `x0, x1, ...`.
    pub fn unnamed(data: DMatrix<f64>) -> Result<Self> {
        let names = (0..data.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(data, names)
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.data.column(j).iter().copied().collect()
    }

    /// Reorders variables: column `k` of the result is column `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.dim()];
        if order.len() != self.dim() || order.iter().any(|&k| k >= self.dim() || std::mem::replace(&mut seen[k], true)) {
            return Err(Error::Dimension(format!("{order:?} is not a permutation of 0..{}", self.dim())));
        }
        let data = DMatrix::from_fn(self.n(), self.dim(), |i, k| self.data[(i, order[k])]);
        let names = order.iter().map(|&k| self.names[k].clone()).collect();
        Ok(Self { data, names })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub component: ComponentConfig,
    /// Number of leading (conditioning) variables.
    pub block_split: usize,
    /// Whether the components of the conditioning block are fitted.
    pub fit_block_a: bool,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            component: ComponentConfig::default(),
            block_split: 0,
            fit_block_a: true,
        }
    }
}

/// Checks that `parents[j]` only refers to variables before `j`.
pub fn validate_parent_sets(parents: &[Vec<usize>], dim: usize) -> Result<()> {
    if parents.len() != dim {
        return Err(Error::ParentSet(format!(
            "{} parent sets for dimension {dim}",
            parents.len()
        )));
    }
    for (j, ps) in parents.iter().enumerate() {
        component::validate_parents(j, ps, dim)?;
    }
    Ok(())
}

/// A lower-triangular map with monotone diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangularMap {
    format_version: u32,
    dim: usize,
    names: Vec<String>,
    block_split: usize,
    components: Vec<MapComponent>,
    /// Free-form origin information (config hash, seed, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    provenance: BTreeMap<String, String>,
}

impl TriangularMap {
    /// Components must be consecutive and end at the last variable.
    pub fn from_components(names: Vec<String>, block_split: usize, components: Vec<MapComponent>) -> Result<Self> {
        let map = Self {
            format_version: FORMAT_VERSION,
            dim: names.len(),
            names,
            block_split,
            components,
            provenance: BTreeMap::new(),
        };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported map format version {}",
                self.format_version
            )));
        }
        if self.names.len() != self.dim || self.block_split > self.dim {
            return Err(Error::Dimension("map header is inconsistent".into()));
        }
        let first = self.dim - self.components.len();
        for (k, c) in self.components.iter().enumerate() {
            if c.index() != first + k {
                return Err(Error::Dimension(format!(
                    "component {k} has index {}, expected {}",
                    c.index(),
                    first + k
                )));
            }
            component::validate_parents(c.index(), &c.parents(), self.dim)?;
            for basis in c
                .non_terms()
                .iter()
                .map(|t| &t.basis)
                .chain(std::iter::once(&c.monotone_term().basis))
            {
                let rebuilt = SplineBasis::from_real_knots(basis.knots().real().to_vec(), basis.degree())?;
                if &rebuilt != basis {
                    return Err(Error::InvalidKnots("padded knots do not match real knots".into()));
                }
            }
        }
        Ok(())
    }

    /// Fits components `first..d` where `first` is 0, or `block_split` when
    /// the conditioning block is skipped. Components are fitted in parallel.
    pub fn fit(
        ensemble: &Ensemble,
        parents: &[Vec<usize>],
        config: &MapConfig,
        warm: Option<&[WarmStart]>,
    ) -> Result<(Self, Vec<FitReport>)> {
        let d = ensemble.dim();
        validate_parent_sets(parents, d)?;
        if config.block_split > d {
            return Err(Error::Config(format!("block split {} exceeds dimension {d}", config.block_split)));
        }
        let first = if config.fit_block_a { 0 } else { config.block_split };
        let results: Vec<Result<(MapComponent, FitReport)>> = (first..d)
            .into_par_iter()
            .map(|j| {
                let w = warm.and_then(|w| w.get(j - first));
                component::fit_component(ensemble.data(), j, &parents[j], &config.component, w)
                    .map_err(|e| Error::Component {
                        component: j,
                        source: Box::new(e),
                    })
            })
            .collect();
        let mut components = Vec::with_capacity(d - first);
        let mut reports = Vec::with_capacity(d - first);
        for r in results {
            let (c, rep) = r?;
            components.push(c);
            reports.push(rep);
        }
        let map = Self::from_components(ensemble.names().to_vec(), config.block_split, components)?;
        Ok((map, reports))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn block_split(&self) -> usize {
        self.block_split
    }

    pub fn components(&self) -> &[MapComponent] {
        &self.components
    }

    /// Index of the first fitted component.
    pub fn first_fitted(&self) -> usize {
        self.dim - self.components.len()
    }

    fn check_row(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!("expected {} coordinates, got {}", self.dim, x.len())));
        }
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("map input".into()));
        }
        Ok(())
    }

    fn require_full(&self) -> Result<()> {
        if self.first_fitted() != 0 {
            return Err(Error::Config(format!(
                "map has no components for variables 0..{}",
                self.first_fitted()
            )));
        }
        Ok(())
    }

    /// Outputs of the fitted components (all of `z` for a full map).
    pub fn pushforward_fitted(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_row(x)?;
        self.components.iter().map(|c| c.eval(x)).collect()
    }

    /// `z = S(x)`; requires a full map.
    pub fn pushforward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.require_full()?;
        self.pushforward_fitted(x)
    }

    pub fn pushforward_ensemble(&self, ensemble: &Ensemble) -> Result<Ensemble> {
        self.require_full()?;
        let rows: Vec<Vec<f64>> = (0..ensemble.n())
            .into_par_iter()
            .map(|i| self.pushforward(&ensemble.row(i)))
            .collect::<Result<_>>()?;
        let data = DMatrix::from_fn(ensemble.n(), self.dim, |i, j| rows[i][j]);
        Ensemble::new(data, ensemble.names().to_vec())
    }

    /// `sum_j log phi(S_j(x)) + log dS_j/dx_j`. Returns negative infinity when
    /// some diagonal derivative is not positive.
    pub fn log_pullback_density(&self, x: &[f64]) -> Result<f64> {
        self.require_full()?;
        self.check_row(x)?;
        let mut acc = 0.0;
        for c in &self.components {
            let (z, dz) = c.eval_with_ddx(x)?;
            if !(dz > 0.0) {
                return Ok(f64::NEG_INFINITY);
            }
            acc += -0.5 * z * z - LN_SQRT_2PI + dz.ln();
        }
        Ok(acc)
    }

    /// Inverts the fitted components given the leading coordinates
    /// `x_a` (length `first_fitted`) and targets `z` for the rest.
    pub fn invert_lower(&self, x_a: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let first = self.first_fitted();
        if x_a.len() != first || z.len() != self.components.len() {
            return Err(Error::Dimension("conditioning or target length mismatch".into()));
        }
        let mut x = Vec::with_capacity(self.dim);
        x.extend_from_slice(x_a);
        for (c, &zj) in self.components.iter().zip(z) {
            let v = c.invert_in_last(&x, zj)?;
            x.push(v);
        }
        Ok(x)
    }

    /// `x = S^{-1}(z)`; requires a full map.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.require_full()?;
        self.invert_lower(&[], z)
    }

    fn check_conditioning(&self, x_a_star: &[f64]) -> Result<()> {
        if x_a_star.len() != self.block_split {
            return Err(Error::Dimension(format!(
                "conditioning values have length {}, block a has {}",
                x_a_star.len(),
                self.block_split
            )));
        }
        if x_a_star.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conditioning values".into()));
        }
        Ok(())
    }

    /// Lower-block latent coordinates `S_b(x_a, x_b)` of one member.
    fn lower_latent(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_row(x)?;
        self.components[self.block_split - self.first_fitted()..]
            .iter()
            .map(|c| c.eval(x))
            .collect()
    }

    /// Solves `S_b(x_a_star, x_b) = z_b` for `x_b`.
    fn solve_lower(&self, x_a_star: &[f64], z_b: &[f64]) -> Result<Vec<f64>> {
        let mut x = x_a_star.to_vec();
        for (c, &zj) in self.components[self.block_split - self.first_fitted()..].iter().zip(z_b) {
            let v = c.invert_in_last(&x, zj)?;
            x.push(v);
        }
        Ok(x)
    }

    /// Conditions every member (row of `members`, all `d` variables) on
    /// `x_a = x_a_star`: `x_b <- S_b(x_a_star, .)^{-1}(S_b(x_a, x_b))` and
    /// `x_a <- x_a_star`.
    pub fn conditional_update(&self, members: &DMatrix<f64>, x_a_star: &[f64]) -> Result<DMatrix<f64>> {
        self.check_conditioning(x_a_star)?;
        if members.ncols() != self.dim {
            return Err(Error::Dimension("member width differs from map dimension".into()));
        }
        if self.first_fitted() > self.block_split {
            return Err(Error::Config("map lacks components for block b".into()));
        }
        let rows: Vec<Vec<f64>> = (0..members.nrows())
            .into_par_iter()
            .map(|i| {
                let x: Vec<f64> = members.row(i).iter().copied().collect();
                self.lower_latent(&x)
                    .and_then(|z| self.solve_lower(x_a_star, &z))
                    .map_err(|e| Error::Member {
                        member: i,
                        source: Box::new(e),
                    })
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(members.nrows(), self.dim, |i, j| rows[i][j]))
    }

    /// Draws `num` samples of block `b` given `x_a = x_a_star`, as an
    /// `num x (d - block_split)` matrix. Reproducible for a fixed seed.
    pub fn sample_conditional(&self, x_a_star: &[f64], num: usize, seed: u64) -> Result<DMatrix<f64>> {
        self.check_conditioning(x_a_star)?;
        if self.first_fitted() > self.block_split {
            return Err(Error::Config("map lacks components for block b".into()));
        }
        let nb = self.dim - self.block_split;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..num * nb).map(|_| StandardNormal.sample(&mut rng)).collect();
        let rows: Vec<Vec<f64>> = (0..num)
            .into_par_iter()
            .map(|i| {
                self.solve_lower(x_a_star, &z[i * nb..(i + 1) * nb])
                    .map_err(|e| Error::Member {
                        member: i,
                        source: Box::new(e),
                    })
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(num, nb, |i, j| rows[i][self.block_split + j]))
    }

    pub fn provenance(&self) -> &BTreeMap<String, String> {
        &self.provenance
    }

    pub fn set_provenance(&mut self, key: &str, value: &str) {
        self.provenance.insert(key.to_string(), value.to_string());
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: Self = serde_json::from_str(text)?;
        map.validate()?;
        Ok(map)
    }
}
