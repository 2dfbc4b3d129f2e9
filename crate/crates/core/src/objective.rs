//! Transport objective for one map component and its smoothing-parameter
//! selection.
//!
//! A component is `S(x) = P_non(x) beta_non + P_mon(x_k) T r`, where `T` is the
//! cumulative-sum operator and `r = (level, increments...)` with nonnegative
//! increments. The sample-summed negative log-likelihood is
//!
//! ```text
//! L(beta) = 1/2 |P_non beta_non + P_mon T r|^2 - sum_i log(b_i T r)
//! ```
//!
//! and the penalized inner objective adds `1/2 beta^T S beta` with
//! `S = blockdiag(lambda_b G_b) + ridge * I`. For fixed `r` the inner problem is
//! quadratic in `beta_non`, so it is eliminated by a Cholesky solve and only the
//! monotone parameters are optimized numerically.
//!
//! Effective degrees of freedom are `dim - tr(H_pen^{-1} S_smooth)`, where
//! `S_smooth` excludes the ridge. The outer objective is AICc-style:
//! `nll + edf + edf (edf + 1) / (n - edf - 1)`; its gradient with respect to the
//! log smoothing parameters is obtained by implicit differentiation of the inner
//! optimality condition.

use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::solver::{self, BoundedObjective, NewtonOptions, OuterOptions};
use crate::spline::{self, SplineBasis};

/// Unconditional ridge added to every coefficient block.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Precomputed basis evaluations for one component on a training ensemble.
#[derive(Debug, Clone)]
pub struct DesignCache {
    n: usize,
    non_blocks: Vec<usize>,
    p_non: DMatrix<f64>,
    p_mon: DMatrix<f64>,
    b: DMatrix<f64>,
    /// `b T`
    b_cum: DMatrix<f64>,
    pn_pn: DMatrix<f64>,
    /// `P_non^T P_mon T`
    pn_pm_t: DMatrix<f64>,
    /// `T^T P_mon^T P_mon T`
    pm_pm_t: DMatrix<f64>,
    /// Difference-penalty Gram matrices, nonmonotone blocks first.
    grams: Vec<DMatrix<f64>>,
    /// `T^T G_mon T`
    mono_gram_t: DMatrix<f64>,
    /// `T^T T` for the ridge on the monotone block.
    mono_ridge_t: DMatrix<f64>,
    ridge: f64,
    start: DVector<f64>,
}

impl DesignCache {
    /// Builds a cache from raw design matrices. `non_blocks` lists the column
    /// count of each nonmonotone term; their sum must equal `p_non.ncols()`.
    pub fn new(
        p_non: DMatrix<f64>,
        non_blocks: Vec<usize>,
        p_mon: DMatrix<f64>,
        b: DMatrix<f64>,
        ridge: f64,
    ) -> Result<Self> {
        let n = p_mon.nrows();
        let p = p_mon.ncols();
        if p_non.nrows() != n || b.nrows() != n || b.ncols() != p {
            return Err(Error::Dimension("design matrices disagree in shape".into()));
        }
        if non_blocks.iter().sum::<usize>() != p_non.ncols() {
            return Err(Error::Dimension("nonmonotone block sizes do not sum to column count".into()));
        }
        if p < 3 || non_blocks.iter().any(|&m| m < 3) {
            return Err(Error::Dimension("every block needs at least 3 basis functions".into()));
        }
        if !(ridge >= 0.0) {
            return Err(Error::Config(format!("ridge must be nonnegative, got {ridge}")));
        }
        let order = spline::DEFAULT_PENALTY_ORDER;
        let mut grams = Vec::with_capacity(non_blocks.len() + 1);
        for &m in &non_blocks {
            grams.push(spline::make_penalty(m, order)?.gram_matrix());
        }
        let mono_gram = spline::make_penalty(p, order)?.gram_matrix();
        let mono_gram_t = linalg::congruence_cumsum(&mono_gram);
        grams.push(mono_gram);
        let b_cum = linalg::right_mul_cumsum(&b);
        let pn_pn = p_non.transpose() * &p_non;
        let pn_pm_t = linalg::right_mul_cumsum(&(p_non.transpose() * &p_mon));
        let pm_pm_t = linalg::congruence_cumsum(&(p_mon.transpose() * &p_mon));
        let mono_ridge_t = linalg::congruence_cumsum(&DMatrix::identity(p, p));
        let mut start = DVector::from_element(p, 1.0);
        start[0] = 0.0;
        Ok(Self {
            n,
            non_blocks,
            p_non,
            p_mon,
            b,
            b_cum,
            pn_pn,
            pn_pm_t,
            pm_pm_t,
            grams,
            mono_gram_t,
            mono_ridge_t,
            ridge,
            start,
        })
    }

    /// Evaluates the bases at the training samples. `non_terms` pairs each
    /// nonmonotone basis with its (standardized) parent samples.
    pub fn from_bases(
        non_terms: &[(&SplineBasis, &[f64])],
        mono: &SplineBasis,
        mono_samples: &[f64],
        ridge: f64,
    ) -> Result<Self> {
        let n = mono_samples.len();
        let m: usize = non_terms.iter().map(|(b, _)| b.num_basis()).sum();
        let p = mono.num_basis();
        let mut p_non = DMatrix::zeros(n, m);
        let mut offset = 0;
        let mut vals = [0.0; 16];
        let mut ders = [0.0; 16];
        for (basis, xs) in non_terms {
            if xs.len() != n {
                return Err(Error::Dimension("parent sample count differs".into()));
            }
            for (i, &x) in xs.iter().enumerate() {
                let start = basis.eval_local(x, &mut vals, &mut ders)?;
                for k in 0..=basis.degree() {
                    p_non[(i, offset + start + k)] = vals[k];
                }
            }
            offset += basis.num_basis();
        }
        let mut p_mon = DMatrix::zeros(n, p);
        let mut b = DMatrix::zeros(n, p);
        let mut starts = Vec::with_capacity(n);
        for (i, &x) in mono_samples.iter().enumerate() {
            let start = mono.eval_local(x, &mut vals, &mut ders)?;
            starts.push(start);
            for k in 0..=mono.degree() {
                p_mon[(i, start + k)] = vals[k];
                b[(i, start + k)] = ders[k];
            }
        }
        let blocks = non_terms.iter().map(|(b, _)| b.num_basis()).collect();
        let mut cache = Self::new(p_non, blocks, p_mon, b, ridge)?;
        // derivative rows sum to zero, so suffix sums up to the first active
        // function vanish; store them as exact zeros
        for (i, &start) in starts.iter().enumerate() {
            for k in 0..=start {
                cache.b_cum[(i, k)] = 0.0;
            }
        }
        let greville = DVector::from_vec(mono.greville());
        cache.start = linalg::differences(&greville);
        Ok(cache)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_non(&self) -> usize {
        self.p_non.ncols()
    }

    pub fn num_mon(&self) -> usize {
        self.p_mon.ncols()
    }

    /// Number of smoothing parameters (one per block, monotone last).
    pub fn num_blocks(&self) -> usize {
        self.non_blocks.len() + 1
    }

    /// Basis dimension of every block, monotone last.
    pub fn block_sizes(&self) -> Vec<usize> {
        let mut v = self.non_blocks.clone();
        v.push(self.num_mon());
        v
    }

    pub fn total_dim(&self) -> usize {
        self.num_non() + self.num_mon()
    }

    pub fn p_non(&self) -> &DMatrix<f64> {
        &self.p_non
    }

    pub fn p_mon(&self) -> &DMatrix<f64> {
        &self.p_mon
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// A strictly feasible starting point for the monotone parameters.
    pub fn default_start(&self) -> &DVector<f64> {
        &self.start
    }

    /// `x_k`-derivatives `b_i T r` at every sample.
    pub fn slopes(&self, raw: &DVector<f64>) -> DVector<f64> {
        &self.b_cum * raw
    }

    /// Negative log-likelihood summed over the samples.
    pub fn nll(&self, beta_non: &DVector<f64>, raw: &DVector<f64>) -> Result<f64> {
        self.check_dims(beta_non, raw)?;
        let beta_mon = linalg::cumsum(raw);
        let fitted = &self.p_non * beta_non + &self.p_mon * &beta_mon;
        let slopes = self.slopes(raw);
        let mut log_sum = 0.0;
        for (i, &s) in slopes.iter().enumerate() {
            if !(s > 0.0) {
                return Err(Error::BarrierViolation { sample: i, value: s });
            }
            log_sum += s.ln();
        }
        Ok(0.5 * fitted.norm_squared() - log_sum)
    }

    fn check_dims(&self, beta_non: &DVector<f64>, raw: &DVector<f64>) -> Result<()> {
        if beta_non.len() != self.num_non() || raw.len() != self.num_mon() {
            return Err(Error::Dimension(format!(
                "expected {}+{} coefficients, got {}+{}",
                self.num_non(),
                self.num_mon(),
                beta_non.len(),
                raw.len()
            )));
        }
        Ok(())
    }

    /// Penalty setup for the given log smoothing parameters.
    pub fn penalized(&self, log_lambdas: &[f64]) -> Result<PenalizedProblem<'_>> {
        PenalizedProblem::new(self, log_lambdas)
    }

    /// Smoothing-only penalty matrix (no ridge) of block `b` in beta coordinates.
    fn gram(&self, block: usize) -> &DMatrix<f64> {
        &self.grams[block]
    }

    fn non_range(&self, block: usize) -> Range<usize> {
        let start: usize = self.non_blocks[..block].iter().sum();
        start..start + self.non_blocks[block]
    }
}

/// The inner problem at fixed smoothing parameters.
pub struct PenalizedProblem<'a> {
    cache: &'a DesignCache,
    log_lambdas: Vec<f64>,
    lambdas: Vec<f64>,
    s_non: DMatrix<f64>,
    /// `T^T S_mon T` including the ridge.
    s_mon_t: DMatrix<f64>,
    c_chol: Option<Cholesky<f64, Dyn>>,
    /// `T^T (P_mon^T P_mon - B^T C^{-1} B + S_mon) T`
    reduced_quad: DMatrix<f64>,
}

impl<'a> PenalizedProblem<'a> {
    fn new(cache: &'a DesignCache, log_lambdas: &[f64]) -> Result<Self> {
        if log_lambdas.len() != cache.num_blocks() {
            return Err(Error::Dimension(format!(
                "expected {} smoothing parameters, got {}",
                cache.num_blocks(),
                log_lambdas.len()
            )));
        }
        if log_lambdas.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log smoothing parameters".into()));
        }
        let lambdas: Vec<f64> = log_lambdas.iter().map(|v| v.exp()).collect();
        let m = cache.num_non();
        let mut s_non = DMatrix::zeros(m, m);
        for b in 0..cache.non_blocks.len() {
            let r = cache.non_range(b);
            let mut view = s_non.view_mut((r.start, r.start), (r.len(), r.len()));
            view += cache.gram(b) * lambdas[b];
        }
        for i in 0..m {
            s_non[(i, i)] += cache.ridge;
        }
        let lam_mon = lambdas[cache.num_blocks() - 1];
        let s_mon_t = &cache.mono_gram_t * lam_mon + &cache.mono_ridge_t * cache.ridge;
        let mut reduced_quad = &cache.pm_pm_t + &s_mon_t;
        let c_chol = if m > 0 {
            let c = &cache.pn_pn + &s_non;
            let chol = linalg::cholesky(&c, "nonmonotone normal equations")?;
            let solved = chol.solve(&cache.pn_pm_t);
            reduced_quad -= cache.pn_pm_t.transpose() * solved;
            Some(chol)
        } else {
            None
        };
        // symmetrize against round-off
        let sym = (&reduced_quad + reduced_quad.transpose()) * 0.5;
        Ok(Self {
            cache,
            log_lambdas: log_lambdas.to_vec(),
            lambdas,
            s_non,
            s_mon_t,
            c_chol,
            reduced_quad: sym,
        })
    }

    pub fn cache(&self) -> &DesignCache {
        self.cache
    }

    pub fn log_lambdas(&self) -> &[f64] {
        &self.log_lambdas
    }

    /// Minimizer over `beta_non` for fixed monotone parameters, from the
    /// normal equations `(P^T P + S_non) beta = -P^T P_mon T r`.
    pub fn solve_non_closed_form(&self, raw: &DVector<f64>) -> DVector<f64> {
        match &self.c_chol {
            Some(chol) => -chol.solve(&(&self.cache.pn_pm_t * raw)),
            None => DVector::zeros(0),
        }
    }

    /// Penalized objective over all coefficients.
    pub fn penalized_value(&self, beta_non: &DVector<f64>, raw: &DVector<f64>) -> Result<f64> {
        let nll = self.cache.nll(beta_non, raw)?;
        Ok(nll + 0.5 * beta_non.dot(&(&self.s_non * beta_non)) + 0.5 * raw.dot(&(&self.s_mon_t * raw)))
    }

    /// Penalty part of the objective (without the likelihood).
    pub fn penalty_value(&self, beta_non: &DVector<f64>, raw: &DVector<f64>) -> f64 {
        0.5 * beta_non.dot(&(&self.s_non * beta_non)) + 0.5 * raw.dot(&(&self.s_mon_t * raw))
    }

    /// Reduced objective after eliminating the nonmonotone coefficients.
    pub fn reduced_value(&self, raw: &DVector<f64>) -> Result<f64> {
        let slopes = self.cache.slopes(raw);
        let mut log_sum = 0.0;
        for (i, &s) in slopes.iter().enumerate() {
            if !(s > 0.0) {
                return Err(Error::BarrierViolation { sample: i, value: s });
            }
            log_sum += s.ln();
        }
        Ok(0.5 * raw.dot(&(&self.reduced_quad * raw)) - log_sum)
    }

    /// Value, gradient and Hessian of the reduced objective in the raw
    /// (level + increments) parametrization.
    pub fn reduced_derivatives(&self, raw: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let p = raw.len();
        let slopes = self.cache.slopes(raw);
        let quad = &self.reduced_quad * raw;
        let mut value = 0.5 * raw.dot(&quad);
        let mut grad = quad;
        let mut hess = self.reduced_quad.clone();
        for (i, &s) in slopes.iter().enumerate() {
            if !(s > 0.0) {
                return Err(Error::BarrierViolation { sample: i, value: s });
            }
            value -= s.ln();
            let row = self.cache.b_cum.row(i);
            let inv = 1.0 / s;
            let inv2 = inv * inv;
            for k in 0..p {
                let rk = row[k];
                if rk == 0.0 {
                    continue;
                }
                grad[k] -= rk * inv;
                let w = rk * inv2;
                for l in k..p {
                    hess[(k, l)] += w * row[l];
                }
            }
        }
        for k in 0..p {
            for l in 0..k {
                hess[(k, l)] = hess[(l, k)];
            }
        }
        Ok((value, grad, hess))
    }

    /// Solves the inner problem from `start` (or the cache's default start).
    pub fn fit_inner(&self, start: Option<&DVector<f64>>) -> Result<InnerSolution> {
        let x0 = match start {
            Some(s) if s.len() == self.cache.num_mon() && self.reduced_value(s).is_ok() => s.clone(),
            _ => self.cache.default_start().clone(),
        };
        let res = solver::projected_newton(&ReducedObjective(self), x0, NewtonOptions::default())
            .ok_or_else(|| Error::Singular("inner start point violates the barrier".into()))?;
        if !res.converged {
            log::debug!(
                "inner solve stopped after {} iterations with projected gradient {:e}",
                res.iterations,
                res.projected_grad_norm
            );
        }
        let beta_non = self.solve_non_closed_form(&res.x);
        Ok(InnerSolution {
            beta_non,
            raw: res.x,
            gradient: res.gradient,
            penalized_value: res.value,
            iterations: res.iterations,
            converged: res.converged,
        })
    }

    /// Builds the implicit system (penalized Hessian and penalty blocks over
    /// the free coordinates) at an inner solution.
    pub fn implicit_system(&self, sol: &InnerSolution) -> Result<ImplicitSystem> {
        let cache = self.cache;
        let m = cache.num_non();
        let p = cache.num_mon();
        // increments pinned at zero leave the system
        let free: Vec<usize> = (0..p).filter(|&k| k == 0 || sol.raw[k] > 0.0).collect();
        let f = free.len();
        let dim = m + f;
        let slopes = cache.slopes(&sol.raw);

        let mut mono_h = &cache.pm_pm_t + &self.s_mon_t;
        let mut weights = DMatrix::zeros(p, p);
        for (i, &s) in slopes.iter().enumerate() {
            let row = cache.b_cum.row(i);
            let w = 1.0 / (s * s);
            for k in 0..p {
                let rk = row[k] * w;
                if rk == 0.0 {
                    continue;
                }
                for l in k..p {
                    weights[(k, l)] += rk * row[l];
                }
            }
        }
        for k in 0..p {
            for l in 0..k {
                weights[(k, l)] = weights[(l, k)];
            }
        }
        mono_h += &weights;

        let mut h = DMatrix::zeros(dim, dim);
        h.view_mut((0, 0), (m, m)).copy_from(&(&cache.pn_pn + &self.s_non));
        let cross = linalg::select_cols(&cache.pn_pm_t, &free);
        h.view_mut((0, m), (m, f)).copy_from(&cross);
        h.view_mut((m, 0), (f, m)).copy_from(&cross.transpose());
        h.view_mut((m, m), (f, f)).copy_from(&linalg::select_square(&mono_h, &free));

        let mut blocks = Vec::with_capacity(cache.num_blocks());
        for b in 0..cache.non_blocks.len() {
            blocks.push(PenaltyBlock {
                range: cache.non_range(b),
                matrix: cache.gram(b) * self.lambdas[b],
            });
        }
        let lam_mon = self.lambdas[cache.num_blocks() - 1];
        blocks.push(PenaltyBlock {
            range: m..dim,
            matrix: linalg::select_square(&cache.mono_gram_t, &free) * lam_mon,
        });

        let mut theta = DVector::zeros(dim);
        theta.rows_mut(0, m).copy_from(&sol.beta_non);
        theta.rows_mut(m, f).copy_from(&linalg::select(&sol.raw, &free));

        // gradient of the unpenalized nll in theta coordinates
        let beta_mon = linalg::cumsum(&sol.raw);
        let resid = &cache.p_non * &sol.beta_non + &cache.p_mon * &beta_mon;
        let mut grad_l = DVector::zeros(dim);
        grad_l.rows_mut(0, m).copy_from(&(cache.p_non.transpose() * &resid));
        let mut mono_grad = linalg::right_mul_cumsum(&cache.p_mon).transpose() * &resid;
        for (i, &s) in slopes.iter().enumerate() {
            let row = cache.b_cum.row(i);
            for k in 0..p {
                mono_grad[k] -= row[k] / s;
            }
        }
        grad_l.rows_mut(m, f).copy_from(&linalg::select(&mono_grad, &free));

        let mut barrier_rows = DMatrix::zeros(slopes.len(), f);
        for i in 0..slopes.len() {
            for (j, &k) in free.iter().enumerate() {
                barrier_rows[(i, j)] = cache.b_cum[(i, k)];
            }
        }

        ImplicitSystem::new(
            h,
            blocks,
            theta,
            grad_l,
            Some(BarrierTerm {
                offset: m,
                rows: barrier_rows,
                slopes,
            }),
        )
    }

    /// Inner fit followed by edf and AICc.
    pub fn outer_objective(&self, start: Option<&DVector<f64>>) -> Result<OuterEvaluation> {
        self.evaluate(start, false)
    }

    /// As [`Self::outer_objective`], additionally returning the gradient with
    /// respect to every log smoothing parameter.
    pub fn outer_objective_with_gradient(&self, start: Option<&DVector<f64>>) -> Result<OuterEvaluation> {
        self.evaluate(start, true)
    }

    fn evaluate(&self, start: Option<&DVector<f64>>, with_gradient: bool) -> Result<OuterEvaluation> {
        let inner = self.fit_inner(start)?;
        let nll = self.cache.nll(&inner.beta_non, &inner.raw)?;
        let system = self.implicit_system(&inner)?;
        let edf = system.edf();
        let (penalty, dpenalty) = aicc_penalty(edf.total, self.cache.n)?;
        let gradient = if with_gradient {
            Some(system.outer_gradient(dpenalty)?)
        } else {
            None
        };
        Ok(OuterEvaluation {
            aicc: nll + penalty,
            nll,
            edf: edf.total,
            edf_blocks: edf.blocks,
            gradient,
            inner,
            free_dim: system.dim(),
        })
    }
}

struct ReducedObjective<'p, 'a>(&'p PenalizedProblem<'a>);

impl BoundedObjective for ReducedObjective<'_, '_> {
    fn dim(&self) -> usize {
        self.0.cache.num_mon()
    }
    fn is_bounded(&self, k: usize) -> bool {
        k > 0
    }
    fn value(&self, x: &DVector<f64>) -> Option<f64> {
        self.0.reduced_value(x).ok()
    }
    fn derivatives(&self, x: &DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        self.0.reduced_derivatives(x).ok()
    }
}

/// Result of the inner problem.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub beta_non: DVector<f64>,
    /// Level followed by monotone increments.
    pub raw: DVector<f64>,
    /// Reduced-objective gradient at `raw`.
    pub gradient: DVector<f64>,
    pub penalized_value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// One smoothing block of the implicit system: `lambda_b G_b` on `range`.
#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    pub range: Range<usize>,
    pub matrix: DMatrix<f64>,
}

/// Curvature of the log-barrier: `-sum_i log(rows_i . theta[offset..])`.
#[derive(Debug, Clone)]
pub struct BarrierTerm {
    pub offset: usize,
    pub rows: DMatrix<f64>,
    pub slopes: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct EdfBreakdown {
    pub total: f64,
    pub blocks: Vec<f64>,
}

/// Penalized Hessian and penalty structure at an inner optimum. Everything the
/// edf and the implicit outer gradient need.
#[derive(Debug, Clone)]
pub struct ImplicitSystem {
    chol: Cholesky<f64, Dyn>,
    h_inv: DMatrix<f64>,
    blocks: Vec<PenaltyBlock>,
    theta: DVector<f64>,
    grad_l: DVector<f64>,
    barrier: Option<BarrierTerm>,
}

impl ImplicitSystem {
    /// `h` is the penalized Hessian (ridge included), `blocks` the smoothing
    /// penalties (ridge excluded), `grad_l` the unpenalized gradient at `theta`.
    pub fn new(
        h: DMatrix<f64>,
        blocks: Vec<PenaltyBlock>,
        theta: DVector<f64>,
        grad_l: DVector<f64>,
        barrier: Option<BarrierTerm>,
    ) -> Result<Self> {
        let dim = h.nrows();
        let chol = linalg::cholesky(&h, "penalized Hessian")?;
        let h_inv = chol.solve(&DMatrix::identity(dim, dim));
        let h_inv = (&h_inv + h_inv.transpose()) * 0.5;
        Ok(Self {
            chol,
            h_inv,
            blocks,
            theta,
            grad_l,
            barrier,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// `tr(H^{-1} E_b)` restricted to the block.
    fn block_trace(&self, block: &PenaltyBlock) -> f64 {
        let r = block.range.clone();
        let hb = self.h_inv.view((r.start, r.start), (r.len(), r.len()));
        let mut acc = 0.0;
        for i in 0..r.len() {
            for j in 0..r.len() {
                acc += hb[(i, j)] * block.matrix[(j, i)];
            }
        }
        acc
    }

    /// Total and per-block effective degrees of freedom.
    pub fn edf(&self) -> EdfBreakdown {
        let blocks: Vec<f64> = self
            .blocks
            .iter()
            .map(|b| b.range.len() as f64 - self.block_trace(b))
            .collect();
        let covered: usize = self.blocks.iter().map(|b| b.range.len()).sum();
        let total = blocks.iter().sum::<f64>() + (self.dim() - covered) as f64;
        EdfBreakdown { total, blocks }
    }

    /// `H^{-1} S H^{-1}` with `S` the block-diagonal smoothing penalty.
    fn sandwich(&self) -> DMatrix<f64> {
        let dim = self.dim();
        let mut hs = DMatrix::zeros(dim, dim);
        for b in &self.blocks {
            let r = b.range.clone();
            let cols = self.h_inv.columns(r.start, r.len()) * &b.matrix;
            hs.columns_mut(r.start, r.len()).copy_from(&cols);
        }
        &hs * &self.h_inv
    }

    /// Partial derivatives of the edf with respect to each log smoothing
    /// parameter at fixed coefficients.
    pub fn edf_explicit_partials(&self) -> Vec<f64> {
        let m = self.sandwich();
        self.blocks
            .iter()
            .map(|b| {
                let r = b.range.clone();
                let mb = m.view((r.start, r.start), (r.len(), r.len()));
                let mut acc = 0.0;
                for i in 0..r.len() {
                    for j in 0..r.len() {
                        acc += b.matrix[(i, j)] * mb[(j, i)];
                    }
                }
                acc - self.block_trace(b)
            })
            .collect()
    }

    /// Gradient of the edf with respect to the coefficients through the
    /// barrier curvature (zero for quadratic likelihoods).
    pub fn edf_coefficient_gradient(&self) -> DVector<f64> {
        let dim = self.dim();
        let mut out = DVector::zeros(dim);
        let Some(bar) = &self.barrier else {
            return out;
        };
        let m = self.sandwich();
        let f = bar.rows.ncols();
        let mm = m.view((bar.offset, bar.offset), (f, f)).into_owned();
        for i in 0..bar.rows.nrows() {
            let row = bar.rows.row(i).transpose();
            let q = row.dot(&(&mm * &row));
            let s = bar.slopes[i];
            let w = -2.0 * q / (s * s * s);
            for k in 0..f {
                out[bar.offset + k] += w * row[k];
            }
        }
        out
    }

    /// Implicit-function-theorem gradient of `nll + c(edf)` with respect to the
    /// log smoothing parameters, where `dpenalty = c'(edf)`.
    pub fn outer_gradient(&self, dpenalty: f64) -> Result<Vec<f64>> {
        let partials = self.edf_explicit_partials();
        let w = &self.grad_l + self.edf_coefficient_gradient() * dpenalty;
        let u = self.chol.solve(&w);
        Ok(self
            .blocks
            .iter()
            .zip(partials)
            .map(|(b, partial)| {
                let r = b.range.clone();
                let e_theta = &b.matrix * self.theta.rows(r.start, r.len());
                dpenalty * partial - u.rows(r.start, r.len()).dot(&e_theta)
            })
            .collect())
    }
}

/// Small-sample corrected AIC penalty `edf + edf (edf + 1) / (n - edf - 1)` and
/// its derivative in `edf`.
pub fn aicc_penalty(edf: f64, n: usize) -> Result<(f64, f64)> {
    let denom = n as f64 - edf - 1.0;
    if !(denom > 0.0) {
        return Err(Error::TooComplex { n, edf });
    }
    let value = edf + edf * (edf + 1.0) / denom;
    let deriv = 1.0 + ((2.0 * edf + 1.0) * denom + edf * (edf + 1.0)) / (denom * denom);
    Ok((value, deriv))
}

#[derive(Debug, Clone)]
pub struct OuterEvaluation {
    pub aicc: f64,
    pub nll: f64,
    pub edf: f64,
    pub edf_blocks: Vec<f64>,
    pub gradient: Option<Vec<f64>>,
    pub inner: InnerSolution,
    pub free_dim: usize,
}

/// Which smoothing parameters the outer loop adapts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Adaptation {
    /// Adapt every block.
    All,
    /// Keep the monotone block fixed at the given log smoothing parameter.
    FixedMonotone { log_lambda: f64 },
    /// No adaptation; every block uses the given value.
    Fixed { log_lambda: f64 },
}

impl Default for Adaptation {
    fn default() -> Self {
        Adaptation::All
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub adaptation: Adaptation,
    pub initial_log_lambda: f64,
    pub max_outer_iters: usize,
    pub value_tol: f64,
    pub grad_tol: f64,
    pub min_log_lambda: f64,
    pub max_log_lambda: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            adaptation: Adaptation::All,
            initial_log_lambda: 2.0,
            max_outer_iters: 50,
            value_tol: 1e-6,
            grad_tol: 1e-4,
            min_log_lambda: -15.0,
            max_log_lambda: 15.0,
        }
    }
}

/// Per-component fitting record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub nll: f64,
    pub edf: f64,
    pub edf_blocks: Vec<f64>,
    pub aicc: f64,
    pub log_lambdas: Vec<f64>,
    pub block_sizes: Vec<usize>,
    pub n: usize,
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub ridge: f64,
}

impl FitReport {
    /// Effective over raw degrees of freedom.
    pub fn edf_fraction(&self) -> f64 {
        self.edf / self.block_sizes.iter().sum::<usize>() as f64
    }
}

/// Fitted coefficients plus report.
#[derive(Debug, Clone)]
pub struct AdaptedFit {
    pub beta_non: DVector<f64>,
    pub raw: DVector<f64>,
    pub report: FitReport,
}

/// Fits one component: inner problem at fixed smoothing parameters, with the
/// smoothing parameters chosen by minimizing the outer objective.
pub fn adapt(cache: &DesignCache, config: &AdaptConfig, warm_log_lambdas: Option<&[f64]>, warm_raw: Option<&DVector<f64>>) -> Result<AdaptedFit> {
    let nb = cache.num_blocks();
    let mono = nb - 1;
    let mut base = vec![config.initial_log_lambda; nb];
    if let Some(w) = warm_log_lambdas {
        if w.len() == nb && w.iter().all(|v| v.is_finite()) {
            base.copy_from_slice(w);
        }
    }
    let adapted: Vec<usize> = match config.adaptation {
        Adaptation::All => (0..nb).collect(),
        Adaptation::FixedMonotone { log_lambda } => {
            base[mono] = log_lambda;
            (0..mono).collect()
        }
        Adaptation::Fixed { log_lambda } => {
            base.iter_mut().for_each(|v| *v = log_lambda);
            Vec::new()
        }
    };
    for &b in &adapted {
        base[b] = base[b].clamp(config.min_log_lambda, config.max_log_lambda);
    }

    let assemble = |x: &[f64]| {
        let mut full = base.clone();
        for (i, &b) in adapted.iter().enumerate() {
            full[b] = x[i];
        }
        full
    };

    let mut warm = warm_raw.cloned();
    let mut inner_iters = 0usize;
    let mut last_error: Option<Error> = None;

    // find a start where the outer objective is defined
    let mut x0: Vec<f64> = adapted.iter().map(|&b| base[b]).collect();
    let mut ok = false;
    for _ in 0..16 {
        match cache.penalized(&assemble(&x0)).and_then(|p| p.outer_objective(warm.as_ref())) {
            Ok(eval) => {
                inner_iters += eval.inner.iterations;
                warm = Some(eval.inner.raw.clone());
                ok = true;
                break;
            }
            Err(e) => {
                if adapted.is_empty() || x0.iter().all(|&v| v >= config.max_log_lambda) {
                    return Err(e);
                }
                last_error = Some(e);
                x0.iter_mut().for_each(|v| *v = (*v + 2.0).min(config.max_log_lambda));
            }
        }
    }
    if !ok {
        return Err(last_error.unwrap_or(Error::Singular("outer start".into())));
    }

    let opts = OuterOptions {
        max_iter: config.max_outer_iters,
        value_tol: config.value_tol,
        grad_tol: config.grad_tol,
        lower: config.min_log_lambda,
        upper: config.max_log_lambda,
        max_step: 3.0,
    };
    let mut best: Option<(Vec<f64>, OuterEvaluation)> = None;
    let result = solver::minimize_bounded(
        |x| {
            let full = assemble(x);
            let problem = cache.penalized(&full).ok()?;
            let eval = problem.outer_objective_with_gradient(warm.as_ref()).ok()?;
            inner_iters += eval.inner.iterations;
            warm = Some(eval.inner.raw.clone());
            let grad_full = eval.gradient.clone()?;
            let grad: Vec<f64> = adapted.iter().map(|&b| grad_full[b]).collect();
            let value = eval.aicc;
            if best.as_ref().is_none_or(|(_, e)| value <= e.aicc) {
                best = Some((full, eval));
            }
            Some((value, grad))
        },
        &x0,
        opts,
    )
    .ok_or_else(|| Error::Singular("outer objective undefined at start".into()))?;

    let (full, eval) = best.expect("start point was evaluated");
    let grad_norm = result
        .gradient
        .iter()
        .zip(&result.x)
        .map(|(g, x)| {
            if (*x <= config.min_log_lambda && *g > 0.0) || (*x >= config.max_log_lambda && *g < 0.0) {
                0.0
            } else {
                g * g
            }
        })
        .sum::<f64>()
        .sqrt();
    let report = FitReport {
        nll: eval.nll,
        edf: eval.edf,
        edf_blocks: eval.edf_blocks.clone(),
        aicc: eval.aicc,
        log_lambdas: full,
        block_sizes: cache.block_sizes(),
        n: cache.n(),
        inner_iters,
        outer_iters: result.iterations,
        converged: result.converged && eval.inner.converged,
        grad_norm,
        ridge: cache.ridge(),
    };
    Ok(AdaptedFit {
        beta_non: eval.inner.beta_non,
        raw: eval.inner.raw,
        report,
    })
}
