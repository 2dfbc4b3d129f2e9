//! Linearly extrapolated B-spline bases and difference penalties.
//!
//! A basis is defined by `K` "real" knots on an interval `[t_first, t_last]`,
//! padded with `degree` repeated knots on each side. Inside the real range the
//! basis is evaluated with the Cox-de Boor recursion; outside it every basis
//! function is continued along its tangent at the nearest boundary knot, so
//! any spline built from it is affine in both tails.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default spline degree (cubic).
pub const DEFAULT_DEGREE: usize = 3;

/// Default order of the coefficient difference penalty.
pub const DEFAULT_PENALTY_ORDER: usize = 2;

const MAX_DEGREE: usize = 10;

/// Minimum number of unique samples for the automatic knot rule.
const MIN_UNIQUE_FOR_RULE: usize = 8;

/// How many real knots a basis gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KnotRule {
    /// `ceil(n_unique^(1/3)) + 2` real knots.
    #[default]
    Auto,
    /// A fixed number of real knots.
    Fixed(usize),
}

/// Knot layout of a single basis: real knots plus clamped padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    real: Vec<f64>,
    padded: Vec<f64>,
    degree: usize,
}

impl KnotVector {
    /// Builds a knot vector from strictly increasing real knot positions.
    pub fn new(real: Vec<f64>, degree: usize) -> Result<Self> {
        if degree > MAX_DEGREE {
            return Err(Error::InvalidKnots(format!(
                "degree {degree} exceeds supported maximum {MAX_DEGREE}"
            )));
        }
        if real.len() < 2 {
            return Err(Error::InvalidKnots(format!(
                "need at least 2 real knots, got {}",
                real.len()
            )));
        }
        if real.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidKnots("non-finite knot".into()));
        }
        if real.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidKnots(
                "real knots must be strictly increasing".into(),
            ));
        }
        let first = real[0];
        let last = *real.last().unwrap();
        let mut padded = Vec::with_capacity(real.len() + 2 * degree);
        padded.extend(std::iter::repeat_n(first, degree));
        padded.extend_from_slice(&real);
        padded.extend(std::iter::repeat_n(last, degree));
        Ok(Self {
            real,
            padded,
            degree,
        })
    }

    pub fn real(&self) -> &[f64] {
        &self.real
    }

    pub fn padded(&self) -> &[f64] {
        &self.padded
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn first(&self) -> f64 {
        self.real[0]
    }

    pub fn last(&self) -> f64 {
        self.real[self.real.len() - 1]
    }

    /// Number of basis functions this knot vector supports.
    pub fn num_basis(&self) -> usize {
        self.padded.len() - self.degree - 1
    }
}

/// Type-7 (linear interpolation) empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Smallest integer `k` with `k^3 >= n`.
fn ceil_cbrt(n: usize) -> usize {
    let mut k = (n as f64).cbrt().floor() as usize;
    while k * k * k < n {
        k += 1;
    }
    while k > 0 && (k - 1) * (k - 1) * (k - 1) >= n {
        k -= 1;
    }
    k
}

/// Number of real knots the automatic rule assigns to `n_unique` samples.
pub fn auto_knot_count(n_unique: usize) -> usize {
    if n_unique < MIN_UNIQUE_FOR_RULE {
        (n_unique.saturating_sub(1)).max(4)
    } else {
        ceil_cbrt(n_unique) + 2
    }
}

/// Places real knots equally spaced between the empirical 10% and 90%
/// quantiles of the unique sample values.
pub fn make_knots(samples: &[f64], degree: usize, rule: KnotRule) -> Result<KnotVector> {
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("knot samples".into()));
    }
    let mut unique = samples.to_vec();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    if unique.len() < 2 {
        return Err(Error::ConstantDimension);
    }
    let count = match rule {
        KnotRule::Auto => {
            if unique.len() < MIN_UNIQUE_FOR_RULE {
                log::warn!(
                    "only {} unique samples; falling back to {} knots",
                    unique.len(),
                    auto_knot_count(unique.len())
                );
            }
            auto_knot_count(unique.len())
        }
        KnotRule::Fixed(k) => k,
    };
    if count < 2 {
        return Err(Error::InvalidKnots(format!("knot count {count} < 2")));
    }
    let q10 = quantile_sorted(&unique, 0.1);
    let q90 = quantile_sorted(&unique, 0.9);
    if q90 - q10 <= f64::EPSILON * q10.abs().max(q90.abs()).max(1.0) {
        return Err(Error::ConstantDimension);
    }
    let step = (q90 - q10) / (count - 1) as f64;
    let mut real: Vec<f64> = (0..count).map(|i| q10 + step * i as f64).collect();
    real[count - 1] = q90;
    KnotVector::new(real, degree)
}

/// A B-spline basis with linear tails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    knots: KnotVector,
}

impl SplineBasis {
    pub fn new(knots: KnotVector) -> Self {
        Self { knots }
    }

    /// Convenience constructor from real knots.
    pub fn from_real_knots(real: Vec<f64>, degree: usize) -> Result<Self> {
        Ok(Self::new(KnotVector::new(real, degree)?))
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.knots.degree
    }

    pub fn num_basis(&self) -> usize {
        self.knots.num_basis()
    }

    /// Greville abscissae: coefficients that reproduce `f(x) = x`.
    pub fn greville(&self) -> Vec<f64> {
        let d = self.degree();
        let t = &self.knots.padded;
        if d == 0 {
            return (0..self.num_basis())
                .map(|i| 0.5 * (t[i] + t[i + 1]))
                .collect();
        }
        (0..self.num_basis())
            .map(|i| t[i + 1..=i + d].iter().sum::<f64>() / d as f64)
            .collect()
    }

    /// Knot span index `mu` with `t[mu] <= x < t[mu+1]`, clamped to the real range.
    fn span(&self, x: f64) -> usize {
        let t = &self.knots.padded;
        let d = self.knots.degree;
        let lo = d;
        let hi = d + self.knots.real.len() - 2; // last non-degenerate span
        if x >= t[hi] {
            return hi;
        }
        if x <= t[lo] {
            return lo;
        }
        // binary search for the largest index in [lo, hi] with t[idx] <= x
        let (mut a, mut b) = (lo, hi);
        while b - a > 1 {
            let mid = (a + b) / 2;
            if t[mid] <= x {
                a = mid;
            } else {
                b = mid;
            }
        }
        a
    }

    /// Nonzero basis functions of degree `deg` on span `mu` (indices `mu-deg..=mu`).
    fn local_values(&self, x: f64, mu: usize, deg: usize, out: &mut [f64]) {
        let t = &self.knots.padded;
        let mut left = [0.0f64; 16];
        let mut right = [0.0f64; 16];
        out[0] = 1.0;
        for j in 1..=deg {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
    }

    /// Values and first derivatives of the nonzero functions on the span of `x`,
    /// evaluated with the polynomial piece of that span. Returns the first index.
    fn local_eval(&self, x: f64, vals: &mut [f64], ders: &mut [f64]) -> usize {
        let d = self.knots.degree;
        let mu = self.span(x);
        self.local_values(x, mu, d, vals);
        for v in ders.iter_mut().take(d + 1) {
            *v = 0.0;
        }
        if d > 0 {
            let t = &self.knots.padded;
            let mut lower = [0.0f64; 16];
            self.local_values(x, mu, d - 1, &mut lower);
            // lower[r] is B_{mu-d+1+r, d-1}
            for k in 0..=d {
                let i = mu - d + k;
                let mut der = 0.0;
                if k >= 1 {
                    der += lower[k - 1] / (t[i + d] - t[i]);
                }
                if k < d {
                    der -= lower[k] / (t[i + d + 1] - t[i + 1]);
                }
                ders[k] = d as f64 * der;
            }
        }
        mu - d
    }

    /// Evaluates the basis (values, derivatives) at `x` into the first
    /// `degree + 1` entries of the buffers, returning the index of the first
    /// nonzero function. Tails are handled by the linear extension.
    pub fn eval_local(&self, x: f64, vals: &mut [f64], ders: &mut [f64]) -> Result<usize> {
        if x.is_nan() {
            return Err(Error::NonFinite("basis evaluation point".into()));
        }
        let first = self.knots.first();
        let last = self.knots.last();
        let anchor = x.clamp(first, last);
        let start = self.local_eval(anchor, vals, ders);
        let offset = x - anchor;
        if offset != 0.0 {
            for k in 0..=self.degree() {
                vals[k] += offset * ders[k];
            }
        }
        Ok(start)
    }

    /// Dense vector of all basis values at `x`.
    pub fn eval(&self, x: f64) -> Result<Vec<f64>> {
        let mut vals = [0.0; 16];
        let mut ders = [0.0; 16];
        let start = self.eval_local(x, &mut vals, &mut ders)?;
        let mut out = vec![0.0; self.num_basis()];
        out[start..=start + self.degree()].copy_from_slice(&vals[..=self.degree()]);
        Ok(out)
    }

    /// Dense vector of all basis derivatives at `x` (constant in the tails).
    pub fn eval_deriv(&self, x: f64) -> Result<Vec<f64>> {
        let mut vals = [0.0; 16];
        let mut ders = [0.0; 16];
        let start = self.eval_local(x, &mut vals, &mut ders)?;
        let mut out = vec![0.0; self.num_basis()];
        out[start..=start + self.degree()].copy_from_slice(&ders[..=self.degree()]);
        Ok(out)
    }

    /// `f(x; coef)` and its derivative in one pass.
    pub fn eval_spline(&self, coef: &[f64], x: f64) -> Result<(f64, f64)> {
        debug_assert_eq!(coef.len(), self.num_basis());
        let mut vals = [0.0; 16];
        let mut ders = [0.0; 16];
        let start = self.eval_local(x, &mut vals, &mut ders)?;
        let mut f = 0.0;
        let mut df = 0.0;
        for k in 0..=self.degree() {
            f += coef[start + k] * vals[k];
            df += coef[start + k] * ders[k];
        }
        Ok((f, df))
    }
}

/// Banded difference operator `D` and its Gram matrix `D^T D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    order: usize,
    num_basis: usize,
    /// Row-major `(num_basis - order) x num_basis`.
    difference: Vec<f64>,
    /// Row-major `num_basis x num_basis`.
    gram: Vec<f64>,
}

impl PenaltyMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn rows(&self) -> usize {
        self.num_basis - self.order
    }

    pub fn difference(&self, row: usize, col: usize) -> f64 {
        self.difference[row * self.num_basis + col]
    }

    pub fn gram(&self, row: usize, col: usize) -> f64 {
        self.gram[row * self.num_basis + col]
    }

    pub fn gram_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.num_basis, self.num_basis, &self.gram)
    }

    pub fn difference_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows(), self.num_basis, &self.difference)
    }
}

/// Builds the `order`-th difference penalty for `num_basis` coefficients.
pub fn make_penalty(num_basis: usize, order: usize) -> Result<PenaltyMatrix> {
    if order == 0 || num_basis <= order {
        return Err(Error::InvalidPenalty { num_basis, order });
    }
    // signed binomial stencil (-1)^(order-k) C(order, k)
    let mut stencil = vec![1.0f64];
    for _ in 0..order {
        let mut next = vec![0.0; stencil.len() + 1];
        for (k, &c) in stencil.iter().enumerate() {
            next[k] -= c;
            next[k + 1] += c;
        }
        stencil = next;
    }
    let rows = num_basis - order;
    let mut difference = vec![0.0; rows * num_basis];
    for r in 0..rows {
        for (k, &c) in stencil.iter().enumerate() {
            difference[r * num_basis + r + k] = c;
        }
    }
    let mut gram = vec![0.0; num_basis * num_basis];
    for r in 0..rows {
        for a in 0..=order {
            for b in 0..=order {
                gram[(r + a) * num_basis + r + b] += stencil[a] * stencil[b];
            }
        }
    }
    Ok(PenaltyMatrix {
        order,
        num_basis,
        difference,
        gram,
    })
}
