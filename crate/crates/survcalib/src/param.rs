//! Transformation between ordered survival probabilities and the
//! unconstrained-plus-box parameterization used by the optimizer.
//!
//! The chain `phi` maps to survival values via cumulative sums:
//! `S_(c) = exp(-exp(phi_1 + ... + phi_c))`. With `S_1` pinned to 1 the chain
//! starts at `S_2` (length `J`); with a free `S_1` (baseline-NPV model) the
//! chain starts at `S_1` (length `J + 1`). The first chain element is
//! unconstrained; all later elements carry a lower bound of 0, which enforces
//! the strict ordering of the survival values.

use thiserror::Error;

use crate::data::SurvivalCurve;

/// Floor on the transformed chain head. When the leading survival value's
/// maximizer sits at its upper boundary (within 2e-9 of 1) the transform
/// would otherwise send the optimizer on an infinite crawl toward minus
/// infinity along a flat ridge; the floor turns that into an ordinary active
/// bound.
pub const CHAIN_HEAD_FLOOR: f64 = -20.0;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("survival curve violates the transform's bounds: {0}")]
    BoundViolation(String),
    #[error("parameter vector has wrong length (expected {expected}, got {actual})")]
    LengthMismatch { expected: usize, actual: usize },
}

/// Maps a survival curve to its transformed parameters.
pub fn reparameterize(curve: &SurvivalCurve) -> Result<Vec<f64>, ParamError> {
    curve
        .validate()
        .map_err(|e| ParamError::BoundViolation(e.to_string()))?;
    let s = curve.values();
    let chain: &[f64] = if curve.s1_free() { s } else { &s[1..] };
    if chain.iter().any(|&v| v >= 1.0) {
        return Err(ParamError::BoundViolation(
            "chain values must be strictly below 1".into(),
        ));
    }
    let mut phi = Vec::with_capacity(chain.len());
    let mut prev_ll = 0.0;
    for (c, &v) in chain.iter().enumerate() {
        let ll = (-(v.ln())).ln();
        if c == 0 {
            phi.push(ll);
        } else {
            phi.push(ll - prev_ll);
        }
        prev_ll = ll;
    }
    Ok(phi)
}

/// Inverse of [`reparameterize`]. Accepts boundary values (`phi_c = 0` yields
/// tied survival entries, which downstream validation flags).
pub fn dereparameterize(phi: &[f64], s1_free: bool) -> SurvivalCurve {
    let mut s = Vec::with_capacity(phi.len() + usize::from(!s1_free));
    if !s1_free {
        s.push(1.0);
    }
    let mut psi = 0.0;
    for (c, &p) in phi.iter().enumerate() {
        psi = if c == 0 { p } else { psi + p };
        s.push((-psi.exp()).exp());
    }
    SurvivalCurve::new_unchecked(s, s1_free)
}

/// Shape of the packed optimization vector:
/// `[phi(stratum 1), ..., phi(stratum K), beta]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_strata: usize,
    /// Number of intervals `J + 1`.
    pub n_intervals: usize,
    pub s1_free: bool,
    pub n_coefficients: usize,
}

impl ParamLayout {
    pub fn phi_per_stratum(&self) -> usize {
        self.n_intervals - usize::from(!self.s1_free)
    }

    pub fn n_params(&self) -> usize {
        self.n_strata * self.phi_per_stratum() + self.n_coefficients
    }

    pub fn phi_range(&self, stratum: usize) -> std::ops::Range<usize> {
        let w = self.phi_per_stratum();
        stratum * w..(stratum + 1) * w
    }

    pub fn beta_range(&self) -> std::ops::Range<usize> {
        let start = self.n_strata * self.phi_per_stratum();
        start..start + self.n_coefficients
    }

    /// Lower bounds: the first chain element of each stratum is bounded only
    /// by [`CHAIN_HEAD_FLOOR`], beta coordinates are unbounded, and later
    /// chain elements are bounded at 0.
    pub fn lower_bounds(&self) -> Vec<f64> {
        let mut lb = vec![0.0; self.n_params()];
        for k in 0..self.n_strata {
            let r = self.phi_range(k);
            lb[r.start] = CHAIN_HEAD_FLOOR;
        }
        for b in self.beta_range() {
            lb[b] = f64::NEG_INFINITY;
        }
        lb
    }

    pub fn upper_bounds(&self) -> Vec<f64> {
        vec![f64::INFINITY; self.n_params()]
    }

    pub fn pack(&self, curves: &[SurvivalCurve], beta: &[f64]) -> Result<Vec<f64>, ParamError> {
        if curves.len() != self.n_strata || beta.len() != self.n_coefficients {
            return Err(ParamError::LengthMismatch {
                expected: self.n_strata,
                actual: curves.len(),
            });
        }
        let mut x = Vec::with_capacity(self.n_params());
        for c in curves {
            if c.n_intervals() != self.n_intervals || c.s1_free() != self.s1_free {
                return Err(ParamError::BoundViolation(
                    "curve shape does not match layout".into(),
                ));
            }
            x.extend(reparameterize(c)?);
        }
        x.extend_from_slice(beta);
        Ok(x)
    }

    pub fn unpack(&self, x: &[f64]) -> Result<(Vec<SurvivalCurve>, Vec<f64>), ParamError> {
        if x.len() != self.n_params() {
            return Err(ParamError::LengthMismatch {
                expected: self.n_params(),
                actual: x.len(),
            });
        }
        let curves = (0..self.n_strata)
            .map(|k| dereparameterize(&x[self.phi_range(k)], self.s1_free))
            .collect();
        let beta = x[self.beta_range()].to_vec();
        Ok((curves, beta))
    }

    /// Log survival values `ln S_j`, j = 1..=J+1, for one stratum's chain.
    pub fn log_survival(&self, phi: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_intervals);
        if !self.s1_free {
            out.push(0.0);
        }
        let mut psi = 0.0;
        for (c, &p) in phi.iter().enumerate() {
            psi = if c == 0 { p } else { psi + p };
            out.push(-psi.exp());
        }
        out
    }
}
