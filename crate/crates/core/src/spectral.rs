//! Imaginary-frequency quadrature and azimuthal mode summation.
//!
//! Frequency integrals Int_0^inf f(xi) dxi are evaluated by Gauss-Legendre
//! quadrature on u in (0, 1) composed with the compactifying map
//! xi = xi0 * u / (1 - u), which has Jacobian xi0 / (1 - u)^2. The scale xi0
//! should match the dominant length of the scene (1/R for a hole of radius
//! R) so that the nodes cluster where the integrand lives.
//!
//! Azimuthal decompositions F = Sum_m F_m e^{i m phi} are reduced with
//! [`m_sum`], which folds the +-m degeneracy and truncates adaptively.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One imaginary-frequency quadrature node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPoint {
    /// Imaginary frequency in inverse internal length units.
    pub xi: f64,
    /// Quadrature weight, Jacobian included: Sum w_k f(xi_k) ~ Int f dxi.
    pub weight: f64,
}

/// Gauss-Legendre scheme for Int_0^inf dxi after compactification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureScheme {
    pub node_count: usize,
    /// Scale of the u -> xi map; nodes concentrate around xi ~ xi0.
    pub xi0: f64,
}

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("quadrature requires node_count >= 2 and xi0 > 0 (got n = {node_count}, xi0 = {xi0})")]
    BadScheme { node_count: usize, xi0: f64 },
    #[error(
        "mode sum did not converge within m <= {m_cap} (partial sum {partial:.6e}, last term {last_term:.3e})"
    )]
    ModeSumTruncated {
        partial: f64,
        last_term: f64,
        m_cap: usize,
    },
}

impl QuadratureScheme {
    pub fn new(node_count: usize, xi0: f64) -> Result<Self, SpectralError> {
        if node_count < 2 || !xi0.is_finite() || xi0 <= 0.0 {
            return Err(SpectralError::BadScheme { node_count, xi0 });
        }
        Ok(Self { node_count, xi0 })
    }

    /// Nodes and weights for Int_0^inf f(xi) dxi ~ Sum_k w_k f(xi_k).
    pub fn xi_nodes(&self) -> Vec<SpectralPoint> {
        let base = gauss_legendre_unit(self.node_count);
        base.into_iter()
            .map(|(u, w)| {
                let one_minus = 1.0 - u;
                SpectralPoint {
                    xi: self.xi0 * u / one_minus,
                    weight: w * self.xi0 / (one_minus * one_minus),
                }
            })
            .collect()
    }
}

/// Gauss-Legendre nodes and weights on (0, 1), ascending in u.
///
/// Newton iteration on P_n with the Tricomi initial guess; converges to
/// machine precision in a handful of steps for any practical n.
pub fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for k in 1..=n {
        // Root of P_n on (-1, 1), counted from the positive end.
        let mut x = (std::f64::consts::PI * (k as f64 - 0.25) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            let step = p / d;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        // Weight from the derivative at the converged root.
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push(((1.0 - x) / 2.0, w / 2.0));
    }
    out
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 1.0;
    let mut p = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for j in 2..=n {
        let jf = j as f64;
        let p_next = ((2.0 * jf - 1.0) * x * p - (jf - 1.0) * p_prev) / jf;
        p_prev = p;
        p = p_next;
    }
    let d = (n as f64) * (x * p - p_prev) / (x * x - 1.0);
    (p, d)
}

/// Result of an adaptive azimuthal mode sum.
#[derive(Debug, Clone, Copy)]
pub struct ModeSum {
    pub value: f64,
    /// Highest mode index that was evaluated.
    pub m_used: usize,
    /// Magnitude of the last folded term, usable as a truncation estimate.
    pub truncation_estimate: f64,
}

/// Sums term(0) + 2 * Sum_{m>=1} term(m), the +-m fold of an azimuthal
/// series for phi-even sources.
///
/// Truncates once two consecutive folded terms drop below `rel_tol` times
/// the running total (measured against the largest magnitude seen, so an
/// identically-zero series terminates immediately). Modes above `m_cap`
/// produce [`SpectralError::ModeSumTruncated`] carrying the partial sum.
pub fn m_sum<F>(mut term: F, rel_tol: f64, m_cap: usize) -> Result<ModeSum, SpectralError>
where
    F: FnMut(usize) -> f64,
{
    let mut total = term(0);
    let mut scale = total.abs();
    let mut small_streak = 0usize;
    let mut last = total;
    for m in 1..=m_cap {
        let folded = 2.0 * term(m);
        total += folded;
        last = folded;
        scale = scale.max(total.abs()).max(folded.abs());
        if folded.abs() <= rel_tol * scale {
            small_streak += 1;
            if small_streak >= 2 {
                return Ok(ModeSum {
                    value: total,
                    m_used: m,
                    truncation_estimate: folded.abs(),
                });
            }
        } else {
            small_streak = 0;
        }
    }
    Err(SpectralError::ModeSumTruncated {
        partial: total,
        last_term: last,
        m_cap,
    })
}
