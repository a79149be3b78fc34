//! Probabilistic and deterministic uniform quantizers on the lattice {kΔ}.
//!
//! The probabilistic kind rounds x up to the next lattice point with
//! probability equal to the fractional position of x inside its cell, which
//! makes the output an unbiased estimate of x with variance p(1-p)Δ² ≤ Δ²/4
//! and error never exceeding Δ. The deterministic kind is plain rounding.
//! The identity kind passes values through untouched so noiseless reference
//! runs exercise the same protocol code paths.

use crate::rng::RandomStream;
use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerKind {
    Probabilistic,
    UniformDeterministic,
    Identity,
}

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("quantizer input is not finite: {0}")]
    NonFiniteInput(f64),
    #[error("quantization step must be positive and finite, got {0}")]
    InvalidDelta(f64),
}

/// Quantization law plus step size Δ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerSpec {
    pub kind: QuantizerKind,
    pub delta: f64,
}

impl QuantizerSpec {
    /// Δ must be positive and finite for the non-identity kinds; the identity
    /// kind ignores it.
    pub fn new(kind: QuantizerKind, delta: f64) -> Result<Self, QuantizerError> {
        if kind != QuantizerKind::Identity && !(delta > 0.0 && delta.is_finite()) {
            return Err(QuantizerError::InvalidDelta(delta));
        }
        Ok(QuantizerSpec { kind, delta })
    }

    pub fn identity() -> Self {
        QuantizerSpec { kind: QuantizerKind::Identity, delta: 0.0 }
    }
}

/// Quantizes one value.
///
/// Probabilistic: returns ⌈x/Δ⌉Δ with probability p = x/Δ − ⌊x/Δ⌋ and ⌊x/Δ⌋Δ
/// otherwise, with floor taken toward −∞. When x sits exactly on the lattice
/// p is 0 and no random draw is consumed, so replaying a stream against the
/// same inputs stays aligned. Deterministic: round(x/Δ)Δ with ties away from
/// zero. Identity: x.
pub fn quantize(
    spec: &QuantizerSpec,
    x: f64,
    rng: &mut RandomStream,
) -> Result<f64, QuantizerError> {
    if !x.is_finite() {
        return Err(QuantizerError::NonFiniteInput(x));
    }
    let out = match spec.kind {
        QuantizerKind::Identity => x,
        QuantizerKind::UniformDeterministic => (x / spec.delta).round() * spec.delta,
        QuantizerKind::Probabilistic => {
            let ratio = x / spec.delta;
            let floor = ratio.floor();
            let p = ratio - floor;
            let level = if p == 0.0 {
                floor
            } else if rng.next_f64() < p {
                floor + 1.0
            } else {
                floor
            };
            level * spec.delta
        }
    };
    // Hard error bound: one lattice step, with headroom for rounding of x/Δ
    // at large magnitudes.
    debug_assert!(
        spec.kind == QuantizerKind::Identity
            || (out - x).abs() <= spec.delta * (1.0 + 1e-9) + 1e-12 * x.abs(),
        "quantization error {} exceeds step {}",
        (out - x).abs(),
        spec.delta
    );
    Ok(out)
}

/// Component-wise quantization, consuming draws in index order.
pub fn quantize_vector(
    spec: &QuantizerSpec,
    v: &DVector<f64>,
    rng: &mut RandomStream,
) -> Result<DVector<f64>, QuantizerError> {
    let mut out = DVector::zeros(v.len());
    for i in 0..v.len() {
        out[i] = quantize(spec, v[i], rng)?;
    }
    Ok(out)
}
