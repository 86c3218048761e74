//! Crate-wide scalar type. All simulation math runs in `Scalar`; the checkpoint
//! format on disk is always little-endian f64 regardless of this choice.

#[cfg(not(feature = "f32"))]
pub type Scalar = f64;

#[cfg(feature = "f32")]
pub type Scalar = f32;

/// Floor applied inside every logarithm and normalization denominator.
/// Probabilities at or below this are treated as exactly zero by the
/// distillation decomposition.
pub const LOG_EPS: Scalar = 1e-12;
