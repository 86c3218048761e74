//! Neural-net substrate: layer kernels, model container, temperature softmax,
//! reverse-mode autodiff tape, and SGD.

pub mod checkpoint;
pub mod layer;
pub mod model;
pub mod sgd;
pub mod tape;

pub use checkpoint::{checkpoint_bytes, load_model, parse_model, save_model};
pub use layer::LayerSpec;
pub use model::{Layer, ModelParams, ModelView};
pub use sgd::SgdState;
pub use tape::{record_model, NodeId, Tape, TapedModel};

use thiserror::Error;

use crate::scalar::{Scalar, LOG_EPS};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {layer}: expected input {expected}, got {actual}")]
    ShapeMismatch { layer: usize, expected: String, actual: String },
    #[error("classifier boundary {boundary} out of range for {n_layers} layers")]
    BoundaryOutOfRange { boundary: usize, n_layers: usize },
    #[error("softmax temperature must be positive, got {value}")]
    InvalidTemperature { value: Scalar },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("checkpoint: bad magic {found:?}")]
    BadMagic { found: [u8; 8] },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint corrupt at byte {offset}: {detail}")]
    Corrupt { offset: usize, detail: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Row-wise softmax of `logits / temperature` with max-subtraction.
pub fn softmax_rows(logits: &Tensor, temperature: Scalar) -> Result<Tensor, NnError> {
    if !(temperature > 0.0) {
        return Err(NnError::InvalidTemperature { value: temperature });
    }
    let (rows, cols) = logits.dim2();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        softmax_row_into(row, temperature, orow);
    }
    Ok(Tensor::new(vec![rows, cols], out))
}

pub(crate) fn softmax_row_into(row: &[Scalar], temperature: Scalar, out: &mut [Scalar]) {
    let m = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = ((v - m) / temperature).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Mean of -log p[label] over the batch, with the crate-wide log floor.
pub fn cross_entropy_mean(probs: &Tensor, labels: &[usize]) -> Result<Scalar, NnError> {
    let (rows, cols) = probs.dim2();
    assert_eq!(rows, labels.len(), "batch size / label count mismatch");
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= cols {
            return Err(NnError::LabelOutOfRange { label, num_classes: cols });
        }
        total -= probs.data()[r * cols + label].max(LOG_EPS).ln();
    }
    Ok(total / rows as Scalar)
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax_row(row: &[Scalar]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
