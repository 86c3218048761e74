//! Datasets and non-IID partitioning: IDX file ingestion, a Gaussian-blob
//! synthetic generator, and Dirichlet label-skew splits across clients.

pub mod idx;
pub mod partition;
pub mod synth;

pub use partition::{dirichlet_partition, PartitionConfig};

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: bad idx magic {found:#010x}, expected {expected:#010x}")]
    IdxBadMagic { path: String, found: u32, expected: u32 },
    #[error("{path}: idx file truncated at byte {offset}")]
    IdxTruncated { path: String, offset: usize },
    #[error("{path}: {detail}")]
    IdxMalformed { path: String, detail: String },
    #[error("image file has {images} samples but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(
        "could not give every client at least {min} samples after {attempts} attempts; \
         lower min_samples_per_client or the client count"
    )]
    MinSamplesUnsatisfied { min: usize, attempts: usize },
}

/// In-memory dataset with flat row-major samples and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    data: Vec<Scalar>,
    feature_dim: usize,
    /// Set when samples are images, as [channels, height, width].
    image_shape: Option<[usize; 3]>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        data: Vec<Scalar>,
        feature_dim: usize,
        image_shape: Option<[usize; 3]>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if feature_dim == 0 || num_classes == 0 {
            return Err(DataError::Invalid("feature_dim and num_classes must be positive".into()));
        }
        if data.len() != labels.len() * feature_dim {
            return Err(DataError::Invalid(format!(
                "{} values cannot hold {} samples of dim {}",
                data.len(),
                labels.len(),
                feature_dim
            )));
        }
        if let Some(shape) = image_shape {
            if shape.iter().product::<usize>() != feature_dim {
                return Err(DataError::Invalid(format!(
                    "image shape {shape:?} does not match feature dim {feature_dim}"
                )));
            }
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::LabelOutOfRange { label, num_classes });
        }
        Ok(Self { data, feature_dim, image_shape, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.image_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[Scalar] {
        &self.data[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Gathers `indices` into a batch shaped `[len, sample_shape...]`;
    /// `sample_shape` must describe `feature_dim` values.
    pub fn make_batch(&self, indices: &[usize], sample_shape: &[usize]) -> (Tensor, Vec<usize>) {
        assert_eq!(
            sample_shape.iter().product::<usize>(),
            self.feature_dim,
            "sample shape incompatible with feature dim"
        );
        let mut data = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(sample_shape);
        (Tensor::new(shape, data), labels)
    }

    /// Per-class counts over a subset of sample indices.
    pub fn histogram_of(&self, indices: &[usize]) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for &i in indices {
            hist[self.labels[i]] += 1;
        }
        hist
    }
}

/// Per-class counts of a label slice.
pub fn class_histogram(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut hist = vec![0usize; num_classes];
    for &l in labels {
        hist[l] += 1;
    }
    hist
}

/// One client's slice of the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    /// Indices into the parent dataset, sorted ascending.
    pub indices: Vec<usize>,
    pub class_histogram: Vec<usize>,
}
