//! Model container: an ordered layer stack split at a classifier boundary
//! into feature extractor and classifier head.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::{
    conv2d_forward, linear_forward, maxpool_forward, relu_forward, LayerSpec, ShapeMismatch,
};
use super::NnError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl Layer {
    /// Runs the layer on a batch whose shape is `[B, per-sample dims...]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ShapeMismatch> {
        let out_sample = self.spec.output_shape(&x.shape()[1..])?;
        let batch = x.shape()[0];
        let y = match &self.spec {
            LayerSpec::Linear { .. } => {
                linear_forward(x, self.weight.as_ref().unwrap(), self.bias.as_ref())
            }
            LayerSpec::Relu => relu_forward(x),
            LayerSpec::Conv2d { .. } => {
                conv2d_forward(x, self.weight.as_ref().unwrap(), self.bias.as_ref())
            }
            LayerSpec::MaxPool2d { size } => maxpool_forward(x, *size).0,
            LayerSpec::Flatten => {
                let mut shape = vec![batch];
                shape.extend(&out_sample);
                x.reshaped(shape)
            }
        };
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
    classifier_boundary: usize,
    input_shape: Vec<usize>,
    num_classes: usize,
}

/// Borrowed sub-stack of a model; `base` offsets layer indices in errors.
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a> {
    layers: &'a [Layer],
    base: usize,
}

impl<'a> ModelView<'a> {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(&cur).map_err(|e| NnError::ShapeMismatch {
                layer: self.base + i,
                expected: e.expected,
                actual: e.actual,
            })?;
        }
        Ok(cur)
    }

    pub fn layers(&self) -> &'a [Layer] {
        self.layers
    }
}

impl ModelParams {
    /// Builds a model with seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    /// weights and zero biases.
    pub fn new(
        specs: Vec<LayerSpec>,
        classifier_boundary: usize,
        input_shape: Vec<usize>,
        seed: u64,
    ) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let (weight, bias) = init_params(&spec, &mut rng);
            layers.push(Layer { spec, weight, bias });
        }
        Self::from_parts(layers, classifier_boundary, input_shape)
    }

    /// Assembles a model from existing layers, validating composition,
    /// boundary, and parameter shapes.
    pub fn from_parts(
        layers: Vec<Layer>,
        classifier_boundary: usize,
        input_shape: Vec<usize>,
    ) -> Result<Self, NnError> {
        if classifier_boundary > layers.len() {
            return Err(NnError::BoundaryOutOfRange {
                boundary: classifier_boundary,
                n_layers: layers.len(),
            });
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.spec.output_shape(&shape).map_err(|e| NnError::ShapeMismatch {
                layer: i,
                expected: e.expected,
                actual: e.actual,
            })?;
            check_param_shapes(i, layer)?;
        }
        if shape.len() != 1 {
            return Err(NnError::ShapeMismatch {
                layer: layers.len().saturating_sub(1),
                expected: "final per-sample output of rank 1 (logits)".into(),
                actual: format!("{shape:?}"),
            });
        }
        Ok(Self { layers, classifier_boundary, input_shape, num_classes: shape[0] })
    }

    /// Flatten -> linear -> relu -> linear stack; the final linear layer is
    /// the classifier head.
    pub fn small_mlp(
        input_shape: &[usize],
        hidden_dim: usize,
        num_classes: usize,
        classifier_bias: bool,
        seed: u64,
    ) -> Self {
        let in_dim: usize = input_shape.iter().product();
        let specs = vec![
            LayerSpec::Flatten,
            LayerSpec::Linear { in_dim, out_dim: hidden_dim, bias: true },
            LayerSpec::Relu,
            LayerSpec::Linear { in_dim: hidden_dim, out_dim: num_classes, bias: classifier_bias },
        ];
        Self::new(specs, 3, input_shape.to_vec(), seed).expect("small_mlp composition is valid")
    }

    /// Two conv blocks then a two-layer head; the final linear layer is the
    /// classifier. Requires image dims compatible with the fixed kernels.
    pub fn small_cnn(
        in_channels: usize,
        height: usize,
        width: usize,
        hidden_dim: usize,
        num_classes: usize,
        classifier_bias: bool,
        seed: u64,
    ) -> Result<Self, NnError> {
        let h1 = height - 5 + 1;
        let w1 = width - 5 + 1;
        let (h2, w2) = (h1 / 2 - 3 + 1, w1 / 2 - 3 + 1);
        let flat = 16 * (h2 / 2) * (w2 / 2);
        let specs = vec![
            LayerSpec::Conv2d { in_channels, out_channels: 8, kernel: 5, bias: true },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Conv2d { in_channels: 8, out_channels: 16, kernel: 3, bias: true },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear { in_dim: flat, out_dim: hidden_dim, bias: true },
            LayerSpec::Relu,
            LayerSpec::Linear { in_dim: hidden_dim, out_dim: num_classes, bias: classifier_bias },
        ];
        Self::new(specs, 9, vec![in_channels, height, width], seed)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classifier_boundary(&self) -> usize {
        self.classifier_boundary
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-sample shape of the extractor output.
    pub fn feature_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers[..self.classifier_boundary] {
            shape = layer.spec.output_shape(&shape).expect("validated at construction");
        }
        shape
    }

    /// (extractor view, classifier view).
    pub fn split(&self) -> (ModelView<'_>, ModelView<'_>) {
        let (ext, cls) = self.layers.split_at(self.classifier_boundary);
        (
            ModelView { layers: ext, base: 0 },
            ModelView { layers: cls, base: self.classifier_boundary },
        )
    }

    /// Runs the full stack; returns (features at the boundary, logits).
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor), NnError> {
        let (extractor, classifier) = self.split();
        let features = extractor.forward(batch)?;
        let logits = classifier.forward(&features)?;
        Ok((features, logits))
    }

    /// Trainable tensors in a fixed order: weight then bias per layer.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_ref(), l.bias.as_ref()])
            .flatten()
            .collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut(), l.bias.as_mut()])
            .flatten()
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }
}

fn init_params(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> (Option<Tensor>, Option<Tensor>) {
    match *spec {
        LayerSpec::Linear { in_dim, out_dim, bias } => {
            let bound = 1.0 / (in_dim as Scalar).sqrt();
            let w = (0..out_dim * in_dim).map(|_| rng.random_range(-bound..bound)).collect();
            (
                Some(Tensor::new(vec![out_dim, in_dim], w)),
                bias.then(|| Tensor::zeros(vec![out_dim])),
            )
        }
        LayerSpec::Conv2d { in_channels, out_channels, kernel, bias } => {
            let fan_in = in_channels * kernel * kernel;
            let bound = 1.0 / (fan_in as Scalar).sqrt();
            let n = out_channels * in_channels * kernel * kernel;
            let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            (
                Some(Tensor::new(vec![out_channels, in_channels, kernel, kernel], w)),
                bias.then(|| Tensor::zeros(vec![out_channels])),
            )
        }
        _ => (None, None),
    }
}

fn check_param_shapes(i: usize, layer: &Layer) -> Result<(), NnError> {
    let err = |expected: String, actual: String| NnError::ShapeMismatch { layer: i, expected, actual };
    match layer.spec {
        LayerSpec::Linear { in_dim, out_dim, bias } => {
            let w = layer.weight.as_ref().ok_or_else(|| {
                err("linear weight".into(), "missing".into())
            })?;
            if w.shape() != [out_dim, in_dim] {
                return Err(err(format!("[{out_dim}, {in_dim}]"), format!("{:?}", w.shape())));
            }
            check_bias(i, layer, bias, out_dim)
        }
        LayerSpec::Conv2d { in_channels, out_channels, kernel, bias } => {
            let w = layer.weight.as_ref().ok_or_else(|| {
                err("conv weight".into(), "missing".into())
            })?;
            if w.shape() != [out_channels, in_channels, kernel, kernel] {
                return Err(err(
                    format!("[{out_channels}, {in_channels}, {kernel}, {kernel}]"),
                    format!("{:?}", w.shape()),
                ));
            }
            check_bias(i, layer, bias, out_channels)
        }
        _ => {
            if layer.weight.is_some() || layer.bias.is_some() {
                return Err(err("no parameters".into(), "parameters present".into()));
            }
            Ok(())
        }
    }
}

fn check_bias(i: usize, layer: &Layer, want: bool, dim: usize) -> Result<(), NnError> {
    match (&layer.bias, want) {
        (Some(b), true) if b.shape() == [dim] => Ok(()),
        (None, false) => Ok(()),
        (b, _) => Err(NnError::ShapeMismatch {
            layer: i,
            expected: if want { format!("bias [{dim}]") } else { "no bias".into() },
            actual: b.as_ref().map_or("missing".into(), |t| format!("{:?}", t.shape())),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_rows;

    fn single_linear(weight: Vec<Scalar>, in_dim: usize, out_dim: usize) -> ModelParams {
        let layers = vec![Layer {
            spec: LayerSpec::Linear { in_dim, out_dim, bias: false },
            weight: Some(Tensor::new(vec![out_dim, in_dim], weight)),
            bias: None,
        }];
        ModelParams::from_parts(layers, 0, vec![in_dim]).unwrap()
    }

    #[test]
    fn identity_linear_logits_equal_input() {
        let model = single_linear(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 3);
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.4, 0.9, 1.0, 2.0, -3.0]);
        let (features, logits) = model.forward(&x).unwrap();
        assert_eq!(features.data(), x.data());
        assert_eq!(logits.data(), x.data());
    }

    #[test]
    fn zero_classifier_gives_uniform_softmax() {
        let model = single_linear(vec![0.0; 12], 4, 3);
        let x = Tensor::new(vec![2, 4], vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.0, 1.0, 1.0]);
        let (_, logits) = model.forward(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let probs = softmax_rows(&logits, 1.0).unwrap();
        for &p in probs.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_composition_matches_full_forward() {
        let model = ModelParams::small_mlp(&[6], 5, 4, false, 42);
        let x = Tensor::new(vec![3, 6], (0..18).map(|v| v as Scalar * 0.1 - 0.9).collect());
        let (features, logits) = model.forward(&x).unwrap();
        let (extractor, classifier) = model.split();
        let f2 = extractor.forward(&x).unwrap();
        let l2 = classifier.forward(&f2).unwrap();
        assert_eq!(features, f2);
        assert_eq!(logits, l2);
        assert_eq!(features.shape(), &[3, 5]);
        assert_eq!(logits.shape(), &[3, 4]);
    }

    #[test]
    fn small_mlp_has_expected_param_count() {
        let model = ModelParams::small_mlp(&[784], 128, 10, false, 0);
        // 784*128 weights + 128 hidden biases + 128*10 classifier weights.
        assert_eq!(model.num_params(), 784 * 128 + 128 + 128 * 10);
        assert_eq!(model.feature_shape(), vec![128]);
        assert_eq!(model.num_classes(), 10);
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let a = ModelParams::small_mlp(&[20], 8, 4, false, 7);
        let b = ModelParams::small_mlp(&[20], 8, 4, false, 7);
        let c = ModelParams::small_mlp(&[20], 8, 4, false, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 1.0 / (20.0 as Scalar).sqrt();
        for &v in a.layers()[1].weight.as_ref().unwrap().data() {
            assert!(v.abs() <= bound);
        }
        // Hidden bias starts at zero.
        assert!(a.layers()[1].bias.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn boundary_out_of_range_is_rejected() {
        let layers = vec![Layer {
            spec: LayerSpec::Linear { in_dim: 2, out_dim: 2, bias: false },
            weight: Some(Tensor::zeros(vec![2, 2])),
            bias: None,
        }];
        let err = ModelParams::from_parts(layers, 5, vec![2]).unwrap_err();
        assert!(matches!(err, NnError::BoundaryOutOfRange { boundary: 5, n_layers: 1 }));
    }

    #[test]
    fn shape_mismatch_error_names_layer() {
        let model = ModelParams::small_mlp(&[6], 5, 4, false, 1);
        let x = Tensor::new(vec![2, 7], vec![0.0; 14]);
        match model.forward(&x).unwrap_err() {
            NnError::ShapeMismatch { layer, .. } => assert_eq!(layer, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn small_cnn_composes_on_mnist_dims() {
        let model = ModelParams::small_cnn(1, 28, 28, 32, 10, false, 3).unwrap();
        let x = Tensor::zeros(vec![2, 1, 28, 28]);
        let (features, logits) = model.forward(&x).unwrap();
        assert_eq!(features.shape(), &[2, 32]);
        assert_eq!(logits.shape(), &[2, 10]);
    }
}
