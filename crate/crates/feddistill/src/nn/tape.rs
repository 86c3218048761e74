//! Reverse-mode autodiff over a flat, topologically ordered operation tape.
//! Values are computed eagerly at record time; `backward` walks the tape once
//! in reverse. Gradients only reach leaves recorded as parameters.

use super::layer::{
    conv2d_backward, conv2d_forward, linear_backward, linear_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_forward, LayerSpec,
};
use super::model::ModelParams;
use super::{softmax_row_into, NnError};
use crate::scalar::{Scalar, LOG_EPS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Relu { x: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId> },
    MaxPool2d { x: NodeId, switches: Vec<usize> },
    Flatten { x: NodeId },
    SoftmaxRows { x: NodeId, temperature: Scalar },
    GatherTrue { x: NodeId, labels: Vec<usize> },
    OneMinus { x: NodeId },
    /// y[b,i] = x[b,i] / max(d[b], eps); the clamped denominator is what gets
    /// differentiated, and a clamped row passes no gradient to `d`.
    DivByCol { x: NodeId, d: NodeId },
    /// y = ln(max(x, eps)); zero gradient where the clamp is active.
    LogClamped { x: NodeId },
    Mul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    SumRows { x: NodeId },
    Scale { x: NodeId, k: Scalar },
    MeanAll { x: NodeId },
    /// Scalar 0.5 * sum((x - target)^2) against a constant target.
    SqDiffHalf { x: NodeId, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to `id`, if any
    /// flowed there.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let value = linear_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| &self.nodes[b.0].value),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.needs(&inputs);
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = relu_forward(&self.nodes[x.0].value);
        let rg = self.needs(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let value = conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| &self.nodes[b.0].value),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.needs(&inputs);
        self.push(value, Op::Conv2d { x, w, b }, rg)
    }

    pub fn maxpool2d(&mut self, x: NodeId, size: usize) -> NodeId {
        let (value, switches) = maxpool_forward(&self.nodes[x.0].value, size);
        let rg = self.needs(&[x]);
        self.push(value, Op::MaxPool2d { x, switches }, rg)
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let batch = v.shape()[0];
        let rest: usize = v.shape()[1..].iter().product();
        let value = v.reshaped(vec![batch, rest]);
        let rg = self.needs(&[x]);
        self.push(value, Op::Flatten { x }, rg)
    }

    pub fn softmax_rows(&mut self, x: NodeId, temperature: Scalar) -> Result<NodeId, NnError> {
        if !(temperature > 0.0) {
            return Err(NnError::InvalidTemperature { value: temperature });
        }
        let v = &self.nodes[x.0].value;
        let (rows, cols) = v.dim2();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_row_into(&v.data()[r * cols..(r + 1) * cols], temperature, &mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(vec![rows, cols], out);
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::SoftmaxRows { x, temperature }, rg))
    }

    /// y[b] = x[b, labels[b]].
    pub fn gather_true(&mut self, x: NodeId, labels: &[usize]) -> Result<NodeId, NnError> {
        let v = &self.nodes[x.0].value;
        let (rows, cols) = v.dim2();
        assert_eq!(rows, labels.len(), "batch size / label count mismatch");
        let mut out = vec![0.0; rows];
        for (r, &label) in labels.iter().enumerate() {
            if label >= cols {
                return Err(NnError::LabelOutOfRange { label, num_classes: cols });
            }
            out[r] = v.data()[r * cols + label];
        }
        let value = Tensor::new(vec![rows], out);
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::GatherTrue { x, labels: labels.to_vec() }, rg))
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| 1.0 - v);
        let rg = self.needs(&[x]);
        self.push(value, Op::OneMinus { x }, rg)
    }

    pub fn div_by_col(&mut self, x: NodeId, d: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let dv = &self.nodes[d.0].value;
        let (rows, cols) = xv.dim2();
        assert_eq!(dv.shape(), [rows], "denominator must be one value per row");
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let denom = dv.data()[r].max(LOG_EPS);
            for c in 0..cols {
                out[r * cols + c] = xv.data()[r * cols + c] / denom;
            }
        }
        let value = Tensor::new(vec![rows, cols], out);
        let rg = self.needs(&[x, d]);
        self.push(value, Op::DivByCol { x, d }, rg)
    }

    pub fn log_clamped(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v.max(LOG_EPS).ln());
        let rg = self.needs(&[x]);
        self.push(value, Op::LogClamped { x }, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "elementwise mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Mul { a, b }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "elementwise add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Add { a, b }, rg)
    }

    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let (rows, cols) = v.dim2();
        let data = (0..rows)
            .map(|r| v.data()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let value = Tensor::new(vec![rows], data);
        let rg = self.needs(&[x]);
        self.push(value, Op::SumRows { x }, rg)
    }

    pub fn scale(&mut self, x: NodeId, k: Scalar) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| k * v);
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale { x, k }, rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let mean = v.data().iter().sum::<Scalar>() / v.len() as Scalar;
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(mean), Op::MeanAll { x }, rg)
    }

    pub fn sq_diff_half(&mut self, x: NodeId, target: Tensor) -> NodeId {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.shape(), target.shape(), "sq_diff_half shape mismatch");
        let s: Scalar = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(0.5 * s), Op::SqDiffHalf { x, target }, rg)
    }

    /// Accumulates d(loss)/d(node) for every node that influences `loss`.
    /// The loss must be a scalar.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NnError> {
        let shape = self.nodes[loss.0].value.shape();
        if shape != [1] {
            return Err(NnError::NonScalarLoss { shape: shape.to_vec() });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else { continue };
            propagate(&self.nodes, &mut self.grads, i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Tensor>], i: usize, dy: &Tensor) {
    macro_rules! value {
        ($id:expr) => {
            &nodes[$id.0].value
        };
    }
    macro_rules! accum {
        ($id:expr, $delta:expr) => {
            accum_into(nodes, grads, $id, $delta)
        };
    }
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let (x, w, b) = (*x, *w, *b);
            let (dx, dw, db) = linear_backward(value!(x), value!(w), dy, b.is_some());
            accum!(x, dx);
            accum!(w, dw);
            if let (Some(b), Some(db)) = (b, db) {
                accum!(b, db);
            }
        }
        Op::Relu { x } => {
            let dx = relu_backward(value!(*x), dy);
            accum!(*x, dx);
        }
        Op::Conv2d { x, w, b } => {
            let (x, w, b) = (*x, *w, *b);
            let (dx, dw, db) = conv2d_backward(value!(x), value!(w), dy, b.is_some());
            accum!(x, dx);
            accum!(w, dw);
            if let (Some(b), Some(db)) = (b, db) {
                accum!(b, db);
            }
        }
        Op::MaxPool2d { x, switches } => {
            let dx = maxpool_backward(value!(*x).shape(), switches, dy);
            accum!(*x, dx);
        }
        Op::Flatten { x } => {
            let dx = dy.reshaped(value!(*x).shape().to_vec());
            accum!(*x, dx);
        }
        Op::SoftmaxRows { x, temperature } => {
            let tau = *temperature;
            let y = &nodes[i].value;
            let (rows, cols) = y.dim2();
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let yrow = &y.data()[r * cols..(r + 1) * cols];
                let dyrow = &dy.data()[r * cols..(r + 1) * cols];
                let inner: Scalar = yrow.iter().zip(dyrow).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    dx[r * cols + c] = (dyrow[c] - inner) * yrow[c] / tau;
                }
            }
            accum!(*x, Tensor::new(vec![rows, cols], dx));
        }
        Op::GatherTrue { x, labels } => {
            let (rows, cols) = value!(*x).dim2();
            let mut dx = vec![0.0; rows * cols];
            for (r, &label) in labels.iter().enumerate() {
                dx[r * cols + label] += dy.data()[r];
            }
            accum!(*x, Tensor::new(vec![rows, cols], dx));
        }
        Op::OneMinus { x } => {
            accum!(*x, dy.map(|v| -v));
        }
        Op::DivByCol { x, d } => {
            let (x, d) = (*x, *d);
            let y = &nodes[i].value;
            let dv = value!(d);
            let (rows, cols) = y.dim2();
            let mut dx = vec![0.0; rows * cols];
            let mut dd = vec![0.0; rows];
            for r in 0..rows {
                let denom_raw = dv.data()[r];
                let denom = denom_raw.max(LOG_EPS);
                let dyrow = &dy.data()[r * cols..(r + 1) * cols];
                let yrow = &y.data()[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    dx[r * cols + c] = dyrow[c] / denom;
                }
                if denom_raw > LOG_EPS {
                    dd[r] = -dyrow.iter().zip(yrow).map(|(a, b)| a * b).sum::<Scalar>() / denom;
                }
            }
            accum!(x, Tensor::new(vec![rows, cols], dx));
            accum!(d, Tensor::new(vec![rows], dd));
        }
        Op::LogClamped { x } => {
            let xv = value!(*x);
            let data = xv
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&v, &g)| if v > LOG_EPS { g / v } else { 0.0 })
                .collect();
            accum!(*x, Tensor::new(xv.shape().to_vec(), data));
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            let da_data: Vec<Scalar> =
                dy.data().iter().zip(value!(b).data()).map(|(g, v)| g * v).collect();
            let db_data: Vec<Scalar> =
                dy.data().iter().zip(value!(a).data()).map(|(g, v)| g * v).collect();
            accum!(a, Tensor::new(dy.shape().to_vec(), da_data));
            accum!(b, Tensor::new(dy.shape().to_vec(), db_data));
        }
        Op::Add { a, b } => {
            let (a, b) = (*a, *b);
            accum!(a, dy.clone());
            accum!(b, dy.clone());
        }
        Op::SumRows { x } => {
            let (rows, cols) = value!(*x).dim2();
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let g = dy.data()[r];
                for c in 0..cols {
                    dx[r * cols + c] = g;
                }
            }
            accum!(*x, Tensor::new(vec![rows, cols], dx));
        }
        Op::Scale { x, k } => {
            accum!(*x, dy.map(|v| *k * v));
        }
        Op::MeanAll { x } => {
            let n = value!(*x).len() as Scalar;
            let g = dy.as_scalar() / n;
            let shape = value!(*x).shape().to_vec();
            let count = shape.iter().product();
            accum!(*x, Tensor::new(shape, vec![g; count]));
        }
        Op::SqDiffHalf { x, target } => {
            let g = dy.as_scalar();
            let data: Vec<Scalar> = value!(*x)
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| g * (a - b))
                .collect();
            accum!(*x, Tensor::new(target.shape().to_vec(), data));
        }
    }
}

fn accum_into(nodes: &[Node], grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    if !nodes[id.0].requires_grad {
        return;
    }
    match &mut grads[id.0] {
        Some(g) => {
            for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                *gv += dv;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// A model whose parameters live on a tape, either as trainable leaves or as
/// frozen constants.
pub struct TapedModel {
    entries: Vec<TapedLayer>,
    boundary: usize,
}

struct TapedLayer {
    spec: LayerSpec,
    weight: Option<NodeId>,
    bias: Option<NodeId>,
}

/// Binds pre-recorded leaf nodes, in `ModelParams::param_tensors` order, to
/// a model's layer structure. The leaves' values are used in place of the
/// model's own tensors.
pub fn taped_from_leaves(model: &ModelParams, ids: &[NodeId]) -> TapedModel {
    let mut next = ids.iter().copied();
    let entries = model
        .layers()
        .iter()
        .map(|layer| TapedLayer {
            spec: layer.spec.clone(),
            weight: layer.weight.as_ref().map(|_| next.next().expect("leaf id per weight")),
            bias: layer.bias.as_ref().map(|_| next.next().expect("leaf id per bias")),
        })
        .collect();
    assert!(next.next().is_none(), "more leaf ids than model parameters");
    TapedModel { entries, boundary: model.classifier_boundary() }
}

pub fn record_model(tape: &mut Tape, model: &ModelParams, trainable: bool) -> TapedModel {
    let entries = model
        .layers()
        .iter()
        .map(|layer| {
            let mut record = |t: &Option<Tensor>| {
                t.as_ref().map(|t| {
                    if trainable {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
            };
            TapedLayer { spec: layer.spec.clone(), weight: record(&layer.weight), bias: record(&layer.bias) }
        })
        .collect();
    TapedModel { entries, boundary: model.classifier_boundary() }
}

impl TapedModel {
    fn run(&self, tape: &mut Tape, mut cur: NodeId, range: std::ops::Range<usize>) -> Result<NodeId, NnError> {
        for idx in range {
            let entry = &self.entries[idx];
            let sample_shape = &tape.value(cur).shape()[1..];
            entry.spec.output_shape(sample_shape).map_err(|e| NnError::ShapeMismatch {
                layer: idx,
                expected: e.expected,
                actual: e.actual,
            })?;
            cur = match &entry.spec {
                LayerSpec::Linear { .. } => tape.linear(cur, entry.weight.unwrap(), entry.bias),
                LayerSpec::Relu => tape.relu(cur),
                LayerSpec::Conv2d { .. } => tape.conv2d(cur, entry.weight.unwrap(), entry.bias),
                LayerSpec::MaxPool2d { size } => tape.maxpool2d(cur, *size),
                LayerSpec::Flatten => tape.flatten(cur),
            };
        }
        Ok(cur)
    }

    pub fn forward_extractor(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, NnError> {
        self.run(tape, x, 0..self.boundary)
    }

    pub fn forward_classifier(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId, NnError> {
        self.run(tape, features, self.boundary..self.entries.len())
    }

    /// (features, logits).
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId), NnError> {
        let features = self.forward_extractor(tape, x)?;
        let logits = self.forward_classifier(tape, features)?;
        Ok((features, logits))
    }

    /// Parameter leaf nodes in `ModelParams::param_tensors` order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.entries.iter().flat_map(|e| [e.weight, e.bias]).flatten().collect()
    }

    /// Gradients in the same order as `ModelParams::param_tensors`.
    pub fn param_grads<'t>(&self, tape: &'t Tape) -> Vec<Option<&'t Tensor>> {
        self.entries
            .iter()
            .flat_map(|e| [e.weight, e.bias])
            .flatten()
            .map(|id| tape.grad(id))
            .collect()
    }
}

/// Worst relative error between tape gradients and central finite differences
/// of the same scalar function.
pub struct GradcheckReport {
    pub max_rel_err: Scalar,
    pub worst_param: usize,
    pub worst_coord: usize,
}

/// `build` must construct the same scalar loss from the given leaves every
/// time it is called.
pub fn finite_diff_check(
    params: &[Tensor],
    step: Scalar,
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId, NnError>,
) -> Result<GradcheckReport, NnError> {
    let eval = |values: &[Tensor]| -> Result<Scalar, NnError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).as_scalar())
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;

    let mut report = GradcheckReport { max_rel_err: 0.0, worst_param: 0, worst_coord: 0 };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = tape.grad(ids[pi]).cloned().unwrap_or_else(|| Tensor::zeros(param.shape().to_vec()));
        for ci in 0..param.len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[ci];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = pi;
                report.worst_coord = ci;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::cross_entropy_mean;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: Vec<usize>, scale: Scalar, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(vec![2, 2]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(NnError::NonScalarLoss { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]));
        let p = tape.param(Tensor::new(vec![2], vec![3.0, 4.0]));
        let prod = tape.mul(c, p);
        let loss = tape.mean_all(prod);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        let g = tape.grad(p).unwrap();
        assert!((g.data()[0] - 0.5).abs() < 1e-12);
        assert!((g.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_of_constants_only_leaves_params_untouched() {
        let mut tape = Tape::new();
        let _p = tape.param(Tensor::new(vec![2], vec![1.0, 1.0]));
        let c = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let loss = tape.mean_all(c);
        tape.backward(loss).unwrap();
        assert!(tape.grad(_p).is_none());
        assert_eq!(tape.value(loss).as_scalar(), 2.0);
    }

    #[test]
    fn linear_softmax_ce_gradient_has_analytic_structure() {
        // For logits w_c . x (no bias), d(-log q_y)/dw_y = (q_y - 1) x and
        // d/dw_c = q_c x for c != y.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(vec![1, 4], 1.0, &mut rng);
        let w = randn(vec![3, 4], 0.5, &mut rng);
        let labels = vec![2usize];

        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let wid = tape.param(w.clone());
        let logits = tape.linear(xid, wid, None);
        let probs = tape.softmax_rows(logits, 1.0).unwrap();
        let picked = tape.gather_true(probs, &labels).unwrap();
        let lg = tape.log_clamped(picked);
        let neg = tape.scale(lg, -1.0);
        let loss = tape.mean_all(neg);
        tape.backward(loss).unwrap();

        let q = tape.value(probs).data().to_vec();
        let g = tape.grad(wid).unwrap();
        for c in 0..3 {
            let expected_coeff = if c == labels[0] { q[c] - 1.0 } else { q[c] };
            for i in 0..4 {
                let expected = expected_coeff * x.data()[i];
                assert!(
                    (g.data()[c * 4 + i] - expected).abs() < 1e-10,
                    "class {c} coord {i}"
                );
            }
        }
    }

    #[test]
    fn mlp_cross_entropy_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w1 = randn(vec![6, 5], 0.4, &mut rng);
        let b1 = randn(vec![6], 0.1, &mut rng);
        let w2 = randn(vec![4, 6], 0.4, &mut rng);
        let x = randn(vec![3, 5], 1.0, &mut rng);
        let labels = vec![0usize, 3, 1];

        let report = finite_diff_check(&[w1, b1, w2], 1e-5, |tape, ids| {
            let xid = tape.constant(x.clone());
            let h = tape.linear(xid, ids[0], Some(ids[1]));
            let h = tape.relu(h);
            let logits = tape.linear(h, ids[2], None);
            let probs = tape.softmax_rows(logits, 1.0)?;
            let picked = tape.gather_true(probs, &labels)?;
            let lg = tape.log_clamped(picked);
            let neg = tape.scale(lg, -1.0);
            Ok(tape.mean_all(neg))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn conv_pool_pipeline_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = randn(vec![2, 1, 3, 3], 0.4, &mut rng);
        let b = randn(vec![2], 0.1, &mut rng);
        let wl = randn(vec![3, 8], 0.4, &mut rng);
        let x = randn(vec![2, 1, 6, 6], 1.0, &mut rng);
        let labels = vec![1usize, 2];

        let report = finite_diff_check(&[w, b, wl], 1e-5, |tape, ids| {
            let xid = tape.constant(x.clone());
            let c = tape.conv2d(xid, ids[0], Some(ids[1]));
            let c = tape.relu(c);
            let p = tape.maxpool2d(c, 2);
            let f = tape.flatten(p);
            let logits = tape.linear(f, ids[2], None);
            let probs = tape.softmax_rows(logits, 1.0)?;
            let picked = tape.gather_true(probs, &labels)?;
            let lg = tape.log_clamped(picked);
            let neg = tape.scale(lg, -1.0);
            Ok(tape.mean_all(neg))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn normalized_ratio_pipeline_matches_finite_differences() {
        // Exercises gather, one_minus, div_by_col, sum_rows, mul, add together.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = randn(vec![4, 3], 0.6, &mut rng);
        let x = randn(vec![2, 3], 1.0, &mut rng);
        let labels = vec![0usize, 2];
        let mask = Tensor::new(vec![2, 4], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);

        let report = finite_diff_check(&[w], 1e-6, |tape, ids| {
            let xid = tape.constant(x.clone());
            let logits = tape.linear(xid, ids[0], None);
            let probs = tape.softmax_rows(logits, 1.0)?;
            let qt = tape.gather_true(probs, &labels)?;
            let rest = tape.one_minus(qt);
            let ratios = tape.div_by_col(probs, rest);
            let mid = tape.constant(mask.clone());
            let masked = tape.mul(ratios, mid);
            let sums = tape.sum_rows(masked);
            let lg = tape.log_clamped(sums);
            Ok(tape.mean_all(lg))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn sq_diff_half_gradient_is_displacement() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let target = Tensor::new(vec![3], vec![0.5, 2.0, 4.0]);
        let loss = tape.sq_diff_half(p, target);
        tape.backward(loss).unwrap();
        let g = tape.grad(p).unwrap();
        assert_eq!(g.data(), &[0.5, 0.0, -1.0]);
        assert!((tape.value(loss).as_scalar() - 0.5 * (0.25 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn recorded_model_matches_plain_forward() {
        let model = ModelParams::small_mlp(&[5], 4, 3, false, 21);
        let x = Tensor::new(vec![2, 5], (0..10).map(|v| v as Scalar * 0.2 - 1.0).collect());
        let (features, logits) = model.forward(&x).unwrap();
        let mut tape = Tape::new();
        let taped = record_model(&mut tape, &model, true);
        let xid = tape.constant(x.clone());
        let (fid, lid) = taped.forward(&mut tape, xid).unwrap();
        assert_eq!(tape.value(fid), &features);
        assert_eq!(tape.value(lid), &logits);
    }

    #[test]
    fn frozen_model_params_get_no_gradients() {
        let model = ModelParams::small_mlp(&[5], 4, 3, false, 22);
        let x = Tensor::new(vec![2, 5], vec![0.1; 10]);
        let mut tape = Tape::new();
        let taped = record_model(&mut tape, &model, false);
        let xid = tape.constant(x);
        let (_, logits) = taped.forward(&mut tape, xid).unwrap();
        let probs = tape.softmax_rows(logits, 1.0).unwrap();
        let picked = tape.gather_true(probs, &[0, 1]).unwrap();
        let lg = tape.log_clamped(picked);
        let loss = tape.mean_all(lg);
        tape.backward(loss).unwrap();
        assert!(taped.param_grads(&tape).iter().all(|g| g.is_none()));
    }

    #[test]
    fn mean_of_cross_entropy_equals_pure_helper() {
        let model = ModelParams::small_mlp(&[4], 6, 3, false, 5);
        let x = Tensor::new(vec![3, 4], (0..12).map(|v| (v as Scalar).sin()).collect());
        let labels = [0usize, 2, 1];
        let (_, logits) = model.forward(&x).unwrap();
        let probs = crate::nn::softmax_rows(&logits, 1.0).unwrap();
        let pure = cross_entropy_mean(&probs, &labels).unwrap();

        let mut tape = Tape::new();
        let taped = record_model(&mut tape, &model, true);
        let xid = tape.constant(x);
        let (_, lid) = taped.forward(&mut tape, xid).unwrap();
        let pid = tape.softmax_rows(lid, 1.0).unwrap();
        let picked = tape.gather_true(pid, &labels).unwrap();
        let lg = tape.log_clamped(picked);
        let neg = tape.scale(lg, -1.0);
        let loss = tape.mean_all(neg);
        assert!((tape.value(loss).as_scalar() - pure).abs() < 1e-12);
    }
}
