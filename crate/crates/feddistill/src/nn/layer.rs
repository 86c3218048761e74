//! Layer vocabulary and the forward/backward kernels shared by plain
//! evaluation and the autodiff tape.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Linear { in_dim: usize, out_dim: usize, bias: bool },
    Relu,
    /// Stride 1, no padding, square kernel.
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, bias: bool },
    /// Non-overlapping square windows; input height/width must be divisible.
    MaxPool2d { size: usize },
    Flatten,
}

/// Shape complaint raised while composing layers; the model layer attaches
/// the layer index.
#[derive(Debug, Clone)]
pub struct ShapeMismatch {
    pub expected: String,
    pub actual: String,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, ShapeMismatch> {
        let actual = || format!("{input:?}");
        match *self {
            LayerSpec::Linear { in_dim, out_dim, .. } => {
                if input == [in_dim] {
                    Ok(vec![out_dim])
                } else {
                    Err(ShapeMismatch { expected: format!("[{in_dim}]"), actual: actual() })
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                if input.len() == 3 && input[0] == in_channels && input[1] >= kernel && input[2] >= kernel {
                    Ok(vec![out_channels, input[1] - kernel + 1, input[2] - kernel + 1])
                } else {
                    Err(ShapeMismatch {
                        expected: format!("[{in_channels}, h>={kernel}, w>={kernel}]"),
                        actual: actual(),
                    })
                }
            }
            LayerSpec::MaxPool2d { size } => {
                if input.len() == 3 && size > 0 && input[1] % size == 0 && input[2] % size == 0 {
                    Ok(vec![input[0], input[1] / size, input[2] / size])
                } else {
                    Err(ShapeMismatch {
                        expected: format!("[c, h, w] with h and w divisible by {size}"),
                        actual: actual(),
                    })
                }
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn dot(a: &[Scalar], b: &[Scalar]) -> Scalar {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// y[b,o] = sum_i x[b,i] w[o,i] + bias[o]. Weight layout is [out, in].
pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (bsz, din) = x.dim2();
    let (dout, din_w) = w.dim2();
    assert_eq!(din, din_w, "linear input dim mismatch");
    let mut y = vec![0.0; bsz * dout];
    let xd = x.data();
    let wd = w.data();
    for bi in 0..bsz {
        let xrow = &xd[bi * din..(bi + 1) * din];
        let yrow = &mut y[bi * dout..(bi + 1) * dout];
        for o in 0..dout {
            yrow[o] = dot(xrow, &wd[o * din..(o + 1) * din]);
        }
        if let Some(b) = b {
            for (yo, bo) in yrow.iter_mut().zip(b.data()) {
                *yo += bo;
            }
        }
    }
    Tensor::new(vec![bsz, dout], y)
}

/// Gradients of the linear kernel: (dx, dw, db).
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor, want_bias: bool) -> (Tensor, Tensor, Option<Tensor>) {
    let (bsz, din) = x.dim2();
    let (dout, _) = w.dim2();
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; bsz * din];
    let mut dw = vec![0.0; dout * din];
    let mut db = vec![0.0; dout];
    for bi in 0..bsz {
        let dyrow = &dyd[bi * dout..(bi + 1) * dout];
        let xrow = &xd[bi * din..(bi + 1) * din];
        let dxrow = &mut dx[bi * din..(bi + 1) * din];
        for o in 0..dout
        {
            let g = dyrow[o];
            if g == 0.0 {
                continue;
            }
            let wrow = &wd[o * din..(o + 1) * din];
            for i in 0..din {
                dxrow[i] += g * wrow[i];
            }
            let dwrow = &mut dw[o * din..(o + 1) * din];
            for i in 0..din {
                dwrow[i] += g * xrow[i];
            }
            db[o] += g;
        }
    }
    (
        Tensor::new(vec![bsz, din], dx),
        Tensor::new(vec![dout, din], dw),
        want_bias.then(|| Tensor::new(vec![dout], db)),
    )
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    assert_eq!(x.shape(), dy.shape());
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Valid cross-correlation, stride 1. x is [B,C,H,W], w is [O,C,K,K].
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (bsz, cin, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (h - k + 1, win - k + 1);
    let mut y = vec![0.0; bsz * cout * oh * ow];
    let xd = x.data();
    let wd = w.data();
    for bi in 0..bsz {
        for o in 0..cout {
            let bias = b.map_or(0.0, |b| b.data()[o]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for c in 0..cin {
                        for ky in 0..k {
                            let xoff = ((bi * cin + c) * h + oy + ky) * win + ox;
                            let woff = ((o * cin + c) * k + ky) * k;
                            acc += dot(&xd[xoff..xoff + k], &wd[woff..woff + k]);
                        }
                    }
                    y[((bi * cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![bsz, cout, oh, ow], y)
}

pub fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, want_bias: bool) -> (Tensor, Tensor, Option<Tensor>) {
    let (bsz, cin, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; cout];
    for bi in 0..bsz {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dyd[((bi * cout + o) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    for c in 0..cin {
                        for ky in 0..k {
                            let xoff = ((bi * cin + c) * h + oy + ky) * win + ox;
                            let woff = ((o * cin + c) * k + ky) * k;
                            for kx in 0..k {
                                dx[xoff + kx] += g * wd[woff + kx];
                                dw[woff + kx] += g * xd[xoff + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx),
        Tensor::new(w.shape().to_vec(), dw),
        want_bias.then(|| Tensor::new(vec![cout], db)),
    )
}

/// Returns the pooled tensor and, per output element, the flat source index
/// that won the window (ties go to the first scanned element).
pub fn maxpool_forward(x: &Tensor, size: usize) -> (Tensor, Vec<usize>) {
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / size, w / size);
    let xd = x.data();
    let mut y = vec![0.0; bsz * c * oh * ow];
    let mut switches = vec![0usize; y.len()];
    for bi in 0..bsz {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = Scalar::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..size {
                        for kx in 0..size {
                            let idx = ((bi * c + ci) * h + oy * size + ky) * w + ox * size + kx;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let out = ((bi * c + ci) * oh + oy) * ow + ox;
                    y[out] = best;
                    switches[out] = best_idx;
                }
            }
        }
    }
    (Tensor::new(vec![bsz, c, oh, ow], y), switches)
}

pub fn maxpool_backward(input_shape: &[usize], switches: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = vec![0.0; input_shape.iter().product()];
    for (out_idx, &src) in switches.iter().enumerate() {
        dx[src] += dy.data()[out_idx];
    }
    Tensor::new(input_shape.to_vec(), dx)
}
