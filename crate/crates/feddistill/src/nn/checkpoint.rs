//! Flat binary model checkpoints. Layout, all little-endian:
//! magic, input shape, layer count + classifier boundary, a layer table,
//! then each parameter tensor as (rank, dims, f64 data). Data is written as
//! f64 regardless of the crate scalar type.

use std::fs;
use std::path::Path;

use super::layer::LayerSpec;
use super::model::{Layer, ModelParams};
use super::NnError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: [u8; 8] = *b"FDCKPT01";

const TAG_LINEAR: u8 = 0;
const TAG_RELU: u8 = 1;
const TAG_CONV2D: u8 = 2;
const TAG_MAXPOOL2D: u8 = 3;
const TAG_FLATTEN: u8 = 4;

pub fn checkpoint_bytes(model: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    write_shape(&mut out, model.input_shape());
    write_u32(&mut out, model.layers().len() as u32);
    write_u32(&mut out, model.classifier_boundary() as u32);
    for layer in model.layers() {
        match layer.spec {
            LayerSpec::Linear { in_dim, out_dim, bias } => {
                out.push(TAG_LINEAR);
                write_u32(&mut out, in_dim as u32);
                write_u32(&mut out, out_dim as u32);
                out.push(bias as u8);
            }
            LayerSpec::Relu => out.push(TAG_RELU),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, bias } => {
                out.push(TAG_CONV2D);
                write_u32(&mut out, in_channels as u32);
                write_u32(&mut out, out_channels as u32);
                write_u32(&mut out, kernel as u32);
                out.push(bias as u8);
            }
            LayerSpec::MaxPool2d { size } => {
                out.push(TAG_MAXPOOL2D);
                write_u32(&mut out, size as u32);
            }
            LayerSpec::Flatten => out.push(TAG_FLATTEN),
        }
    }
    for layer in model.layers() {
        for tensor in [&layer.weight, &layer.bias].into_iter().flatten() {
            write_shape(&mut out, tensor.shape());
            for &v in tensor.data() {
                // Disk format stays f64 under the f32 feature.
                #[allow(clippy::unnecessary_cast)]
                out.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
    }
    out
}

pub fn save_model(model: &ModelParams, path: &Path) -> Result<(), NnError> {
    fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelParams, NnError> {
    parse_model(&fs::read(path)?)
}

pub fn parse_model(bytes: &[u8]) -> Result<ModelParams, NnError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        let mut found = [0u8; 8];
        found.copy_from_slice(magic);
        return Err(NnError::BadMagic { found });
    }
    let input_shape = r.shape()?;
    let n_layers = r.u32()? as usize;
    let boundary = r.u32()? as usize;
    if n_layers > 1024 {
        return Err(r.corrupt(format!("implausible layer count {n_layers}")));
    }
    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let tag = r.u8()?;
        specs.push(match tag {
            TAG_LINEAR => {
                let in_dim = r.u32()? as usize;
                let out_dim = r.u32()? as usize;
                let bias = r.bool()?;
                LayerSpec::Linear { in_dim, out_dim, bias }
            }
            TAG_RELU => LayerSpec::Relu,
            TAG_CONV2D => {
                let in_channels = r.u32()? as usize;
                let out_channels = r.u32()? as usize;
                let kernel = r.u32()? as usize;
                let bias = r.bool()?;
                LayerSpec::Conv2d { in_channels, out_channels, kernel, bias }
            }
            TAG_MAXPOOL2D => LayerSpec::MaxPool2d { size: r.u32()? as usize },
            TAG_FLATTEN => LayerSpec::Flatten,
            other => return Err(r.corrupt(format!("unknown layer tag {other}"))),
        });
    }
    let mut layers = Vec::with_capacity(n_layers);
    for spec in specs {
        let (weight, bias) = match spec {
            LayerSpec::Linear { bias, .. } | LayerSpec::Conv2d { bias, .. } => {
                let w = r.tensor()?;
                let b = if bias { Some(r.tensor()?) } else { None };
                (Some(w), b)
            }
            _ => (None, None),
        };
        layers.push(Layer { spec, weight, bias });
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    ModelParams::from_parts(layers, boundary, input_shape)
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_shape(out: &mut Vec<u8>, shape: &[usize]) {
    write_u32(out, shape.len() as u32);
    for &d in shape {
        write_u32(out, d as u32);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Truncated { offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn bool(&mut self) -> Result<bool, NnError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(self.corrupt(format!("bad bool byte {other}"))),
        }
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn shape(&mut self) -> Result<Vec<usize>, NnError> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(self.corrupt(format!("implausible tensor rank {ndim}")));
        }
        (0..ndim).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn tensor(&mut self) -> Result<Tensor, NnError> {
        let shape = self.shape()?;
        let n: usize = shape.iter().product();
        if n > (1 << 28) {
            return Err(self.corrupt(format!("implausible tensor size {n}")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = self.f64()?;
            if !v.is_finite() {
                return Err(self.corrupt(format!("non-finite value {v}")));
            }
            data.push(v as Scalar);
        }
        Ok(Tensor::new(shape, data))
    }

    fn corrupt(&self, detail: String) -> NnError {
        NnError::Corrupt { offset: self.pos, detail }
    }
}
