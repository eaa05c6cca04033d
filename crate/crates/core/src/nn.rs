//! Minimal layers over candle tensors: convolution, batch normalization and
//! affine maps, each registering its variables in a named [`ParamSet`].

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state that is not a gradient target (running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub kind: ParamKind,
}

/// Ordered collection of named variables.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, var: Var, kind: ParamKind) -> Var {
        self.params.push(Param {
            name: name.into(),
            var: var.clone(),
            kind,
        });
        var
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.params.extend(other.params);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.kind == ParamKind::Trainable)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Snapshot of every variable, keyed by name.
    pub fn to_tensors(&self) -> Result<HashMap<String, Tensor>> {
        self.params
            .iter()
            .map(|p| Ok((p.name.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites variables from `tensors`. Every parameter must be present
    /// with a matching shape.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for p in &self.params {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint has no tensor `{}`", p.name)))?;
            if t.dims() != p.var.dims() {
                return Err(Error::Shape(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(p.var.dtype())?.to_device(p.var.device())?)?;
        }
        Ok(())
    }

    /// Sum of squared entries over all variables; used to compare snapshots.
    pub fn squared_distance(a: &HashMap<String, Tensor>, b: &HashMap<String, Tensor>) -> Result<f64> {
        let mut total = 0f64;
        for (k, ta) in a {
            let tb = b
                .get(k)
                .ok_or_else(|| Error::Config(format!("snapshot has no tensor `{k}`")))?;
            total += ta
                .to_dtype(DType::F64)?
                .sub(&tb.to_dtype(DType::F64)?)?
                .sqr()?
                .sum_all()?
                .to_scalar::<f64>()?;
        }
        Ok(total)
    }
}

/// Deterministic parameter initializer.
pub struct Initializer<'a, R: Rng> {
    pub rng: &'a mut R,
    pub device: Device,
}

impl<'a, R: Rng> Initializer<'a, R> {
    pub fn new(rng: &'a mut R, device: Device) -> Self {
        Self { rng, device }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0f32, std as f32).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f32> = (0..n).map(|_| dist.sample(self.rng)).collect();
        Ok(Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?)
    }

    pub fn constant(&self, shape: &[usize], value: f64) -> Result<Var> {
        let t = Tensor::ones(shape, DType::F32, &self.device)?.affine(value, 0.0)?;
        Ok(Var::from_tensor(&t)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// He (fan-out) normal initialization, no bias.
    pub fn new<R: Rng>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        init: &mut Initializer<'_, R>,
        params: &mut ParamSet,
    ) -> Result<Self> {
        let std = (2.0 / (out_ch * kernel * kernel) as f64).sqrt();
        let w = init.normal(&[out_ch, in_ch, kernel, kernel], std)?;
        let weight = params.push(format!("{name}.weight"), w, ParamKind::Trainable);
        Ok(Self {
            weight,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Batch normalization over the channel axis of `(B, C, H, W)` or `(B, C)`
/// inputs.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new<R: Rng>(
        name: &str,
        channels: usize,
        init: &mut Initializer<'_, R>,
        params: &mut ParamSet,
    ) -> Result<Self> {
        let gamma = params.push(
            format!("{name}.gamma"),
            init.constant(&[channels], 1.0)?,
            ParamKind::Trainable,
        );
        let beta = params.push(
            format!("{name}.beta"),
            init.constant(&[channels], 0.0)?,
            ParamKind::Trainable,
        );
        let running_mean = params.push(
            format!("{name}.running_mean"),
            init.constant(&[channels], 0.0)?,
            ParamKind::Buffer,
        );
        let running_var = params.push(
            format!("{name}.running_var"),
            init.constant(&[channels], 1.0)?,
            ParamKind::Buffer,
        );
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// In training mode normalizes with batch statistics and updates the
    /// running averages; otherwise uses the running averages.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let x4 = match dims.len() {
            4 => x.clone(),
            2 => x.reshape((dims[0], dims[1], 1, 1))?,
            n => return Err(Error::Shape(format!("batch norm expects rank 2 or 4, got {n}"))),
        };
        let c = x4.dim(1)?;
        let view = |t: &Tensor| t.reshape((1, c, 1, 1));
        let y = if train {
            let n = x4.dim(0)? * x4.dim(2)? * x4.dim(3)?;
            if n < 2 {
                return Err(Error::Shape(
                    "batch norm in training mode needs more than one value per channel".into(),
                ));
            }
            let mean = (x4.sum_keepdim((0, 2, 3))? / n as f64)?;
            let centered = x4.broadcast_sub(&mean)?;
            let var = (centered.sqr()?.sum_keepdim((0, 2, 3))? / n as f64)?;
            let xhat = centered.broadcast_div(&(var.clone() + self.eps)?.sqrt()?)?;

            let m = self.momentum;
            let batch_mean = mean.flatten_all()?.detach();
            let unbiased = (var.flatten_all()? * (n as f64 / (n - 1) as f64))?.detach();
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (batch_mean * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            xhat
        } else {
            let mean = view(self.running_mean.as_tensor())?;
            let std = view(&(self.running_var.as_tensor() + self.eps)?.sqrt()?)?;
            x4.broadcast_sub(&mean)?.broadcast_div(&std)?
        };
        let y = y
            .broadcast_mul(&view(self.gamma.as_tensor())?)?
            .broadcast_add(&view(self.beta.as_tensor())?)?;
        Ok(if dims.len() == 2 {
            y.reshape((dims[0], dims[1]))?
        } else {
            y
        })
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    /// Weights `N(0, 0.01^2)`, zero bias.
    pub fn new<R: Rng>(
        name: &str,
        in_features: usize,
        out_features: usize,
        init: &mut Initializer<'_, R>,
        params: &mut ParamSet,
    ) -> Result<Self> {
        let weight = params.push(
            format!("{name}.weight"),
            init.normal(&[out_features, in_features], 0.01)?,
            ParamKind::Trainable,
        );
        let bias = params.push(
            format!("{name}.bias"),
            init.constant(&[out_features], 0.0)?,
            ParamKind::Trainable,
        );
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.dim(1)? != self.in_features() {
            return Err(Error::DimMismatch {
                what: "linear input width",
                expected: self.in_features(),
                got: x.dims().last().copied().unwrap_or(0),
            });
        }
        Ok(x.matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Global average pooling `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean((2, 3))?)
}
