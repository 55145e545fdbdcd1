//! Parameter storage and the handful of layers the models are built from.
//!
//! Layers only hold [`ParamId`]s; the tensors live in a [`ParamSet`] which is
//! bound to a fresh [`Tape`] for every forward pass.

use rand::Rng;

use crate::{Float, Gradients, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), values: self.values.iter().map(|v| v.cast()).collect() }
    }

    /// Replace all values, keeping names. Shapes must match.
    pub fn assign(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(TensorError::contract("assign", format!("{} tensors for {} parameters", values.len(), self.values.len())));
        }
        for ((name, old), new) in self.names.iter().zip(&self.values).zip(&values) {
            if old.shape() != new.shape() {
                return Err(TensorError::shape("assign", format!("parameter {name}: {:?} vs {:?}", old.shape(), new.shape())));
            }
        }
        self.values = values;
        Ok(())
    }

    /// Place every parameter on `tape`, as gradient-tracked leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect() }
    }
}

/// Parameters placed on one tape.
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Float> Bound<'t, T> {
    /// Bind explicit vars, e.g. to swap one parameter for a probe leaf.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Gradient per parameter, zeros where the loss did not reach it.
    pub fn grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

fn uniform<T: Float>(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

/// He-uniform bound for a ReLU layer with the given fan-in.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = params.add(
            format!("{name}.weight"),
            uniform(vec![out_channels, in_channels, kernel, kernel], he_bound(fan_in), rng),
        );
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels])));
        Self { weight, bias, stride, padding }
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.conv2d(p.var(self.weight), self.stride, self.padding)?;
        match self.bias {
            Some(b) => add_channel_bias(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        // Each output pixel receives roughly in_channels * (kernel/stride)^2 taps.
        let taps = (kernel / stride.max(1)).max(1);
        let fan_in = in_channels * taps * taps;
        let weight = params.add(
            format!("{name}.weight"),
            uniform(vec![in_channels, out_channels, kernel, kernel], he_bound(fan_in), rng),
        );
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels])));
        Self { weight, bias, stride, padding }
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.conv_transpose2d(p.var(self.weight), self.stride, self.padding)?;
        match self.bias {
            Some(b) => add_channel_bias(y, p.var(b)),
            None => Ok(y),
        }
    }
}

fn add_channel_bias<'t, T: Float>(y: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    let c = bias.numel();
    y.add(bias.reshape(&[1, c, 1, 1])?)
}

/// Fully connected layer on `[N, in]` rows.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Float>(params: &mut ParamSet<T>, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / inputs.max(1) as f64).sqrt() * 3f64.sqrt();
        let weight = params.add(format!("{name}.weight"), uniform(vec![inputs, outputs], bound, rng));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(vec![outputs]));
        Self { weight, bias }
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(p.var(self.weight))?.add(p.var(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Instance,
    Batch,
}

/// Normalization with a learned per-channel scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Float>(params: &mut ParamSet<T>, name: &str, kind: NormKind, channels: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Tensor::ones(vec![channels]));
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        Self { kind, gamma, beta }
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.kind {
            NormKind::Instance => x.instance_norm(p.var(self.gamma), p.var(self.beta), Self::EPS),
            NormKind::Batch => x.batch_norm(p.var(self.gamma), p.var(self.beta), Self::EPS),
        }
    }
}
