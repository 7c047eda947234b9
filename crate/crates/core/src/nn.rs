//! Named parameter storage and the small layer set the toy networks are built from.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// An ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replace the value of the parameter called `name`, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if value.shape() != self.values[i].shape() {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.values[i].shape(),
                value.shape()
            )));
        }
        self.values[i] = value;
        Ok(())
    }

    /// Place every parameter on `g`, as gradient leaves or as constants.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// A [`ParamSet`] placed on a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// He-normal initialised tensor with the given fan-in.
pub fn he_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    He,
    Zero,
}

/// Convolution with per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    c_in: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: InitKind,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [c_out, c_in, k, k];
        let w = match init {
            InitKind::He => he_normal(&shape, c_in * k * k, 1.0, rng),
            InitKind::Zero => Tensor::zeros(&shape),
        };
        let weight = ps.add(format!("{name}.weight"), w);
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv { weight, bias, stride, c_in }
    }

    pub fn in_channels(&self) -> usize {
        self.c_in
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d_strided(x, p.var(self.weight), self.stride)?;
        g.channel_bias(y, p.var(self.bias))
    }
}

/// Dense layer on row vectors `[1, in] → [1, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, init: InitKind, rng: &mut impl Rng) -> Self {
        let w = match init {
            InitKind::He => he_normal(&[d_in, d_out], d_in, 1.0, rng),
            InitKind::Zero => Tensor::zeros(&[d_in, d_out]),
        };
        let weight = ps.add(format!("{name}.weight"), w);
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out]));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add(y, p.var(self.bias))
    }
}

/// Two-layer perceptron with a SiLU hidden activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    hidden: Linear,
    out: Linear,
    d_in: usize,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        out_init: InitKind,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = Linear::new(ps, &format!("{name}.0"), d_in, d_hidden, InitKind::He, rng);
        let out = Linear::new(ps, &format!("{name}.1"), d_hidden, d_out, out_init, rng);
        Mlp { hidden, out, d_in }
    }

    /// `x` is any tensor with `d_in` elements; output is `[1, d_out]`.
    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let n: usize = g.shape(x).iter().product();
        if n != self.d_in {
            return Err(Error::shape(format!("mlp expects {} inputs, got {n}", self.d_in)));
        }
        let x = g.reshape(x, &[1, self.d_in])?;
        let h = g.silu(self.hidden.forward(g, p, x)?);
        self.out.forward(g, p, h)
    }
}
