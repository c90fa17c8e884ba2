//! Parameterised layers. Each layer owns its tensors and binds them to a
//! [`Graph`] under stable names on every forward pass.

use crate::error::Result;
use crate::ops::Conv2dSpec;
use crate::seed::rng_for;
use crate::tensor::{Graph, Tensor, Var};

/// Fan-in scaled uniform bound, `sqrt(6 / fan_in)`.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub spec: Conv2dSpec,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    /// Weights drawn from the layer's own stream (seed, name); zero bias.
    pub fn init(name: impl Into<String>, spec: Conv2dSpec, seed: u64) -> Self {
        let name = name.into();
        let mut rng = rng_for(seed, &name);
        let weight = Tensor::uniform(spec.weight_shape(), init_bound(spec.fan_in()), &mut rng);
        Self {
            name,
            spec,
            weight,
            bias: Tensor::zeros([spec.out_channels]),
        }
    }

    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let w = g.param(format!("{}.weight", self.name), self.weight.clone())?;
        let b = g.param(format!("{}.bias", self.name), self.bias.clone())?;
        g.conv2d(input, w, b, self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub(crate) fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{}.weight", self.name), &self.weight));
        out.push((format!("{}.bias", self.name), &self.bias));
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{}.weight", self.name), &mut self.weight));
        out.push((format!("{}.bias", self.name), &mut self.bias));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn init(name: impl Into<String>, inputs: usize, outputs: usize, seed: u64) -> Self {
        let name = name.into();
        let mut rng = rng_for(seed, &name);
        Self {
            weight: Tensor::uniform([outputs, inputs], init_bound(inputs), &mut rng),
            bias: Tensor::zeros([outputs]),
            name,
        }
    }

    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let w = g.param(format!("{}.weight", self.name), self.weight.clone())?;
        let b = g.param(format!("{}.bias", self.name), self.bias.clone())?;
        g.dense(input, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub(crate) fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{}.weight", self.name), &self.weight));
        out.push((format!("{}.bias", self.name), &self.bias));
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{}.weight", self.name), &mut self.weight));
        out.push((format!("{}.bias", self.name), &mut self.bias));
    }
}
