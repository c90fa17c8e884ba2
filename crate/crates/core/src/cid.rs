//! Spatial attention gate. Two 1x1 convolutions squeeze the channels
//! `C -> ceil(C/4) -> 1`; a sigmoid turns the single-channel result into a
//! per-pixel gate in `(0, 1)` that multiplies every input channel at that
//! pixel.

use crate::error::{Error, Result};
use crate::layer::ConvLayer;
use crate::ops::Conv2dSpec;
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CidParams {
    pub reduce: ConvLayer,
    pub project: ConvLayer,
}

/// Width of the squeeze layer: `max(1, ceil(channels / 4))`.
pub fn reduced_channels(channels: usize) -> usize {
    channels.div_ceil(4).max(1)
}

impl CidParams {
    pub fn init(name: &str, channels: usize, seed: u64) -> Self {
        let mid = reduced_channels(channels);
        Self {
            reduce: ConvLayer::init(format!("{name}.reduce"), Conv2dSpec::pointwise(channels, mid), seed),
            project: ConvLayer::init(format!("{name}.project"), Conv2dSpec::pointwise(mid, 1), seed),
        }
    }

    pub fn channels(&self) -> usize {
        self.reduce.spec.in_channels
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.project.param_count()
    }
}

/// Ratio of input to gate channels. With a single-channel gate this equals
/// the input channel count.
pub fn attention_factor(input_channels: usize, output_channels: usize) -> Result<f64> {
    if input_channels == 0 || output_channels == 0 {
        return Err(Error::InvalidArgument(format!(
            "channel counts must be positive, got {input_channels} and {output_channels}"
        )));
    }
    Ok(input_channels as f64 / output_channels as f64)
}

/// The `[N, 1, H, W]` gate for `input`.
pub fn attention_map(g: &mut Graph, input: Var, params: &CidParams) -> Result<Var> {
    let c = g.value(input).dims4()?[1];
    if c != params.channels() {
        return Err(Error::Shape(format!(
            "attention gate built for {} channels, input has {c}",
            params.channels()
        )));
    }
    let squeezed = params.reduce.forward(g, input)?;
    let squeezed = g.relu(squeezed)?;
    let logits = params.project.forward(g, squeezed)?;
    g.sigmoid(logits)
}

/// `input` gated by its own attention map; same shape as `input`.
pub fn cid_forward(g: &mut Graph, input: Var, params: &CidParams) -> Result<Var> {
    let gate = attention_map(g, input, params)?;
    g.gate_mul(input, gate)
}
