//! Deep spatial pyramid pooling: one atrous branch per backbone stage tap,
//! with each branch's rate proportional to the square root of its tap's
//! pixel count relative to the smallest tap.
//!
//! For taps `i` with resolution `H_i x W_i` and a minimum rate `alpha`,
//!
//! ```text
//! rate_i = alpha * sqrt((H_i * W_i) / (H_min * W_min))
//! ```
//!
//! so that `stride_i * rate_i` is the same for every tap of a halving
//! pyramid. Branch outputs are resized to the smallest tap, concatenated in
//! stage order and fused by a 1x1 convolution.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::layer::ConvLayer;
use crate::ops::Conv2dSpec;
use crate::tensor::{Graph, Var};

/// A backbone feature map feeding the pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageTap {
    pub stage_index: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Cumulative down-sampling factor relative to the network input.
    pub stride: usize,
}

impl StageTap {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateEntry {
    pub tap: StageTap,
    pub unrounded_rate: f64,
    pub rate: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateSchedule {
    pub alpha: usize,
    pub entries: Vec<RateEntry>,
    pub min_resolution: (usize, usize),
}

impl RateSchedule {
    pub fn rates(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.rate).collect()
    }

    /// `stage_index,H,W,stride,unrounded_rate,rate` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage_index,H,W,stride,unrounded_rate,rate\n");
        for e in &self.entries {
            let t = &e.tap;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                t.stage_index, t.height, t.width, t.stride, e.unrounded_rate, e.rate
            );
        }
        out
    }
}

/// Round half up, never below 1.
fn round_rate(r: f64) -> usize {
    ((r + 0.5).floor() as usize).max(1)
}

pub fn compute_rates(taps: &[StageTap], alpha: usize) -> Result<RateSchedule> {
    if taps.is_empty() {
        return Err(Error::InvalidArgument("rate schedule needs at least one tap".into()));
    }
    if alpha == 0 {
        return Err(Error::InvalidArgument("minimum atrous rate must be positive".into()));
    }
    if let Some(t) = taps.iter().find(|t| t.height == 0 || t.width == 0) {
        return Err(Error::InvalidArgument(format!(
            "tap {} has zero resolution",
            t.stage_index
        )));
    }
    let smallest = taps.iter().min_by_key(|t| t.pixels()).expect("non-empty");
    let min_pixels = smallest.pixels() as f64;
    let entries = taps
        .iter()
        .map(|&tap| {
            let unrounded_rate = alpha as f64 * (tap.pixels() as f64 / min_pixels).sqrt();
            RateEntry {
                tap,
                unrounded_rate,
                rate: round_rate(unrounded_rate),
            }
        })
        .collect();
    Ok(RateSchedule {
        alpha,
        entries,
        min_resolution: (smallest.height, smallest.width),
    })
}

/// Input-pixel extent of one dilated `kernel x kernel` application at `tap`:
/// `stride * ((kernel - 1) * rate + 1)`.
pub fn receptive_span(tap: &StageTap, rate: usize, kernel: usize) -> usize {
    tap.stride * ((kernel - 1) * rate + 1)
}

/// Branch and fusion convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct DsppParams {
    pub branches: Vec<ConvLayer>,
    pub fusion: ConvLayer,
}

impl DsppParams {
    /// One 3x3 atrous branch per schedule entry (`channels` outputs each)
    /// and a 1x1 fusion back down to `channels`.
    pub fn init(schedule: &RateSchedule, channels: usize, seed: u64) -> Self {
        let branches = schedule
            .entries
            .iter()
            .map(|e| {
                ConvLayer::init(
                    format!("dspp.branch{}", e.tap.stage_index),
                    Conv2dSpec::same(e.tap.channels, channels, 3, e.rate),
                    seed,
                )
            })
            .collect::<Vec<_>>();
        let fusion = ConvLayer::init(
            "dspp.fusion",
            Conv2dSpec::pointwise(channels * branches.len(), channels),
            seed,
        );
        Self { branches, fusion }
    }

    pub fn out_channels(&self) -> usize {
        self.fusion.spec.out_channels
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(ConvLayer::param_count).sum::<usize>() + self.fusion.param_count()
    }
}

/// Runs the pyramid on `features` (one per schedule entry, in order) and
/// returns the fused `[N, P, H_min, W_min]` map.
pub fn dspp_forward(g: &mut Graph, features: &[Var], schedule: &RateSchedule, params: &DsppParams) -> Result<Var> {
    if features.len() != schedule.entries.len() || params.branches.len() != schedule.entries.len() {
        return Err(Error::Shape(format!(
            "pyramid has {} schedule entries, {} branches and {} feature maps",
            schedule.entries.len(),
            params.branches.len(),
            features.len()
        )));
    }
    let mut outputs = Vec::with_capacity(features.len());
    for ((&feature, entry), branch) in features.iter().zip(&schedule.entries).zip(&params.branches) {
        let [_, c, h, w] = g.value(feature).dims4()?;
        let tap = &entry.tap;
        if (c, h, w) != (tap.channels, tap.height, tap.width) {
            return Err(Error::Shape(format!(
                "stage {} feature is [{c},{h},{w}], tap expects [{},{},{}]",
                tap.stage_index, tap.channels, tap.height, tap.width
            )));
        }
        if branch.spec.dilation != entry.rate || branch.spec.padding != entry.rate {
            return Err(Error::Shape(format!(
                "branch for stage {} uses dilation {}, schedule says {}",
                tap.stage_index, branch.spec.dilation, entry.rate
            )));
        }
        let y = branch.forward(g, feature)?;
        let y = g.relu(y)?;
        outputs.push(g.resize_bilinear(y, schedule.min_resolution)?);
    }
    let merged = g.concat_channels(&outputs)?;
    let fused = params.fusion.forward(g, merged)?;
    g.relu(fused)
}
