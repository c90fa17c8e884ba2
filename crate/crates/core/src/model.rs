//! Six-stage CNN backbone with optional attention gate after stage 1 and an
//! optional atrous pyramid over any of stages 4, 5 and 6.
//!
//! Stage `s` is `conv3x3(stride 2, or 1 for s = 1) -> ReLU -> conv3x3 -> ReLU`,
//! giving five halvings between the six stages. With the pyramid enabled,
//! the global average of its fused map is concatenated with the global
//! average of stage 6 before the dense head.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::cid::{self, CidParams};
use crate::config::{join_list, parse_bool, parse_list, parse_value};
use crate::dspp::{self, DsppParams, RateSchedule, StageTap};
use crate::error::{Error, Result};
use crate::layer::{ConvLayer, DenseLayer};
use crate::ops::Conv2dSpec;
use crate::tensor::{Graph, Tensor, Var};

pub const STAGES: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// (height, width, channels) of the network input.
    pub input_size: (usize, usize, usize),
    pub stage_channels: Vec<usize>,
    pub classes: usize,
    /// Minimum atrous rate of the pyramid.
    pub alpha: usize,
    /// Branch and fused width of the pyramid.
    pub dspp_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64, 1),
            stage_channels: vec![16, 32, 64, 96, 128, 160],
            classes: 2,
            alpha: 3,
            dspp_channels: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_size;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidConfig(format!("input size {:?}", self.input_size)));
        }
        if self.stage_channels.len() != STAGES {
            return Err(Error::InvalidConfig(format!(
                "expected {STAGES} stage widths, got {}",
                self.stage_channels.len()
            )));
        }
        if let Some(c) = self.stage_channels.iter().find(|&&c| c < 4) {
            return Err(Error::InvalidConfig(format!("stage width {c} is below 4")));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.alpha == 0 || self.dspp_channels == 0 {
            return Err(Error::InvalidConfig("alpha and dspp_channels must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of every stage output.
    pub fn stage_resolutions(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w, _) = self.input_size;
        (1..=STAGES)
            .map(|s| {
                if s > 1 {
                    h = (h - 1) / 2 + 1;
                    w = (w - 1) / 2 + 1;
                }
                (h, w)
            })
            .collect()
    }

    pub fn tap(&self, stage: usize) -> StageTap {
        let (height, width) = self.stage_resolutions()[stage - 1];
        StageTap {
            stage_index: stage,
            channels: self.stage_channels[stage - 1],
            height,
            width,
            stride: 1 << (stage - 1),
        }
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_height", self.input_size.0.to_string()),
            ("input_width", self.input_size.1.to_string()),
            ("input_channels", self.input_size.2.to_string()),
            ("stage_channels", join_list(&self.stage_channels)),
            ("classes", self.classes.to_string()),
            ("alpha", self.alpha.to_string()),
            ("dspp_channels", self.dspp_channels.to_string()),
        ]
    }

    /// Applies one key; returns `Ok(false)` for keys this type does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "input_height" => self.input_size.0 = parse_value(key, value)?,
            "input_width" => self.input_size.1 = parse_value(key, value)?,
            "input_channels" => self.input_size.2 = parse_value(key, value)?,
            "stage_channels" => self.stage_channels = parse_list(key, value)?,
            "classes" => self.classes = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "dspp_channels" => self.dspp_channels = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Which stages feed the pyramid and whether the attention gate is used.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct AblationConfig {
    pub dspp_stages: BTreeSet<usize>,
    pub use_cid: bool,
}

impl AblationConfig {
    pub fn new(stages: &[usize], use_cid: bool) -> Self {
        Self {
            dspp_stages: stages.iter().copied().collect(),
            use_cid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.dspp_stages.iter().find(|s| !(4..=6).contains(*s)) {
            return Err(Error::InvalidConfig(format!("pyramid stage {s} is not one of 4, 5, 6")));
        }
        Ok(())
    }

    /// Short label such as `dspp=4+5+6,cid=with`.
    pub fn descriptor(&self) -> String {
        let stages: Vec<String> = self.dspp_stages.iter().map(usize::to_string).collect();
        format!(
            "dspp={},cid={}",
            if stages.is_empty() {
                "none".into()
            } else {
                stages.join("+")
            },
            if self.use_cid { "with" } else { "without" }
        )
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let stages: Vec<usize> = self.dspp_stages.iter().copied().collect();
        vec![
            ("dspp_stages", join_list(&stages)),
            ("use_cid", self.use_cid.to_string()),
        ]
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "dspp_stages" => self.dspp_stages = parse_list::<usize>(key, value)?.into_iter().collect(),
            "use_cid" => self.use_cid = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// The six placement/attention combinations compared in the ablation
/// study, in table order.
pub fn ablation_matrix() -> Vec<AblationConfig> {
    vec![
        AblationConfig::new(&[], false),
        AblationConfig::new(&[], true),
        AblationConfig::new(&[6], false),
        AblationConfig::new(&[6], true),
        AblationConfig::new(&[5, 6], true),
        AblationConfig::new(&[4, 5, 6], true),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub down: ConvLayer,
    pub conv: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub schedule: RateSchedule,
    pub params: DsppParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: BackboneConfig,
    pub ablation: AblationConfig,
    pub stages: Vec<Stage>,
    pub cid: Option<CidParams>,
    pub dspp: Option<Pyramid>,
    pub head: DenseLayer,
}

/// Graph handles produced by one forward pass.
pub struct Trace {
    pub logits: Var,
    /// Output of each stage, before any gate.
    pub stages: Vec<Var>,
    pub attention: Option<Var>,
    pub fused: Option<Var>,
}

pub fn build_model(backbone: &BackboneConfig, ablation: &AblationConfig, seed: u64) -> Result<Model> {
    backbone.validate()?;
    ablation.validate()?;
    let mut stages = Vec::with_capacity(STAGES);
    let mut in_ch = backbone.input_size.2;
    for (i, &ch) in backbone.stage_channels.iter().enumerate() {
        let s = i + 1;
        let down = Conv2dSpec {
            in_channels: in_ch,
            out_channels: ch,
            kernel: (3, 3),
            stride: if s == 1 { 1 } else { 2 },
            dilation: 1,
            padding: 1,
        };
        stages.push(Stage {
            down: ConvLayer::init(format!("stage{s}.conv1"), down, seed),
            conv: ConvLayer::init(format!("stage{s}.conv2"), Conv2dSpec::same(ch, ch, 3, 1), seed),
        });
        in_ch = ch;
    }
    let cid = ablation
        .use_cid
        .then(|| CidParams::init("cid", backbone.stage_channels[0], seed));
    let dspp = if ablation.dspp_stages.is_empty() {
        None
    } else {
        let taps: Vec<StageTap> = ablation.dspp_stages.iter().map(|&s| backbone.tap(s)).collect();
        let schedule = dspp::compute_rates(&taps, backbone.alpha)?;
        let params = DsppParams::init(&schedule, backbone.dspp_channels, seed);
        Some(Pyramid { schedule, params })
    };
    let head_in = in_ch + dspp.as_ref().map_or(0, |p| p.params.out_channels());
    let head = DenseLayer::init("head", head_in, backbone.classes, seed);
    Ok(Model {
        backbone: backbone.clone(),
        ablation: ablation.clone(),
        stages,
        cid,
        dspp,
        head,
    })
}

impl Model {
    pub fn check_input(&self, batch: &Tensor) -> Result<()> {
        let [_, c, h, w] = batch.dims4()?;
        let (eh, ew, ec) = self.backbone.input_size;
        if (c, h, w) != (ec, eh, ew) {
            return Err(Error::Shape(format!(
                "model expects [N,{ec},{eh},{ew}] input, got {:?}",
                batch.shape()
            )));
        }
        Ok(())
    }

    /// Records the full forward pass on `g`.
    pub fn forward_graph(&self, g: &mut Graph, input: Var) -> Result<Trace> {
        self.check_input(g.value(input))?;
        let mut x = input;
        let mut stages = Vec::with_capacity(STAGES);
        let mut attention = None;
        for (i, stage) in self.stages.iter().enumerate() {
            g.set_scope(format!("stage{}", i + 1));
            x = stage.down.forward(g, x)?;
            x = g.relu(x)?;
            x = stage.conv.forward(g, x)?;
            x = g.relu(x)?;
            stages.push(x);
            if i == 0 {
                if let Some(p) = &self.cid {
                    g.set_scope("cid");
                    let gate = cid::attention_map(g, x, p)?;
                    x = g.gate_mul(x, gate)?;
                    attention = Some(gate);
                }
            }
        }
        g.set_scope("head");
        let mut pooled = g.global_avg_pool(x)?;
        let mut fused = None;
        if let Some(pyr) = &self.dspp {
            g.set_scope("dspp");
            let features: Vec<Var> = pyr
                .schedule
                .entries
                .iter()
                .map(|e| stages[e.tap.stage_index - 1])
                .collect();
            let f = dspp::dspp_forward(g, &features, &pyr.schedule, &pyr.params)?;
            g.set_scope("head");
            let fp = g.global_avg_pool(f)?;
            pooled = g.concat_channels(&[pooled, fp])?;
            fused = Some(f);
        }
        let logits = self.head.forward(g, pooled)?;
        Ok(Trace {
            logits,
            stages,
            attention,
            fused,
        })
    }

    /// Logits `[N, K]` for a batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone())?;
        let trace = self.forward_graph(&mut g, x)?;
        Ok(g.value(trace.logits).clone())
    }

    /// Softmax probabilities `[N, K]`, evaluated in chunks of `chunk` samples.
    pub fn predict_proba(&self, images: &[&Tensor], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let batch = Tensor::stack(part)?;
            let logits = self.forward(&batch)?;
            for row in logits.data().chunks_exact(self.backbone.classes) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exp.iter().sum();
                out.push(exp.into_iter().map(|e| e / z).collect());
            }
        }
        Ok(out)
    }

    /// Every parameter in canonical order (backbone, gate, pyramid, head).
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for s in &self.stages {
            s.down.visit(&mut out);
            s.conv.visit(&mut out);
        }
        if let Some(c) = &self.cid {
            c.reduce.visit(&mut out);
            c.project.visit(&mut out);
        }
        if let Some(p) = &self.dspp {
            for b in &p.params.branches {
                b.visit(&mut out);
            }
            p.params.fusion.visit(&mut out);
        }
        self.head.visit(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            s.down.visit_mut(&mut out);
            s.conv.visit_mut(&mut out);
        }
        if let Some(c) = &mut self.cid {
            c.reduce.visit_mut(&mut out);
            c.project.visit_mut(&mut out);
        }
        if let Some(p) = &mut self.dspp {
            for b in &mut p.params.branches {
                b.visit_mut(&mut out);
            }
            p.params.fusion.visit_mut(&mut out);
        }
        self.head.visit_mut(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replaces the classifier with a freshly initialised `classes`-way head.
    pub fn reset_head(&mut self, classes: usize, seed: u64) {
        let inputs = self.head.weight.shape()[1];
        self.head = DenseLayer::init("head", inputs, classes, seed);
        self.backbone.classes = classes;
    }

    /// Layer table: name, output shape, parameter count.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        let (h, w, c) = self.backbone.input_size;
        let res = self.backbone.stage_resolutions();
        let _ = writeln!(out, "{:<24} {:<20} {:>10}", "layer", "output", "params");
        let _ = writeln!(out, "{:<24} {:<20} {:>10}", "input", format!("[{c},{h},{w}]"), 0);
        let mut row = |name: &str, shape: String, params: usize| {
            let _ = writeln!(out, "{name:<24} {shape:<20} {params:>10}");
        };
        for (i, s) in self.stages.iter().enumerate() {
            let (sh, sw) = res[i];
            let ch = s.conv.spec.out_channels;
            row(&s.down.name, format!("[{ch},{sh},{sw}]"), s.down.param_count());
            row(&s.conv.name, format!("[{ch},{sh},{sw}]"), s.conv.param_count());
            if i == 0 {
                if let Some(cid) = &self.cid {
                    row("cid.gate", format!("[1,{sh},{sw}]"), cid.param_count());
                }
            }
        }
        if let Some(p) = &self.dspp {
            let (mh, mw) = p.schedule.min_resolution;
            for (b, e) in p.params.branches.iter().zip(&p.schedule.entries) {
                let name = format!("{} (rate {})", b.name, e.rate);
                row(&name, format!("[{},{mh},{mw}]", b.spec.out_channels), b.param_count());
            }
            let f = &p.params.fusion;
            row(&f.name, format!("[{},{mh},{mw}]", f.spec.out_channels), f.param_count());
        }
        row("head", format!("[{}]", self.backbone.classes), self.head.param_count());
        let _ = writeln!(out, "{:<24} {:<20} {:>10}", "total", "", self.param_count());
        out
    }
}
