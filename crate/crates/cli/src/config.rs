//! Run configuration: a flat `key = value` file whose entries are applied in
//! order, then overridden by `--set` pairs and dedicated flags.

use std::fmt::Write as _;
use std::path::PathBuf;

use dsppnet::config::{parse_bool, parse_kv, parse_list, parse_value};
use dsppnet::data::{SplitRatios, SynthConfig};
use dsppnet::train::OptimConfig;
use dsppnet::{AblationConfig, BackboneConfig, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub ablation: AblationConfig,
    pub optim: OptimConfig,
    pub synth: SynthConfig,
    /// Dataset root (`root/<class>/*.pgm|png`); synthetic data when unset.
    pub data: Option<PathBuf>,
    /// Split ratios; defaults to 80:20 for directories and the generator's
    /// own default for synthetic data.
    pub split: Option<SplitRatios>,
    pub out: PathBuf,
    /// Backbone stage whose activations Grad-CAM explains.
    pub gradcam_layer: usize,
    /// Which split `eval` scores: train, val or test.
    pub eval_split: String,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        Self {
            gradcam_layer: backbone.stage_channels.len(),
            backbone,
            ablation: AblationConfig::new(&[4, 5, 6], true),
            optim: OptimConfig::default(),
            synth: SynthConfig::default(),
            data: None,
            split: None,
            out: PathBuf::from("out"),
            eval_split: "val".into(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.backbone.apply(key, value)? || self.ablation.apply(key, value)? {
            return Ok(());
        }
        match key {
            "lr_max" => self.optim.lr_max = parse_value(key, value)?,
            "lr_min" => self.optim.lr_min = parse_value(key, value)?,
            "momentum" => self.optim.momentum = parse_value(key, value)?,
            "weight_decay" => self.optim.weight_decay = parse_value(key, value)?,
            "epochs" => self.optim.epochs = parse_value(key, value)?,
            "batch_size" => self.optim.batch_size = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "synth_per_class" => self.synth.per_class = parse_value(key, value)?,
            "synth_radius" => {
                let r: Vec<usize> = parse_list(key, value)?;
                match r[..] {
                    [lo, hi] => self.synth.radius = (lo, hi),
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "{key}: expected `min,max`, got `{value}`"
                        )))
                    }
                }
            }
            "synth_intensity" => self.synth.intensity = parse_value(key, value)?,
            "synth_noise" => self.synth.noise = parse_value(key, value)?,
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "synth" => {
                if parse_bool(key, value)? {
                    self.data = None;
                }
            }
            "split" => {
                let r: Vec<f64> = parse_list(key, value)?;
                match r[..] {
                    [a, b, c] => self.split = Some(SplitRatios::new(a, b, c)?),
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "{key}: expected `train,val,test`, got `{value}`"
                        )))
                    }
                }
            }
            "out" => self.out = PathBuf::from(value),
            "gradcam_layer" => self.gradcam_layer = parse_value(key, value)?,
            "eval_split" => match value {
                "train" | "val" | "test" => self.eval_split = value.into(),
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "{key}: expected train, val or test, got `{value}`"
                    )))
                }
            },
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Checks cross-field constraints and propagates the shared seed and
    /// input geometry into the component configs.
    pub fn finalize(mut self) -> Result<Self> {
        self.backbone.validate()?;
        self.ablation.validate()?;
        self.optim.validate()?;
        self.optim.seed = self.seed;
        let (h, w, c) = self.backbone.input_size;
        self.synth.height = h;
        self.synth.width = w;
        self.synth.channels = c;
        self.synth.seed = self.seed;
        if let Some(r) = self.split.filter(|_| self.data.is_none()) {
            self.synth.ratios = r;
        }
        if !(1..=self.backbone.stage_channels.len()).contains(&self.gradcam_layer) {
            return Err(Error::InvalidConfig(format!(
                "gradcam_layer {} is not a stage",
                self.gradcam_layer
            )));
        }
        Ok(self)
    }

    /// Ratios used when loading a dataset directory.
    pub fn directory_split(&self) -> SplitRatios {
        self.split.unwrap_or(SplitRatios {
            train: 0.8,
            val: 0.2,
            test: 0.0,
        })
    }

    /// The effective configuration as `key = value` text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.backbone.to_kv().into_iter().chain(self.ablation.to_kv()) {
            let _ = writeln!(out, "{k} = {v}");
        }
        let o = &self.optim;
        let s = &self.synth;
        let lines = [
            ("lr_max", o.lr_max.to_string()),
            ("lr_min", o.lr_min.to_string()),
            ("momentum", o.momentum.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("epochs", o.epochs.to_string()),
            ("batch_size", o.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("synth_per_class", s.per_class.to_string()),
            ("synth_radius", format!("{},{}", s.radius.0, s.radius.1)),
            ("synth_intensity", s.intensity.to_string()),
            ("synth_noise", s.noise.to_string()),
            (
                "data",
                self.data.as_ref().map_or(String::new(), |p| p.display().to_string()),
            ),
            ("out", self.out.display().to_string()),
            ("gradcam_layer", self.gradcam_layer.to_string()),
            ("eval_split", self.eval_split.clone()),
        ];
        for (k, v) in lines {
            let _ = writeln!(out, "{k} = {v}");
        }
        if let Some(r) = self.split {
            let _ = writeln!(out, "split = {},{},{}", r.train, r.val, r.test);
        }
        out
    }
}
