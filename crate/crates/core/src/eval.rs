//! Binary classification metrics, ROC/AUC and Grad-CAM heatmaps.

use std::fmt::Write as _;

use crate::data::{encode_ppm, to_byte, GrayImage, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::resize_bilinear;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Tallies `score >= threshold` predictions against binary labels.
pub fn confusion(scores: &[f64], labels: &[usize], threshold: f64) -> Result<ConfusionCounts> {
    check_pairs(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn check_pairs(scores: &[f64], labels: &[usize]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::LabelOutOfRange { label: l, classes: 2 });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when any ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::InvalidArgument("empty confusion counts".into()));
    }
    let mut degenerate = false;
    let mut ratio = |num: f64, den: f64| {
        if den == 0.0 {
            degenerate = true;
            0.0
        } else {
            num / den
        }
    };
    let accuracy = ratio((c.tp + c.tn) as f64, total as f64);
    let precision = ratio(c.tp as f64, (c.tp + c.fp) as f64);
    let recall = ratio(c.tp as f64, (c.tp + c.fn_) as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f1,
        degenerate,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            let _ = writeln!(out, "{f},{t}");
        }
        out
    }
}

/// Sweeps thresholds over the distinct scores in descending order; tied
/// scores move both rates in one step, so the trapezoidal area counts ties
/// as one half.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<RocCurve> {
    check_pairs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(
            "ROC needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // Trapezoid in counts, normalised once at the end.
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve {
        points,
        auc: auc / (pos * neg) as f64,
    })
}

/// Scores, labels and summary for one evaluated sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    /// `None` when only one class is present.
    pub roc: Option<RocCurve>,
}

impl Evaluation {
    pub fn auc(&self) -> f64 {
        self.roc.as_ref().map_or(f64::NAN, |r| r.auc)
    }

    pub fn metrics_csv(&self) -> String {
        let m = &self.metrics;
        format!(
            "metric,value\naccuracy,{}\nprecision,{}\nrecall,{}\nf1,{}\nauc,{}\n",
            m.accuracy,
            m.precision,
            m.recall,
            m.f1,
            self.auc()
        )
    }
}

/// Positive-class probability of every sample, thresholded at 0.5.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<Evaluation> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let probs = model.predict_proba(&images, 32)?;
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let labels: Vec<usize> = samples.iter().map(|s| usize::from(s.label == 1)).collect();
    let counts = confusion(&scores, &labels, 0.5)?;
    Ok(Evaluation {
        metrics: metrics(&counts)?,
        roc: roc_auc(&scores, &labels).ok(),
        scores,
        labels,
        counts,
    })
}

/// Grad-CAM for `target_class` at the output of backbone stage `layer`
/// (1-based). `image` is `[1, C, H, W]`; the result is `[H, W]` in `[0, 1]`.
pub fn grad_cam(model: &Model, image: &Tensor, target_class: usize, layer: usize) -> Result<Tensor> {
    if !(1..=model.stages.len()).contains(&layer) {
        return Err(Error::InvalidArgument(format!("no backbone stage {layer}")));
    }
    let [n, _, h, w] = image.dims4()?;
    if n != 1 {
        return Err(Error::Shape(format!("grad-cam takes one image, got a batch of {n}")));
    }
    if target_class >= model.backbone.classes {
        return Err(Error::LabelOutOfRange {
            label: target_class,
            classes: model.backbone.classes,
        });
    }
    let mut g = Graph::new();
    let x = g.constant(image.clone())?;
    let trace = model.forward_graph(&mut g, x)?;
    let target = g.pick(trace.logits, &[0, target_class])?;
    let act_var = trace.stages[layer - 1];
    let grads = g.backward(target)?.wrt(act_var);
    let act = g.value(act_var);
    let [_, c, ah, aw] = act.dims4()?;
    let plane = ah * aw;
    let mut cam = vec![0.0; plane];
    for ch in 0..c {
        let gslice = &grads.data()[ch * plane..(ch + 1) * plane];
        let weight = gslice.iter().sum::<f64>() / plane as f64;
        let aslice = &act.data()[ch * plane..(ch + 1) * plane];
        for (acc, a) in cam.iter_mut().zip(aslice) {
            *acc += weight * a;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let cam = Tensor::from_parts(vec![1, 1, ah, aw], cam);
    let up = resize_bilinear(&cam, (h, w))?;
    Ok(Tensor::from_parts(vec![h, w], normalize(up.data())))
}

/// Per-image min-max scaling; flat maps become all zeros.
fn normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if !(span > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / span).collect()
}

/// Fraction of the heatmap mass among its top 10% pixels (by value) that
/// lies inside `inside(y, x)`.
pub fn top_decile_mass_fraction(heatmap: &Tensor, inside: impl Fn(usize, usize) -> bool) -> f64 {
    let w = heatmap.shape()[1];
    let mut idx: Vec<usize> = (0..heatmap.numel()).collect();
    idx.sort_by(|&a, &b| heatmap.data()[b].total_cmp(&heatmap.data()[a]).then(a.cmp(&b)));
    let k = heatmap.numel().div_ceil(10);
    let (mut total, mut hit) = (0.0, 0.0);
    for &i in &idx[..k] {
        let v = heatmap.data()[i];
        total += v;
        if inside(i / w, i % w) {
            hit += v;
        }
    }
    if total > 0.0 {
        hit / total
    } else {
        0.0
    }
}

/// 8-bit P5 rendering of an `[H, W]` map in `[0, 1]`.
pub fn heatmap_pgm(heatmap: &Tensor) -> Result<Vec<u8>> {
    Ok(GrayImage::from_unit_tensor(heatmap)?.encode_pgm())
}

/// P6 overlay: the grayscale input blended linearly towards pure red by
/// the heatmap value, `rgb = (1 - m) * gray + m * (255, 0, 0)`.
pub fn heatmap_overlay_ppm(image: &Tensor, heatmap: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = (heatmap.shape()[0], heatmap.shape()[1]);
    let c = image.numel() / (h * w);
    if image.numel() != c * h * w || c == 0 {
        return Err(Error::Shape(format!(
            "image {:?} does not match heatmap {:?}",
            image.shape(),
            heatmap.shape()
        )));
    }
    let mut rgb = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        let gray = (0..c).map(|ch| image.data()[ch * h * w + i]).sum::<f64>() / c as f64;
        let m = heatmap.data()[i].clamp(0.0, 1.0);
        rgb.push(to_byte((1.0 - m) * gray + m));
        rgb.push(to_byte((1.0 - m) * gray));
        rgb.push(to_byte((1.0 - m) * gray));
    }
    Ok(encode_ppm(w, h, &rgb))
}
