//! Straight-line reference implementations used as test oracles. Nothing
//! here shares code with the library kernels.
#![allow(dead_code, clippy::needless_range_loop)]

use dsppnet::model::Model;
use dsppnet::{Conv2dSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

/// Plain `[N,C,H,W]` buffer with direct indexing.
#[derive(Clone, Debug)]
pub struct Nd {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Nd {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            v: vec![0.0; n * c * h * w],
        }
    }

    pub fn from(t: &Tensor) -> Self {
        let s = t.shape();
        Self {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            v: t.data().to_vec(),
        }
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let (cc, h, w) = (self.c, self.h, self.w);
        self.v[((n * cc + c) * h + y) * w + x] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.v
    }
}

pub fn conv2d(x: &Nd, weight: &Tensor, bias: &Tensor, spec: &Conv2dSpec) -> Nd {
    let (kh, kw) = spec.kernel;
    let (s, d, p) = (spec.stride as i64, spec.dilation as i64, spec.padding as i64);
    let oh = ((x.h as i64 + 2 * p - d * (kh as i64 - 1) - 1) / s + 1) as usize;
    let ow = ((x.w as i64 + 2 * p - d * (kw as i64 - 1) - 1) / s + 1) as usize;
    let co = spec.out_channels;
    let mut out = Nd::zeros(x.n, co, oh, ow);
    for n in 0..x.n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[o];
                    for i in 0..x.c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy as i64 * s - p + ky as i64 * d;
                                let ix = ox as i64 * s - p + kx as i64 * d;
                                if iy < 0 || ix < 0 || iy >= x.h as i64 || ix >= x.w as i64 {
                                    continue;
                                }
                                let wv = weight.data()[((o * x.c + i) * kh + ky) * kw + kx];
                                acc += wv * x.get(n, i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

pub fn relu(x: &Nd) -> Nd {
    Nd {
        v: x.v.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect(),
        ..x.clone()
    }
}

pub fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Half-pixel-centre bilinear resampling with edge clamping.
pub fn bilinear(x: &Nd, oh: usize, ow: usize) -> Nd {
    let mut out = Nd::zeros(x.n, x.c, oh, ow);
    let src = |dst: usize, in_len: usize, out_len: usize| -> (usize, usize, f64) {
        let scale = in_len as f64 / out_len as f64;
        let mut s = (dst as f64 + 0.5) * scale - 0.5;
        if s < 0.0 {
            s = 0.0;
        }
        let lo = (s.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        (lo, hi, s - lo as f64)
    };
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..oh {
                let (y0, y1, fy) = src(y, x.h, oh);
                for xx in 0..ow {
                    let (x0, x1, fx) = src(xx, x.w, ow);
                    let top = x.get(n, c, y0, x0) * (1.0 - fx) + x.get(n, c, y0, x1) * fx;
                    let bot = x.get(n, c, y1, x0) * (1.0 - fx) + x.get(n, c, y1, x1) * fx;
                    out.set(n, c, y, xx, top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    out
}

pub fn gap(x: &Nd) -> Vec<Vec<f64>> {
    (0..x.n)
        .map(|n| {
            (0..x.c)
                .map(|c| {
                    let mut s = 0.0;
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            s += x.get(n, c, y, xx);
                        }
                    }
                    s / (x.h * x.w) as f64
                })
                .collect()
        })
        .collect()
}

pub fn concat(parts: &[Nd]) -> Nd {
    let c = parts.iter().map(|p| p.c).sum();
    let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
    let mut out = Nd::zeros(n, c, h, w);
    for s in 0..n {
        let mut base = 0;
        for p in parts {
            for ch in 0..p.c {
                for y in 0..h {
                    for x in 0..w {
                        out.set(s, base + ch, y, x, p.get(s, ch, y, x));
                    }
                }
            }
            base += p.c;
        }
    }
    out
}

/// `y[n][k] = b[k] + sum_d w[k][d] * x[n][d]`.
pub fn dense(x: &[Vec<f64>], weight: &Tensor, bias: &Tensor) -> Vec<Vec<f64>> {
    let (k, d) = (weight.shape()[0], weight.shape()[1]);
    x.iter()
        .map(|row| {
            (0..k)
                .map(|o| {
                    let mut acc = bias.data()[o];
                    for i in 0..d {
                        acc += weight.data()[o * d + i] * row[i];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.iter().zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += z.ln() - row[l];
    }
    total / labels.len() as f64
}

/// Logits of `model` computed by composing the reference operators above.
pub fn model_logits(model: &Model, input: &Tensor) -> Vec<Vec<f64>> {
    let mut x = Nd::from(input);
    let mut stage_out = Vec::new();
    for (i, stage) in model.stages.iter().enumerate() {
        x = relu(&conv2d(&x, &stage.down.weight, &stage.down.bias, &stage.down.spec));
        x = relu(&conv2d(&x, &stage.conv.weight, &stage.conv.bias, &stage.conv.spec));
        stage_out.push(x.clone());
        if i == 0 {
            if let Some(cid) = &model.cid {
                let r = relu(&conv2d(&x, &cid.reduce.weight, &cid.reduce.bias, &cid.reduce.spec));
                let m = conv2d(&r, &cid.project.weight, &cid.project.bias, &cid.project.spec);
                let mut gated = x.clone();
                for n in 0..x.n {
                    for c in 0..x.c {
                        for y in 0..x.h {
                            for xx in 0..x.w {
                                gated.set(n, c, y, xx, x.get(n, c, y, xx) * sigmoid(m.get(n, 0, y, xx)));
                            }
                        }
                    }
                }
                x = gated;
            }
        }
    }
    let mut pooled = gap(&x);
    if let Some(pyr) = &model.dspp {
        let (mh, mw) = pyr.schedule.min_resolution;
        let branches: Vec<Nd> = pyr
            .schedule
            .entries
            .iter()
            .zip(&pyr.params.branches)
            .map(|(e, b)| {
                let f = &stage_out[e.tap.stage_index - 1];
                bilinear(&relu(&conv2d(f, &b.weight, &b.bias, &b.spec)), mh, mw)
            })
            .collect();
        let f = &pyr.params.fusion;
        let fused = relu(&conv2d(&concat(&branches), &f.weight, &f.bias, &f.spec));
        for (row, extra) in pooled.iter_mut().zip(gap(&fused)) {
            row.extend(extra);
        }
    }
    dense(&pooled, &model.head.weight, &model.head.bias)
}

/// Counts by direct enumeration with `score >= threshold` as positive.
pub fn recount(scores: &[f64], labels: &[usize], threshold: f64) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

/// Probability that a random positive outscores a random negative, ties 1/2.
pub fn pairwise_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random convolution instance small enough for the reference loops.
pub fn random_conv_case(rng: &mut impl Rng) -> (Tensor, Tensor, Tensor, Conv2dSpec) {
    let k: usize = [1, 2, 3, 5][rng.gen_range(0..4)];
    let dilation = rng.gen_range(1..=4);
    let stride = rng.gen_range(1..=3);
    let padding = rng.gen_range(0..=dilation * (k - 1) / 2 + 1);
    let extent = dilation * (k - 1) + 1;
    let min_size = extent.saturating_sub(2 * padding).max(1);
    let h = rng.gen_range(min_size..min_size + 7);
    let w = rng.gen_range(min_size..min_size + 7);
    let spec = Conv2dSpec {
        in_channels: rng.gen_range(1..=4),
        out_channels: rng.gen_range(1..=4),
        kernel: (k, k),
        stride,
        dilation,
        padding,
    };
    let n = rng.gen_range(1..=3);
    let x = random_tensor(rng, &[n, spec.in_channels, h, w], 1.0);
    let wt = random_tensor(rng, &spec.weight_shape(), 1.0);
    let b = random_tensor(rng, &[spec.out_channels], 1.0);
    (x, wt, b, spec)
}
