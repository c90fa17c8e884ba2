//! Datasets: the directory-of-images layout, stratified splits, 8-bit
//! PGM/PPM codecs and the synthetic bright-blob generator.
//!
//! On disk a dataset is `root/<class_name>/*.pgm|*.png`; class indices follow
//! the lexicographic order of the class directory names.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::resize_bilinear;
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Inclusive pixel bounds of a synthetic blob.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlobBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BlobBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..=self.bottom).contains(&y) && (self.left..=self.right).contains(&x)
    }

    pub fn area(&self) -> usize {
        (self.bottom - self.top + 1) * (self.right - self.left + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub source_id: String,
    pub blob: Option<BlobBox>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub classes: Vec<String>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fractions of each class assigned to train, validation and test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "split ratios {parts:?} must be non-negative"
            )));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split ratios {parts:?} do not sum to 1")));
        }
        Ok(())
    }

    /// Per-class (train, val, test) counts for `n` samples.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = ((n as f64 * self.train).round() as usize).min(n);
        let val = ((n as f64 * self.val).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

/// Stratified deterministic split: each class is shuffled with the
/// `split` stream of `seed`, then cut by `ratios`.
pub fn stratified_split(
    samples: Vec<Sample>,
    classes: Vec<String>,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetSplit> {
    ratios.validate()?;
    let mut rng = rng_for(seed, "split");
    let mut by_class: Vec<Vec<Sample>> = vec![Vec::new(); classes.len()];
    for s in samples {
        let label = s.label;
        by_class
            .get_mut(label)
            .ok_or(Error::LabelOutOfRange {
                label,
                classes: classes.len(),
            })?
            .push(s);
    }
    let mut out = DatasetSplit {
        classes,
        ..Default::default()
    };
    for mut group in by_class {
        group.shuffle(&mut rng);
        let (train, val, _) = ratios.counts(group.len());
        let mut rest = group.split_off(train);
        let test = rest.split_off(val);
        out.train.extend(group);
        out.val.extend(rest);
        out.test.extend(test);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Samples generated per class before splitting.
    pub per_class: usize,
    pub ratios: SplitRatios,
    /// Inclusive range of blob half-widths in pixels.
    pub radius: (usize, usize),
    /// Peak brightness added at the blob centre.
    pub intensity: f64,
    /// Background noise is uniform in `[0, noise]`.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// 300 samples per class split 250/50, i.e. 500 training and 100
    /// validation images of 64x64.
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 1,
            per_class: 300,
            ratios: SplitRatios {
                train: 5.0 / 6.0,
                val: 1.0 / 6.0,
                test: 0.0,
            },
            radius: (10, 14),
            intensity: 0.6,
            noise: 0.5,
            seed: 0,
        }
    }
}

pub const SYNTH_CLASSES: [&str; 2] = ["0_negative", "1_positive"];

/// Negatives are pure noise; positives add one Gaussian blob
/// (`sigma = radius / 2`) fully inside the frame. Pixels are clipped to `[0, 1]`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<DatasetSplit> {
    let (rmin, rmax) = config.radius;
    if config.per_class == 0 {
        return Err(Error::InvalidConfig("need at least one sample per class".into()));
    }
    if rmin == 0 || rmin > rmax || 2 * rmax + 1 > config.height.min(config.width) {
        return Err(Error::InvalidConfig(format!(
            "blob radius range {:?} does not fit a {}x{} image",
            config.radius, config.height, config.width
        )));
    }
    if config.channels == 0 || !(config.noise >= 0.0) || !config.intensity.is_finite() {
        return Err(Error::InvalidConfig("invalid synthetic image parameters".into()));
    }
    let (h, w) = (config.height, config.width);
    let mut rng = rng_for(config.seed, "synth");
    let mut samples = Vec::with_capacity(2 * config.per_class);
    for label in 0..2 {
        for i in 0..config.per_class {
            let mut plane: Vec<f64> = (0..h * w).map(|_| config.noise * rng.gen::<f64>()).collect();
            let blob = (label == 1).then(|| {
                let r = rng.gen_range(rmin..=rmax);
                let cy = rng.gen_range(r..h - r);
                let cx = rng.gen_range(r..w - r);
                let sigma2 = 2.0 * (r as f64 / 2.0).powi(2);
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2);
                        plane[y * w + x] += config.intensity * (-d2 / sigma2).exp();
                    }
                }
                BlobBox {
                    top: cy - r,
                    left: cx - r,
                    bottom: cy + r,
                    right: cx + r,
                }
            });
            for v in &mut plane {
                *v = v.clamp(0.0, 1.0);
            }
            let data: Vec<f64> = plane.iter().cycle().take(config.channels * h * w).copied().collect();
            samples.push(Sample {
                image: Tensor::new([config.channels, h, w], data)?,
                label,
                source_id: format!("synth-{label}-{i:05}"),
                blob,
            });
        }
    }
    let classes = SYNTH_CLASSES.iter().map(|s| s.to_string()).collect();
    stratified_split(samples, classes, config.ratios, config.seed)
}

/// An 8-bit single-channel raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Quantises `[H, W]` (or `[1, H, W]`) values in `[0, 1]`.
    pub fn from_unit_tensor(t: &Tensor) -> Result<Self> {
        let (height, width) = match t.shape() {
            [h, w] | [1, h, w] => (*h, *w),
            s => return Err(Error::Shape(format!("expected a single plane, got {s:?}"))),
        };
        Ok(Self {
            width,
            height,
            pixels: t.data().iter().map(|&v| to_byte(v)).collect(),
        })
    }

    pub fn to_unit_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::from_parts(vec![1, self.height, self.width], data)
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::Format(format!("unsupported PGM magic {}", fields[0])));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad PGM header field `{s}`")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("only 8-bit PGM is supported (maxval {maxval})")));
        }
        pos += 1; // single whitespace after maxval
        let n = width * height;
        let raster = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
        let pixels = if maxval == 255 {
            raster.to_vec()
        } else {
            raster
                .iter()
                .map(|&p| (p as f64 * 255.0 / maxval as f64).round() as u8)
                .collect()
        };
        Ok(Self { width, height, pixels })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pgm())?;
        Ok(())
    }
}

pub(crate) fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6) from interleaved RGB bytes.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Reads a PGM or PNG file as a `[1, H, W]` tensor in `[0, 1]`; colour
/// images are averaged over their RGB channels.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = fs::read(path)?;
    let img = match ext.as_str() {
        "pgm" => GrayImage::decode_pgm(&bytes),
        "png" => decode_png(&bytes),
        _ => Err(Error::Format(format!("unsupported image type {}", path.display()))),
    }
    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(img.to_unit_tensor())
}

fn decode_png(bytes: &[u8]) -> Result<GrayImage> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let buf = &buf[..info.buffer_size()];
    let pixels = buf
        .chunks_exact(channels)
        .map(|px| match channels {
            1 | 2 => px[0],
            _ => ((px[0] as u32 + px[1] as u32 + px[2] as u32) as f64 / 3.0).round() as u8,
        })
        .collect();
    Ok(GrayImage { width, height, pixels })
}

fn list_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads `root/<class>/*.{pgm,png}`, resizes to `input_size` (H, W, C) and
/// splits per class.
pub fn load_dataset(
    root: &Path,
    ratios: SplitRatios,
    seed: u64,
    input_size: (usize, usize, usize),
) -> Result<DatasetSplit> {
    ratios.validate()?;
    let (h, w, c) = input_size;
    let class_dirs: Vec<PathBuf> = list_dir_sorted(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no class directories",
            root.display()
        )));
    }
    let mut classes = Vec::new();
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let files: Vec<PathBuf> = list_dir_sorted(dir)?
            .into_iter()
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("png"))
            })
            .collect();
        if files.is_empty() {
            return Err(Error::InvalidArgument(format!("class `{name}` has no images")));
        }
        for file in files {
            let plane = read_image(&file)?;
            let [_, ph, pw] = [plane.shape()[0], plane.shape()[1], plane.shape()[2]];
            let plane = resize_bilinear(&plane.reshape([1, 1, ph, pw])?, (h, w))?;
            let data: Vec<f64> = plane.data().iter().cycle().take(c * h * w).copied().collect();
            samples.push(Sample {
                image: Tensor::new([c, h, w], data)?,
                label,
                source_id: format!("{name}/{}", file.file_name().unwrap_or_default().to_string_lossy()),
                blob: None,
            });
        }
        classes.push(name);
    }
    stratified_split(samples, classes, ratios, seed)
}

/// Writes every sample of `split` as `root/<class>/<source_id>.pgm` plus a
/// `boxes.csv` with the ground-truth blob boxes.
pub fn write_dataset_dir(root: &Path, split: &DatasetSplit) -> Result<()> {
    for class in &split.classes {
        fs::create_dir_all(root.join(class))?;
    }
    let mut boxes = fs::File::create(root.join("boxes.csv"))?;
    writeln!(boxes, "source_id,label,top,left,bottom,right")?;
    for s in split.train.iter().chain(&split.val).chain(&split.test) {
        let [_, h, w] = [s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]];
        let plane = Tensor::new([h, w], s.image.data()[..h * w].to_vec())?;
        let file = root.join(&split.classes[s.label]).join(format!("{}.pgm", s.source_id));
        GrayImage::from_unit_tensor(&plane)?.write_pgm(&file)?;
        match s.blob {
            Some(b) => writeln!(
                boxes,
                "{},{},{},{},{},{}",
                s.source_id, s.label, b.top, b.left, b.bottom, b.right
            )?,
            None => writeln!(boxes, "{},{},,,,", s.source_id, s.label)?,
        }
    }
    Ok(())
}
