//! Synthetic cross-domain spectral segmentation benchmark.
//!
//! Scenes are a background class with overlapping rectangles and ellipses,
//! each class painted with a fixed per-band signature plus pixel noise. The
//! last two classes have nearly identical signatures and differ only in shape
//! (thin strips vs large disks). The structural channel is the
//! normalized distance to the nearest class boundary. The target domain is
//! the same generator followed by a per-band gain, offset and gamma shift
//! that leaves labels and geometry untouched.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{forward_prepared, AdapterStack, PreparedInput};
use crate::backbone::FrozenBackbone;
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::rng::{child_seed, indexed_seed, normal, rng_from};
use crate::smtx::{self, Precision};
use crate::tensor::Tensor;

/// Label used for tokens excluded from the task loss. Never produced by the
/// generator; reserved for callers that mask pixels.
pub const IGNORE_LABEL: usize = usize::MAX;

const PALETTE_SEED: u64 = 0x05ee_d0fc_1a55;
const PIXEL_NOISE: f64 = 0.02;
const CONFUSION_OFFSET: f64 = 0.045;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `C × H × W` band reflectances in `[0, 1]`.
    pub image: Tensor,
    /// `1 × H × W`, zero on class boundaries.
    pub structural: Tensor,
    /// Row-major `H × W` class ids.
    pub labels: Vec<usize>,
    pub domain: Domain,
}

impl SynthSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Majority label of each `patch × patch` block, lowest id on ties.
    pub fn token_labels(&self, patch: usize, classes: usize) -> Result<Vec<usize>> {
        let (h, w) = (self.height(), self.width());
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Config(format!(
                "spatial size {h}×{w} is not divisible by patch {patch}"
            )));
        }
        let mut out = Vec::with_capacity((h / patch) * (w / patch));
        for py in 0..h / patch {
            for px in 0..w / patch {
                let mut counts = vec![0usize; classes];
                for y in py * patch..(py + 1) * patch {
                    for x in px * patch..(px + 1) * patch {
                        let l = self.labels[y * w + x];
                        if l < classes {
                            counts[l] += 1;
                        }
                    }
                }
                let best = (0..classes).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
                out.push(best);
            }
        }
        Ok(out)
    }
}

/// Fixed class signatures, `K` rows of `C` bands. The last two rows form the
/// confusable pair when `K ≥ 3`.
pub fn class_signatures(classes: usize, channels: usize) -> Result<Vec<Vec<f64>>> {
    check_scene_dims(classes, channels)?;
    let mut rng = rng_from(child_seed(PALETTE_SEED, &format!("{classes}x{channels}")));
    let distinct = if classes >= 3 { classes - 1 } else { classes };
    let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while sigs.len() < distinct {
        let cand: Vec<f64> = (0..channels).map(|_| rng.random_range(0.15..0.85)).collect();
        let far = sigs.iter().all(|s| euclid(s, &cand) > 0.25);
        if far {
            sigs.push(cand);
        }
    }
    if classes >= 3 {
        let base = sigs[classes - 2].clone();
        let step = CONFUSION_OFFSET / (channels as f64).sqrt();
        sigs.push(
            base.iter()
                .enumerate()
                .map(|(b, v)| if b % 2 == 0 { v + step } else { v - step })
                .collect(),
        );
    }
    Ok(sigs)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_scene_dims(classes: usize, channels: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if channels < 3 {
        return Err(Error::Config(format!("need at least 3 bands, got {channels}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Rect,
    Ellipse,
    Disk,
}

/// Fractions of the scene side: `(height range, width range)`.
type Extent = ((f64, f64), (f64, f64));

fn paint(labels: &mut [usize], h: usize, w: usize, shape: Shape, class: usize, rng: &mut ChaCha8Rng, extent: Extent) {
    let ((hlo, hhi), (wlo, whi)) = extent;
    let sh = ((h as f64) * rng.random_range(hlo..hhi)).max(2.0) as usize;
    let sw = match shape {
        Shape::Disk => sh * w / h,
        _ => ((w as f64) * rng.random_range(wlo..whi)).max(2.0) as usize,
    };
    let y0 = rng.random_range(0..=h.saturating_sub(sh));
    let x0 = rng.random_range(0..=w.saturating_sub(sw));
    let (cy, cx) = (y0 as f64 + sh as f64 / 2.0, x0 as f64 + sw as f64 / 2.0);
    let (ry, rx) = (sh as f64 / 2.0, sw as f64 / 2.0);
    for y in y0..(y0 + sh).min(h) {
        for x in x0..(x0 + sw).min(w) {
            let inside = match shape {
                Shape::Rect => true,
                Shape::Ellipse | Shape::Disk => {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    dy * dy + dx * dx <= 1.0
                }
            };
            if inside {
                labels[y * w + x] = class;
            }
        }
    }
}

fn scene_labels(h: usize, w: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels = vec![0usize; h * w];
    let blob = ((0.2, 0.5), (0.2, 0.5));
    if classes >= 3 {
        let (strip, disk) = (classes - 2, classes - 1);
        let generic = classes - 3;
        let n_generic = rng.random_range(generic.min(2)..=generic + 1);
        let mut jobs: Vec<(Shape, usize, Extent)> = Vec::new();
        for _ in 0..n_generic {
            let class = if generic == 0 { strip } else { 1 + rng.random_range(0..generic) };
            let shape = if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
            jobs.push((shape, class, blob));
        }
        // The confusable pair differs only in geometry: long thin strips
        // against large round disks.
        let (thin, long) = ((0.16, 0.22), (0.6, 1.0));
        for _ in 0..rng.random_range(1..=2) {
            let extent = if rng.random_bool(0.5) { (thin, long) } else { (long, thin) };
            jobs.push((Shape::Rect, strip, extent));
        }
        for _ in 0..rng.random_range(1..=2) {
            jobs.push((Shape::Disk, disk, ((0.4, 0.53), (0.4, 0.53))));
        }
        // Paint in a random order so overlaps do not favour one class.
        jobs.shuffle(rng);
        for (shape, class, extent) in jobs {
            paint(&mut labels, h, w, shape, class, rng, extent);
        }
    } else {
        for _ in 0..rng.random_range(1..=3) {
            let shape = if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
            paint(&mut labels, h, w, shape, 1, rng, blob);
        }
    }
    labels
}

/// Exact squared Euclidean distance transform of one line (lower envelope
/// of parabolas). `f` holds 0 at feature points and +inf elsewhere.
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![f64::INFINITY; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => return d,
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut j = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let diff = q as f64 - p as f64;
        *out = diff * diff + f[p];
    }
    d
}

/// Euclidean distance from each pixel to the nearest boundary pixel, divided
/// by a quarter of the shorter side and clipped to 1. The fixed scale keeps
/// object size comparable across scenes. A boundary pixel has a 4-neighbour
/// with a different label. Scenes without any boundary map to all ones.
pub fn boundary_distance(labels: &[usize], h: usize, w: usize) -> Tensor {
    let mut grid = vec![f64::INFINITY; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            let differs = (y > 0 && labels[(y - 1) * w + x] != l)
                || (y + 1 < h && labels[(y + 1) * w + x] != l)
                || (x > 0 && labels[y * w + x - 1] != l)
                || (x + 1 < w && labels[y * w + x + 1] != l);
            if differs {
                grid[y * w + x] = 0.0;
            }
        }
    }
    if grid.iter().all(|v| v.is_infinite()) {
        return Tensor::full(&[1, h, w], 1.0);
    }
    for y in 0..h {
        let row = edt_1d(&grid[y * w..(y + 1) * w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    for x in 0..w {
        let col: Vec<f64> = (0..h).map(|y| grid[y * w + x]).collect();
        for (y, v) in edt_1d(&col).into_iter().enumerate() {
            grid[y * w + x] = v;
        }
    }
    let scale = (h.min(w) as f64 / 4.0).max(1.0);
    let data = grid.iter().map(|v| (v.sqrt() / scale).min(1.0)).collect();
    Tensor::new(vec![1, h, w], data).expect("sized by construction")
}

/// One source-domain scene. Stored values are rounded to `f32` so a sample
/// read back from disk is identical to the one generated.
pub fn generate_scene(seed: u64, h: usize, w: usize, classes: usize, channels: usize) -> Result<SynthSample> {
    check_scene_dims(classes, channels)?;
    if h < 4 || w < 4 {
        return Err(Error::Config(format!("scene {h}×{w} is too small")));
    }
    let sigs = class_signatures(classes, channels)?;
    let mut rng = rng_from(child_seed(seed, "layout"));
    let labels = scene_labels(h, w, classes, &mut rng);
    let mut pixel_rng = rng_from(child_seed(seed, "pixels"));
    let mut image = vec![0.0; channels * h * w];
    for b in 0..channels {
        for i in 0..h * w {
            let v = sigs[labels[i]][b] + PIXEL_NOISE * normal(&mut pixel_rng);
            image[b * h * w + i] = v.clamp(0.0, 1.0) as f32 as f64;
        }
    }
    let structural = boundary_distance(&labels, h, w).map(|v| v as f32 as f64);
    Ok(SynthSample {
        image: Tensor::new(vec![channels, h, w], image)?,
        structural,
        labels,
        domain: Domain::Source,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub noise_sigma: f64,
}

impl DomainShift {
    pub fn identity(channels: usize) -> Self {
        Self {
            gain: vec![1.0; channels],
            bias: vec![0.0; channels],
            gamma: vec![1.0; channels],
            noise_sigma: 0.0,
        }
    }

    /// The benchmark's target shift: a darker sensor with a linear spectral
    /// tilt, so short bands lose more than long ones.
    pub fn default_target(channels: usize) -> Self {
        let tilt = |b: usize| -1.0 + 2.0 * b as f64 / (channels.max(2) - 1) as f64;
        Self {
            gain: (0..channels).map(|b| 0.7 + 0.1 * tilt(b)).collect(),
            bias: (0..channels).map(|b| 0.03 * tilt(b)).collect(),
            gamma: vec![1.0; channels],
            noise_sigma: 0.02,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.gain.len() != channels || self.bias.len() != channels || self.gamma.len() != channels {
            return Err(Error::Config(format!("shift must have {channels} bands")));
        }
        if self.gain.iter().chain(&self.gamma).any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("shift gain and gamma must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("shift noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// `clip(gain · x^gamma + bias + noise, 0, 1)` per band. Labels and the
/// structural map are copied unchanged.
pub fn apply_shift(sample: &SynthSample, shift: &DomainShift, rng: &mut ChaCha8Rng) -> Result<SynthSample> {
    let c = sample.image.shape()[0];
    shift.validate(c)?;
    let plane = sample.height() * sample.width();
    let mut image = sample.image.clone();
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        let b = i / plane;
        let noise = if shift.noise_sigma > 0.0 { shift.noise_sigma * normal(rng) } else { 0.0 };
        let shifted = shift.gain[b] * v.powf(shift.gamma[b]) + shift.bias[b] + noise;
        *v = shifted.clamp(0.0, 1.0) as f32 as f64;
    }
    Ok(SynthSample {
        image,
        structural: sample.structural.clone(),
        labels: sample.labels.clone(),
        domain: Domain::Target,
    })
}

/// Generator settings for a whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub channels: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub shift: DomainShift,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub source: Vec<SynthSample>,
    pub target: Vec<SynthSample>,
}

fn scene_seed(root: u64, domain: Domain, i: usize) -> u64 {
    indexed_seed(child_seed(root, domain.name()), i as u64)
}

pub fn generate_dataset(spec: &BenchSpec) -> Result<Dataset> {
    spec.shift.validate(spec.channels)?;
    let gen = |i: usize, domain: Domain| -> Result<SynthSample> {
        let seed = scene_seed(spec.seed, domain, i);
        let scene = generate_scene(seed, spec.height, spec.width, spec.classes, spec.channels)?;
        match domain {
            Domain::Source => Ok(scene),
            Domain::Target => apply_shift(&scene, &spec.shift, &mut rng_from(child_seed(seed, "shift"))),
        }
    };
    Ok(Dataset {
        source: crate::par::map_indexed(spec.n_source, |i| gen(i, Domain::Source))?,
        target: crate::par::map_indexed(spec.n_target, |i| gen(i, Domain::Target))?,
    })
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_floats(m: &Manifest, key: &str) -> Result<Vec<f64>> {
    m.require(key)?
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("manifest key `{key}` holds a non-number")))
        })
        .collect()
}

fn sample_paths(dir: &Path, i: usize) -> [std::path::PathBuf; 3] {
    [
        dir.join(format!("{i:05}_image.smtx")),
        dir.join(format!("{i:05}_structural.smtx")),
        dir.join(format!("{i:05}_labels.smtx")),
    ]
}

/// Writes `source/` and `target/` sample files plus `index.manifest`.
pub fn write_dataset(dir: &Path, spec: &BenchSpec, data: &Dataset) -> Result<()> {
    for (domain, samples) in [(Domain::Source, &data.source), (Domain::Target, &data.target)] {
        let sub = dir.join(domain.name());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, s) in samples.iter().enumerate() {
            let [img, st, lb] = sample_paths(&sub, i);
            smtx::write(&img, &s.image, Precision::F32)?;
            smtx::write(&st, &s.structural, Precision::F32)?;
            let labels = Tensor::new(
                vec![s.height(), s.width()],
                s.labels.iter().map(|&l| l as f64).collect(),
            )?;
            smtx::write(&lb, &labels, Precision::F32)?;
        }
    }
    let mut m = Manifest::new();
    m.set("generator_seed", spec.seed)
        .set("H", spec.height)
        .set("W", spec.width)
        .set("K", spec.classes)
        .set("C", spec.channels)
        .set("n_source", spec.n_source)
        .set("n_target", spec.n_target)
        .set("shift_gain", list(&spec.shift.gain))
        .set("shift_bias", list(&spec.shift.bias))
        .set("shift_gamma", list(&spec.shift.gamma))
        .set("shift_noise_sigma", format!("{:?}", spec.shift.noise_sigma));
    m.write(&dir.join("index.manifest"))
}

pub fn read_dataset(dir: &Path) -> Result<(BenchSpec, Dataset)> {
    let m = Manifest::read(&dir.join("index.manifest"))?;
    let spec = BenchSpec {
        seed: m.parse_key("generator_seed")?,
        height: m.parse_key("H")?,
        width: m.parse_key("W")?,
        classes: m.parse_key("K")?,
        channels: m.parse_key("C")?,
        n_source: m.parse_key("n_source")?,
        n_target: m.parse_key("n_target")?,
        shift: DomainShift {
            gain: parse_floats(&m, "shift_gain")?,
            bias: parse_floats(&m, "shift_bias")?,
            gamma: parse_floats(&m, "shift_gamma")?,
            noise_sigma: m.parse_key("shift_noise_sigma")?,
        },
    };
    let load = |domain: Domain, n: usize| -> Result<Vec<SynthSample>> {
        let sub = dir.join(domain.name());
        (0..n)
            .map(|i| {
                let [img, st, lb] = sample_paths(&sub, i);
                let image = smtx::read(&img)?;
                let structural = smtx::read(&st)?;
                let labels_t = smtx::read(&lb)?;
                if image.shape() != [spec.channels, spec.height, spec.width]
                    || structural.shape() != [1, spec.height, spec.width]
                    || labels_t.shape() != [spec.height, spec.width]
                {
                    return Err(Error::format(&img, "sample shape disagrees with the index"));
                }
                let labels = labels_t
                    .data()
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 && (v as usize) < spec.classes {
                            Ok(v as usize)
                        } else {
                            Err(Error::format(&lb, format!("invalid label {v}")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SynthSample { image, structural, labels, domain })
            })
            .collect()
    };
    let data = Dataset {
        source: load(Domain::Source, spec.n_source)?,
        target: load(Domain::Target, spec.n_target)?,
    };
    Ok((spec, data))
}

/// Segmentation scores from a micro-accumulated confusion matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub macc: f64,
    /// `None` for classes absent from both predictions and labels.
    pub per_class_iou: Vec<Option<f64>>,
    /// Row = true class, column = predicted class.
    pub confusion: Vec<Vec<u64>>,
}

/// Accumulates `(label, prediction)` pairs into a `K × K` matrix.
pub fn confusion_matrix(pairs: impl IntoIterator<Item = (usize, usize)>, classes: usize) -> Result<Vec<Vec<u64>>> {
    let mut conf = vec![vec![0u64; classes]; classes];
    for (label, pred) in pairs {
        if label == IGNORE_LABEL {
            continue;
        }
        if label >= classes || pred >= classes {
            return Err(Error::Config(format!("class id outside [0, {classes})")));
        }
        conf[label][pred] += 1;
    }
    Ok(conf)
}

pub fn metrics_from_confusion(conf: &[Vec<u64>]) -> Result<SegMetrics> {
    let k = conf.len();
    let total: u64 = conf.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Degenerate("no pixels to evaluate".into()));
    }
    let mut per_class_iou = Vec::with_capacity(k);
    let (mut iou_sum, mut iou_n, mut acc_sum, mut acc_n) = (0.0, 0usize, 0.0, 0usize);
    for c in 0..k {
        let tp = conf[c][c];
        let gt: u64 = conf[c].iter().sum();
        let pred: u64 = conf.iter().map(|row| row[c]).sum();
        let union = gt + pred - tp;
        if union == 0 {
            per_class_iou.push(None);
            continue;
        }
        let iou = tp as f64 / union as f64;
        per_class_iou.push(Some(iou));
        iou_sum += iou;
        iou_n += 1;
        if gt > 0 {
            acc_sum += tp as f64 / gt as f64;
            acc_n += 1;
        }
    }
    Ok(SegMetrics {
        miou: iou_sum / iou_n as f64,
        macc: if acc_n > 0 { acc_sum / acc_n as f64 } else { 0.0 },
        per_class_iou,
        confusion: conf.to_vec(),
    })
}

/// Per-pixel predictions: each pixel takes its patch token's arg-max class.
pub fn predict_pixels(token_logits: &Tensor, h: usize, w: usize, patch: usize) -> Vec<usize> {
    let gw = w / patch;
    let argmax: Vec<usize> = (0..token_logits.rows())
        .map(|t| {
            let row = token_logits.row(t);
            (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b })
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(argmax[(y / patch) * gw + x / patch]);
        }
    }
    out
}

/// Evaluation-mode scores (noise off) over a sample set.
pub fn evaluate(stack: &AdapterStack, backbone: &FrozenBackbone, samples: &[SynthSample]) -> Result<SegMetrics> {
    if samples.is_empty() {
        return Err(Error::Degenerate("cannot evaluate an empty sample set".into()));
    }
    let k = stack.config.classes;
    let patch = stack.config.patch;
    let preds = crate::par::map_indexed(samples.len(), |i| {
        let s = &samples[i];
        let input = prepare(stack, backbone, s)?;
        let trace = forward_prepared(stack, backbone, &input, None)?;
        Ok(predict_pixels(&trace.logits, s.height(), s.width(), patch))
    })?;
    let mut conf = vec![vec![0u64; k]; k];
    for (s, pred) in samples.iter().zip(&preds) {
        let c = confusion_matrix(s.labels.iter().copied().zip(pred.iter().copied()), k)?;
        for (row, add) in conf.iter_mut().zip(c) {
            for (v, a) in row.iter_mut().zip(add) {
                *v += a;
            }
        }
    }
    metrics_from_confusion(&conf)
}

/// Backbone features for one sample under the stack's variant.
pub fn prepare(stack: &AdapterStack, backbone: &FrozenBackbone, sample: &SynthSample) -> Result<PreparedInput> {
    if stack.config.variant == crate::config::Variant::NoStructural {
        PreparedInput::new(backbone, &sample.image, &Tensor::zeros(sample.structural.shape()))
    } else {
        PreparedInput::new(backbone, &sample.image, &sample.structural)
    }
}

/// Per-class pixel frequencies of a sample set.
pub fn class_frequencies(samples: &[SynthSample], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    let mut total = 0usize;
    for s in samples {
        for &l in &s.labels {
            counts[l] += 1;
            total += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// Mean over bands of the absolute change in mean band intensity.
pub fn mean_band_change(before: &[SynthSample], after: &[SynthSample]) -> f64 {
    let band_means = |set: &[SynthSample]| -> Vec<f64> {
        let c = set[0].image.shape()[0];
        let plane = set[0].height() * set[0].width();
        let mut sums = vec![0.0; c];
        for s in set {
            for (i, v) in s.image.data().iter().enumerate() {
                sums[i / plane] += v;
            }
        }
        sums.iter().map(|v| v / (set.len() * plane) as f64).collect()
    };
    let (a, b) = (band_means(before), band_means(after));
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};

    #[test]
    fn single_rectangle_has_zero_structure_on_its_border() {
        let (h, w) = (10, 12);
        let mut labels = vec![0usize; h * w];
        for y in 3..7 {
            for x in 2..9 {
                labels[y * w + x] = 1;
            }
        }
        let s = boundary_distance(&labels, h, w);
        for y in 3..7 {
            for x in 2..9 {
                let border = y == 3 || y == 6 || x == 2 || x == 8;
                if border {
                    assert_eq!(s.data()[y * w + x], 0.0);
                }
            }
        }
        assert_eq!(s.data()[2 * w + 2], 0.0);
        assert!(s.data()[0] > 0.0);
        assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(s.data().iter().fold(0.0f64, |m, &v| m.max(v)), 1.0);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = rng_from(4);
        let (h, w) = (20, 23);
        let labels: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..60) / 59).collect();
        let s = boundary_distance(&labels, h, w);
        let mut boundary = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let l = labels[y * w + x];
                let nb = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
                if nb.iter().any(|&(yy, xx)| yy < h && xx < w && labels[yy * w + xx] != l) {
                    boundary.push((y as f64, x as f64));
                }
            }
        }
        let raw: Vec<f64> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                boundary
                    .iter()
                    .map(|(by, bx)| ((y - by).powi(2) + (x - bx).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        assert!(raw.iter().any(|&r| r > 5.0), "scale clipping is exercised");
        for (a, b) in s.data().iter().zip(&raw) {
            assert!((a - (b / 5.0).min(1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn scenes_are_deterministic_and_checked() {
        let a = generate_scene(5, 32, 32, 5, 8).unwrap();
        let b = generate_scene(5, 32, 32, 5, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(6, 32, 32, 5, 8).unwrap());
        assert!(generate_scene(5, 32, 32, 1, 8).is_err());
        assert!(generate_scene(5, 32, 32, 5, 2).is_err());
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn confusable_pair_is_close_and_others_are_not() {
        let sigs = class_signatures(5, 8).unwrap();
        assert!(euclid(&sigs[3], &sigs[4]) < 0.05);
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(euclid(&sigs[i], &sigs[j]) > 0.25);
            }
        }
    }

    #[test]
    fn identity_and_gain_shifts() {
        let s = generate_scene(1, 16, 16, 3, 4).unwrap();
        let mut rng = rng_from(0);
        assert_eq!(apply_shift(&s, &DomainShift::identity(4), &mut rng).unwrap().image, s.image);
        let flat = SynthSample { image: Tensor::full(&[4, 16, 16], 0.4), ..s.clone() };
        let shift = DomainShift { gain: vec![2.0; 4], ..DomainShift::identity(4) };
        let out = apply_shift(&flat, &shift, &mut rng).unwrap();
        assert!(out.image.data().iter().all(|&v| (v - 0.8).abs() < 1e-6));
        let bad = DomainShift { gamma: vec![0.0; 4], ..DomainShift::identity(4) };
        assert!(apply_shift(&s, &bad, &mut rng).is_err());
    }

    #[test]
    fn shift_keeps_geometry() {
        let s = generate_scene(8, 32, 32, 5, 8).unwrap();
        let t = apply_shift(&s, &DomainShift::default_target(8), &mut rng_from(3)).unwrap();
        assert_eq!(t.labels, s.labels);
        assert_eq!(t.structural, s.structural);
        assert_eq!(t.domain, Domain::Target);
    }

    #[test]
    fn constant_prediction_on_balanced_two_class_image() {
        let labels = [0, 0, 1, 1];
        let conf = confusion_matrix(labels.iter().map(|&l| (l, 0)), 2).unwrap();
        let m = metrics_from_confusion(&conf).unwrap();
        assert_eq!(m.per_class_iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(m.miou, 0.25);
        assert_eq!(m.macc, 0.5);
        let perfect = confusion_matrix(labels.iter().map(|&l| (l, l)), 3).unwrap();
        let p = metrics_from_confusion(&perfect).unwrap();
        assert_eq!((p.miou, p.macc), (1.0, 1.0));
        assert_eq!(p.per_class_iou[2], None);
        assert!(metrics_from_confusion(&vec![vec![0; 2]; 2]).is_err());
    }

    #[test]
    fn token_labels_take_patch_majority() {
        let mut s = generate_scene(2, 8, 8, 3, 3).unwrap();
        s.labels = vec![0; 64];
        for y in 0..4 {
            for x in 4..8 {
                s.labels[y * 8 + x] = if x == 4 && y == 0 { 0 } else { 2 };
            }
        }
        assert_eq!(s.token_labels(4, 3).unwrap(), vec![0, 2, 0, 0]);
    }

    #[test]
    fn dataset_roundtrips_through_disk() {
        let spec = BenchSpec {
            seed: 3,
            height: 16,
            width: 16,
            classes: 4,
            channels: 3,
            n_source: 3,
            n_target: 2,
            shift: DomainShift::default_target(3),
        };
        let data = generate_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &spec, &data).unwrap();
        let (spec2, data2) = read_dataset(dir.path()).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(data2, data);
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60),
        ) {
            let conf = confusion_matrix(pairs.iter().copied(), 4).unwrap();
            let m = metrics_from_confusion(&conf).unwrap();
            let mut ious = Vec::new();
            let mut accs = Vec::new();
            for c in 0..4 {
                let tp = pairs.iter().filter(|&&(l, p)| l == c && p == c).count();
                let fp = pairs.iter().filter(|&&(l, p)| l != c && p == c).count();
                let fneg = pairs.iter().filter(|&&(l, p)| l == c && p != c).count();
                if tp + fp + fneg > 0 {
                    ious.push(tp as f64 / (tp + fp + fneg) as f64);
                }
                if tp + fneg > 0 {
                    accs.push(tp as f64 / (tp + fneg) as f64);
                }
            }
            prop_assert_eq!(m.miou, ious.iter().sum::<f64>() / ious.len() as f64);
            prop_assert_eq!(m.macc, accs.iter().sum::<f64>() / accs.len() as f64);
            let mut rev = pairs.clone();
            rev.reverse();
            prop_assert_eq!(metrics_from_confusion(&confusion_matrix(rev, 4).unwrap()).unwrap(), m);
        }
    }
}
