//! Deterministic synthetic image datasets.
//!
//! Each class is a prototype image built from a spatial pattern (stripes,
//! checkers, blobs, rings, crosses, ramps) painted with a foreground and a
//! background colour. Samples are the prototype plus a per-sample global
//! attribute perturbation (brightness, tint, contrast) and Gaussian pixel
//! noise, clipped to `[0, 1]`. Everything is a pure function of the config
//! and the seed.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{salt, stream};

pub const CHANNELS: usize = 3;
pub const HEIGHT: usize = 16;
pub const WIDTH: usize = 16;
pub const PIXELS: usize = CHANNELS * HEIGHT * WIDTH;

pub type ClassId = u32;

/// A `3×16×16` image in channel-major order with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ToyImage {
    pixels: Vec<f64>,
}

impl TryFrom<Vec<f64>> for ToyImage {
    type Error = Error;

    fn try_from(pixels: Vec<f64>) -> Result<Self> {
        ToyImage::new(pixels)
    }
}

impl From<ToyImage> for Vec<f64> {
    fn from(img: ToyImage) -> Self {
        img.pixels
    }
}

impl ToyImage {
    pub fn new(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::dim(format!("image needs {PIXELS} pixels, got {}", pixels.len())));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::config(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    /// Builds an image from arbitrary values, clipping into `[0, 1]`.
    pub fn from_unclipped(mut pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), PIXELS);
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self { pixels }
    }

    pub fn filled(value: f64) -> Self {
        Self::from_unclipped(vec![value; PIXELS])
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn index(c: usize, y: usize, x: usize) -> usize {
        (c * HEIGHT + y) * WIDTH + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[Self::index(c, y, x)]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / PIXELS as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Bars,
    Checker,
    Ramp,
    Blob,
    Ring,
    Cross,
}

/// Which pattern kinds a dataset draws its prototypes from. `Stripes` and
/// `Shapes` are disjoint, so a `Stripes` source and a `Shapes` target form a
/// cross-dataset pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeFamily {
    #[default]
    Mixed,
    Stripes,
    Shapes,
}

impl PrototypeFamily {
    fn kinds(self) -> &'static [PatternKind] {
        use PatternKind::*;
        match self {
            PrototypeFamily::Mixed => &[Bars, Checker, Ramp, Blob, Ring, Cross],
            PrototypeFamily::Stripes => &[Bars, Checker, Ramp],
            PrototypeFamily::Shapes => &[Blob, Ring, Cross],
        }
    }
}

/// Per-class colour and shape parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeProfile {
    pub pattern: PatternKind,
    pub orientation: f64,
    pub frequency: f64,
    pub phase: f64,
    pub center: [f64; 2],
    pub radius: f64,
    pub foreground: [f64; 3],
    pub background: [f64; 3],
}

/// Scene lighting shared by every prototype: brightest at the top-left
/// corner, so upright images have a canonical orientation.
fn illumination(y: usize, x: usize) -> f64 {
    let top = 1.0 - y as f64 / (HEIGHT - 1) as f64;
    let left = 1.0 - x as f64 / (WIDTH - 1) as f64;
    0.65 + 0.35 * top + 0.2 * left
}

impl AttributeProfile {
    /// Pattern intensity in `[0, 1]` at pixel `(y, x)`.
    fn intensity(&self, y: usize, x: usize) -> f64 {
        let u = (x as f64 + 0.5) / WIDTH as f64;
        let v = (y as f64 + 0.5) / HEIGHT as f64;
        let (s, c) = self.orientation.sin_cos();
        let along = u * c + v * s;
        let du = u - self.center[0];
        let dv = v - self.center[1];
        let r = (du * du + dv * dv).sqrt();
        match self.pattern {
            PatternKind::Bars => {
                let w = (2.0 * PI * self.frequency * along + self.phase).cos();
                (0.5 + 1.5 * w).clamp(0.0, 1.0)
            }
            PatternKind::Checker => {
                let cells = self.frequency.round().max(2.0);
                let rot_u = u * c - v * s + self.phase;
                let rot_v = u * s + v * c;
                let a = (rot_u * cells).floor() as i64 + (rot_v * cells).floor() as i64;
                if a.rem_euclid(2) == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            PatternKind::Ramp => {
                // Asymmetric ramp so flips and rotations remain visible.
                let t = (along * 1.2 - 0.1 + 0.2 * self.phase.sin()).clamp(0.0, 1.0);
                t * t
            }
            PatternKind::Blob => (-(r * r) / (2.0 * self.radius * self.radius)).exp(),
            PatternKind::Ring => {
                let w = 0.06;
                (-((r - self.radius) * (r - self.radius)) / (2.0 * w * w)).exp()
            }
            PatternKind::Cross => {
                let across = -du * s + dv * c;
                let lengthwise = du * c + dv * s;
                let arm = |d: f64| (-(d * d) / (2.0 * 0.05 * 0.05)).exp();
                // Arms of unequal length break the cross's symmetry.
                let fade = if lengthwise > 0.0 { 1.0 } else { (1.0 + 3.0 * lengthwise).max(0.0) };
                arm(across).max(arm(lengthwise) * fade * 0.8) * (1.0 - 0.5 * r).max(0.0)
            }
        }
    }

    pub fn render(&self) -> ToyImage {
        let mut pixels = vec![0.0; PIXELS];
        for y in 0..HEIGHT {
            for x in 0..WIDTH {
                let t = self.intensity(y, x);
                let light = illumination(y, x);
                for ch in 0..CHANNELS {
                    pixels[ToyImage::index(ch, y, x)] = light
                        * (self.background[ch] + (self.foreground[ch] - self.background[ch]) * t);
                }
            }
        }
        ToyImage::from_unclipped(pixels)
    }

    fn random(rng: &mut impl Rng, family: PrototypeFamily) -> Self {
        let kinds = family.kinds();
        let pattern = kinds[rng.random_range(0..kinds.len())];
        let foreground = [rng.random(), rng.random(), rng.random()];
        let mut background: [f64; 3];
        loop {
            background = [rng.random(), rng.random(), rng.random()];
            let contrast: f64 = foreground
                .iter()
                .zip(&background)
                .map(|(a, b): (&f64, &f64)| (a - b).abs())
                .sum();
            if contrast > 0.9 {
                break;
            }
        }
        Self {
            pattern,
            orientation: rng.random_range(0.0..PI),
            frequency: rng.random_range(1.5..4.0),
            phase: rng.random_range(0.0..2.0 * PI),
            center: [rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)],
            radius: rng.random_range(0.12..0.3),
            foreground,
            background,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: ClassId,
    pub prototype: ToyImage,
    pub intra_class_noise: f64,
    pub attribute_profile: AttributeProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub name: String,
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_sigma: f64,
    /// Half-width of the per-sample brightness, tint and contrast draws.
    pub attribute_jitter: f64,
    pub family: PrototypeFamily,
    /// Added to `0..num_classes` to form class ids, so datasets used side by
    /// side can keep their ids disjoint.
    pub class_id_offset: ClassId,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            num_classes: 8,
            samples_per_class: 50,
            noise_sigma: 0.05,
            attribute_jitter: 0.1,
            family: PrototypeFamily::Mixed,
            class_id_offset: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub class_id: ClassId,
    pub image: ToyImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub config: DatasetConfig,
    pub classes: Vec<ClassSpec>,
    pub samples: Vec<Sample>,
    pub generator_seed: u64,
}

const MIN_PROTOTYPE_DISTANCE: f64 = 3.0;

pub fn generate_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    if config.num_classes < 4 {
        return Err(Error::config(format!(
            "datasets need at least 4 classes, got {}",
            config.num_classes
        )));
    }
    if config.samples_per_class < 2 {
        return Err(Error::config("samples_per_class must be at least 2"));
    }
    if !(config.noise_sigma >= 0.0 && config.noise_sigma.is_finite()) {
        return Err(Error::config(format!("noise_sigma must be >= 0, got {}", config.noise_sigma)));
    }
    if !(config.attribute_jitter >= 0.0 && config.attribute_jitter <= 0.5) {
        return Err(Error::config(format!(
            "attribute_jitter must lie in [0, 0.5], got {}",
            config.attribute_jitter
        )));
    }

    let mut proto_rng = stream(seed, salt::PROTOTYPES);
    let mut classes: Vec<ClassSpec> = Vec::with_capacity(config.num_classes);
    let mut attempts = 0;
    while classes.len() < config.num_classes {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::config("could not draw enough distinct class prototypes"));
        }
        let profile = AttributeProfile::random(&mut proto_rng, config.family);
        let prototype = profile.render();
        let distinct = classes
            .iter()
            .all(|c| distance(c.prototype.pixels(), prototype.pixels()) > MIN_PROTOTYPE_DISTANCE);
        if distinct {
            classes.push(ClassSpec {
                class_id: config.class_id_offset + classes.len() as ClassId,
                prototype,
                intra_class_noise: config.noise_sigma,
                attribute_profile: profile,
            });
        }
    }

    let mut sample_rng = stream(seed, salt::SAMPLES);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let j = config.attribute_jitter;
    let mut samples = Vec::with_capacity(config.num_classes * config.samples_per_class);
    for class in &classes {
        for _ in 0..config.samples_per_class {
            let brightness = sample_rng.random_range(-1.0..=1.0) * j;
            let tint: [f64; 3] = std::array::from_fn(|_| sample_rng.random_range(-1.0..=1.0) * j * 0.5);
            let contrast = 1.0 + sample_rng.random_range(-1.0..=1.0) * j;
            let proto = class.prototype.pixels();
            let mean = class.prototype.mean();
            let mut pixels = Vec::with_capacity(PIXELS);
            for (i, &p) in proto.iter().enumerate() {
                let ch = i / (HEIGHT * WIDTH);
                let mut v = (p - mean) * contrast + mean + brightness + tint[ch];
                if config.noise_sigma > 0.0 {
                    v += config.noise_sigma * noise.sample(&mut sample_rng);
                }
                pixels.push(v);
            }
            // With no attribute variation and no noise a sample is its prototype.
            let image = if j == 0.0 && config.noise_sigma == 0.0 {
                class.prototype.clone()
            } else {
                ToyImage::from_unclipped(pixels)
            };
            samples.push(Sample {
                class_id: class.class_id,
                image,
            });
        }
    }

    Ok(Dataset {
        name: config.name.clone(),
        config: config.clone(),
        classes,
        samples,
        generator_seed: seed,
    })
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Dataset {
    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    pub fn class(&self, id: ClassId) -> Option<&ClassSpec> {
        self.classes.iter().find(|c| c.class_id == id)
    }

    pub fn indices_of(&self, id: ClassId) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.class_id == id)
            .map(|(i, _)| i)
            .collect()
    }

    /// SHA-256 over the name, seed and every pixel's bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update(self.generator_seed.to_le_bytes());
        for c in &self.classes {
            h.update(c.class_id.to_le_bytes());
            for p in c.prototype.pixels() {
                h.update(p.to_bits().to_le_bytes());
            }
        }
        for s in &self.samples {
            h.update(s.class_id.to_le_bytes());
            for p in s.image.pixels() {
                h.update(p.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn export_json(&self, path: &Path) -> Result<()> {
        let doc = DatasetDocument {
            format_version: DATASET_FORMAT_VERSION,
            dataset: self.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&doc)?)?;
        Ok(())
    }

    pub fn import_json(path: &Path) -> Result<Self> {
        let doc: DatasetDocument = serde_json::from_slice(&std::fs::read(path)?)?;
        if doc.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Version {
                expected: DATASET_FORMAT_VERSION.to_string(),
                found: doc.format_version.to_string(),
            });
        }
        Ok(doc.dataset)
    }
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetDocument {
    format_version: u32,
    dataset: Dataset,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Base/new class partition plus the shot count for few-shot sampling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub base_class_ids: BTreeSet<ClassId>,
    pub new_class_ids: BTreeSet<ClassId>,
    pub shots: usize,
}

/// Random equal partition of the classes into base and new halves.
pub fn split_base_new(dataset: &Dataset, shots: usize, seed: u64) -> Result<SplitPlan> {
    let mut ids = dataset.class_ids();
    if ids.len() % 2 != 0 {
        return Err(Error::config(format!(
            "base/new split needs an even class count, got {}",
            ids.len()
        )));
    }
    if shots == 0 {
        return Err(Error::config("shots must be at least 1"));
    }
    ids.shuffle(&mut stream(seed, salt::SPLIT));
    let half = ids.len() / 2;
    Ok(SplitPlan {
        base_class_ids: ids[..half].iter().copied().collect(),
        new_class_ids: ids[half..].iter().copied().collect(),
        shots,
    })
}

/// Few-shot training indices and the held-out samples of the same classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub class_ids: Vec<ClassId>,
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

/// Draws `plan.shots` samples per base class; the rest of each base class is
/// held out for validation.
pub fn sample_few_shot(dataset: &Dataset, plan: &SplitPlan, seed: u64) -> Result<TrainingSet> {
    few_shot_over(dataset, &plan.base_class_ids.iter().copied().collect::<Vec<_>>(), plan.shots, seed)
}

/// Few-shot sampling over an explicit class list (all classes for the
/// cross-dataset and domain-shift protocols).
pub fn few_shot_over(
    dataset: &Dataset,
    class_ids: &[ClassId],
    shots: usize,
    seed: u64,
) -> Result<TrainingSet> {
    let mut rng = stream(seed, salt::FEW_SHOT);
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for &id in class_ids {
        let mut idx = dataset.indices_of(id);
        if idx.len() < shots {
            return Err(Error::config(format!(
                "class {id} has {} samples, fewer than {shots} shots",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let (t, h) = idx.split_at(shots);
        train.extend_from_slice(t);
        held_out.extend_from_slice(h);
    }
    train.sort_unstable();
    held_out.sort_unstable();
    Ok(TrainingSet {
        class_ids: class_ids.to_vec(),
        train,
        held_out,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Brightness,
    Contrast,
    Noise,
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brightness" => Ok(ShiftKind::Brightness),
            "contrast" => Ok(ShiftKind::Contrast),
            "noise" => Ok(ShiftKind::Noise),
            other => Err(Error::config(format!("unknown shift `{other}`"))),
        }
    }
}

impl ShiftKind {
    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::Brightness => "brightness",
            ShiftKind::Contrast => "contrast",
            ShiftKind::Noise => "noise",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub kind: ShiftKind,
    pub magnitude: f64,
}

impl ShiftConfig {
    pub fn label(&self) -> String {
        format!("{}{:+}", self.kind.name(), self.magnitude)
    }
}

/// Re-renders every sample under a global perturbation: additive brightness,
/// contrast shrink by `magnitude` around the image mean, or extra Gaussian
/// noise of standard deviation `magnitude`.
pub fn generate_shifted_dataset(dataset: &Dataset, shift: &ShiftConfig, seed: u64) -> Result<Dataset> {
    if !shift.magnitude.is_finite() {
        return Err(Error::config("shift magnitude must be finite"));
    }
    match shift.kind {
        ShiftKind::Contrast if !(0.0..=1.0).contains(&shift.magnitude) => {
            return Err(Error::config("contrast shift magnitude must lie in [0, 1]"))
        }
        ShiftKind::Noise if shift.magnitude < 0.0 => {
            return Err(Error::config("noise shift magnitude must be >= 0"))
        }
        _ => {}
    }
    let mut out = dataset.clone();
    if shift.magnitude == 0.0 {
        return Ok(out);
    }
    out.name = format!("{}@{}", dataset.name, shift.label());
    let mut rng = stream(seed, salt::SHIFT);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for s in &mut out.samples {
        let mean = s.image.mean();
        let px: Vec<f64> = s
            .image
            .pixels()
            .iter()
            .map(|&p| match shift.kind {
                ShiftKind::Brightness => p + shift.magnitude,
                ShiftKind::Contrast => (p - mean) * (1.0 - shift.magnitude) + mean,
                ShiftKind::Noise => p + shift.magnitude * normal.sample(&mut rng),
            })
            .collect();
        s.image = ToyImage::from_unclipped(px);
    }
    Ok(out)
}
