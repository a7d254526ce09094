//! The 14-way augmentation bank and the weighted pair sampler.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ToyImage, CHANNELS, HEIGHT, PIXELS, WIDTH};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    RandomCrop,
    Cutout,
    HorizontalFlip,
    VerticalFlip,
    #[serde(rename = "rotate_90")]
    Rotate90,
    #[serde(rename = "rotate_180")]
    Rotate180,
    #[serde(rename = "rotate_270")]
    Rotate270,
    Brightness,
    Contrast,
    Saturation,
    Hue,
    Grayscale,
    GaussianBlur,
    GaussianNoise,
}

pub const NUM_KINDS: usize = 14;

impl AugmentationKind {
    pub const ALL: [AugmentationKind; NUM_KINDS] = [
        AugmentationKind::RandomCrop,
        AugmentationKind::Cutout,
        AugmentationKind::HorizontalFlip,
        AugmentationKind::VerticalFlip,
        AugmentationKind::Rotate90,
        AugmentationKind::Rotate180,
        AugmentationKind::Rotate270,
        AugmentationKind::Brightness,
        AugmentationKind::Contrast,
        AugmentationKind::Saturation,
        AugmentationKind::Hue,
        AugmentationKind::Grayscale,
        AugmentationKind::GaussianBlur,
        AugmentationKind::GaussianNoise,
    ];

    /// Stable integer code `0..14`.
    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentationKind::RandomCrop => "random_crop",
            AugmentationKind::Cutout => "cutout",
            AugmentationKind::HorizontalFlip => "horizontal_flip",
            AugmentationKind::VerticalFlip => "vertical_flip",
            AugmentationKind::Rotate90 => "rotate_90",
            AugmentationKind::Rotate180 => "rotate_180",
            AugmentationKind::Rotate270 => "rotate_270",
            AugmentationKind::Brightness => "brightness",
            AugmentationKind::Contrast => "contrast",
            AugmentationKind::Saturation => "saturation",
            AugmentationKind::Hue => "hue",
            AugmentationKind::Grayscale => "grayscale",
            AugmentationKind::GaussianBlur => "gaussian_blur",
            AugmentationKind::GaussianNoise => "gaussian_noise",
        }
    }

    pub fn is_geometric(self) -> bool {
        matches!(
            self,
            AugmentationKind::HorizontalFlip
                | AugmentationKind::VerticalFlip
                | AugmentationKind::Rotate90
                | AugmentationKind::Rotate180
                | AugmentationKind::Rotate270
        )
    }

    /// Default "good" subset used by the subset-restriction ablation.
    pub fn good_subset() -> Vec<AugmentationKind> {
        use AugmentationKind::*;
        vec![RandomCrop, Cutout, Grayscale, GaussianBlur, GaussianNoise, Brightness, Contrast]
    }

    /// Complement of [`AugmentationKind::good_subset`]: flips, rotations,
    /// hue and saturation.
    pub fn bad_subset() -> Vec<AugmentationKind> {
        use AugmentationKind::*;
        vec![HorizontalFlip, VerticalFlip, Rotate90, Rotate180, Rotate270, Saturation, Hue]
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown augmentation `{s}`")))
    }
}

/// Parameter ranges for the photometric and stochastic kinds.
pub mod params {
    pub const CROP_SIZE: usize = 12;
    pub const CUTOUT_SIZE: usize = 6;
    pub const BRIGHTNESS: (f64, f64) = (0.1, 0.3);
    pub const CONTRAST: (f64, f64) = (0.4, 0.7);
    pub const SATURATION: (f64, f64) = (0.3, 0.6);
    pub const HUE_RADIANS: (f64, f64) = (std::f64::consts::FRAC_PI_6, std::f64::consts::FRAC_PI_2);
    pub const BLUR_SIGMA: (f64, f64) = (0.6, 1.2);
    pub const NOISE_SIGMA: (f64, f64) = (0.05, 0.12);
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn remap(img: &ToyImage, src: impl Fn(usize, usize) -> (usize, usize)) -> ToyImage {
    let mut out = vec![0.0; PIXELS];
    for c in 0..CHANNELS {
        for y in 0..HEIGHT {
            for x in 0..WIDTH {
                let (sy, sx) = src(y, x);
                out[ToyImage::index(c, y, x)] = img.get(c, sy, sx);
            }
        }
    }
    ToyImage::from_unclipped(out)
}

fn per_pixel_rgb(img: &ToyImage, f: impl Fn([f64; 3]) -> [f64; 3]) -> ToyImage {
    let mut out = vec![0.0; PIXELS];
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            let rgb = [img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)];
            let v = f(rgb);
            for c in 0..CHANNELS {
                out[ToyImage::index(c, y, x)] = v[c];
            }
        }
    }
    ToyImage::from_unclipped(out)
}

fn magnitude(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

/// Applies `kind` to `image`. Flips and rotations ignore `seed`; every other
/// kind draws its parameters from it.
pub fn apply(kind: AugmentationKind, image: &ToyImage, seed: u64) -> ToyImage {
    use AugmentationKind::*;
    let mut rng = stream(seed, kind.code() as u64 + 100);
    match kind {
        HorizontalFlip => remap(image, |y, x| (y, WIDTH - 1 - x)),
        VerticalFlip => remap(image, |y, x| (HEIGHT - 1 - y, x)),
        // Clockwise by 90 degrees.
        Rotate90 => remap(image, |y, x| (WIDTH - 1 - x, y)),
        Rotate180 => remap(image, |y, x| (HEIGHT - 1 - y, WIDTH - 1 - x)),
        Rotate270 => remap(image, |y, x| (x, HEIGHT - 1 - y)),
        RandomCrop => {
            let s = params::CROP_SIZE;
            let oy = rng.random_range(0..=HEIGHT - s);
            let ox = rng.random_range(0..=WIDTH - s);
            remap(image, |y, x| (oy + y * s / HEIGHT, ox + x * s / WIDTH))
        }
        Cutout => {
            let s = params::CUTOUT_SIZE;
            let oy = rng.random_range(0..=HEIGHT - s);
            let ox = rng.random_range(0..=WIDTH - s);
            let mut px = image.pixels().to_vec();
            for c in 0..CHANNELS {
                for y in oy..oy + s {
                    for x in ox..ox + s {
                        px[ToyImage::index(c, y, x)] = 0.0;
                    }
                }
            }
            ToyImage::from_unclipped(px)
        }
        Brightness => {
            let delta = magnitude(&mut rng, params::BRIGHTNESS);
            ToyImage::from_unclipped(image.pixels().iter().map(|p| p + delta).collect())
        }
        Contrast => {
            let factor = 1.0 + magnitude(&mut rng, params::CONTRAST);
            let mean = image.mean();
            ToyImage::from_unclipped(
                image.pixels().iter().map(|p| (p - mean) * factor + mean).collect(),
            )
        }
        Saturation => {
            let s = 1.0 + magnitude(&mut rng, params::SATURATION) * 1.5;
            let s = s.max(0.0);
            per_pixel_rgb(image, |[r, g, b]| {
                let l = luma(r, g, b);
                [l + s * (r - l), l + s * (g - l), l + s * (b - l)]
            })
        }
        Hue => {
            // Rotation about the grey axis (Rodrigues).
            let theta = magnitude(&mut rng, params::HUE_RADIANS);
            let (sn, cs) = theta.sin_cos();
            let k = 1.0 / 3.0f64.sqrt();
            let a = cs + (1.0 - cs) / 3.0;
            let b = (1.0 - cs) / 3.0 - k * sn;
            let c = (1.0 - cs) / 3.0 + k * sn;
            per_pixel_rgb(image, |[r, g, bl]| {
                [a * r + b * g + c * bl, c * r + a * g + b * bl, b * r + c * g + a * bl]
            })
        }
        Grayscale => per_pixel_rgb(image, |[r, g, b]| {
            let l = luma(r, g, b);
            [l, l, l]
        }),
        GaussianBlur => {
            let sigma = rng.random_range(params::BLUR_SIGMA.0..=params::BLUR_SIGMA.1);
            let radius = 2i64;
            let weights: Vec<f64> = (-radius..=radius)
                .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
            let mut tmp = vec![0.0; PIXELS];
            let mut out = vec![0.0; PIXELS];
            for c in 0..CHANNELS {
                for y in 0..HEIGHT {
                    for x in 0..WIDTH {
                        tmp[ToyImage::index(c, y, x)] = (-radius..=radius)
                            .zip(&weights)
                            .map(|(d, w)| w * image.get(c, y, clamp(x as i64 + d, WIDTH)))
                            .sum::<f64>()
                            / total;
                    }
                }
                for y in 0..HEIGHT {
                    for x in 0..WIDTH {
                        out[ToyImage::index(c, y, x)] = (-radius..=radius)
                            .zip(&weights)
                            .map(|(d, w)| w * tmp[ToyImage::index(c, clamp(y as i64 + d, HEIGHT), x)])
                            .sum::<f64>()
                            / total;
                    }
                }
            }
            ToyImage::from_unclipped(out)
        }
        GaussianNoise => {
            let sigma = rng.random_range(params::NOISE_SIGMA.0..=params::NOISE_SIGMA.1);
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            ToyImage::from_unclipped(
                image.pixels().iter().map(|p| p + normal.sample(&mut rng)).collect(),
            )
        }
    }
}

/// Applies `kind`, or returns the image unchanged for `None`.
pub fn apply_view(kind: Option<AugmentationKind>, image: &ToyImage, seed: u64) -> ToyImage {
    match kind {
        Some(k) => apply(k, image, seed),
        None => image.clone(),
    }
}

/// Non-negative sampling weight per kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<AugmentationKind, f64>", into = "BTreeMap<AugmentationKind, f64>")]
pub struct AugWeightTable {
    weights: [f64; NUM_KINDS],
}

impl TryFrom<BTreeMap<AugmentationKind, f64>> for AugWeightTable {
    type Error = Error;

    fn try_from(map: BTreeMap<AugmentationKind, f64>) -> Result<Self> {
        let mut weights = [0.0; NUM_KINDS];
        for (k, w) in map {
            weights[k.code()] = w;
        }
        AugWeightTable::new(weights)
    }
}

impl From<AugWeightTable> for BTreeMap<AugmentationKind, f64> {
    fn from(t: AugWeightTable) -> Self {
        AugmentationKind::ALL.iter().map(|&k| (k, t.weights[k.code()])).collect()
    }
}

impl Default for AugWeightTable {
    fn default() -> Self {
        Self::uniform()
    }
}

impl AugWeightTable {
    pub fn new(weights: [f64; NUM_KINDS]) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("augmentation weights must be finite and non-negative"));
        }
        if weights.iter().filter(|&&w| w > 0.0).count() < 2 {
            return Err(Error::config(
                "at least two augmentation kinds need positive weight",
            ));
        }
        Ok(Self { weights })
    }

    pub fn uniform() -> Self {
        Self {
            weights: [1.0; NUM_KINDS],
        }
    }

    pub fn weight(&self, kind: AugmentationKind) -> f64 {
        self.weights[kind.code()]
    }

    pub fn weights(&self) -> &[f64; NUM_KINDS] {
        &self.weights
    }

    /// Normalized sampling probability of `kind` for a single draw.
    pub fn probability(&self, kind: AugmentationKind) -> f64 {
        self.weights[kind.code()] / self.weights.iter().sum::<f64>()
    }

    pub fn active_kinds(&self) -> Vec<AugmentationKind> {
        AugmentationKind::ALL
            .iter()
            .copied()
            .filter(|k| self.weight(*k) > 0.0)
            .collect()
    }
}

fn draw(weights: &[f64; NUM_KINDS], rng: &mut impl Rng) -> AugmentationKind {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if u < w {
            return AugmentationKind::ALL[i];
        }
        u -= w;
    }
    AugmentationKind::ALL[last]
}

/// One kind drawn proportionally to the weights.
pub fn sample_kind(table: &AugWeightTable, rng: &mut impl Rng) -> AugmentationKind {
    draw(&table.weights, rng)
}

/// Two different kinds: the first drawn proportionally to the weights, the
/// second from the renormalized remainder.
pub fn sample_distinct_pair(
    table: &AugWeightTable,
    rng: &mut impl Rng,
) -> (AugmentationKind, AugmentationKind) {
    let first = draw(&table.weights, rng);
    let mut rest = table.weights;
    rest[first.code()] = 0.0;
    let second = draw(&rest, rng);
    (first, second)
}

/// Seeded convenience wrapper around [`sample_distinct_pair`].
pub fn sample_distinct_pair_seeded(
    table: &AugWeightTable,
    seed: u64,
) -> (AugmentationKind, AugmentationKind) {
    sample_distinct_pair(table, &mut stream(seed, 0))
}

/// Uniform weights over `kinds`, zero elsewhere.
pub fn restrict_bank(kinds: &[AugmentationKind]) -> Result<AugWeightTable> {
    let mut weights = [0.0; NUM_KINDS];
    for k in kinds {
        weights[k.code()] = 1.0;
    }
    if weights.iter().filter(|&&w| w > 0.0).count() < 2 {
        return Err(Error::config(format!(
            "a restricted bank needs at least two distinct kinds, got {kinds:?}"
        )));
    }
    AugWeightTable::new(weights)
}

/// Kinds whose score is below `threshold` get weight `boost`, the rest 1.
pub fn update_weights_from_silhouette(
    scores: &BTreeMap<AugmentationKind, f64>,
    threshold: f64,
    boost: f64,
    base: &AugWeightTable,
) -> Result<AugWeightTable> {
    if !(boost > 1.0 && boost.is_finite()) {
        return Err(Error::config(format!("boost ratio must exceed 1, got {boost}")));
    }
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::config(format!("threshold must lie in [-1, 1], got {threshold}")));
    }
    let mut weights = [0.0; NUM_KINDS];
    for k in base.active_kinds() {
        weights[k.code()] = match scores.get(&k) {
            Some(s) if !s.is_finite() => {
                return Err(Error::config(format!("non-finite silhouette for {k}")))
            }
            Some(&s) if s < threshold => boost,
            _ => 1.0,
        };
    }
    AugWeightTable::new(weights)
}
