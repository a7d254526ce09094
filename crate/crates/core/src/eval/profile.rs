use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::pca::pca_2d;
use super::silhouette::{mean_by_label, silhouette, SilhouetteResult};
use crate::augment::{apply_view, AugmentationKind};
use crate::data::{ClassId, Dataset};
use crate::encoders::EncoderWeights;
use crate::error::{Error, Result};
use crate::prompt::{meta_token, PromptParams};
use crate::rng::stream;
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenType {
    Meta,
    Delta,
}

impl TokenType {
    pub fn name(self) -> &'static str {
        match self {
            TokenType::Meta => "meta",
            TokenType::Delta => "delta",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudPoint {
    pub vector: Vec<f64>,
    /// `None` marks the identity view.
    pub kind: Option<AugmentationKind>,
    pub class_id: ClassId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenCloud {
    pub token_type: TokenType,
    pub points: Vec<CloudPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelBy {
    Augmentation,
    Class,
}

impl TokenCloud {
    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p.vector.clone()).collect()
    }

    /// Integer cluster labels; the identity view gets its own label.
    pub fn labels(&self, by: LabelBy) -> Vec<u64> {
        self.points
            .iter()
            .map(|p| match by {
                LabelBy::Augmentation => p.kind.map_or(u64::MAX, |k| k.code() as u64),
                LabelBy::Class => p.class_id as u64,
            })
            .collect()
    }
}

pub fn silhouette_score(cloud: &TokenCloud, by: LabelBy) -> Result<SilhouetteResult> {
    silhouette(&cloud.vectors(), &cloud.labels(by))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub n_points: usize,
    pub seed: u64,
    /// Kinds dealt out round-robin over the sampled images.
    pub kinds: Vec<AugmentationKind>,
    /// Use the original image for every view (diagnostic).
    pub identity_views: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub kind: Option<AugmentationKind>,
    pub class_id: ClassId,
    pub token_type: TokenType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationProfile {
    pub n_points: usize,
    pub meta_by_kind: BTreeMap<AugmentationKind, f64>,
    pub delta_by_kind: BTreeMap<AugmentationKind, f64>,
    pub meta_mean: f64,
    pub delta_mean: f64,
    pub meta_projection: Vec<ProjectedPoint>,
    pub delta_projection: Vec<ProjectedPoint>,
}

/// Meta and delta token clouds over `n_points` images drawn from `pool`.
pub fn token_clouds(
    params: &PromptParams,
    enc: &EncoderWeights,
    dataset: &Dataset,
    pool: &[usize],
    config: &ProfileConfig,
    salt: u64,
) -> Result<(TokenCloud, TokenCloud)> {
    if pool.is_empty() {
        return Err(Error::config("profiling needs a non-empty validation set"));
    }
    if config.n_points == 0 {
        return Err(Error::config("profiling needs at least one point"));
    }
    if config.kinds.is_empty() {
        return Err(Error::config("profiling needs at least one augmentation kind"));
    }
    let mut rng = stream(config.seed, salt);
    let mut images: Vec<usize> = Vec::with_capacity(config.n_points);
    while images.len() < config.n_points {
        let mut round = pool.to_vec();
        round.shuffle(&mut rng);
        images.extend(round.into_iter().take(config.n_points - images.len()));
    }
    let mut kinds: Vec<AugmentationKind> = (0..config.n_points)
        .map(|i| config.kinds[i % config.kinds.len()])
        .collect();
    kinds.shuffle(&mut rng);

    let tape = Tape::new();
    let net = params.bind_frozen(&tape).metanet;
    let mut meta = Vec::with_capacity(config.n_points);
    let mut delta = Vec::with_capacity(config.n_points);
    for (&idx, &kind) in images.iter().zip(&kinds) {
        let sample = &dataset.samples[idx];
        let view_kind = (!config.identity_views).then_some(kind);
        let view = apply_view(view_kind, &sample.image, rng.next_u64());
        let pi_aug = meta_token(&net, enc.encode_image_on(&tape, &view)?)?;
        let pi_orig = meta_token(&net, enc.encode_image_on(&tape, &sample.image)?)?;
        let d = pi_aug.sub(pi_orig)?;
        meta.push(CloudPoint {
            vector: pi_aug.value().data().to_vec(),
            kind: view_kind,
            class_id: sample.class_id,
        });
        delta.push(CloudPoint {
            vector: d.value().data().to_vec(),
            kind: view_kind,
            class_id: sample.class_id,
        });
    }
    Ok((
        TokenCloud {
            token_type: TokenType::Meta,
            points: meta,
        },
        TokenCloud {
            token_type: TokenType::Delta,
            points: delta,
        },
    ))
}

fn by_kind(cloud: &TokenCloud, scores: &SilhouetteResult) -> BTreeMap<AugmentationKind, f64> {
    let kinds: Vec<Option<AugmentationKind>> = cloud.points.iter().map(|p| p.kind).collect();
    mean_by_label(scores, &kinds)
        .into_iter()
        .filter_map(|(k, s)| k.map(|k| (k, s)))
        .collect()
}

fn project(cloud: &TokenCloud) -> Result<Vec<ProjectedPoint>> {
    let xy = pca_2d(&cloud.vectors())?;
    Ok(xy
        .into_iter()
        .zip(&cloud.points)
        .map(|([x, y], p)| ProjectedPoint {
            x,
            y,
            kind: p.kind,
            class_id: p.class_id,
            token_type: cloud.token_type,
        })
        .collect())
}

/// Per-kind by-augmentation silhouettes of the meta and delta clouds plus
/// their 2D projections.
pub fn augmentation_profile(
    params: &PromptParams,
    enc: &EncoderWeights,
    dataset: &Dataset,
    pool: &[usize],
    config: &ProfileConfig,
    salt: u64,
) -> Result<AugmentationProfile> {
    let (meta, delta) = token_clouds(params, enc, dataset, pool, config, salt)?;
    let meta_scores = silhouette_score(&meta, LabelBy::Augmentation)?;
    let delta_scores = silhouette_score(&delta, LabelBy::Augmentation)?;
    Ok(AugmentationProfile {
        n_points: config.n_points,
        meta_by_kind: by_kind(&meta, &meta_scores),
        delta_by_kind: by_kind(&delta, &delta_scores),
        meta_mean: meta_scores.mean,
        delta_mean: delta_scores.mean,
        meta_projection: project(&meta)?,
        delta_projection: project(&delta)?,
    })
}
