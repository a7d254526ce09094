//! Finite-difference checks over every differentiable operation and the
//! full training objective.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugWeightTable, AugmentationKind};
use crate::data::{generate_dataset, sample_few_shot, split_base_new, DatasetConfig};
use crate::encoders::{gaussian, init_frozen, EncoderDims};
use crate::error::Result;
use crate::losses::{adtriplet, conventional_triplet, triplet, QuadDeltas};
use crate::prompt::{
    delta_from_features, meta_token, BoundMetaNet, BoundParams, ModelMode, PromptParams,
};
use crate::rng::{mix, stream};
use crate::tensor::{grad_check_many, Tape, Tensor, Var};
use crate::train::{build_quad_batch, prepare_encoder, quad_losses, TrainConfig};

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;
pub const POINTS_PER_CHECK: usize = 10;

const GRADCHECK_SALT: u64 = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub seed: u64,
    pub tolerance: f64,
    pub rows: Vec<CheckRow>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn worst(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    gaussian(rng, shape, 1.0)
}

/// Gaussian entries pushed at least 0.1 away from zero, so relu kinks stay
/// out of reach of the probe.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    normal(rng, &[n]).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn contract<'t>(v: Var<'t>, probe: &Tensor) -> Result<Var<'t>> {
    v.mul(v.tape().constant(probe.clone()))?.sum()
}

type Check = fn(&mut ChaCha8Rng) -> Result<f64>;

fn check_matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = normal(rng, &[4, 5]);
    let b = normal(rng, &[5, 3]);
    let p = normal(rng, &[4, 3]);
    grad_check_many(|_, v| contract(v[0].matmul(v[1])?, &p), &[a, b], EPS)
}

fn check_add(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b, p) = (normal(rng, &[6]), normal(rng, &[6]), normal(rng, &[6]));
    grad_check_many(|_, v| contract(v[0].add(v[1])?, &p), &[a, b], EPS)
}

fn check_sub(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b, p) = (normal(rng, &[6]), normal(rng, &[6]), normal(rng, &[6]));
    grad_check_many(|_, v| contract(v[0].sub(v[1])?, &p), &[a, b], EPS)
}

fn check_mul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b, p) = (normal(rng, &[6]), normal(rng, &[6]), normal(rng, &[6]));
    grad_check_many(|_, v| contract(v[0].mul(v[1])?, &p), &[a, b], EPS)
}

fn check_scale(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, p) = (normal(rng, &[6]), normal(rng, &[6]));
    let k: f64 = rng.random_range(-3.0..3.0);
    grad_check_many(|_, v| contract(v[0].scale(k)?, &p), &[a], EPS)
}

fn check_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, p) = (off_kink(rng, 8), normal(rng, &[8]));
    grad_check_many(|_, v| contract(v[0].relu()?, &p), &[a], EPS)
}

fn check_sum(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = normal(rng, &[3, 4]);
    grad_check_many(|_, v| v[0].sum(), &[a], EPS)
}

fn check_concat(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b, p) = (normal(rng, &[3]), normal(rng, &[5]), normal(rng, &[8]));
    grad_check_many(|_, v| contract(Var::concat(&[v[0], v[1]])?, &p), &[a, b], EPS)
}

fn check_stack(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, p) = (normal(rng, &[4]), normal(rng, &[2]));
    grad_check_many(
        |_, v| {
            let first = v[0].sum()?;
            let second = v[0].mul(v[0])?.sum()?;
            contract(Var::stack(&[first, second])?, &p)
        },
        &[a],
        EPS,
    )
}

fn check_l2_normalize(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, p) = (normal(rng, &[6]), normal(rng, &[6]));
    grad_check_many(|_, v| contract(v[0].l2_normalize()?, &p), &[a], EPS)
}

fn check_cosine(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b) = (normal(rng, &[6]), normal(rng, &[6]));
    grad_check_many(|_, v| v[0].cosine_similarity(v[1]), &[a, b], EPS)
}

fn check_euclidean(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b) = (normal(rng, &[6]), normal(rng, &[6]));
    grad_check_many(|_, v| v[0].euclidean_distance(v[1]), &[a, b], EPS)
}

fn check_cross_entropy(rng: &mut ChaCha8Rng) -> Result<f64> {
    let z = normal(rng, &[5]);
    let label = rng.random_range(0..5);
    grad_check_many(|_, v| v[0].softmax_cross_entropy(label), &[z], EPS)
}

/// Deltas spread far enough apart that neither hinge sits near its kink.
fn quad_points(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    (0..4).map(|_| normal(rng, &[6]).map(|v| 2.0 * v)).collect()
}

fn quad<'t>(v: &[Var<'t>]) -> Result<QuadDeltas<'t>> {
    QuadDeltas::new(
        v[0],
        v[1],
        v[2],
        v[3],
        (0, 1),
        (AugmentationKind::Brightness, AugmentationKind::Hue),
    )
}

fn check_triplet(rng: &mut ChaCha8Rng) -> Result<f64> {
    let pts = quad_points(rng);
    // A margin large enough that the hinge is active.
    grad_check_many(|_, v| triplet(v[0], v[1], v[2], 20.0), &pts[..3], EPS)
}

fn check_adtriplet(rng: &mut ChaCha8Rng) -> Result<f64> {
    let pts = quad_points(rng);
    grad_check_many(|_, v| adtriplet(&quad(v)?, 20.0), &pts, EPS)
}

fn check_conventional(rng: &mut ChaCha8Rng) -> Result<f64> {
    let pts = quad_points(rng);
    grad_check_many(|_, v| conventional_triplet(&quad(v)?, 20.0), &pts, EPS)
}

fn small_dims() -> EncoderDims {
    EncoderDims {
        image_hidden: 16,
        text_hidden: 16,
        feature_dim: 32,
        token_dim: 8,
        ..EncoderDims::default()
    }
}

fn metanet_points(rng: &mut ChaCha8Rng, dims: &EncoderDims) -> Vec<Tensor> {
    let (d, h, e) = (dims.feature_dim, dims.metanet_hidden(), dims.token_dim);
    vec![
        gaussian(rng, &[d, h], 1.0 / (d as f64).sqrt()),
        gaussian(rng, &[h], 0.1),
        gaussian(rng, &[h, e], 1.0 / (h as f64).sqrt()),
        gaussian(rng, &[e], 0.1),
    ]
}

fn bound_metanet<'t>(v: &[Var<'t>]) -> BoundMetaNet<'t> {
    BoundMetaNet {
        w1: v[0],
        b1: v[1],
        w2: v[2],
        b2: v[3],
    }
}

fn check_text_encoder(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dims = small_dims();
    let enc = init_frozen(dims, rng.random())?;
    let tokens: Vec<Tensor> = (0..=dims.context_len).map(|_| normal(rng, &[dims.token_dim])).collect();
    let p = normal(rng, &[dims.feature_dim]);
    grad_check_many(|_, v| contract(enc.encode_text(v)?, &p), &tokens, EPS)
}

fn check_meta_token(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dims = small_dims();
    let mut pts = metanet_points(rng, &dims);
    pts.push(normal(rng, &[dims.feature_dim]).map(|v| v * 0.3));
    let p = normal(rng, &[dims.token_dim]);
    grad_check_many(|_, v| contract(meta_token(&bound_metanet(v), v[4])?, &p), &pts, EPS)
}

fn check_delta_token(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dims = small_dims();
    let mut pts = metanet_points(rng, &dims);
    pts.push(normal(rng, &[dims.feature_dim]).map(|v| v * 0.3));
    pts.push(normal(rng, &[dims.feature_dim]).map(|v| v * 0.3));
    let p = normal(rng, &[dims.token_dim]);
    grad_check_many(
        |_, v| contract(delta_from_features(&bound_metanet(v), v[4], v[5], false)?, &p),
        &pts,
        EPS,
    )
}

/// The full weighted objective of one quad batch with respect to every
/// learnable parameter, at small encoder dimensions.
fn check_objective(rng: &mut ChaCha8Rng, mode: ModelMode) -> Result<f64> {
    let seed: u64 = rng.random();
    let dataset = generate_dataset(
        &DatasetConfig {
            num_classes: 4,
            samples_per_class: 12,
            ..DatasetConfig::default()
        },
        seed,
    )?;
    let plan = split_base_new(&dataset, 4, seed)?;
    let train = sample_few_shot(&dataset, &plan, seed)?;
    let config = TrainConfig {
        mode,
        dims: small_dims(),
        shots: 4,
        ..TrainConfig::default()
    };
    let enc = prepare_encoder(config.dims, seed, &dataset)?;
    let mut params = PromptParams::init(&enc, seed)?;
    for ctx in &mut params.context.vectors {
        let noise = normal(rng, ctx.shape()).map(|v| 0.3 * v);
        *ctx = ctx.zip_with(&noise, |a, b| a + b);
    }
    let batch = build_quad_batch(&dataset, &train, &AugWeightTable::uniform(), rng)?;
    let m = params.context.vectors.len();
    let points: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    grad_check_many(
        |tape: &Tape, v: &[Var<'_>]| {
            let bound = BoundParams {
                context: v[..m].to_vec(),
                metanet: bound_metanet(&v[m..]),
            };
            Ok(quad_losses(tape, &bound, &config, &enc, &dataset, &train.class_ids, &batch)?.total)
        },
        &points,
        EPS,
    )
}

fn check_objective_aapl(rng: &mut ChaCha8Rng) -> Result<f64> {
    check_objective(rng, ModelMode::Aapl)
}

fn check_objective_cocoop(rng: &mut ChaCha8Rng) -> Result<f64> {
    check_objective(rng, ModelMode::ConditionalCocoop)
}

const CHECKS: &[(&str, Check)] = &[
    ("matmul", check_matmul),
    ("add", check_add),
    ("sub", check_sub),
    ("mul", check_mul),
    ("scale", check_scale),
    ("relu", check_relu),
    ("sum", check_sum),
    ("concat", check_concat),
    ("stack", check_stack),
    ("l2_normalize", check_l2_normalize),
    ("cosine_similarity", check_cosine),
    ("euclidean_distance", check_euclidean),
    ("softmax_cross_entropy", check_cross_entropy),
    ("triplet", check_triplet),
    ("adtriplet", check_adtriplet),
    ("conventional_triplet", check_conventional),
    ("encode_text", check_text_encoder),
    ("meta_token", check_meta_token),
    ("delta_meta_token", check_delta_token),
    ("objective_cocoop", check_objective_cocoop),
    ("objective_aapl", check_objective_aapl),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check at [`POINTS_PER_CHECK`] seeded points.
pub fn run_suite(seed: u64) -> Result<GradcheckSummary> {
    let mut rows = Vec::with_capacity(CHECKS.len());
    for (i, (name, check)) in CHECKS.iter().enumerate() {
        let mut rng = stream(mix(seed, i as u64), GRADCHECK_SALT);
        let mut worst = 0.0f64;
        for _ in 0..POINTS_PER_CHECK {
            worst = worst.max(check(&mut rng)?);
        }
        rows.push(CheckRow {
            name: (*name).to_string(),
            points: POINTS_PER_CHECK,
            max_rel_error: worst,
        });
    }
    Ok(GradcheckSummary {
        seed,
        tolerance: TOLERANCE,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_is_named_once() {
        let mut names = check_names();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), CHECKS.len());
    }

    #[test]
    fn single_check_is_deterministic() {
        let a = check_adtriplet(&mut stream(3, GRADCHECK_SALT)).unwrap();
        let b = check_adtriplet(&mut stream(3, GRADCHECK_SALT)).unwrap();
        assert_eq!(a, b);
        assert!(a < TOLERANCE);
    }
}
