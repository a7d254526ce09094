//! Learnable prompt state: context vectors, the metanet, meta tokens,
//! conditional prompts, delta meta tokens and class probabilities.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{apply_view, AugmentationKind};
use crate::data::{hex, ClassId, ToyImage};
use crate::encoders::{gaussian, EncoderDims, EncoderWeights};
use crate::error::{Error, Result};
use crate::rng::{salt, stream};
use crate::tensor::{softmax, Gradients, Tape, Tensor, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// One prompt shared by every image.
    #[serde(alias = "coop")]
    StaticCoop,
    /// Context vectors shifted by an image-conditioned meta token.
    #[serde(alias = "cocoop")]
    ConditionalCocoop,
    /// Conditional prompts trained with the delta-token triplet objective.
    Aapl,
}

impl ModelMode {
    pub fn name(self) -> &'static str {
        match self {
            ModelMode::StaticCoop => "static_coop",
            ModelMode::ConditionalCocoop => "conditional_cocoop",
            ModelMode::Aapl => "aapl",
        }
    }

    pub fn is_conditional(self) -> bool {
        !matches!(self, ModelMode::StaticCoop)
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static_coop" | "coop" => Ok(ModelMode::StaticCoop),
            "conditional_cocoop" | "cocoop" => Ok(ModelMode::ConditionalCocoop),
            "aapl" => Ok(ModelMode::Aapl),
            other => Err(Error::config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnableContext {
    pub vectors: Vec<Tensor>,
}

/// `linear → relu → linear` from image features to meta tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MetaNet {
    pub fn zeroed(dims: &EncoderDims) -> Self {
        let h = dims.metanet_hidden();
        Self {
            w1: Tensor::zeros(&[dims.feature_dim, h]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[h, dims.token_dim]),
            b2: Tensor::zeros(&[dims.token_dim]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptParams {
    pub context: LearnableContext,
    pub metanet: MetaNet,
}

impl PromptParams {
    /// Context vectors start at the encoder's template prompt, so an
    /// untrained static prompt reproduces zero-shot classification; the
    /// metanet is drawn from `seed`.
    pub fn init(enc: &EncoderWeights, seed: u64) -> Result<Self> {
        let dims = &enc.dims;
        dims.validate()?;
        let mut net_rng = stream(seed, salt::METANET_INIT);
        let d = dims.feature_dim;
        let h = dims.metanet_hidden();
        Ok(Self {
            context: LearnableContext {
                vectors: enc.template.clone(),
            },
            metanet: MetaNet {
                w1: gaussian(&mut net_rng, &[d, h], 1.0 / (d as f64).sqrt()),
                b1: Tensor::zeros(&[h]),
                w2: gaussian(&mut net_rng, &[h, dims.token_dim], 1.0 / (h as f64).sqrt()),
                b2: Tensor::zeros(&[dims.token_dim]),
            },
        })
    }

    /// Parameters in optimizer order: context vectors, then `w1, b1, w2, b2`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.context.vectors.iter().collect();
        let n = &self.metanet;
        out.extend([&n.w1, &n.b1, &n.w2, &n.b2]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.context.vectors.iter_mut().collect();
        let n = &mut self.metanet;
        out.extend([&mut n.w1, &mut n.b1, &mut n.w2, &mut n.b2]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        self.bind_with(tape, |t| tape.param(t.clone()))
    }

    /// Places every parameter on `tape` as a constant, for evaluation.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        self.bind_with(tape, |t| tape.constant(t.clone()))
    }

    fn bind_with<'t>(&self, _tape: &'t Tape, mut leaf: impl FnMut(&Tensor) -> Var<'t>) -> BoundParams<'t> {
        let context = self.context.vectors.iter().map(&mut leaf).collect();
        let n = &self.metanet;
        BoundParams {
            context,
            metanet: BoundMetaNet {
                w1: leaf(&n.w1),
                b1: leaf(&n.b1),
                w2: leaf(&n.w2),
                b2: leaf(&n.b2),
            },
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundMetaNet<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct BoundParams<'t> {
    pub context: Vec<Var<'t>>,
    pub metanet: BoundMetaNet<'t>,
}

impl<'t> BoundParams<'t> {
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = self.context.clone();
        let n = self.metanet;
        out.extend([n.w1, n.b1, n.w2, n.b2]);
        out
    }

    /// Gradients in optimizer order; parameters the loss never reached get
    /// zeros here, since the update rule needs a value for every slot.
    pub fn dense_gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars()
            .into_iter()
            .map(|v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

/// `π = W2ᵀ relu(W1ᵀ f + b1) + b2` for a feature vector `f`.
pub fn meta_token<'t>(net: &BoundMetaNet<'t>, feature: Var<'t>) -> Result<Var<'t>> {
    let expected = net.w1.shape()[0];
    if feature.shape() != [expected] {
        return Err(Error::contract(format!(
            "metanet expects a feature of shape [{expected}], got {:?}",
            feature.shape()
        )));
    }
    feature
        .matmul(net.w1)?
        .add(net.b1)?
        .relu()?
        .matmul(net.w2)?
        .add(net.b2)
}

/// `{v_1 + π, ..., v_M + π, c_y}`; the static mode ignores `π`.
pub fn conditional_prompt<'t>(
    mode: ModelMode,
    context: &[Var<'t>],
    pi: Option<Var<'t>>,
    class_id: ClassId,
    enc: &EncoderWeights,
) -> Result<Vec<Var<'t>>> {
    let first = context
        .first()
        .ok_or_else(|| Error::contract("context must contain at least one vector"))?;
    let tape = first.tape();
    let class_token = tape.constant(enc.class_embedding(class_id)?.clone());
    let mut prompt = Vec::with_capacity(context.len() + 1);
    match (mode.is_conditional(), pi) {
        (true, Some(pi)) => {
            for &v in context {
                prompt.push(v.add(pi)?);
            }
        }
        (true, None) => {
            return Err(Error::contract("conditional prompts need a meta token"));
        }
        (false, _) => prompt.extend_from_slice(context),
    }
    prompt.push(class_token);
    Ok(prompt)
}

/// `h(f(view)) − h(f(x))` given both features already on the tape. With
/// `stop_gradient` the original branch enters as a constant.
pub fn delta_from_features<'t>(
    net: &BoundMetaNet<'t>,
    augmented: Var<'t>,
    original: Var<'t>,
    stop_gradient: bool,
) -> Result<Var<'t>> {
    let pi_aug = meta_token(net, augmented)?;
    let pi_orig = meta_token(net, original)?;
    let pi_orig = if stop_gradient {
        original.tape().constant_shared(pi_orig.value())
    } else {
        pi_orig
    };
    pi_aug.sub(pi_orig)
}

/// Delta meta token of `image` under `kind` (`None` is the identity view).
pub fn delta_meta_token<'t>(
    tape: &'t Tape,
    net: &BoundMetaNet<'t>,
    enc: &EncoderWeights,
    image: &ToyImage,
    kind: Option<AugmentationKind>,
    seed: u64,
    stop_gradient: bool,
) -> Result<Var<'t>> {
    let view = apply_view(kind, image, seed);
    let augmented = enc.encode_image_on(tape, &view)?;
    let original = enc.encode_image_on(tape, image)?;
    delta_from_features(net, augmented, original, stop_gradient)
}

/// Cosine similarities `sim(f(x), g(t_y(x)))` for each class, as a `[K]`
/// vector in the order of `class_ids`.
pub fn similarities<'t>(
    mode: ModelMode,
    params: &BoundParams<'t>,
    enc: &EncoderWeights,
    feature: Var<'t>,
    class_ids: &[ClassId],
) -> Result<Var<'t>> {
    if class_ids.is_empty() {
        return Err(Error::config("at least one class is required"));
    }
    let pi = if mode.is_conditional() {
        Some(meta_token(&params.metanet, feature)?)
    } else {
        None
    };
    let mut sims = Vec::with_capacity(class_ids.len());
    for &id in class_ids {
        let prompt = conditional_prompt(mode, &params.context, pi, id, enc)?;
        let text = enc.encode_text(&prompt)?;
        sims.push(feature.cosine_similarity(text)?);
    }
    Var::stack(&sims)
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be positive, got {tau}")))
    }
}

/// Similarities divided by `τ`.
pub fn class_logits<'t>(
    mode: ModelMode,
    params: &BoundParams<'t>,
    enc: &EncoderWeights,
    feature: Var<'t>,
    class_ids: &[ClassId],
    tau: f64,
) -> Result<Var<'t>> {
    check_temperature(tau)?;
    similarities(mode, params, enc, feature, class_ids)?.scale(1.0 / tau)
}

/// Plain similarity vector for one image, no gradients.
pub fn image_similarities(
    mode: ModelMode,
    params: &PromptParams,
    enc: &EncoderWeights,
    image: &ToyImage,
    class_ids: &[ClassId],
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let feature = enc.encode_image_on(&tape, image)?;
    let sims = similarities(mode, &bound, enc, feature, class_ids)?;
    let out = sims.value().data().to_vec();
    Ok(out)
}

pub fn predict_proba(
    mode: ModelMode,
    params: &PromptParams,
    enc: &EncoderWeights,
    image: &ToyImage,
    class_ids: &[ClassId],
    tau: f64,
) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    if class_ids.len() < 2 {
        return Err(Error::config("prediction needs at least two classes"));
    }
    let sims = image_similarities(mode, params, enc, image, class_ids)?;
    Ok(probabilities_from_similarities(&sims, tau))
}

pub fn probabilities_from_similarities(sims: &[f64], tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    softmax(&logits)
}

/// Index of the largest similarity; ties go to the lowest class id.
///
/// Decisions are taken on similarities rather than on `sim / τ`, so they
/// cannot depend on the temperature even through rounding.
pub fn argmax_class(sims: &[f64], class_ids: &[ClassId]) -> Option<ClassId> {
    let mut best: Option<(f64, ClassId)> = None;
    for (&s, &id) in sims.iter().zip(class_ids) {
        best = match best {
            None => Some((s, id)),
            Some((bs, bid)) if s > bs || (s == bs && id < bid) => Some((s, id)),
            keep => keep,
        };
    }
    best.map(|(_, id)| id)
}

pub fn predict(
    mode: ModelMode,
    params: &PromptParams,
    enc: &EncoderWeights,
    image: &ToyImage,
    class_ids: &[ClassId],
) -> Result<ClassId> {
    let sims = image_similarities(mode, params, enc, image, class_ids)?;
    argmax_class(&sims, class_ids).ok_or_else(|| Error::config("no classes to predict over"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaToken {
    pub vector: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaMetaToken {
    pub vector: Tensor,
    pub class_id: ClassId,
    pub kind: Option<AugmentationKind>,
}
