//! Frozen synthetic dual encoder.
//!
//! The image encoder `f` and the text encoder `g` are two-layer MLPs with
//! Gaussian weights scaled by `1/sqrt(fan_in)`, followed by L2
//! normalization. Neither is ever updated.
//!
//! Class-name embeddings are derived once per class when the class is
//! registered: starting from a seeded Gaussian vector, the embedding is
//! fitted so that the text feature of the fixed template prompt
//! `[t_1, ..., t_M, c]` points at the image feature of the class prototype.
//! This gives the frozen pair the one property a pre-trained dual encoder
//! contributes to prompt learning, namely that class tokens and images of
//! the same class already land near each other, including for classes that
//! are never trained on.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{hex, ClassId, Dataset, ToyImage, PIXELS};
use crate::error::{Error, Result};
use crate::rng::{mix, salt, stream};
use crate::tensor::{backward, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderDims {
    pub image_input: usize,
    pub image_hidden: usize,
    pub text_hidden: usize,
    /// Shared feature dimension `d`.
    pub feature_dim: usize,
    /// Token embedding dimension `d_e`.
    pub token_dim: usize,
    /// Number of learnable context vectors `M`.
    pub context_len: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            image_input: PIXELS,
            image_hidden: 128,
            text_hidden: 128,
            feature_dim: 256,
            token_dim: 32,
            context_len: 4,
        }
    }
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        if self.image_input != PIXELS {
            return Err(Error::config(format!("image_input must be {PIXELS}")));
        }
        if self.feature_dim < 8 || self.token_dim < 8 {
            return Err(Error::config("feature_dim and token_dim must be at least 8"));
        }
        if self.feature_dim % 16 != 0 {
            return Err(Error::config("feature_dim must be a multiple of 16 (metanet bottleneck)"));
        }
        if self.context_len == 0 || self.image_hidden == 0 || self.text_hidden == 0 {
            return Err(Error::config("context_len and hidden widths must be positive"));
        }
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        self.context_len + 1
    }

    pub fn metanet_hidden(&self) -> usize {
        self.feature_dim / 16
    }
}

pub(crate) fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Frozen `linear → relu → linear` block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenMlp {
    pub w1: Arc<Tensor>,
    pub b1: Arc<Tensor>,
    pub w2: Arc<Tensor>,
    pub b2: Arc<Tensor>,
}

impl FrozenMlp {
    fn init(rng: &mut impl Rng, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Arc::new(gaussian(rng, &[input, hidden], 1.0 / (input as f64).sqrt())),
            b1: Arc::new(Tensor::zeros(&[hidden])),
            w2: Arc::new(gaussian(rng, &[hidden, output], 1.0 / (hidden as f64).sqrt())),
            b2: Arc::new(Tensor::zeros(&[output])),
        }
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        let w1 = tape.constant_shared(Arc::clone(&self.w1));
        let b1 = tape.constant_shared(Arc::clone(&self.b1));
        let w2 = tape.constant_shared(Arc::clone(&self.w2));
        let b2 = tape.constant_shared(Arc::clone(&self.b2));
        x.matmul(w1)?.add(b1)?.relu()?.matmul(w2)?.add(b2)
    }

    fn hash_into(&self, h: &mut Sha256) {
        for t in [&self.w1, &self.b1, &self.w2, &self.b2] {
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbedding {
    pub vector: Tensor,
    /// Fingerprint of the prototype the embedding was fitted to.
    pub prototype_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    pub dims: EncoderDims,
    pub init_seed: u64,
    pub image: FrozenMlp,
    pub text: FrozenMlp,
    /// Fixed template context the class embeddings are fitted against.
    pub template: Vec<Tensor>,
    pub class_embeddings: BTreeMap<ClassId, ClassEmbedding>,
}

/// Steps of gradient ascent used to fit one class embedding.
const EMBEDDING_FIT_STEPS: usize = 400;
const EMBEDDING_FIT_LR: f64 = 0.5;

pub fn init_frozen(dims: EncoderDims, seed: u64) -> Result<EncoderWeights> {
    dims.validate()?;
    let mut img_rng = stream(seed, salt::IMAGE_ENCODER);
    let mut txt_rng = stream(seed, salt::TEXT_ENCODER);
    let mut tpl_rng = stream(seed, salt::TEMPLATE);
    let text_input = dims.prompt_len() * dims.token_dim;
    Ok(EncoderWeights {
        dims,
        init_seed: seed,
        image: FrozenMlp::init(&mut img_rng, dims.image_input, dims.image_hidden, dims.feature_dim),
        text: FrozenMlp::init(&mut txt_rng, text_input, dims.text_hidden, dims.feature_dim),
        template: (0..dims.context_len)
            .map(|_| gaussian(&mut tpl_rng, &[dims.token_dim], 1.0))
            .collect(),
        class_embeddings: BTreeMap::new(),
    })
}

fn image_hash(img: &ToyImage) -> String {
    let mut h = Sha256::new();
    for p in img.pixels() {
        h.update(p.to_bits().to_le_bytes());
    }
    hex(&h.finalize())
}

impl EncoderWeights {
    /// Flattened image centred to `[-1, 1]`.
    fn image_input(img: &ToyImage) -> Tensor {
        Tensor::from_vec(img.pixels().iter().map(|p| 2.0 * p - 1.0).collect())
    }

    /// `f(x)` on an existing tape; the result never carries a gradient.
    pub fn encode_image_on<'t>(&self, tape: &'t Tape, img: &ToyImage) -> Result<Var<'t>> {
        let x = tape.constant(Self::image_input(img));
        self.image.forward(x)?.l2_normalize()
    }

    /// `f(x)` as a plain unit-norm tensor.
    pub fn encode_image(&self, img: &ToyImage) -> Result<Tensor> {
        let tape = Tape::new();
        Ok((*self.encode_image_on(&tape, img)?.value()).clone())
    }

    /// `g(t)` for a prompt of exactly `M + 1` tokens; differentiable in the
    /// tokens.
    pub fn encode_text<'t>(&self, prompt: &[Var<'t>]) -> Result<Var<'t>> {
        if prompt.len() != self.dims.prompt_len() {
            return Err(Error::contract(format!(
                "prompt must have {} tokens, got {}",
                self.dims.prompt_len(),
                prompt.len()
            )));
        }
        for t in prompt {
            if t.shape() != [self.dims.token_dim] {
                return Err(Error::dim(format!(
                    "prompt tokens must have shape [{}], got {:?}",
                    self.dims.token_dim,
                    t.shape()
                )));
            }
        }
        let x = Var::concat(prompt)?;
        self.text.forward(x)?.l2_normalize()
    }

    pub fn class_embedding(&self, class_id: ClassId) -> Result<&Tensor> {
        self.class_embeddings
            .get(&class_id)
            .map(|e| &e.vector)
            .ok_or_else(|| Error::Index(format!("class {class_id} has no registered embedding")))
    }

    pub fn has_class(&self, class_id: ClassId) -> bool {
        self.class_embeddings.contains_key(&class_id)
    }

    /// Registers every class of `dataset`, fitting an embedding for each new
    /// one. Re-registering an id with a different prototype is an error.
    pub fn register_classes(&mut self, dataset: &Dataset) -> Result<()> {
        for class in &dataset.classes {
            let hash = image_hash(&class.prototype);
            if let Some(existing) = self.class_embeddings.get(&class.class_id) {
                if existing.prototype_hash != hash {
                    return Err(Error::config(format!(
                        "class id {} is already registered with a different prototype",
                        class.class_id
                    )));
                }
                continue;
            }
            let vector = self.fit_class_embedding(class.class_id, &class.prototype)?;
            self.class_embeddings.insert(
                class.class_id,
                ClassEmbedding {
                    vector,
                    prototype_hash: hash,
                },
            );
        }
        Ok(())
    }

    fn fit_class_embedding(&self, class_id: ClassId, prototype: &ToyImage) -> Result<Tensor> {
        let target = Arc::new(self.encode_image(prototype)?);
        let mut rng = stream(mix(self.init_seed, class_id as u64), salt::CLASS_EMBEDDING);
        let mut c = gaussian(&mut rng, &[self.dims.token_dim], 1.0);
        for step in 0..EMBEDDING_FIT_STEPS {
            let tape = Tape::new();
            let mut prompt: Vec<Var<'_>> =
                self.template.iter().map(|t| tape.constant(t.clone())).collect();
            let cv = tape.param(c.clone());
            prompt.push(cv);
            let sim = self
                .encode_text(&prompt)?
                .cosine_similarity(tape.constant_shared(Arc::clone(&target)))?;
            let grads = backward(sim)?;
            let g = grads.get(cv).expect("embedding participates");
            let gn = g.norm();
            if gn < 1e-12 {
                break;
            }
            // Normalized ascent with a linearly decaying step.
            let lr = EMBEDDING_FIT_LR * (1.0 - step as f64 / EMBEDDING_FIT_STEPS as f64);
            for (ci, gi) in c.data_mut().iter_mut().zip(g.data()) {
                *ci += lr * gi / gn;
            }
        }
        Ok(c)
    }

    /// SHA-256 over every frozen value; equal before and after training.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.init_seed.to_le_bytes());
        self.image.hash_into(&mut h);
        self.text.hash_into(&mut h);
        for t in &self.template {
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for (id, e) in &self.class_embeddings {
            h.update(id.to_le_bytes());
            for v in e.vector.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig};
    use crate::tensor::grad_check_many;

    fn small_dataset() -> Dataset {
        generate_dataset(
            &DatasetConfig {
                num_classes: 8,
                samples_per_class: 20,
                ..Default::default()
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let a = init_frozen(EncoderDims::default(), 1).unwrap();
        let b = init_frozen(EncoderDims::default(), 1).unwrap();
        let c = init_frozen(EncoderDims::default(), 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.image.w1, c.image.w1);
    }

    #[test]
    fn image_features_are_unit_norm_and_deterministic() {
        let enc = init_frozen(EncoderDims::default(), 3).unwrap();
        let d = small_dataset();
        for s in d.samples.iter().take(20) {
            let f = enc.encode_image(&s.image).unwrap();
            assert!((f.norm() - 1.0).abs() < 1e-12);
            assert_eq!(f, enc.encode_image(&s.image).unwrap());
        }
    }

    #[test]
    fn image_feature_regression_lock() {
        let enc = init_frozen(EncoderDims::default(), 0).unwrap();
        let f = enc.encode_image(&ToyImage::filled(0.75)).unwrap();
        let golden = [
            -0.0721769525725427,
            0.0020903450545730496,
            -0.06409533913902644,
            0.056290159219112214,
        ];
        for (a, b) in f.data()[..4].iter().zip(golden) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(f, enc.encode_image(&ToyImage::filled(0.75)).unwrap());
    }

    #[test]
    fn text_encoder_contract_and_order_sensitivity() {
        let enc = init_frozen(EncoderDims::default(), 4).unwrap();
        let mut rng = stream(5, 0);
        let tokens: Vec<Tensor> = (0..5).map(|_| gaussian(&mut rng, &[32], 1.0)).collect();
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = tokens.iter().map(|t| tape.constant(t.clone())).collect();
        let g = enc.encode_text(&vars).unwrap().value();
        assert!((g.norm() - 1.0).abs() < 1e-12);

        let swapped = [vars[1], vars[0], vars[2], vars[3], vars[4]];
        let g2 = enc.encode_text(&swapped).unwrap().value();
        assert!(g.data().iter().zip(g2.data()).any(|(a, b)| (a - b).abs() > 1e-6));

        assert!(matches!(enc.encode_text(&vars[..4]), Err(Error::Contract(_))));
    }

    #[test]
    fn text_gradient_matches_finite_differences() {
        let enc = init_frozen(EncoderDims::default(), 4).unwrap();
        let mut rng = stream(6, 0);
        let tokens: Vec<Tensor> = (0..5).map(|_| gaussian(&mut rng, &[32], 1.0)).collect();
        let probe = gaussian(&mut rng, &[256], 1.0);
        let err = grad_check_many(
            |t, v| {
                let p = t.constant(probe.clone());
                enc.encode_text(v)?.mul(p)?.sum()
            },
            &tokens,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn class_embeddings_are_frozen_and_distinct() {
        let mut enc = init_frozen(EncoderDims::default(), 8).unwrap();
        let d = small_dataset();
        enc.register_classes(&d).unwrap();
        let ids = d.class_ids();
        assert_eq!(enc.class_embedding(ids[0]).unwrap(), enc.class_embedding(ids[0]).unwrap());
        assert_ne!(enc.class_embedding(ids[0]).unwrap(), enc.class_embedding(ids[1]).unwrap());
        assert!(matches!(enc.class_embedding(999), Err(Error::Index(_))));

        let before = enc.fingerprint();
        enc.register_classes(&d).unwrap();
        assert_eq!(before, enc.fingerprint());
    }

    #[test]
    fn template_prompts_classify_prototypes() {
        let mut enc = init_frozen(EncoderDims::default(), 9).unwrap();
        let d = small_dataset();
        enc.register_classes(&d).unwrap();
        let tape = Tape::new();
        let texts: Vec<Tensor> = d
            .class_ids()
            .iter()
            .map(|&id| {
                let mut p: Vec<Var<'_>> = enc.template.iter().map(|t| tape.constant(t.clone())).collect();
                p.push(tape.constant(enc.class_embedding(id).unwrap().clone()));
                (*enc.encode_text(&p).unwrap().value()).clone()
            })
            .collect();
        for (i, c) in d.classes.iter().enumerate() {
            let f = enc.encode_image(&c.prototype).unwrap();
            let best = texts
                .iter()
                .enumerate()
                .max_by(|a, b| f.dot(a.1).partial_cmp(&f.dot(b.1)).unwrap())
                .unwrap()
                .0;
            assert_eq!(best, i);
        }
    }
}

