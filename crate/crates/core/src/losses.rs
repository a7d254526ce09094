//! Triplet objectives over delta tokens, cross-entropy, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationKind;
use crate::data::ClassId;
use crate::encoders::EncoderWeights;
use crate::error::{Error, Result};
use crate::prompt::{class_logits, BoundParams, ModelMode};
use crate::tensor::{Tensor, Var};

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 1.0,
            margin: DEFAULT_MARGIN,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all_finite = self.alpha.is_finite() && self.beta.is_finite() && self.margin.is_finite();
        if !all_finite || self.alpha < 0.0 || self.beta < 0.0 || self.margin < 0.0 {
            return Err(Error::config(format!(
                "alpha, beta and margin must be finite and non-negative, got {self:?}"
            )));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::config("alpha + beta must be positive"));
        }
        Ok(())
    }
}

/// Which triplet objective is applied to a quad.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletObjective {
    /// Positives share the augmentation, negatives share the class.
    #[default]
    Adtriplet,
    /// Positives share the class, negatives share the augmentation.
    Conventional,
}

/// Which pair of delta tokens acts as anchors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorChoice {
    /// `Δπ_1A` and `Δπ_2B`.
    #[default]
    Primary,
    /// `Δπ_1B` and `Δπ_2A`.
    Swapped,
}

/// The four delta tokens of one quad: classes 1 and 2 under kinds A and B.
#[derive(Clone, Copy, Debug)]
pub struct QuadDeltas<'t> {
    pub d1a: Var<'t>,
    pub d1b: Var<'t>,
    pub d2a: Var<'t>,
    pub d2b: Var<'t>,
    pub classes: (ClassId, ClassId),
    pub kinds: (AugmentationKind, AugmentationKind),
}

impl<'t> QuadDeltas<'t> {
    pub fn new(
        d1a: Var<'t>,
        d1b: Var<'t>,
        d2a: Var<'t>,
        d2b: Var<'t>,
        classes: (ClassId, ClassId),
        kinds: (AugmentationKind, AugmentationKind),
    ) -> Result<Self> {
        let q = Self {
            d1a,
            d1b,
            d2a,
            d2b,
            classes,
            kinds,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.0 == self.classes.1 {
            return Err(Error::contract(format!(
                "quad needs two distinct classes, got {} twice",
                self.classes.0
            )));
        }
        if self.kinds.0 == self.kinds.1 {
            return Err(Error::contract(format!(
                "quad needs two distinct augmentations, got {} twice",
                self.kinds.0
            )));
        }
        let shape = self.d1a.shape();
        if shape.len() != 1 || [self.d1b, self.d2a, self.d2b].iter().any(|v| v.shape() != shape) {
            return Err(Error::contract("quad tokens must be vectors of one shared dimension"));
        }
        Ok(())
    }
}

/// `max(0, ‖a − p‖ − ‖a − n‖ + m)`.
pub fn triplet<'t>(anchor: Var<'t>, positive: Var<'t>, negative: Var<'t>, margin: f64) -> Result<Var<'t>> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::config(format!("margin must be non-negative, got {margin}")));
    }
    let shape = anchor.shape();
    if positive.shape() != shape || negative.shape() != shape {
        return Err(Error::contract(format!(
            "triplet arguments must share a shape: {:?}, {:?}, {:?}",
            shape,
            positive.shape(),
            negative.shape()
        )));
    }
    let m = anchor.tape().constant(Tensor::scalar(margin));
    let ap = anchor.euclidean_distance(positive)?;
    let an = anchor.euclidean_distance(negative)?;
    ap.sub(an)?.add(m)?.relu()
}

/// Two-anchor objective pulling same-augmentation tokens together and
/// pushing same-class tokens apart.
pub fn adtriplet<'t>(q: &QuadDeltas<'t>, margin: f64) -> Result<Var<'t>> {
    q.validate()?;
    let first = triplet(q.d1a, q.d2a, q.d1b, margin)?;
    let second = triplet(q.d2b, q.d1b, q.d2a, margin)?;
    first.add(second)
}

/// Same roles as [`adtriplet`] with `Δπ_1B` and `Δπ_2A` as anchors.
pub fn adtriplet_swapped_anchors<'t>(q: &QuadDeltas<'t>, margin: f64) -> Result<Var<'t>> {
    q.validate()?;
    let first = triplet(q.d1b, q.d2b, q.d1a, margin)?;
    let second = triplet(q.d2a, q.d1a, q.d2b, margin)?;
    first.add(second)
}

/// Class-clustering variant: positives share the class, negatives share the
/// augmentation.
pub fn conventional_triplet<'t>(q: &QuadDeltas<'t>, margin: f64) -> Result<Var<'t>> {
    q.validate()?;
    let first = triplet(q.d1a, q.d1b, q.d2a, margin)?;
    let second = triplet(q.d2b, q.d2a, q.d1b, margin)?;
    first.add(second)
}

pub fn quad_objective<'t>(
    q: &QuadDeltas<'t>,
    objective: TripletObjective,
    anchors: AnchorChoice,
    margin: f64,
) -> Result<Var<'t>> {
    match (objective, anchors) {
        (TripletObjective::Adtriplet, AnchorChoice::Primary) => adtriplet(q, margin),
        (TripletObjective::Adtriplet, AnchorChoice::Swapped) => adtriplet_swapped_anchors(q, margin),
        (TripletObjective::Conventional, AnchorChoice::Primary) => conventional_triplet(q, margin),
        (TripletObjective::Conventional, AnchorChoice::Swapped) => {
            q.validate()?;
            let first = triplet(q.d1b, q.d1a, q.d2b, margin)?;
            let second = triplet(q.d2a, q.d2b, q.d1a, margin)?;
            first.add(second)
        }
    }
}

/// Cross-entropy of one labeled image feature over `class_ids`.
pub fn classification_loss<'t>(
    mode: ModelMode,
    params: &BoundParams<'t>,
    enc: &EncoderWeights,
    feature: Var<'t>,
    class_ids: &[ClassId],
    label: ClassId,
    tau: f64,
) -> Result<Var<'t>> {
    let index = class_ids
        .iter()
        .position(|&id| id == label)
        .ok_or_else(|| Error::Index(format!("label {label} is not among the candidate classes")))?;
    class_logits(mode, params, enc, feature, class_ids, tau)?.softmax_cross_entropy(index)
}

/// `α · adt + β · ce`.
pub fn total_loss<'t>(ce: Var<'t>, adt: Var<'t>, weights: &LossWeights) -> Result<Var<'t>> {
    ce.scale(weights.beta)?.add(adt.scale(weights.alpha)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentationKind as K;
    use crate::tensor::Tape;
    use proptest::prelude::*;

    fn v<'t>(tape: &'t Tape, x: &[f64]) -> Var<'t> {
        tape.constant(Tensor::from_vec(x.to_vec()))
    }

    fn quad<'t>(tape: &'t Tape, pts: [&[f64]; 4]) -> QuadDeltas<'t> {
        QuadDeltas::new(
            v(tape, pts[0]),
            v(tape, pts[1]),
            v(tape, pts[2]),
            v(tape, pts[3]),
            (1, 2),
            (K::Cutout, K::Hue),
        )
        .unwrap()
    }

    #[test]
    fn triplet_hand_cases() {
        let t = Tape::new();
        let a = v(&t, &[0.0, 0.0]);
        assert_eq!(triplet(a, v(&t, &[1.0, 0.0]), v(&t, &[2.0, 0.0]), 0.2).unwrap().item(), 0.0);
        let l = triplet(a, v(&t, &[2.0, 0.0]), v(&t, &[1.0, 0.0]), 0.2).unwrap().item();
        assert!((l - 1.2).abs() < 1e-15);
        assert_eq!(triplet(a, a, a, 0.2).unwrap().item(), 0.2);
        assert!(matches!(triplet(a, v(&t, &[1.0]), a, 0.2), Err(Error::Contract(_))));
    }

    #[test]
    fn adtriplet_hand_cases() {
        let t = Tape::new();
        let p = [0.3, -0.1];
        let q = quad(&t, [&p, &p, &p, &p]);
        assert_eq!(adtriplet(&q, 0.2).unwrap().item(), 0.4);
        assert_eq!(conventional_triplet(&q, 0.2).unwrap().item(), 0.4);

        // Same-augmentation pairs coincide, the two augmentations sit 1 apart.
        let a = [0.0, 0.0];
        let b = [1.0, 0.0];
        let q = quad(&t, [&a, &b, &a, &b]);
        assert_eq!(adtriplet(&q, 0.2).unwrap().item(), 0.0);

        // Same-class pairs coincide, the two classes sit 1 apart.
        let c1 = [0.0, 0.0];
        let c2 = [0.0, 1.0];
        let q = quad(&t, [&c1, &c1, &c2, &c2]);
        assert_eq!(conventional_triplet(&q, 0.2).unwrap().item(), 0.0);
    }

    #[test]
    fn degenerate_quads_are_rejected() {
        let t = Tape::new();
        let x = v(&t, &[0.0, 1.0]);
        assert!(matches!(
            QuadDeltas::new(x, x, x, x, (3, 3), (K::Cutout, K::Hue)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            QuadDeltas::new(x, x, x, x, (3, 4), (K::Hue, K::Hue)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn total_loss_arithmetic() {
        let t = Tape::new();
        let w = LossWeights {
            alpha: 0.2,
            beta: 1.0,
            margin: 0.2,
        };
        let l = total_loss(t.constant(Tensor::scalar(1.0)), t.constant(Tensor::scalar(0.5)), &w).unwrap();
        assert!((l.item() - 1.1).abs() < 1e-15);
        let zero = LossWeights {
            alpha: 1.0,
            beta: 1.0,
            margin: 0.2,
        };
        let z = t.constant(Tensor::scalar(0.0));
        assert_eq!(total_loss(z, z, &zero).unwrap().item(), 0.0);
        let ce_only = LossWeights { alpha: 0.0, ..w };
        let l = total_loss(t.constant(Tensor::scalar(0.9)), t.constant(Tensor::scalar(7.0)), &ce_only).unwrap();
        assert_eq!(l.item(), 0.9);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        for bad in [
            LossWeights { alpha: -0.1, ..Default::default() },
            LossWeights { margin: -0.1, ..Default::default() },
            LossWeights { alpha: 0.0, beta: 0.0, margin: 0.2 },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn vec4() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, 4)
    }

    proptest! {
        #[test]
        fn losses_are_non_negative_and_compose(a in vec4(), b in vec4(), c in vec4(), d in vec4(), m in 0.0f64..1.0) {
            let t = Tape::new();
            let q = quad(&t, [&a, &b, &c, &d]);
            let adt = adtriplet(&q, m).unwrap().item();
            let conv = conventional_triplet(&q, m).unwrap().item();
            prop_assert!(adt >= 0.0 && conv >= 0.0);
            let parts = triplet(q.d1a, q.d2a, q.d1b, m).unwrap().item() + triplet(q.d2b, q.d1b, q.d2a, m).unwrap().item();
            prop_assert_eq!(adt, parts);
            let swapped_roles = triplet(q.d1a, q.d1b, q.d2a, m).unwrap().item() + triplet(q.d2b, q.d2a, q.d1b, m).unwrap().item();
            prop_assert_eq!(conv, swapped_roles);
        }

        #[test]
        fn adtriplet_is_translation_invariant(a in vec4(), b in vec4(), c in vec4(), d in vec4(), shift in vec4()) {
            let t = Tape::new();
            let add = |x: &[f64]| -> Vec<f64> { x.iter().zip(&shift).map(|(u, s)| u + s).collect() };
            let q = quad(&t, [&a, &b, &c, &d]);
            let (a2, b2, c2, d2) = (add(&a), add(&b), add(&c), add(&d));
            let qs = quad(&t, [&a2, &b2, &c2, &d2]);
            let x = adtriplet(&q, 0.2).unwrap().item();
            let y = adtriplet(&qs, 0.2).unwrap().item();
            prop_assert!((x - y).abs() < 1e-9);
        }

        #[test]
        fn inactive_hinges_give_zero(a in vec4(), b in vec4(), c in vec4(), d in vec4()) {
            let t = Tape::new();
            let q = quad(&t, [&a, &b, &c, &d]);
            let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, w)| (u - w).powi(2)).sum::<f64>().sqrt();
            let m = 0.2;
            if dist(&a, &c) <= dist(&a, &b) - m && dist(&d, &b) <= dist(&d, &c) - m {
                prop_assert_eq!(adtriplet(&q, m).unwrap().item(), 0.0);
            }
        }
    }
}
