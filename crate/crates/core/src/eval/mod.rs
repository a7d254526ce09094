//! Accuracy, harmonic mean, the three transfer protocols, silhouette
//! profiling and report export.

mod pca;
mod profile;
mod report;
mod silhouette;

use std::collections::BTreeSet;
use std::sync::Arc;

pub use pca::pca_2d;
pub use profile::{
    augmentation_profile, silhouette_score, token_clouds, AugmentationProfile, CloudPoint, LabelBy, ProfileConfig,
    ProjectedPoint, TokenCloud, TokenType,
};
pub use report::{
    export_profile, EvalReport, Protocol, ProfileSummary, RowRole, SplitRow, TargetRow, REPORT_SCHEMA_VERSION,
};
pub use silhouette::{mean_by_label, silhouette, SilhouetteResult};

use crate::data::{generate_shifted_dataset, ClassId, Dataset, ShiftConfig, SplitPlan, TrainingSet};
use crate::encoders::EncoderWeights;
use crate::error::{Error, Result};
use crate::prompt::{argmax_class, conditional_prompt, similarities, ModelMode, PromptParams};
use crate::rng::salt;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{train_loop, Checkpoint};

/// `2ab / (a + b)`.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if a + b == 0.0 {
        return Err(Error::Degenerate("harmonic mean of two zeros".into()));
    }
    Ok(2.0 * a * b / (a + b))
}

/// Nearest-text-feature classifier over a fixed candidate set.
pub struct Classifier<'a> {
    mode: ModelMode,
    params: &'a PromptParams,
    enc: &'a EncoderWeights,
    class_ids: Vec<ClassId>,
    /// Text features, computed once when they do not depend on the image.
    static_text: Option<Vec<Arc<Tensor>>>,
}

impl<'a> Classifier<'a> {
    pub fn new(mode: ModelMode, params: &'a PromptParams, enc: &'a EncoderWeights, class_ids: &[ClassId]) -> Result<Self> {
        if class_ids.is_empty() {
            return Err(Error::config("evaluation needs at least one class"));
        }
        let static_text = if mode.is_conditional() {
            None
        } else {
            let tape = Tape::new();
            let ctx = params.bind_frozen(&tape).context;
            let texts = class_ids
                .iter()
                .map(|&id| Ok(enc.encode_text(&conditional_prompt(mode, &ctx, None, id, enc)?)?.value()))
                .collect::<Result<Vec<_>>>()?;
            Some(texts)
        };
        Ok(Self {
            mode,
            params,
            enc,
            class_ids: class_ids.to_vec(),
            static_text,
        })
    }

    pub fn similarities(&self, image: &crate::data::ToyImage) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let feature = self.enc.encode_image_on(&tape, image)?;
        let sims = match &self.static_text {
            Some(texts) => {
                let parts = texts
                    .iter()
                    .map(|t| feature.cosine_similarity(tape.constant_shared(Arc::clone(t))))
                    .collect::<Result<Vec<Var<'_>>>>()?;
                Var::stack(&parts)?
            }
            None => similarities(
                self.mode,
                &self.params.bind_frozen(&tape),
                self.enc,
                feature,
                &self.class_ids,
            )?,
        };
        let out = sims.value().data().to_vec();
        Ok(out)
    }

    pub fn predict(&self, image: &crate::data::ToyImage) -> Result<ClassId> {
        let sims = self.similarities(image)?;
        argmax_class(&sims, &self.class_ids).ok_or_else(|| Error::config("no classes"))
    }
}

/// Fraction of `indices` whose predicted class over `class_ids` is correct.
pub fn accuracy_with(
    mode: ModelMode,
    params: &PromptParams,
    enc: &EncoderWeights,
    dataset: &Dataset,
    indices: &[usize],
    class_ids: &[ClassId],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let clf = Classifier::new(mode, params, enc, class_ids)?;
    let mut correct = 0usize;
    for &i in indices {
        let sample = dataset
            .samples
            .get(i)
            .ok_or_else(|| Error::Index(format!("sample {i} out of range")))?;
        if clf.predict(&sample.image)? == sample.class_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Evaluation samples of `class_ids`: held-out samples for classes the run
/// trained on, every sample for the others.
pub fn evaluation_indices(train: &TrainingSet, dataset: &Dataset, class_ids: &[ClassId]) -> Vec<usize> {
    let trained: BTreeSet<ClassId> = train.class_ids.iter().copied().collect();
    let wanted: BTreeSet<ClassId> = class_ids.iter().copied().collect();
    let held_out: BTreeSet<usize> = train.held_out.iter().copied().collect();
    dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(i, s)| wanted.contains(&s.class_id) && (!trained.contains(&s.class_id) || held_out.contains(i)))
        .map(|(i, _)| i)
        .collect()
}

fn is_training_dataset(ckpt: &Checkpoint, dataset: &Dataset) -> bool {
    dataset.fingerprint() == ckpt.dataset_fingerprint
}

/// Accuracy of a checkpoint on `class_ids` of `dataset`.
///
/// On the training dataset only held-out samples of trained classes count;
/// on any other dataset every sample of the requested classes does.
pub fn accuracy(ckpt: &Checkpoint, dataset: &Dataset, class_ids: &[ClassId]) -> Result<f64> {
    let enc = ckpt.encoder_for(dataset)?;
    let indices = if is_training_dataset(ckpt, dataset) {
        evaluation_indices(&ckpt.training_set, dataset, class_ids)
    } else {
        let wanted: BTreeSet<ClassId> = class_ids.iter().copied().collect();
        (0..dataset.samples.len())
            .filter(|&i| wanted.contains(&dataset.samples[i].class_id))
            .collect()
    };
    accuracy_with(ckpt.config.mode, &ckpt.params, &enc, dataset, &indices, class_ids)
}

fn empty_report(ckpt: &Checkpoint, protocol: Protocol) -> EvalReport {
    let s = ckpt.config.seeds;
    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        protocol,
        mode: ckpt.config.mode,
        splits: Vec::new(),
        targets: Vec::new(),
        average: None,
        profile: None,
        seeds: vec![s.data, s.init, s.order],
        config_fingerprint: ckpt.config.fingerprint(),
        params_fingerprint: ckpt.params.fingerprint(),
    }
}

/// Base accuracy on held-out base samples, new accuracy on every new-class
/// sample, each over its own candidate classes.
pub fn evaluate_base_to_new(ckpt: &Checkpoint, dataset: &Dataset, plan: &SplitPlan) -> Result<EvalReport> {
    if plan.base_class_ids.is_empty() || plan.new_class_ids.is_empty() {
        return Err(Error::config("base-to-new needs non-empty base and new class sets"));
    }
    if !plan.base_class_ids.is_disjoint(&plan.new_class_ids) {
        return Err(Error::config("base and new classes overlap"));
    }
    if ckpt.training_set.class_ids.iter().any(|c| plan.new_class_ids.contains(c)) {
        return Err(Error::contract("the checkpoint was trained on new classes"));
    }
    let base: Vec<ClassId> = plan.base_class_ids.iter().copied().collect();
    let new: Vec<ClassId> = plan.new_class_ids.iter().copied().collect();
    let base_acc = accuracy(ckpt, dataset, &base)?;
    let new_acc = accuracy(ckpt, dataset, &new)?;
    let mut report = empty_report(ckpt, Protocol::BaseToNew);
    report
        .splits
        .push(SplitRow::new(dataset.name.clone(), 100.0 * base_acc, 100.0 * new_acc)?);
    Ok(report)
}

pub fn base_to_new_protocol(
    config: &crate::train::TrainConfig,
    dataset: &Dataset,
    plan: &SplitPlan,
) -> Result<(Checkpoint, EvalReport)> {
    let ckpt = train_loop(config, dataset, plan)?;
    let report = evaluate_base_to_new(&ckpt, dataset, plan)?;
    Ok((ckpt, report))
}

/// Plan that trains on every class of `dataset`.
pub fn all_classes_plan(dataset: &Dataset, shots: usize) -> SplitPlan {
    SplitPlan {
        base_class_ids: dataset.class_ids().into_iter().collect(),
        new_class_ids: BTreeSet::new(),
        shots,
    }
}

/// Zero-shot accuracy of a source-trained checkpoint on each target.
pub fn evaluate_cross_dataset(ckpt: &Checkpoint, source: &Dataset, targets: &[Dataset]) -> Result<EvalReport> {
    let mut report = empty_report(ckpt, Protocol::CrossDataset);
    report.targets.push(TargetRow {
        target: source.name.clone(),
        role: RowRole::Source,
        accuracy: 100.0 * accuracy(ckpt, source, &source.class_ids())?,
    });
    for t in targets {
        report.targets.push(TargetRow {
            target: t.name.clone(),
            role: RowRole::Target,
            accuracy: 100.0 * accuracy(ckpt, t, &t.class_ids())?,
        });
    }
    report.average = report::target_average(&report.targets);
    Ok(report)
}

pub fn cross_dataset_protocol(
    config: &crate::train::TrainConfig,
    source: &Dataset,
    targets: &[Dataset],
) -> Result<(Checkpoint, EvalReport)> {
    let ckpt = train_loop(config, source, &all_classes_plan(source, config.shots))?;
    let report = evaluate_cross_dataset(&ckpt, source, targets)?;
    Ok((ckpt, report))
}

/// Accuracy on globally perturbed renderings of the source, scored on the
/// source's held-out samples.
pub fn evaluate_domain_shift(
    ckpt: &Checkpoint,
    source: &Dataset,
    shifts: &[ShiftConfig],
    seed: u64,
) -> Result<EvalReport> {
    let ids = source.class_ids();
    let enc = ckpt.encoder_for(source)?;
    let indices = evaluation_indices(&ckpt.training_set, source, &ids);
    let mode = ckpt.config.mode;
    let mut report = empty_report(ckpt, Protocol::DomainShift);
    report.targets.push(TargetRow {
        target: source.name.clone(),
        role: RowRole::Source,
        accuracy: 100.0 * accuracy_with(mode, &ckpt.params, &enc, source, &indices, &ids)?,
    });
    for shift in shifts {
        let shifted = generate_shifted_dataset(source, shift, seed)?;
        report.targets.push(TargetRow {
            target: shift.label(),
            role: RowRole::Target,
            accuracy: 100.0 * accuracy_with(mode, &ckpt.params, &enc, &shifted, &indices, &ids)?,
        });
    }
    report.average = report::target_average(&report.targets);
    Ok(report)
}

pub fn domain_shift_protocol(
    config: &crate::train::TrainConfig,
    source: &Dataset,
    shifts: &[ShiftConfig],
) -> Result<(Checkpoint, EvalReport)> {
    let ckpt = train_loop(config, source, &all_classes_plan(source, config.shots))?;
    let report = evaluate_domain_shift(&ckpt, source, shifts, config.seeds.data)?;
    Ok((ckpt, report))
}

/// Profiles a checkpoint on held-out samples of its training classes (or
/// on all of `dataset` when it is not the training dataset).
pub fn profile_checkpoint(ckpt: &Checkpoint, dataset: &Dataset, n_points: usize, seed: u64) -> Result<AugmentationProfile> {
    let enc = ckpt.encoder_for(dataset)?;
    let pool: Vec<usize> = if is_training_dataset(ckpt, dataset) && !ckpt.training_set.held_out.is_empty() {
        ckpt.training_set.held_out.clone()
    } else {
        (0..dataset.samples.len()).collect()
    };
    let config = ProfileConfig {
        n_points,
        seed,
        kinds: ckpt.config.base_table()?.active_kinds(),
        identity_views: false,
    };
    augmentation_profile(&ckpt.params, &enc, dataset, &pool, &config, salt::PROFILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_cases() {
        assert!((harmonic_mean(80.47, 71.69).unwrap() - 75.83).abs() < 0.005);
        assert!((harmonic_mean(82.69, 63.22).unwrap() - 71.66).abs() < 0.005);
        assert_eq!(harmonic_mean(0.6, 0.6).unwrap(), 0.6);
        assert!(matches!(harmonic_mean(0.0, 0.0), Err(Error::Degenerate(_))));
    }
}
