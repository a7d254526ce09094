//! Quad-batch construction, the SGD training loop, checkpoints and seeded
//! ensembles.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{apply_view, restrict_bank, sample_distinct_pair, update_weights_from_silhouette, AugWeightTable, AugmentationKind};
use crate::data::{hex, sample_few_shot, ClassId, Dataset, SplitPlan, TrainingSet};
use crate::encoders::{init_frozen, EncoderDims, EncoderWeights};
use crate::error::{Error, Result};
use crate::eval::{augmentation_profile, ProfileConfig};
use crate::losses::{classification_loss, quad_objective, total_loss, AnchorChoice, LossWeights, QuadDeltas, TripletObjective};
use crate::prompt::{delta_from_features, BoundParams, ModelMode, PromptParams, DEFAULT_TEMPERATURE};
use crate::rng::{mix, salt, stream};
use crate::tensor::{backward, Tape, Tensor, Var};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Which view of the labeled image feeds the cross-entropy term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeView {
    #[default]
    Original,
    /// The labeled image under augmentation A.
    Augmented,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Dataset generation and base/new split.
    pub data: u64,
    /// Frozen encoders and initial prompt parameters.
    pub init: u64,
    /// Few-shot draw, batch stream and augmentation parameters.
    pub order: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 0,
            init: 0,
            order: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WrsConfig {
    pub enabled: bool,
    /// Kinds whose delta-token silhouette falls below this are boosted.
    pub threshold: f64,
    /// Weight ratio between boosted and regular kinds.
    pub boost: f64,
    /// Steps between silhouette refreshes; `None` profiles once at step 0.
    pub refresh_interval: Option<usize>,
    pub profile_points: usize,
}

impl Default for WrsConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            threshold: -0.2,
            boost: 3.0,
            refresh_interval: Some(200),
            profile_points: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: ModelMode,
    pub objective: TripletObjective,
    pub anchors: AnchorChoice,
    pub ce_view: CeView,
    /// Treat the original-image meta token as a constant in delta tokens.
    pub stop_gradient: bool,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub cosine_schedule: bool,
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    pub temperature: f64,
    pub shots: usize,
    pub seeds: Seeds,
    /// Restrict the augmentation bank to these kinds; `None` uses all 14.
    pub augmentations: Option<Vec<AugmentationKind>>,
    pub wrs: WrsConfig,
    pub dims: EncoderDims,
    /// Replace every augmented view by the original image (diagnostic).
    pub identity_views: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: ModelMode::Aapl,
            objective: TripletObjective::Adtriplet,
            anchors: AnchorChoice::Primary,
            ce_view: CeView::Original,
            stop_gradient: false,
            steps: 2000,
            learning_rate: 0.002,
            momentum: 0.9,
            cosine_schedule: true,
            alpha: 0.2,
            beta: 1.0,
            margin: 0.2,
            temperature: DEFAULT_TEMPERATURE,
            shots: 16,
            seeds: Seeds::default(),
            augmentations: None,
            wrs: WrsConfig::default(),
            dims: EncoderDims::default(),
            identity_views: false,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            margin: self.margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        self.dims.validate()?;
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.shots == 0 {
            return Err(Error::config("shots must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.wrs.enabled {
            if !(-1.0..=1.0).contains(&self.wrs.threshold) {
                return Err(Error::config("wrs.threshold must lie in [-1, 1]"));
            }
            if self.wrs.refresh_interval == Some(0) {
                return Err(Error::config("wrs.refresh_interval must be positive"));
            }
            if self.wrs.profile_points < 2 {
                return Err(Error::config("wrs.profile_points must be at least 2"));
            }
        }
        self.base_table()?;
        Ok(())
    }

    pub fn base_table(&self) -> Result<AugWeightTable> {
        match &self.augmentations {
            None => Ok(AugWeightTable::uniform()),
            Some(kinds) => restrict_bank(kinds),
        }
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }

    /// Learning rate at `step` of `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.cosine_schedule {
            0.5 * self.learning_rate * (1.0 + (PI * step as f64 / self.steps as f64).cos())
        } else {
            self.learning_rate
        }
    }
}

/// One training quad: two classes, one image each, two distinct kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadBatch {
    pub class_1: ClassId,
    pub class_2: ClassId,
    /// Sample indices into the dataset.
    pub image_1: usize,
    pub image_2: usize,
    pub kind_a: AugmentationKind,
    pub kind_b: AugmentationKind,
    /// Augmentation parameter seeds for views 1A, 1B, 2A, 2B.
    pub view_seeds: [u64; 4],
}

pub fn build_quad_batch(
    dataset: &Dataset,
    train: &TrainingSet,
    table: &AugWeightTable,
    rng: &mut ChaCha8Rng,
) -> Result<QuadBatch> {
    if train.class_ids.len() < 2 {
        return Err(Error::config("quad batches need at least two training classes"));
    }
    let picked: Vec<ClassId> = train.class_ids.choose_multiple(rng, 2).copied().collect();
    let (class_1, class_2) = (picked[0], picked[1]);
    let mut pick_image = |class: ClassId| -> Result<usize> {
        let pool: Vec<usize> = train
            .train
            .iter()
            .copied()
            .filter(|&i| dataset.samples[i].class_id == class)
            .collect();
        pool.choose(rng)
            .copied()
            .ok_or_else(|| Error::config(format!("class {class} has no training samples")))
    };
    let image_1 = pick_image(class_1)?;
    let image_2 = pick_image(class_2)?;
    let (kind_a, kind_b) = sample_distinct_pair(table, rng);
    let view_seeds = [rng.next_u64(), rng.next_u64(), rng.next_u64(), rng.next_u64()];
    Ok(QuadBatch {
        class_1,
        class_2,
        image_1,
        image_2,
        kind_a,
        kind_b,
        view_seeds,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub ce: f64,
    pub adtriplet: f64,
    pub total: f64,
    pub lr: f64,
}

/// Loss terms of one quad on a tape.
pub struct LossParts<'t> {
    pub ce: Var<'t>,
    pub adtriplet: Var<'t>,
    pub total: Var<'t>,
}

/// Forward pass of the training objective for one quad.
pub fn quad_losses<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    config: &TrainConfig,
    enc: &EncoderWeights,
    dataset: &Dataset,
    class_ids: &[ClassId],
    batch: &QuadBatch,
) -> Result<LossParts<'t>> {
    let x1 = &dataset.samples[batch.image_1].image;
    let x2 = &dataset.samples[batch.image_2].image;
    let view = |kind: AugmentationKind| (!config.identity_views).then_some(kind);
    let [s1a, s1b, s2a, s2b] = batch.view_seeds;

    let f1 = enc.encode_image_on(tape, x1)?;
    let f1a = enc.encode_image_on(tape, &apply_view(view(batch.kind_a), x1, s1a))?;

    let adtriplet = if config.mode == ModelMode::Aapl {
        let f1b = enc.encode_image_on(tape, &apply_view(view(batch.kind_b), x1, s1b))?;
        let f2 = enc.encode_image_on(tape, x2)?;
        let f2a = enc.encode_image_on(tape, &apply_view(view(batch.kind_a), x2, s2a))?;
        let f2b = enc.encode_image_on(tape, &apply_view(view(batch.kind_b), x2, s2b))?;
        let net = &bound.metanet;
        let sg = config.stop_gradient;
        let quad = QuadDeltas::new(
            delta_from_features(net, f1a, f1, sg)?,
            delta_from_features(net, f1b, f1, sg)?,
            delta_from_features(net, f2a, f2, sg)?,
            delta_from_features(net, f2b, f2, sg)?,
            (batch.class_1, batch.class_2),
            (batch.kind_a, batch.kind_b),
        )?;
        quad_objective(&quad, config.objective, config.anchors, config.margin)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let ce_feature = match config.ce_view {
        CeView::Original => f1,
        CeView::Augmented => f1a,
    };
    let ce = classification_loss(
        config.mode,
        bound,
        enc,
        ce_feature,
        class_ids,
        batch.class_1,
        config.temperature,
    )?;
    let total = total_loss(ce, adtriplet, &config.loss_weights())?;
    Ok(LossParts { ce, adtriplet, total })
}

/// Loss values for one quad without touching the parameters.
pub fn evaluate_quad(
    params: &PromptParams,
    config: &TrainConfig,
    enc: &EncoderWeights,
    dataset: &Dataset,
    class_ids: &[ClassId],
    batch: &QuadBatch,
) -> Result<(f64, f64, f64)> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let parts = quad_losses(&tape, &bound, config, enc, dataset, class_ids, batch)?;
    Ok((parts.ce.item(), parts.adtriplet.item(), parts.total.item()))
}

/// Mutable state of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub params: PromptParams,
    pub velocity: Vec<Tensor>,
}

impl TrainState {
    pub fn new(params: PromptParams) -> Self {
        let velocity = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            params,
            velocity,
        }
    }
}

/// One SGD-with-momentum update on `batch`.
pub fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    enc: &EncoderWeights,
    dataset: &Dataset,
    class_ids: &[ClassId],
    batch: &QuadBatch,
) -> Result<StepMetrics> {
    let step = state.step;
    let with_step = |e: Error| match e {
        Error::Numeric(msg) => Error::Numeric(format!(
            "step {step} (classes {}/{}, kinds {}/{}): {msg}",
            batch.class_1, batch.class_2, batch.kind_a, batch.kind_b
        )),
        other => other,
    };
    let tape = Tape::new();
    let bound = state.params.bind(&tape);
    let parts = quad_losses(&tape, &bound, config, enc, dataset, class_ids, batch).map_err(with_step)?;
    let grads = backward(parts.total).map_err(with_step)?;
    let dense = bound.dense_gradients(&grads);
    if let Some(bad) = dense.iter().position(|g| !g.is_finite()) {
        return Err(with_step(Error::Numeric(format!("non-finite gradient in parameter {bad}"))));
    }
    let lr = config.lr_at(step);
    for ((p, v), g) in state.params.tensors_mut().into_iter().zip(&mut state.velocity).zip(&dense) {
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = config.momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    state.step += 1;
    let metrics = StepMetrics {
        step,
        ce: parts.ce.item(),
        adtriplet: parts.adtriplet.item(),
        total: parts.total.item(),
        lr,
    };
    if !metrics.total.is_finite() {
        return Err(with_step(Error::Numeric("non-finite loss".into())));
    }
    Ok(metrics)
}

/// Weight table change made by silhouette-weighted sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WrsUpdate {
    pub step: usize,
    pub scores: BTreeMap<AugmentationKind, f64>,
    pub boosted: Vec<AugmentationKind>,
    pub table: AugWeightTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub tool_version: String,
    pub config: TrainConfig,
    pub params: PromptParams,
    pub encoder: EncoderWeights,
    pub encoder_fingerprint: String,
    pub dataset_name: String,
    pub dataset_fingerprint: String,
    pub training_set: TrainingSet,
    pub history: Vec<StepMetrics>,
    pub final_table: AugWeightTable,
    pub aug_counts: BTreeMap<AugmentationKind, u64>,
    pub wrs_updates: Vec<WrsUpdate>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("format_version").and_then(|v| v.as_u64());
        if found != Some(CHECKPOINT_FORMAT_VERSION as u64) {
            return Err(Error::Version {
                expected: CHECKPOINT_FORMAT_VERSION.to_string(),
                found: found.map_or_else(|| "none".to_string(), |v| v.to_string()),
            });
        }
        let ckpt: Checkpoint = serde_json::from_value(value)?;
        if ckpt.encoder.fingerprint() != ckpt.encoder_fingerprint {
            return Err(Error::contract("checkpoint encoder weights do not match their fingerprint"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Writes `step,ce,adtriplet,total,lr` rows.
    pub fn write_metrics_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "ce", "adtriplet", "total", "lr"]).map_err(csv_err)?;
        for m in &self.history {
            w.write_record([
                m.step.to_string(),
                m.ce.to_string(),
                m.adtriplet.to_string(),
                m.total.to_string(),
                m.lr.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Frozen encoder with `dataset`'s classes registered, for evaluation.
    pub fn encoder_for(&self, dataset: &Dataset) -> Result<EncoderWeights> {
        let mut enc = self.encoder.clone();
        enc.register_classes(dataset)?;
        Ok(enc)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Frozen encoder for `config` with every class of `dataset` registered.
pub fn prepare_encoder(dims: EncoderDims, init_seed: u64, dataset: &Dataset) -> Result<EncoderWeights> {
    let mut enc = init_frozen(dims, init_seed)?;
    enc.register_classes(dataset)?;
    Ok(enc)
}

/// Trains on the few-shot base classes of `plan` and returns the final
/// checkpoint.
pub fn train_loop(config: &TrainConfig, dataset: &Dataset, plan: &SplitPlan) -> Result<Checkpoint> {
    config.validate()?;
    let plan = SplitPlan {
        shots: config.shots,
        ..plan.clone()
    };
    let train = sample_few_shot(dataset, &plan, config.seeds.order)?;
    let enc = prepare_encoder(config.dims, config.seeds.init, dataset)?;
    train_on(config, dataset, train, enc)
}

/// Training loop over an explicit training set and prepared encoder.
pub fn train_on(
    config: &TrainConfig,
    dataset: &Dataset,
    train: TrainingSet,
    enc: EncoderWeights,
) -> Result<Checkpoint> {
    config.validate()?;
    let encoder_fingerprint = enc.fingerprint();
    let base_table = config.base_table()?;
    let mut table = base_table.clone();
    let mut state = TrainState::new(PromptParams::init(&enc, config.seeds.init)?);
    let mut rng = stream(config.seeds.order, salt::BATCHES);
    let mut history = Vec::with_capacity(config.steps);
    let mut aug_counts: BTreeMap<AugmentationKind, u64> = BTreeMap::new();
    let mut wrs_updates = Vec::new();

    for step in 0..config.steps {
        if config.wrs.enabled && wrs_due(&config.wrs, step) {
            let update = wrs_refresh(config, &state.params, &enc, dataset, &train, &base_table, step)?;
            table = update.table.clone();
            wrs_updates.push(update);
        }
        let batch = build_quad_batch(dataset, &train, &table, &mut rng)?;
        *aug_counts.entry(batch.kind_a).or_default() += 1;
        *aug_counts.entry(batch.kind_b).or_default() += 1;
        history.push(train_step(&mut state, config, &enc, dataset, &train.class_ids, &batch)?);
    }

    if enc.fingerprint() != encoder_fingerprint {
        return Err(Error::contract("encoder weights changed during training"));
    }
    Ok(Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        config: config.clone(),
        params: state.params,
        encoder_fingerprint,
        encoder: enc,
        dataset_name: dataset.name.clone(),
        dataset_fingerprint: dataset.fingerprint(),
        training_set: train,
        history,
        final_table: table,
        aug_counts,
        wrs_updates,
    })
}

fn wrs_due(wrs: &WrsConfig, step: usize) -> bool {
    match wrs.refresh_interval {
        None => step == 0,
        Some(n) => step % n == 0,
    }
}

fn wrs_refresh(
    config: &TrainConfig,
    params: &PromptParams,
    enc: &EncoderWeights,
    dataset: &Dataset,
    train: &TrainingSet,
    base_table: &AugWeightTable,
    step: usize,
) -> Result<WrsUpdate> {
    let pool = if train.held_out.is_empty() {
        &train.train
    } else {
        &train.held_out
    };
    let profile = augmentation_profile(
        params,
        enc,
        dataset,
        pool,
        &ProfileConfig {
            n_points: config.wrs.profile_points,
            seed: mix(config.seeds.order, step as u64),
            kinds: base_table.active_kinds(),
            identity_views: config.identity_views,
        },
        salt::WRS_PROFILE,
    )?;
    let scores = profile.delta_by_kind.clone();
    let table = update_weights_from_silhouette(&scores, config.wrs.threshold, config.wrs.boost, base_table)?;
    let boosted = scores
        .iter()
        .filter(|(_, &s)| s < config.wrs.threshold)
        .map(|(&k, _)| k)
        .collect();
    Ok(WrsUpdate {
        step,
        scores,
        boosted,
        table,
    })
}

/// Mean and population standard deviation of each metric over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub seeds: Vec<Seeds>,
    pub per_seed: Vec<BTreeMap<String, f64>>,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

/// Seeds of replica `i`: `init` and `order` are offset by `i`, the data
/// seed is shared so every replica sees the same dataset and split.
pub fn replica_seeds(base: Seeds, i: usize) -> Seeds {
    Seeds {
        data: base.data,
        init: base.init.wrapping_add(i as u64),
        order: base.order.wrapping_add(i as u64),
    }
}

/// Runs `job` once per replica and aggregates the returned metrics.
///
/// Replicas run on at most `threads` workers; results are merged in replica
/// order, so the summary does not depend on scheduling.
pub fn run_seeded_ensemble<F>(config: &TrainConfig, n_seeds: usize, threads: usize, job: F) -> Result<EnsembleSummary>
where
    F: Fn(&TrainConfig) -> Result<BTreeMap<String, f64>> + Sync,
{
    if n_seeds == 0 {
        return Err(Error::config("an ensemble needs at least one seed"));
    }
    let configs: Vec<TrainConfig> = (0..n_seeds)
        .map(|i| TrainConfig {
            seeds: replica_seeds(config.seeds, i),
            ..config.clone()
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<BTreeMap<String, f64>>> = pool.install(|| configs.par_iter().map(&job).collect());
    let per_seed = results.into_iter().collect::<Result<Vec<_>>>()?;
    let (mean, std) = aggregate(&per_seed)?;
    Ok(EnsembleSummary {
        seeds: configs.iter().map(|c| c.seeds).collect(),
        per_seed,
        mean,
        std,
    })
}

/// Mean and population std per key; values are summed in sorted order so
/// the result does not depend on replica order.
pub fn aggregate(per_seed: &[BTreeMap<String, f64>]) -> Result<(BTreeMap<String, f64>, BTreeMap<String, f64>)> {
    let first = per_seed.first().ok_or_else(|| Error::config("nothing to aggregate"))?;
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for key in first.keys() {
        let mut values = per_seed
            .iter()
            .map(|m| {
                m.get(key)
                    .copied()
                    .ok_or_else(|| Error::contract(format!("metric '{key}' missing from a replica")))
            })
            .collect::<Result<Vec<f64>>>()?;
        values.sort_by(f64::total_cmp);
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        mean.insert(key.clone(), mu);
        std.insert(key.clone(), var.sqrt());
    }
    Ok((mean, std))
}

/// Fresh stream of quads for replaying a run's batch sequence.
pub fn batch_stream(order_seed: u64) -> ChaCha8Rng {
    stream(order_seed, salt::BATCHES)
}

