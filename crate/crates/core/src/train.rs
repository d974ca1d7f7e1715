//! Training: balanced batches, Adam, a step learning-rate schedule,
//! validation-based model selection and multi-seed repetition.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_augmentation, sample_augmentation, AugmentParams};
use crate::data_model::{CohortManifest, SampleMeta, Split, SplitAssignment, N_BIOMARKERS};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::{roc_auc, summarize_seeds};
use crate::model::{init_model, replace_output_head, HeadMode, Init, Model, ModelConfig, Targets};
use crate::preprocess::{center_crop, prepare};
use crate::seeding::rng_for;

const STREAM_BATCHES: u64 = 10;
const STREAM_AUGMENT: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Step { factor: f64, every_n_epochs: usize },
}

impl LrSchedule {
    pub fn lr(&self, lr0: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => lr0,
            LrSchedule::Step {
                factor,
                every_n_epochs,
            } => lr0 * factor.powi((epoch / every_n_epochs.max(1)) as i32),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_schedule: LrSchedule,
    pub l2: f64,
    pub lambda_bio: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 18,
            epochs: 30,
            lr0: 1e-3,
            lr_schedule: LrSchedule::Step {
                factor: 0.5,
                every_n_epochs: 10,
            },
            l2: 1e-4,
            lambda_bio: 0.25,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} must be even and positive",
                self.batch_size
            )));
        }
        if !(self.lr0 >= 0.0) || !(self.l2 >= 0.0) || !(self.lambda_bio >= 0.0) {
            return Err(Error::InvalidConfig(
                "lr0, l2 and lambda_bio must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Batches of sample indices with exactly `batch_size / 2` per class.
///
/// The majority class is one shuffled pass (topped up from further shuffles
/// to fill the last batch); the minority class is drawn with replacement.
pub fn make_balanced_batches<R: Rng + ?Sized>(
    labels: &[u8],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || !batch_size.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("batch_size {batch_size} must be even")));
    }
    let half = batch_size / 2;
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    if neg.is_empty() || pos.is_empty() {
        return Err(Error::OneClassOnly);
    }
    let (mut major, minor) = if neg.len() >= pos.len() { (neg, pos) } else { (pos, neg) };
    let n_batches = major.len().div_ceil(half);
    major.shuffle(rng);
    let target = n_batches * half;
    let pool = major.clone();
    while major.len() < target {
        let mut extra = pool.clone();
        extra.shuffle(rng);
        let take = (target - major.len()).min(extra.len());
        major.extend_from_slice(&extra[..take]);
    }
    let batches = major
        .chunks_exact(half)
        .map(|chunk| {
            let mut batch = chunk.to_vec();
            batch.extend((0..half).map(|_| minor[rng.random_range(0..minor.len())]));
            batch
        })
        .collect();
    Ok(batches)
}

/// Prepared (resized + normalized, pre-crop) images with their metadata.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<SampleMeta>,
    pub images: Vec<ImageTensor>,
}

impl Dataset {
    pub fn new(samples: Vec<SampleMeta>, images: Vec<ImageTensor>) -> Result<Self> {
        if samples.len() != images.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples vs {} images",
                samples.len(),
                images.len()
            )));
        }
        Ok(Self { samples, images })
    }

    /// Loads and prepares the images of every sample accepted by `keep`.
    pub fn load(
        manifest: &CohortManifest,
        root: &Path,
        resize_to: usize,
        keep: impl Fn(&SampleMeta) -> bool,
    ) -> Result<Self> {
        let mut samples = Vec::new();
        let mut images = Vec::new();
        for s in manifest.samples().iter().filter(|s| keep(s)) {
            let raw = ImageTensor::load_png(&root.join(&s.path))?;
            images.push(prepare(&raw, resize_to)?);
            samples.push(s.clone());
        }
        Ok(Self { samples, images })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn biomarkers(&self) -> Vec<[f64; N_BIOMARKERS]> {
        self.samples.iter().map(|s| s.biomarkers).collect()
    }
}

/// Train / validation / test datasets of one split.
#[derive(Debug, Clone, Default)]
pub struct SplitData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl SplitData {
    pub fn load(
        manifest: &CohortManifest,
        split: &SplitAssignment,
        root: &Path,
        resize_to: usize,
    ) -> Result<Self> {
        let part = |which: Split| {
            Dataset::load(manifest, root, resize_to, |s| {
                split.split_of(&s.individual_id) == Some(which)
            })
        };
        Ok(Self {
            train: part(Split::Train)?,
            validation: part(Split::Validation)?,
            test: part(Split::Test)?,
        })
    }

    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

/// Forward pass over center crops (no augmentation).
pub fn predict_center(model: &Model, data: &Dataset, crop_size: usize) -> Result<crate::model::Outputs> {
    let mut t2d = Vec::with_capacity(data.len());
    let mut logits = Vec::with_capacity(data.len());
    let mut bio = Vec::with_capacity(data.len());
    // Chunked to bound the memory of the cropped copies.
    for chunk in data.images.chunks(64) {
        let crops = chunk
            .iter()
            .map(|img| center_crop(img, crop_size))
            .collect::<Result<Vec<_>>>()?;
        let out = model.forward(&crops)?;
        if let Some(p) = out.t2d_prob {
            t2d.extend(p);
        }
        if let Some(z) = out.t2d_logit {
            logits.extend(z);
        }
        if let Some(b) = out.biomarkers {
            bio.extend(b);
        }
    }
    let mode = model.head_mode();
    Ok(crate::model::Outputs {
        t2d_logit: mode.has_t2d().then_some(logits),
        t2d_prob: mode.has_t2d().then_some(t2d),
        biomarkers: mode.has_biomarkers().then_some(bio),
    })
}

/// Image-level ROC-AUC of center-crop predictions.
pub fn evaluate_auc(model: &Model, data: &Dataset, crop_size: usize) -> Result<f64> {
    let out = predict_center(model, data, crop_size)?;
    let probs = out
        .t2d_prob
        .ok_or_else(|| Error::ModeMismatch("model has no T2D head".into()))?;
    roc_auc(&probs, &data.labels())
}

fn biomarker_mse(pred: &[[f64; N_BIOMARKERS]], data: &Dataset) -> f64 {
    let n = (pred.len() * N_BIOMARKERS).max(1) as f64;
    pred.iter()
        .zip(&data.samples)
        .flat_map(|(p, s)| p.iter().zip(&s.biomarkers).map(|(a, b)| (a - b) * (a - b)))
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_bce: f64,
    pub train_mse: f64,
    pub val_auc: Option<f64>,
    pub val_mse: Option<f64>,
}

impl EpochRecord {
    /// Model-selection score: validation AUC, or negative biomarker MSE for
    /// models without a T2D head.
    pub fn selection_score(&self) -> f64 {
        match (self.val_auc, self.val_mse) {
            (Some(a), _) => a,
            (None, Some(m)) => -m,
            (None, None) => f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub head_mode: HeadMode,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self, provenance: Option<&crate::io::Provenance>) -> Vec<u8> {
        let mut out = Vec::new();
        if let Some(p) = provenance {
            let header = serde_json::json!({"provenance": {"config_hash": p.config_hash, "seed": p.seed}});
            out.extend(header.to_string().bytes());
            out.push(b'\n');
        }
        for e in &self.epochs {
            out.extend(serde_json::to_string(e).expect("plain record").bytes());
            out.push(b'\n');
        }
        out
    }
}

/// Result of [`train`]: the report plus the selected model.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best_model: Model,
}

/// What a training run sees of the data.
#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a> {
    pub train: &'a Dataset,
    pub validation: &'a Dataset,
    pub augment: &'a AugmentParams,
    pub crop_size: usize,
}

fn batch_inputs(
    data: &Dataset,
    batch: &[usize],
    augment: &AugmentParams,
    crop_size: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<ImageTensor>, Targets)> {
    let mut images = Vec::with_capacity(batch.len());
    for &i in batch {
        let spec = sample_augmentation(augment, rng);
        images.push(center_crop(&apply_augmentation(&data.images[i], &spec), crop_size)?);
    }
    let targets = Targets {
        labels: Some(batch.iter().map(|&i| data.samples[i].label).collect()),
        biomarkers: Some(batch.iter().map(|&i| data.samples[i].biomarkers).collect()),
    };
    Ok((images, targets))
}

/// Trains `model`, selecting the epoch with the best validation score
/// (earliest on ties). With `checkpoint` set, the selected model is written
/// there whenever it improves, so a diverged run leaves the last finite
/// best checkpoint behind.
pub fn train(
    mut model: Model,
    inputs: TrainInputs<'_>,
    cfg: &TrainConfig,
    checkpoint: Option<(&Path, &str)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    inputs.augment.validate()?;
    let labels = inputs.train.labels();
    let val_labels = inputs.validation.labels();
    let has_both = |l: &[u8]| l.contains(&0) && l.contains(&1);
    if !has_both(&labels) || !has_both(&val_labels) {
        return Err(Error::OneClassOnly);
    }

    let mode = model.head_mode();
    let mut state = AdamState::new(model.n_params());
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_schedule.lr(cfg.lr0, epoch);
        let mut batch_rng = rng_for(cfg.seed, &[STREAM_BATCHES, epoch as u64]);
        let batches = make_balanced_batches(&labels, cfg.batch_size, &mut batch_rng)?;
        let (mut loss_sum, mut bce_sum, mut mse_sum) = (0.0, 0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let mut aug_rng = rng_for(cfg.seed, &[STREAM_AUGMENT, epoch as u64, b as u64]);
            let (images, targets) =
                batch_inputs(inputs.train, batch, inputs.augment, inputs.crop_size, &mut aug_rng)?;
            let (loss, grad) = model.gradients(&images, &targets, cfg.lambda_bio, cfg.l2)?;
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += loss.total;
            bce_sum += loss.bce;
            mse_sum += loss.mse;
            adam_step(model.params_mut(), &grad, &mut state, lr, &cfg.adam)?;
        }
        let nb = batches.len().max(1) as f64;

        let val = predict_center(&model, inputs.validation, inputs.crop_size)?;
        let val_auc = val.t2d_prob.as_ref().map(|p| roc_auc(p, &val_labels)).transpose()?;
        let val_mse = val.biomarkers.as_ref().map(|b| biomarker_mse(b, inputs.validation));
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / nb,
            train_bce: bce_sum / nb,
            train_mse: mse_sum / nb,
            val_auc,
            val_mse,
        };
        let score = record.selection_score();
        records.push(record);
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            if let Some((path, hash)) = checkpoint {
                model.save_checkpoint(path, hash)?;
            }
            best = Some((epoch, score, model.clone()));
        }
    }

    let (best_epoch, best_score, best_model) = match best {
        Some(b) => b,
        None => (0, f64::NEG_INFINITY, model),
    };
    Ok(TrainOutcome {
        report: TrainReport {
            seed: cfg.seed,
            head_mode: mode,
            epochs: records,
            best_epoch,
            best_score,
            checkpoint: checkpoint.map(|(p, _)| p.to_path_buf()),
        },
        best_model,
    })
}

/// The five model setup / initialization strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Random init, T2D head only.
    Random,
    /// Pretrained trunk from a checkpoint, T2D head only.
    Pretrained { checkpoint: PathBuf },
    /// Train a biomarker-only model, then swap its head for a T2D head and
    /// train again.
    BiomarkerTransfer { pretrain_epochs: usize },
    /// Random init, T2D and biomarker heads.
    MtlRandom,
    /// Pretrained trunk, T2D and biomarker heads.
    MtlPretrained { checkpoint: PathBuf },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Pretrained { .. } => "pretrained",
            Strategy::BiomarkerTransfer { .. } => "biomarker_transfer",
            Strategy::MtlRandom => "mtl_random",
            Strategy::MtlPretrained { .. } => "mtl_pretrained",
        }
    }

    pub fn head_mode(&self) -> HeadMode {
        match self {
            Strategy::MtlRandom | Strategy::MtlPretrained { .. } => HeadMode::MultiTarget,
            _ => HeadMode::T2dOnly,
        }
    }

    /// Model config for this strategy and seed, derived from `base`.
    pub fn model_config(&self, base: &ModelConfig, seed: u64) -> ModelConfig {
        let init = match self {
            Strategy::Pretrained { checkpoint } | Strategy::MtlPretrained { checkpoint } => Init::Checkpoint {
                path: checkpoint.clone(),
                seed,
            },
            _ => Init::Random { seed },
        };
        ModelConfig {
            head_mode: self.head_mode(),
            init,
            ..base.clone()
        }
    }
}

/// Builds the initial model for `strategy` (running the biomarker
/// pretraining stage when required) and trains it.
pub fn train_strategy(
    strategy: &Strategy,
    base: &ModelConfig,
    inputs: TrainInputs<'_>,
    cfg: &TrainConfig,
    checkpoint: Option<(&Path, &str)>,
) -> Result<TrainOutcome> {
    let model_cfg = strategy.model_config(base, cfg.seed);
    let model = match strategy {
        Strategy::BiomarkerTransfer { pretrain_epochs } => {
            let pre_cfg = ModelConfig {
                head_mode: HeadMode::BiomarkersOnly,
                ..model_cfg.clone()
            };
            let pre_train = TrainConfig {
                epochs: *pretrain_epochs,
                lambda_bio: if cfg.lambda_bio > 0.0 { cfg.lambda_bio } else { 1.0 },
                ..cfg.clone()
            };
            let pre = train(init_model(&pre_cfg)?, inputs, &pre_train, None)?;
            replace_output_head(&pre.best_model, HeadMode::T2dOnly, cfg.seed)
        }
        _ => init_model(&model_cfg)?,
    };
    train(model, inputs, cfg, checkpoint)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub test_auc: Option<f64>,
    pub error: Option<String>,
    pub report: Option<TrainReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub runs: Vec<SeedResult>,
    pub mean: f64,
    pub std: f64,
    pub failures: usize,
}

/// Summarizes test AUCs of independent runs (sample standard deviation).
/// Failed runs are kept in `runs` and counted, not summarized.
pub fn summarize_runs(runs: Vec<SeedResult>) -> Result<SeedSummary> {
    let aucs: Vec<f64> = runs.iter().filter_map(|r| r.test_auc).collect();
    let failures = runs.len() - aucs.len();
    let (mean, std) = summarize_seeds(&aucs)?;
    Ok(SeedSummary {
        runs,
        mean,
        std,
        failures,
    })
}

/// Trains one model per seed, evaluates each selected model on the test
/// split and summarizes. A failing seed is recorded and the others continue.
pub fn run_seeds(
    strategy: &Strategy,
    base: &ModelConfig,
    data: &SplitData,
    augment: &AugmentParams,
    crop_size: usize,
    cfg: &TrainConfig,
    seeds: &[u64],
    mut on_model: impl FnMut(u64, &TrainOutcome),
) -> Result<SeedSummary> {
    if seeds.len() < 2 {
        return Err(Error::InvalidConfig("run_seeds needs at least 2 seeds".into()));
    }
    let inputs = TrainInputs {
        train: &data.train,
        validation: &data.validation,
        augment,
        crop_size,
    };
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let seed_cfg = TrainConfig { seed, ..cfg.clone() };
        let result = train_strategy(strategy, base, inputs, &seed_cfg, None).and_then(|outcome| {
            let auc = evaluate_auc(&outcome.best_model, &data.test, crop_size)?;
            on_model(seed, &outcome);
            Ok((auc, outcome.report))
        });
        runs.push(match result {
            Ok((auc, report)) => SeedResult {
                seed,
                test_auc: Some(auc),
                error: None,
                report: Some(report),
            },
            Err(e) => SeedResult {
                seed,
                test_auc: None,
                error: Some(format!("{}: {e}", e.code())),
                report: None,
            },
        });
    }
    summarize_runs(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = [0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[2.0], &mut s, 0.001, &AdamConfig::default()).unwrap();
        assert!((p[0] + 0.001).abs() < 1e-9);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_zero_gradient() {
        let mut p = [0.7];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[0.0], &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p[0], 0.7);
    }

    #[test]
    fn adam_two_constant_steps() {
        let mut p = [0.0];
        let mut s = AdamState::new(1);
        for _ in 0..2 {
            adam_step(&mut p, &[1.0], &mut s, 0.1, &AdamConfig::default()).unwrap();
        }
        assert!((p[0] + 0.2).abs() < 1e-6);
    }

    #[test]
    fn adam_is_odd_at_first_step() {
        let cfg = AdamConfig::default();
        for g in [0.3, -2.0, 1e-5] {
            let (mut a, mut b) = ([0.0], [0.0]);
            adam_step(&mut a, &[g], &mut AdamState::new(1), 0.01, &cfg).unwrap();
            adam_step(&mut b, &[-g], &mut AdamState::new(1), 0.01, &cfg).unwrap();
            assert_eq!(a[0], -b[0]);
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut [0.0], &[1.0], &mut s, 0.1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn balanced_batches_are_exact() {
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i % 3 == 0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = make_balanced_batches(&labels, 18, &mut rng).unwrap();
        for b in &batches {
            assert_eq!(b.len(), 18);
            assert_eq!(b.iter().filter(|&&i| labels[i] == 1).count(), 9);
        }
        // every majority sample appears at least once per epoch
        for i in (0..100).filter(|&i| labels[i] == 0) {
            assert!(batches.iter().flatten().any(|&j| j == i));
        }
    }

    #[test]
    fn minority_repeats() {
        let labels: Vec<u8> = (0..105).map(|i| u8::from(i < 5)).collect();
        let batches = make_balanced_batches(&labels, 18, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let pos_draws = batches.iter().flatten().filter(|&&i| i < 5).count();
        assert!(pos_draws > 5);
        assert_eq!(batches.len(), 12);
    }

    #[test]
    fn batches_are_seeded() {
        let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 4 == 0)).collect();
        let a = make_balanced_batches(&labels, 6, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = make_balanced_batches(&labels, 6, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(make_balanced_batches(&[0, 0, 0], 2, &mut rng), Err(Error::OneClassOnly)));
        assert!(make_balanced_batches(&[0, 1], 3, &mut rng).is_err());
    }

    #[test]
    fn step_schedule() {
        let s = LrSchedule::Step {
            factor: 0.5,
            every_n_epochs: 10,
        };
        assert_eq!(s.lr(1.0, 0), 1.0);
        assert_eq!(s.lr(1.0, 9), 1.0);
        assert_eq!(s.lr(1.0, 10), 0.5);
        assert_eq!(s.lr(1.0, 25), 0.25);
        assert_eq!(LrSchedule::Constant.lr(0.3, 100), 0.3);
    }

    #[test]
    fn seed_summary_statistics() {
        let runs = [0.72, 0.74]
            .iter()
            .enumerate()
            .map(|(i, &a)| SeedResult {
                seed: i as u64,
                test_auc: Some(a),
                error: None,
                report: None,
            })
            .chain(std::iter::once(SeedResult {
                seed: 9,
                test_auc: None,
                error: Some("DIVERGENCE".into()),
                report: None,
            }))
            .collect();
        let s = summarize_runs(runs).unwrap();
        assert!((s.mean - 0.73).abs() < 1e-12);
        assert!((s.std - 0.0141421356).abs() < 1e-8);
        assert_eq!(s.failures, 1);
    }
}
