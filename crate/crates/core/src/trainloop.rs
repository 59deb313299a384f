//! Training orchestration: balanced sampling, per-sample augmentation,
//! focal loss with AdamW, per-epoch validation, combined-score
//! checkpointing and early stopping.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_pipeline, eval_transform, AugmentConfig};
use crate::catalog::ClassCatalog;
use crate::data_io::{decode_image, load_manifest, Checkpoint, LabeledManifest};
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, InputSpec};
use crate::loss::{focal_loss, focal_loss_grad, FocalConfig, Reduction};
use crate::matrix::{Matrix, ProbMatrix};
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::{backward, featurize, forward, init_params, softmax, Arch, ModelParams};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::sampling::{class_counts, draw_epoch_indices, SamplerSpec};

/// A manifest with its images decoded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub catalog: ClassCatalog,
    pub manifest: LabeledManifest,
    pub images: Vec<ImageBuffer>,
}

impl Dataset {
    pub fn new(catalog: ClassCatalog, manifest: LabeledManifest, images: Vec<ImageBuffer>) -> Result<Self> {
        if images.len() != manifest.len() {
            return Err(Error::shape(format!(
                "{} images for {} manifest records",
                images.len(),
                manifest.len()
            )));
        }
        Ok(Self {
            catalog,
            manifest,
            images,
        })
    }

    /// Loads a manifest and decodes its images; paths resolve relative to
    /// the manifest's directory.
    pub fn load(manifest_path: &Path, catalog: &ClassCatalog) -> Result<Self> {
        let manifest = load_manifest(manifest_path, catalog)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let images = manifest
            .records()
            .par_iter()
            .map(|r| decode_image(&root.join(&r.image_id)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(catalog.clone(), manifest, images)
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.labels()
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.manifest.records().iter().map(|r| r.image_id.clone()).collect()
    }
}

/// Per-class focal-loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Scalar(f64),
    List(Vec<f64>),
    Named(AlphaRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    InverseFrequency,
}

impl AlphaSpec {
    /// Inverse frequency is scaled so the present classes average to 1;
    /// classes without samples get 1.
    pub fn resolve(&self, counts: &[usize]) -> Result<Vec<f64>> {
        let k = counts.len();
        match self {
            AlphaSpec::Scalar(a) => Ok(vec![*a; k]),
            AlphaSpec::List(v) if v.len() == k => Ok(v.clone()),
            AlphaSpec::List(v) => Err(Error::Config(format!(
                "loss.alpha lists {} values for {k} classes",
                v.len()
            ))),
            AlphaSpec::Named(AlphaRule::InverseFrequency) => {
                let present: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
                let total: usize = present.iter().sum();
                Ok(counts
                    .iter()
                    .map(|&c| {
                        if c == 0 {
                            1.0
                        } else {
                            total as f64 / (present.len() as f64 * c as f64)
                        }
                    })
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha: AlphaSpec,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: AlphaSpec::Scalar(1.0),
            reduction: Reduction::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub improvement_tolerance: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Record per-epoch wall time. Off by default so histories are reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 20,
            patience: 5,
            improvement_tolerance: 1e-4,
            seed: 0,
            optimizer: AdamWConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.improvement_tolerance < 0.0 || self.improvement_tolerance.is_nan() {
            return Err(Error::Config("improvement tolerance must be >= 0".into()));
        }
        self.optimizer.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.augment.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_balanced_accuracy: f64,
    pub val_mean_auc: f64,
    pub val_combined_score: f64,
    pub improved: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience-based stopping on a score where larger is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    best_score: f64,
    epochs_since_improvement: usize,
    patience: usize,
    tolerance: f64,
}

impl EarlyStopper {
    pub fn new(patience: usize, tolerance: f64) -> Self {
        Self {
            best_score: f64::NEG_INFINITY,
            epochs_since_improvement: 0,
            patience,
            tolerance,
        }
    }

    pub fn best_score(&self) -> f64 {
        self.best_score
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.epochs_since_improvement
    }

    /// A score improves only if it beats the best by more than the tolerance.
    /// Stops once `patience` consecutive scores fail to improve.
    pub fn update(&mut self, score: f64) -> Result<(StopDecision, bool)> {
        if score.is_nan() {
            return Err(Error::invalid("NaN validation score"));
        }
        let improved = score > self.best_score + self.tolerance;
        if improved {
            self.best_score = score;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        let decision = if self.epochs_since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        Ok((decision, improved))
    }
}

/// SplitMix64 finalizer over `seed ^ tag`, for independent sub-streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const INIT_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const SAMPLER_STREAM: u64 = 3;

/// Side of the square pooling grid whose features fill the arch's input.
pub fn pooling_grid(arch: &Arch) -> Result<usize> {
    arch.feature_grid().ok_or_else(|| {
        Error::shape(format!(
            "input width {} of {arch} is not 3 * side^2 for any pooling grid",
            arch.input_dim()
        ))
    })
}

fn eval_config(input: &InputSpec) -> AugmentConfig {
    AugmentConfig {
        norm_mean: input.normalization.mean,
        norm_std: input.normalization.std,
        ..AugmentConfig::deterministic((input.width, input.height))
    }
}

/// Features of one raw image under the deterministic evaluation transform.
pub fn image_features(img: &ImageBuffer, input: &InputSpec, grid: usize) -> Result<Vec<f64>> {
    featurize(&eval_transform(img, &eval_config(input))?, grid, grid)
}

pub fn eval_features(data: &Dataset, input: &InputSpec, grid: usize) -> Result<Matrix> {
    let rows = data
        .images
        .par_iter()
        .map(|img| image_features(img, input, grid))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, 3 * grid * grid));
    }
    Matrix::from_rows(&rows)
}

pub fn predict_probs(params: &ModelParams, data: &Dataset, input: &InputSpec) -> Result<ProbMatrix> {
    let grid = pooling_grid(params.arch())?;
    softmax(&forward(params, &eval_features(data, input, grid)?)?)
}

/// Metrics of `params` on `data` under the deterministic evaluation transform.
pub fn validate(params: &ModelParams, data: &Dataset, input: &InputSpec) -> Result<MetricsReport> {
    if params.arch().output_dim() != data.catalog.len() {
        return Err(Error::shape(format!(
            "{} outputs for {} catalog classes",
            params.arch().output_dim(),
            data.catalog.len()
        )));
    }
    evaluate(&predict_probs(params, data, input)?, &data.labels(), &data.catalog)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Validation metrics of the best checkpoint.
    pub best_report: MetricsReport,
    /// Every checkpoint taken, in order.
    pub checkpoints: Vec<Checkpoint>,
}

pub fn train(train_set: &Dataset, val_set: &Dataset, arch: &Arch, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training manifest is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::invalid("validation manifest is empty"));
    }
    if train_set.catalog != val_set.catalog {
        return Err(Error::invalid("training and validation catalogs differ"));
    }
    let catalog = &train_set.catalog;
    let k = catalog.len();
    if arch.output_dim() != k {
        return Err(Error::shape(format!(
            "{arch} has {} outputs for {k} classes",
            arch.output_dim()
        )));
    }
    let grid = pooling_grid(arch)?;
    let input = InputSpec {
        width: cfg.augment.target_size.0,
        height: cfg.augment.target_size.1,
        normalization: cfg.augment.normalization()?,
    };

    let counts = class_counts(&train_set.manifest, k);
    let focal = FocalConfig {
        alpha: cfg.loss.alpha.resolve(&counts)?,
        gamma: cfg.loss.gamma,
        reduction: cfg.loss.reduction,
    };
    focal.validate()?;

    let sampler = SamplerSpec::balanced(&train_set.manifest, k, 0)?;
    let train_labels = train_set.labels();
    let val_features = eval_features(val_set, &input, grid)?;
    let val_labels = val_set.labels();
    let aug_seed = derive_seed(cfg.seed, AUGMENT_STREAM);

    let mut params = init_params(arch, derive_seed(cfg.seed, INIT_STREAM));
    let mut opt_state = AdamWState::new(arch.num_params());
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.improvement_tolerance);
    let mut history = Vec::new();
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut best: Option<(Checkpoint, MetricsReport)> = None;
    let n = train_set.len();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let epoch_seed = derive_seed(derive_seed(cfg.seed, SAMPLER_STREAM), epoch as u64);
        let order = draw_epoch_indices(&sampler.with_seed(epoch_seed), n)?;
        let mut loss_sum = 0.0;

        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let base = ((epoch - 1) * n + b * cfg.batch_size) as u64;
            let rows = batch
                .par_iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let img = apply_pipeline(&train_set.images[idx], &cfg.augment, aug_seed, base + i as u64)?;
                    featurize(&img, grid, grid)
                })
                .collect::<Result<Vec<_>>>()?;
            let features = Matrix::from_rows(&rows)?;
            let targets: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();

            let logits = forward(&params, &features)?;
            let loss = focal_loss(&logits, &targets, &focal)?;
            loss_sum += loss.per_sample.iter().sum::<f64>();
            let dlogits = focal_loss_grad(&logits, &targets, &focal)?;
            let grads = backward(&params, &features, &dlogits)?;
            let (flat, state) = adamw_step(&params.to_flat(), &grads.to_flat(), &opt_state, &cfg.optimizer)?;
            params = ModelParams::from_flat(arch, &flat)?;
            opt_state = state;
        }

        let probs = softmax(&forward(&params, &val_features)?)?;
        let report = evaluate(&probs, &val_labels, catalog)?;
        let score = report.aggregate.combined_score;
        let (decision, improved) = stopper.update(score)?;
        if improved {
            let ckpt = Checkpoint::new(&params, epoch as u64, score, cfg.seed, catalog.clone(), input)?;
            checkpoints.push(ckpt.clone());
            best = Some((ckpt, report.clone()));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_balanced_accuracy: report.aggregate.balanced_accuracy,
            val_mean_auc: report.aggregate.mean_auc,
            val_combined_score: score,
            improved,
            wall_time: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        });
        if decision == StopDecision::Stop {
            break;
        }
    }

    let (best, best_report) = best.expect("the first finite score always improves on -inf");
    Ok(TrainOutcome {
        best,
        history,
        best_report,
        checkpoints,
    })
}

pub fn history_to_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}
