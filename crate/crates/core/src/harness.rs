//! Experiment orchestration: configuration, the training pipelines,
//! early stopping, resumable checkpoints and metrics export.
//!
//! A run directory holds:
//!
//! | file | written by |
//! |------|------------|
//! | `pretrained.ckpt` | [`pretrain`] |
//! | `generative_state.ckpt` | every generative epoch (for resuming) |
//! | `dbm.ckpt` | [`train_generative`] |
//! | `features_train.bin`, `features_test.bin` | [`extract_feature_cache`] |
//! | `mlp.ckpt` | [`train_classifier_stage`] |
//! | `metrics.csv` | all training stages |
//! | `result.json` | [`run_experiment`] and [`evaluate_stage`] |

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{
    assemble_dbm, train_rbm, train_top_rbm, ChainState, PcdConfig, PcdTrainer, RbmParams, RbmTrainConfig, RngPosition,
};
use crate::cg::{minibatch_ncg, BatchSummary, CgConfig};
use crate::checkpoint::{
    load_features, load_mlp, load_params, params_from_arrays, params_manifest, read_container, save_features,
    save_mlp, save_params, write_container, FieldSpec,
};
use crate::classifier::{
    evaluate_error, extract_feature_set, generative_error, train_classifier, ClassifierConfig, FeatureExample,
    MlpParams,
};
use crate::data::{bars_task, binarize, load_idx_pair, BinarizeRule};
use crate::error::{DbmError, Result};
use crate::inpaint::{mean_criterion, minibatch_objective, sample_masks, Example, InpaintConfig, MaskSet};
use crate::meanfield::{elbo, mf_infer_with, ClampSpec, MfConfig};
use crate::model::{init_params, DbmParams, FullState, InitScheme, ModelSpec};
use crate::oracle::Oracle;

pub const PRETRAINED_FILE: &str = "pretrained.ckpt";
pub const STATE_FILE: &str = "generative_state.ckpt";
pub const DBM_FILE: &str = "dbm.ckpt";
pub const TRAIN_FEATURES_FILE: &str = "features_train.bin";
pub const TEST_FEATURES_FILE: &str = "features_test.bin";
pub const MLP_FILE: &str = "mlp.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESULT_FILE: &str = "result.json";

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Standard IDX files supplied by the user.
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        binarize: BinarizeRule,
    },
    /// Horizontal-vs-vertical bars, see [`bars_task`].
    Bars {
        n_train: usize,
        n_test: usize,
        #[serde(default = "default_side")]
        side: usize,
        #[serde(default = "default_bar_prob")]
        bar_prob: f64,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_side() -> usize {
    8
}
fn default_bar_prob() -> f64 {
    0.3
}
fn default_noise() -> f64 {
    0.05
}

/// `train + validation` must equal the size of the training file and
/// `test` the size of the test file. Validation examples are the last
/// `validation` rows of the training file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    #[serde(default)]
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Jdbm,
    PcdPretrained,
    PcdScratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_hidden1: usize,
    pub n_hidden2: usize,
    #[serde(default)]
    pub init: InitScheme,
}

/// Which per-example score the retraining phase compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCriterion {
    /// Mean inpainting score with fixed evaluation masks.
    #[default]
    Inpainting,
    /// Mean unnormalised variational bound with `(v, y)` clamped.
    Bound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub max_validating_epochs: usize,
    pub max_retraining_epochs: usize,
    pub criterion: StopCriterion,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self { patience: 2, max_validating_epochs: 200, max_retraining_epochs: 200, criterion: StopCriterion::Inpainting }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JdbmConfig {
    pub inpaint: InpaintConfig,
    /// `max_iters_per_batch` CG iterations are run on each minibatch.
    pub cg: CgConfig,
    pub batch_size: usize,
    /// Epoch count when early stopping is off.
    pub epochs: usize,
    pub early_stopping: Option<EarlyStopConfig>,
    /// Examples used to evaluate the criterion each epoch; 0 means all.
    pub criterion_subset: usize,
    /// Mean-field settings for the generative validation error.
    pub validation_mf: MfConfig,
}

impl Default for JdbmConfig {
    fn default() -> Self {
        Self {
            inpaint: InpaintConfig::default(),
            cg: CgConfig::default(),
            batch_size: 1000,
            epochs: 50,
            early_stopping: None,
            criterion_subset: 1000,
            validation_mf: MfConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub bottom: RbmTrainConfig,
    pub top: RbmTrainConfig,
    /// Train the top RBM on the bottom RBM's posterior means instead of
    /// binary samples.
    pub top_on_means: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            bottom: RbmTrainConfig { up_factor: 2.0, ..RbmTrainConfig::default() },
            top: RbmTrainConfig { down_factor: 2.0, ..RbmTrainConfig::default() },
            top_on_means: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub splits: Splits,
    pub method: Method,
    pub model: ModelConfig,
    #[serde(default)]
    pub jdbm: Option<JdbmConfig>,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub pcd: Option<PcdConfig>,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    /// Mean-field settings for feature extraction and generative
    /// classification.
    #[serde(default)]
    pub features_mf: MfConfig,
    /// Master seed; every stage derives its own seed from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Checks everything that can be checked without touching the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DbmError::Config(m));
        if self.model.n_hidden1 == 0 || self.model.n_hidden2 == 0 {
            return bad("hidden layers must be non-empty".into());
        }
        if self.splits.train == 0 || self.splits.test == 0 {
            return bad("train and test splits must be non-empty".into());
        }
        if let DatasetConfig::Bars { n_train, n_test, side, bar_prob, noise, .. } = &self.dataset {
            if self.splits.train + self.splits.validation != *n_train || self.splits.test != *n_test {
                return bad(format!(
                    "splits {}+{}/{} do not match the dataset sizes {n_train}/{n_test}",
                    self.splits.train, self.splits.validation, self.splits.test
                ));
            }
            if *side < 2 || !(0.0..=1.0).contains(bar_prob) || !(0.0..=1.0).contains(noise) {
                return bad("bars dataset needs side >= 2 and probabilities in [0, 1]".into());
            }
        }
        match self.method {
            Method::Jdbm => {
                let Some(j) = &self.jdbm else { return bad("method jdbm needs a `jdbm` section".into()) };
                j.cg.validate().map_err(|e| DbmError::Config(e.to_string()))?;
                if !(0.0..=1.0).contains(&j.inpaint.p) || j.inpaint.sweeps == 0 || j.batch_size == 0 {
                    return bad("jdbm needs p in [0, 1], sweeps >= 1 and a positive batch size".into());
                }
                if let Some(es) = &j.early_stopping {
                    if self.splits.validation == 0 {
                        return bad("early stopping needs a validation split".into());
                    }
                    if es.patience == 0 || es.max_validating_epochs == 0 {
                        return bad("early stopping needs patience and a phase cap >= 1".into());
                    }
                }
            }
            Method::PcdPretrained | Method::PcdScratch => {
                if self.pcd.is_none() {
                    return bad("PCD methods need a `pcd` section".into());
                }
                if self.method == Method::PcdPretrained && self.pretrain.is_none() {
                    return bad("method pcd-pretrained needs a `pretrain` section".into());
                }
            }
        }
        self.classifier.cg.validate().map_err(|e| DbmError::Config(e.to_string()))?;
        if self.features_mf.max_sweeps == 0 {
            return bad("features_mf.max_sweeps must be positive".into());
        }
        Ok(())
    }

    fn jdbm_config(&self) -> Result<JdbmConfig> {
        self.jdbm.ok_or_else(|| DbmError::Config("missing `jdbm` section".into()))
    }
}

/// Per-stage seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub init: u64,
    pub pretrain: u64,
    pub generative: u64,
    pub evaluation: u64,
    pub classifier: u64,
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StageSeeds {
    pub fn derive(master: u64) -> Self {
        let s = |tag: u64| splitmix(master ^ splitmix(tag));
        Self { init: s(1), pretrain: s(2), generative: s(3), evaluation: s(4), classifier: s(5) }
    }
}

// ---------------------------------------------------------------------------
// Data

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Training rows followed by validation rows.
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub n_classes: usize,
    /// Number of leading training rows that are not validation rows.
    pub n_first: usize,
}

impl Dataset {
    pub fn spec(&self, model: &ModelConfig) -> Result<ModelSpec> {
        let d = self.train.first().map_or(0, |(v, _)| v.len());
        ModelSpec::new(d, model.n_hidden1, model.n_hidden2, self.n_classes)
    }
}

fn labelled(images: Vec<Array1<f64>>, labels: &[u8]) -> Vec<Example> {
    images.into_iter().zip(labels).map(|(v, &y)| (v, Some(usize::from(y)))).collect()
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let splits = config.splits;
    let (train, test, n_classes) = match &config.dataset {
        DatasetConfig::Bars { n_train, n_test, side, bar_prob, noise, seed } => {
            let all = bars_task(n_train + n_test, *side, *bar_prob, *noise, *seed);
            let (train, test) = all.split_at(*n_train);
            (train.to_vec(), test.to_vec(), 2)
        }
        DatasetConfig::Mnist { train_images, train_labels, test_images, test_labels, binarize: rule } => {
            let (tr_img, tr_lab) = load_idx_pair(train_images, train_labels)?;
            let (te_img, te_lab) = load_idx_pair(test_images, test_labels)?;
            let n_classes = tr_lab.iter().chain(&te_lab).max().map_or(0, |&m| usize::from(m) + 1);
            let test_rule = match rule {
                BinarizeRule::Bernoulli { seed } => BinarizeRule::Bernoulli { seed: splitmix(*seed) },
                r => *r,
            };
            (labelled(binarize(&tr_img, *rule), &tr_lab), labelled(binarize(&te_img, test_rule), &te_lab), n_classes)
        }
    };
    if splits.train + splits.validation != train.len() || splits.test != test.len() {
        return Err(DbmError::Config(format!(
            "splits {}+{}/{} do not match the dataset sizes {}/{}",
            splits.train,
            splits.validation,
            splits.test,
            train.len(),
            test.len()
        )));
    }
    Ok(Dataset { train, test, n_classes, n_first: splits.train })
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub phase: String,
    pub epoch: Option<usize>,
    pub batch: Option<usize>,
    pub objective: Option<f64>,
    pub validation_error: Option<f64>,
    pub wall_seconds: Option<f64>,
}

pub const METRIC_COLUMNS: [&str; 6] = ["phase", "epoch", "batch", "objective", "validation_error", "wall_seconds"];

/// Append-only `metrics.csv`. The header is written when the file is
/// created, so an empty run leaves a header-only file.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    rows: usize,
    start: Instant,
    reproducible: bool,
}

impl MetricsLog {
    pub fn open(dir: &Path, reproducible: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(METRICS_FILE);
        let exists = path.exists() && fs::metadata(&path)?.len() > 0;
        if !exists {
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(METRIC_COLUMNS)?;
            w.flush()?;
        }
        let rows = read_metrics(&path)?.len();
        Ok(Self { path, rows, start: Instant::now(), reproducible })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn append(&mut self, mut row: MetricRow) -> Result<()> {
        row.wall_seconds = (!self.reproducible).then(|| self.start.elapsed().as_secs_f64());
        let file = fs::OpenOptions::new().append(true).open(&self.path)?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        w.serialize(&row)?;
        w.flush()?;
        self.rows += 1;
        Ok(())
    }

    /// Drops every row after the first `n`; used when resuming from a
    /// checkpoint written after row `n`.
    pub fn truncate(&mut self, n: usize) -> Result<()> {
        let rows = read_metrics(&self.path)?;
        if rows.len() <= n {
            return Ok(());
        }
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&self.path)?;
        w.write_record(METRIC_COLUMNS)?;
        for row in &rows[..n] {
            w.serialize(row)?;
        }
        w.flush()?;
        self.rows = n;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn row(phase: &str, epoch: Option<usize>, batch: Option<usize>, objective: Option<f64>, err: Option<f64>) -> MetricRow {
    MetricRow { phase: phase.into(), epoch, batch, objective, validation_error: err, wall_seconds: None }
}

// ---------------------------------------------------------------------------
// Early stopping

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopPhase {
    Validating,
    Retraining,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopStatus {
    Running,
    /// Retraining reached the recorded criterion.
    Completed,
    /// Validation error never rose within the validating cap.
    ValidatingCapReached,
    /// The criterion never caught up within the retraining cap.
    RetrainingCapReached,
}

/// What one epoch reports to the early-stopping state machine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub validation_error: f64,
    /// Criterion on the leading (non-validation) training rows.
    pub train_criterion: f64,
    /// Criterion on the validation rows.
    pub validation_criterion: f64,
}

/// Validate-then-retrain state machine.
///
/// While validating, training uses only the leading rows. When the
/// validation error has exceeded its best value for `patience` consecutive
/// epochs, the training criterion from the best epoch is recorded and
/// retraining on all rows begins; it ends once the validation-row
/// criterion reaches the recorded value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub phase: StopPhase,
    pub status: StopStatus,
    pub patience: usize,
    pub max_validating_epochs: usize,
    pub max_retraining_epochs: usize,
    pub best_validation_error: f64,
    pub best_epoch: Option<usize>,
    pub best_train_criterion: f64,
    /// Epoch at which the rise trigger fired.
    pub rise_epoch: Option<usize>,
    pub recorded_criterion: Option<f64>,
    pub epochs_since_best: usize,
    pub validating_epochs: usize,
    pub retraining_epochs: usize,
    pub done_epoch: Option<usize>,
}

impl EarlyStopState {
    pub fn new(config: &EarlyStopConfig) -> Self {
        Self {
            phase: StopPhase::Validating,
            status: StopStatus::Running,
            patience: config.patience.max(1),
            max_validating_epochs: config.max_validating_epochs,
            max_retraining_epochs: config.max_retraining_epochs,
            best_validation_error: f64::INFINITY,
            best_epoch: None,
            best_train_criterion: f64::NAN,
            rise_epoch: None,
            recorded_criterion: None,
            epochs_since_best: 0,
            validating_epochs: 0,
            retraining_epochs: 0,
            done_epoch: None,
        }
    }

    /// Row indices the trainer may use in the current phase.
    pub fn training_indices(&self, n_first: usize, n_total: usize) -> Vec<usize> {
        match self.phase {
            StopPhase::Validating => (0..n_first).collect(),
            _ => (0..n_total).collect(),
        }
    }

    /// Errors if validation rows would be trained on while validating.
    pub fn check_training_indices(&self, indices: &[usize], n_first: usize) -> Result<()> {
        if self.phase == StopPhase::Validating && indices.iter().any(|&i| i >= n_first) {
            return Err(DbmError::InvalidArgument("validation rows fed to the trainer while validating".into()));
        }
        Ok(())
    }

    /// Consumes the record for `epoch` and returns the (possibly new) phase.
    pub fn observe(&mut self, epoch: usize, record: &EpochRecord) -> StopPhase {
        match self.phase {
            StopPhase::Validating => {
                self.validating_epochs += 1;
                if record.validation_error < self.best_validation_error {
                    self.best_validation_error = record.validation_error;
                    self.best_epoch = Some(epoch);
                    self.best_train_criterion = record.train_criterion;
                    self.epochs_since_best = 0;
                } else if record.validation_error > self.best_validation_error {
                    self.epochs_since_best += 1;
                } else {
                    self.epochs_since_best = 0;
                }
                if self.epochs_since_best >= self.patience {
                    self.rise_epoch = Some(epoch);
                    self.recorded_criterion = Some(self.best_train_criterion);
                    self.phase = StopPhase::Retraining;
                } else if self.validating_epochs >= self.max_validating_epochs {
                    self.finish(epoch, StopStatus::ValidatingCapReached);
                }
            }
            StopPhase::Retraining => {
                self.retraining_epochs += 1;
                let target = self.recorded_criterion.unwrap_or(f64::NEG_INFINITY);
                if record.validation_criterion >= target {
                    self.finish(epoch, StopStatus::Completed);
                } else if self.retraining_epochs >= self.max_retraining_epochs {
                    self.finish(epoch, StopStatus::RetrainingCapReached);
                }
            }
            StopPhase::Done => {}
        }
        self.phase
    }

    fn finish(&mut self, epoch: usize, status: StopStatus) {
        self.phase = StopPhase::Done;
        self.status = status;
        self.done_epoch = Some(epoch);
    }
}

// ---------------------------------------------------------------------------
// Criteria

/// A fixed evaluation set: examples with one frozen mask each.
#[derive(Debug, Clone)]
pub struct CriterionSet {
    pub examples: Vec<Example>,
    pub masks: Vec<MaskSet>,
}

impl CriterionSet {
    /// Up to `cap` rows (0 = all) of `rows`, each with a mask drawn from
    /// stream `stream` of `seed`.
    pub fn new(
        spec: ModelSpec,
        rows: &[Example],
        cap: usize,
        config: &InpaintConfig,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        let n = if cap == 0 { rows.len() } else { cap.min(rows.len()) };
        let examples = rows[..n].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let masks = sample_masks(spec, n, config, &mut rng)?;
        Ok(Self { examples, masks })
    }

    pub fn inpainting(&self, params: &DbmParams, sweeps: usize) -> Result<f64> {
        mean_criterion(params, &self.examples, &self.masks, sweeps)
    }

    /// Mean of `E_Q[-E] + H(Q)` with `(v, y)` clamped. Omits `log Z`, so
    /// values are comparable between sets only under the same parameters.
    pub fn bound(&self, params: &DbmParams, mf: MfConfig) -> Result<f64> {
        mean_bound(params, &self.examples, mf)
    }
}

pub fn mean_bound(params: &DbmParams, data: &[Example], mf: MfConfig) -> Result<f64> {
    use rayon::prelude::*;
    if data.is_empty() {
        return Err(DbmError::InvalidArgument("empty set".into()));
    }
    let values: Vec<f64> = data
        .par_iter()
        .map(|(v, y)| {
            let clamp = ClampSpec::observed(params.spec(), v.view(), *y);
            elbo(params, &mf_infer_with(params, &clamp, mf)?.state)
        })
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / data.len() as f64)
}

// ---------------------------------------------------------------------------
// Joint training

/// Resumable minibatch-CG trainer for the inpainting criterion.
#[derive(Debug, Clone)]
pub struct JdbmTrainer {
    pub params: DbmParams,
    pub epoch: usize,
    pub config: JdbmConfig,
    pub seed: u64,
}

impl JdbmTrainer {
    pub fn new(params: DbmParams, config: JdbmConfig, seed: u64) -> Result<Self> {
        params.validate()?;
        config.cg.validate()?;
        if config.batch_size == 0 {
            return Err(DbmError::InvalidArgument("batch size must be positive".into()));
        }
        Ok(Self { params, epoch: 0, config, seed })
    }

    /// One pass over `data[indices]` in a seeded shuffled order. Each
    /// minibatch gets fresh masks that stay fixed for its CG iterations.
    /// `on_batch` sees every batch summary with the updated parameters.
    pub fn run_epoch(
        &mut self,
        data: &[Example],
        indices: &[usize],
        mut on_batch: impl FnMut(&BatchSummary, &DbmParams) -> Result<()>,
    ) -> Result<()> {
        if indices.is_empty() {
            return Err(DbmError::InvalidArgument("no training rows".into()));
        }
        let spec = self.params.spec();
        let mut order = indices.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1_000_000 + self.epoch as u64);
        order.shuffle(&mut rng);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(self.seed);
        mask_rng.set_stream(2_000_000 + self.epoch as u64);
        let batches: Vec<(Vec<Example>, Vec<MaskSet>)> = order
            .chunks(self.config.batch_size)
            .map(|c| {
                let batch: Vec<Example> = c.iter().map(|&i| data[i].clone()).collect();
                let masks = sample_masks(spec, batch.len(), &self.config.inpaint, &mut mask_rng)?;
                Ok((batch, masks))
            })
            .collect::<Result<_>>()?;
        let sweeps = self.config.inpaint.sweeps;
        let x = minibatch_ncg(
            |b| {
                let (batch, masks) = &batches[b];
                Ok(move |flat: &[f64]| {
                    let params = DbmParams::from_flat(spec, flat)?;
                    let (f, g) = minibatch_objective(&params, batch, masks, sweeps)?;
                    Ok((f, g.to_flat()))
                })
            },
            batches.len(),
            self.params.to_flat(),
            &self.config.cg,
            |summary, x| on_batch(summary, &DbmParams::from_flat(spec, x)?),
        )?;
        self.params = DbmParams::from_flat(spec, &x)?;
        self.epoch += 1;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Resumable generative state

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    method: Method,
    epoch: usize,
    metrics_rows: usize,
    #[serde(default)]
    early_stop: Option<EarlyStopState>,
    #[serde(default)]
    rngs: Vec<RngPosition>,
}

enum Generative {
    Jdbm { trainer: JdbmTrainer, early_stop: Option<EarlyStopState> },
    Pcd(Box<PcdTrainer>),
}

fn chain_fields(chains: &[FullState], spec: ModelSpec) -> (Vec<FieldSpec>, Vec<Vec<f64>>) {
    let m = chains.len();
    let stack = |f: &dyn Fn(&FullState) -> &Array1<f64>| chains.iter().flat_map(|c| f(c).iter().copied()).collect();
    let fields = vec![
        FieldSpec { name: "chain_v".into(), shape: vec![m, spec.n_visible] },
        FieldSpec { name: "chain_h1".into(), shape: vec![m, spec.n_hidden1] },
        FieldSpec { name: "chain_h2".into(), shape: vec![m, spec.n_hidden2] },
        FieldSpec { name: "chain_y".into(), shape: vec![m] },
    ];
    let ys = chains.iter().map(|c| c.y.map_or(-1.0, |y| y as f64)).collect();
    (fields, vec![stack(&|c| &c.v), stack(&|c| &c.h1), stack(&|c| &c.h2), ys])
}

fn save_state(path: &Path, method: Method, state: &Generative, metrics_rows: usize, seed: Option<u64>) -> Result<()> {
    let (params, epoch) = match state {
        Generative::Jdbm { trainer, .. } => (&trainer.params, trainer.epoch),
        Generative::Pcd(t) => (&t.params, t.epoch),
    };
    let (mut manifest, mut arrays) = params_manifest("generative_state", params, None, seed);
    let mut meta = StateMeta { method, epoch, metrics_rows, early_stop: None, rngs: Vec::new() };
    match state {
        Generative::Jdbm { early_stop, .. } => meta.early_stop = early_stop.clone(),
        Generative::Pcd(t) => {
            for (name, shape, data) in t.velocity.named_blocks() {
                manifest.fields.push(FieldSpec { name: format!("velocity_{name}"), shape });
                arrays.push(data.to_vec());
            }
            let (fields, data) = chain_fields(&t.chains.chains, params.spec());
            manifest.fields.extend(fields);
            arrays.extend(data);
            meta.rngs = t.chains.rng_positions();
        }
    }
    manifest.meta = serde_json::to_value(&meta)?;
    let views: Vec<&[f64]> = arrays.iter().map(Vec::as_slice).collect();
    write_container(path, &manifest, &views)
}

fn load_state(path: &Path, config: &ExperimentConfig, seeds: &StageSeeds) -> Result<(Generative, usize)> {
    let (manifest, arrays) = read_container(path)?;
    if manifest.kind != "generative_state" {
        return Err(DbmError::Format(format!("{} is not a generative state", path.display())));
    }
    let meta: StateMeta = serde_json::from_value(manifest.meta.clone())?;
    if meta.method != config.method {
        return Err(DbmError::Config("checkpoint was written by a different method".into()));
    }
    let params = params_from_arrays(&manifest, &arrays)?;
    let spec = params.spec();
    let state = match config.method {
        Method::Jdbm => {
            let mut trainer = JdbmTrainer::new(params, config.jdbm_config()?, seeds.generative)?;
            trainer.epoch = meta.epoch;
            Generative::Jdbm { trainer, early_stop: meta.early_stop }
        }
        Method::PcdPretrained | Method::PcdScratch => {
            if arrays.len() != 18 {
                return Err(DbmError::Format("PCD state must hold parameters, velocity and chains".into()));
            }
            let velocity = DbmParams::from_flat(spec, &arrays[7..14].concat())?;
            let m = manifest.fields[17].shape[0];
            let chains = (0..m)
                .map(|i| {
                    let part = |a: &Vec<f64>, n: usize| Array1::from(a[i * n..(i + 1) * n].to_vec());
                    let y = arrays[17][i];
                    FullState {
                        v: part(&arrays[14], spec.n_visible),
                        h1: part(&arrays[15], spec.n_hidden1),
                        h2: part(&arrays[16], spec.n_hidden2),
                        y: (y >= 0.0).then_some(y as usize),
                    }
                })
                .collect();
            let chains = ChainState::from_parts(chains, &meta.rngs)?;
            let config = pcd_config(config, seeds)?;
            Generative::Pcd(Box::new(PcdTrainer { params, velocity, chains, epoch: meta.epoch, config }))
        }
    };
    Ok((state, meta.metrics_rows))
}

fn pcd_config(config: &ExperimentConfig, seeds: &StageSeeds) -> Result<PcdConfig> {
    let mut pcd = config.pcd.ok_or_else(|| DbmError::Config("missing `pcd` section".into()))?;
    pcd.seed = seeds.generative;
    Ok(pcd)
}

// ---------------------------------------------------------------------------
// Stages

/// Controls for [`run_experiment`] and the generative stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunControl {
    /// Continue from `generative_state.ckpt` when present.
    pub resume: bool,
    /// Stop after this many generative epochs have been completed in total,
    /// leaving a resumable checkpoint.
    pub halt_after_epochs: Option<usize>,
    /// Omit wall-clock times so that reruns give identical outputs.
    pub reproducible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GenerativeOutcome {
    Finished { params: DbmParams, epochs: usize, early_stop: Option<EarlyStopState>, final_criterion: Option<f64> },
    Halted { epoch: usize },
}

fn out_dir(config: &ExperimentConfig) -> Result<&Path> {
    fs::create_dir_all(&config.out_dir)?;
    Ok(&config.out_dir)
}

fn rows_matrix(rows: &[Example]) -> Array2<f64> {
    let d = rows.first().map_or(0, |(v, _)| v.len());
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i].0[j])
}

fn reconstruction_error(rbm: &RbmParams, data: &Array2<f64>, up: f64, down: f64) -> f64 {
    let mut total = 0.0;
    for v in data.rows() {
        let h = rbm.hidden_probs(v, None, up);
        let r = rbm.visible_probs(h.view(), down);
        total += (&r - &v).mapv(|x| x * x).sum();
    }
    total / (data.nrows().max(1) * data.ncols().max(1)) as f64
}

/// Layerwise pretraining and assembly. Writes `pretrained.ckpt`.
pub fn pretrain(config: &ExperimentConfig, data: &Dataset, metrics: &mut MetricsLog) -> Result<DbmParams> {
    let seeds = StageSeeds::derive(config.seed);
    let pre = config.pretrain.ok_or_else(|| DbmError::Config("missing `pretrain` section".into()))?;
    let spec = data.spec(&config.model)?;
    let v = rows_matrix(&data.train);
    let labels: Vec<usize> = data
        .train
        .iter()
        .map(|(_, y)| y.ok_or_else(|| DbmError::InvalidArgument("pretraining needs labels".into())))
        .collect::<Result<_>>()?;

    let mut bottom_cfg = pre.bottom;
    bottom_cfg.seed = splitmix(seeds.pretrain);
    let bottom = train_rbm(&v, spec.n_hidden1, &bottom_cfg)?;
    let err = reconstruction_error(&bottom, &v, bottom_cfg.up_factor, bottom_cfg.down_factor);
    metrics.append(row("pretrain-bottom", Some(bottom_cfg.epochs), None, Some(err), None))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seeds.pretrain);
    let mut h1 = Array2::zeros((v.nrows(), spec.n_hidden1));
    for (vi, mut hi) in v.rows().into_iter().zip(h1.rows_mut()) {
        let p = bottom.hidden_probs(vi, None, bottom_cfg.up_factor);
        if pre.top_on_means {
            hi.assign(&p);
        } else {
            hi.zip_mut_with(&p, |h, &q| *h = f64::from(u8::from(rng.random::<f64>() < q)));
        }
    }
    let mut top_cfg = pre.top;
    top_cfg.seed = splitmix(seeds.pretrain ^ 1);
    let top = train_top_rbm(&h1, &labels, spec.n_classes, spec.n_hidden2, &top_cfg)?;
    let err = reconstruction_error(&top, &h1, top_cfg.up_factor, top_cfg.down_factor);
    metrics.append(row("pretrain-top", Some(top_cfg.epochs), None, Some(err), None))?;

    let params = assemble_dbm(&bottom, &top)?;
    save_params(&out_dir(config)?.join(PRETRAINED_FILE), &params, None, Some(seeds.pretrain))?;
    Ok(params)
}

fn initial_params(config: &ExperimentConfig, data: &Dataset, seeds: &StageSeeds) -> Result<DbmParams> {
    let spec = data.spec(&config.model)?;
    match config.method {
        Method::PcdPretrained => {
            let path = config.out_dir.join(PRETRAINED_FILE);
            if !path.exists() {
                return Err(DbmError::Config(format!("{} not found; run the pretrain stage first", path.display())));
            }
            let (params, _) = load_params(&path)?;
            if params.spec() != spec {
                return Err(DbmError::ShapeMismatch("pretrained model does not match the config".into()));
            }
            Ok(params)
        }
        _ => init_params(spec, config.model.init, seeds.init),
    }
}

/// Trains the generative model with the configured method, checkpointing
/// after every epoch. Writes `dbm.ckpt` on completion.
pub fn train_generative(
    config: &ExperimentConfig,
    data: &Dataset,
    metrics: &mut MetricsLog,
    control: RunControl,
) -> Result<GenerativeOutcome> {
    let seeds = StageSeeds::derive(config.seed);
    let dir = out_dir(config)?.to_path_buf();
    let state_path = dir.join(STATE_FILE);
    let spec = data.spec(&config.model)?;
    let n_first = data.n_first;
    let n_total = data.train.len();

    let mut state = if control.resume && state_path.exists() {
        let (state, rows) = load_state(&state_path, config, &seeds)?;
        metrics.truncate(rows)?;
        state
    } else {
        let params = initial_params(config, data, &seeds)?;
        match config.method {
            Method::Jdbm => {
                let j = config.jdbm_config()?;
                Generative::Jdbm {
                    trainer: JdbmTrainer::new(params, j, seeds.generative)?,
                    early_stop: j.early_stopping.as_ref().map(EarlyStopState::new),
                }
            }
            _ => Generative::Pcd(Box::new(PcdTrainer::new(params, pcd_config(config, &seeds)?)?)),
        }
    };

    // Fixed evaluation sets for the per-epoch criterion.
    let inpaint_cfg = config.jdbm.map(|j| j.inpaint).unwrap_or_default();
    let cap = config.jdbm.map_or(1000, |j| j.criterion_subset);
    let first_set = CriterionSet::new(spec, &data.train[..n_first], cap, &inpaint_cfg, seeds.evaluation, 1)?;
    let validation_set = (n_total > n_first)
        .then(|| CriterionSet::new(spec, &data.train[n_first..], cap, &inpaint_cfg, seeds.evaluation, 2))
        .transpose()?;

    loop {
        let (epoch, done) = match &state {
            Generative::Jdbm { trainer, early_stop } => {
                let done = match early_stop {
                    Some(es) => es.phase == StopPhase::Done,
                    None => trainer.epoch >= trainer.config.epochs,
                };
                (trainer.epoch, done)
            }
            Generative::Pcd(t) => (t.epoch, t.epoch >= t.config.epochs),
        };
        if done {
            break;
        }
        if control.halt_after_epochs.is_some_and(|h| epoch >= h) {
            return Ok(GenerativeOutcome::Halted { epoch });
        }
        match &mut state {
            Generative::Jdbm { trainer, early_stop } => {
                let indices = match early_stop {
                    Some(es) => {
                        let idx = es.training_indices(n_first, n_total);
                        es.check_training_indices(&idx, n_first)?;
                        idx
                    }
                    None => (0..n_total).collect(),
                };
                let phase = match early_stop.as_ref().map(|e| e.phase) {
                    Some(StopPhase::Validating) => "jdbm-validating",
                    Some(_) => "jdbm-retraining",
                    None => "jdbm",
                };
                let cg_phase = format!("{phase}-cg");
                trainer.run_epoch(&data.train, &indices, |s, _| {
                    for step in &s.trace {
                        metrics.append(row(&cg_phase, Some(epoch), Some(s.batch), Some(-step.f), None))?;
                    }
                    metrics.append(row(phase, Some(epoch), Some(s.batch), Some(-s.f_end), None))
                })?;
                let sweeps = trainer.config.inpaint.sweeps;
                let params = &trainer.params;
                let use_bound = trainer.config.early_stopping.map(|e| e.criterion) == Some(StopCriterion::Bound);
                let criterion = |set: &CriterionSet| {
                    if use_bound {
                        set.bound(params, trainer.config.validation_mf)
                    } else {
                        set.inpainting(params, sweeps)
                    }
                };
                let train_criterion = criterion(&first_set)?;
                let validation_error = match &validation_set {
                    Some(_) => Some(generative_error(params, &data.train[n_first..], trainer.config.validation_mf)?),
                    None => None,
                };
                if let Some(es) = early_stop {
                    let record = EpochRecord {
                        validation_error: validation_error.unwrap_or(f64::NAN),
                        train_criterion,
                        validation_criterion: match &validation_set {
                            Some(set) => criterion(set)?,
                            None => f64::NAN,
                        },
                    };
                    es.observe(epoch, &record);
                }
                metrics.append(row(phase, Some(epoch), None, Some(train_criterion), validation_error))?;
            }
            Generative::Pcd(t) => {
                t.run_epoch(&data.train)?;
                let bound = first_set.bound(&t.params, t.config.mf)?;
                metrics.append(row("pcd", Some(epoch), None, Some(bound), None))?;
            }
        }
        save_state(&state_path, config.method, &state, metrics.rows(), Some(seeds.generative))?;
    }

    let (params, epochs, early_stop) = match state {
        Generative::Jdbm { trainer, early_stop } => (trainer.params, trainer.epoch, early_stop),
        Generative::Pcd(t) => (t.params, t.epoch, None),
    };
    let final_criterion = match config.method {
        Method::Jdbm => Some(first_set.inpainting(&params, inpaint_cfg.sweeps)?),
        _ => None,
    };
    save_params(&dir.join(DBM_FILE), &params, Some(config.model.init), Some(seeds.init))?;
    Ok(GenerativeOutcome::Finished { params, epochs, early_stop, final_criterion })
}

fn load_dbm(config: &ExperimentConfig) -> Result<DbmParams> {
    let path = config.out_dir.join(DBM_FILE);
    if !path.exists() {
        return Err(DbmError::Config(format!("{} not found; train a model first", path.display())));
    }
    Ok(load_params(&path)?.0)
}

/// Writes the fixed `phi` features of the training and test rows.
pub fn extract_feature_cache(config: &ExperimentConfig, data: &Dataset) -> Result<()> {
    let params = load_dbm(config)?;
    let dir = out_dir(config)?;
    for (name, rows, file) in [("train", &data.train, TRAIN_FEATURES_FILE), ("test", &data.test, TEST_FEATURES_FILE)] {
        let set = extract_feature_set(&params, rows, config.features_mf)?;
        let phi: Vec<Array1<f64>> = set.into_iter().map(|f| f.phi).collect();
        save_features(&dir.join(file), &phi, serde_json::json!({ "split": name, "model": DBM_FILE }))?;
    }
    Ok(())
}

fn feature_examples(rows: &[Example], path: &Path) -> Result<Vec<FeatureExample>> {
    let (phi, _) = load_features(path)?;
    if phi.len() != rows.len() {
        return Err(DbmError::ShapeMismatch(format!("{} has {} rows, expected {}", path.display(), phi.len(), rows.len())));
    }
    rows.iter()
        .zip(phi)
        .map(|((v, y), phi)| {
            let y = y.ok_or_else(|| DbmError::InvalidArgument("classifier data must be labelled".into()))?;
            Ok(FeatureExample { v: v.clone(), phi, y })
        })
        .collect()
}

/// Trains the MLP head on the cached features. Writes `mlp.ckpt`.
pub fn train_classifier_stage(config: &ExperimentConfig, data: &Dataset, metrics: &mut MetricsLog) -> Result<MlpParams> {
    let seeds = StageSeeds::derive(config.seed);
    let params = load_dbm(config)?;
    let dir = out_dir(config)?;
    let train = feature_examples(&data.train, &dir.join(TRAIN_FEATURES_FILE))?;
    let mut cfg = config.classifier;
    cfg.seed = seeds.classifier;
    let (mlp, curve) = train_classifier(MlpParams::from_dbm(&params)?, &train, &cfg, |_, _| Ok(()))?;
    for (epoch, err) in curve.iter().enumerate() {
        metrics.append(row("classifier", Some(epoch), None, Some(*err), None))?;
    }
    save_mlp(&dir.join(MLP_FILE), &mlp)?;
    Ok(mlp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mlp_train_error: f64,
    pub mlp_test_error: f64,
    pub generative_test_error: f64,
}

/// Test and training error of the MLP head, and test error of the
/// generative mean-field classifier.
pub fn evaluate_stage(config: &ExperimentConfig, data: &Dataset) -> Result<Evaluation> {
    let params = load_dbm(config)?;
    let dir = &config.out_dir;
    let mlp = load_mlp(&dir.join(MLP_FILE))?;
    let train = feature_examples(&data.train, &dir.join(TRAIN_FEATURES_FILE))?;
    let test = feature_examples(&data.test, &dir.join(TEST_FEATURES_FILE))?;
    Ok(Evaluation {
        mlp_train_error: evaluate_error(&mlp, &train)?,
        mlp_test_error: evaluate_error(&mlp, &test)?,
        generative_test_error: generative_error(&params, &data.test, config.features_mf)?,
    })
}

// ---------------------------------------------------------------------------
// Full pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub seeds: StageSeeds,
    /// `completed`, `halted` or `failed`.
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub generative_epochs: Option<usize>,
    pub early_stop: Option<EarlyStopState>,
    /// Mean inpainting score on the fixed evaluation subset (joint training).
    pub final_train_criterion: Option<f64>,
    pub evaluation: Option<Evaluation>,
    /// `null` in reproducible mode.
    pub wall_seconds: Option<f64>,
}

impl RunResult {
    fn new(config: &ExperimentConfig) -> Self {
        Self {
            method: config.method,
            seed: config.seed,
            seeds: StageSeeds::derive(config.seed),
            status: "running".into(),
            failed_stage: None,
            error: None,
            generative_epochs: None,
            early_stop: None,
            final_train_criterion: None,
            evaluation: None,
            wall_seconds: None,
        }
    }
}

pub fn write_result(dir: &Path, result: &RunResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(RESULT_FILE);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_string_pretty(result)? + "\n")?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

/// Runs the configured method end to end and writes `result.json`.
///
/// A failing stage is recorded in the result with its name and returned as
/// [`DbmError::Stage`]. The config is validated before any work is done.
pub fn run_experiment(config: &ExperimentConfig, control: RunControl) -> Result<RunResult> {
    staged("config", config.validate())?;
    let start = Instant::now();
    let mut result = RunResult::new(config);
    let outcome = run_stages(config, control, &mut result);
    result.wall_seconds = (!control.reproducible).then(|| start.elapsed().as_secs_f64());
    match outcome {
        Ok(()) => {
            write_result(&config.out_dir, &result)?;
            Ok(result)
        }
        Err(e) => {
            result.status = "failed".into();
            result.failed_stage = e.stage().map(str::to_string);
            result.error = Some(e.to_string());
            write_result(&config.out_dir, &result)?;
            Err(e)
        }
    }
}

fn run_stages(config: &ExperimentConfig, control: RunControl, result: &mut RunResult) -> Result<()> {
    let data = staged("load-data", load_dataset(config))?;
    let mut metrics = staged("metrics", MetricsLog::open(&config.out_dir, control.reproducible))?;
    let resuming = control.resume && config.out_dir.join(STATE_FILE).exists();
    if config.method == Method::PcdPretrained && !resuming {
        staged("pretrain", pretrain(config, &data, &mut metrics))?;
    }
    let stage = if config.method == Method::Jdbm { "train-jdbm" } else { "train-pcd" };
    match staged(stage, train_generative(config, &data, &mut metrics, control))? {
        GenerativeOutcome::Halted { epoch } => {
            result.status = "halted".into();
            result.generative_epochs = Some(epoch);
            return Ok(());
        }
        GenerativeOutcome::Finished { epochs, early_stop, final_criterion, .. } => {
            result.generative_epochs = Some(epochs);
            result.early_stop = early_stop;
            result.final_train_criterion = final_criterion;
        }
    }
    staged("extract-features", extract_feature_cache(config, &data))?;
    staged("train-classifier", train_classifier_stage(config, &data, &mut metrics))?;
    result.evaluation = Some(staged("eval", evaluate_stage(config, &data))?);
    result.status = "completed".into();
    Ok(())
}

// ---------------------------------------------------------------------------
// Oracle self-check

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub models: usize,
    /// Largest `|sum_x P(x) - 1|` over the models.
    pub max_normalization_error: f64,
    /// Largest difference between the two log-partition routes.
    pub max_log_partition_gap: f64,
    /// Smallest `log P(v, y) - ELBO` over the models (must be >= 0).
    pub min_bound_slack: f64,
    pub passed: bool,
}

/// Checks the exact oracle and mean field on `n_models` random tiny models.
pub fn oracle_self_check(n_models: usize, seed: u64) -> Result<OracleReport> {
    let oracle = Oracle::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport {
        models: n_models,
        max_normalization_error: 0.0,
        max_log_partition_gap: 0.0,
        min_bound_slack: f64::INFINITY,
        passed: false,
    };
    for _ in 0..n_models {
        let d = rng.random_range(1..=5);
        let n1 = rng.random_range(1..=5);
        let n2 = rng.random_range(1..=5);
        let k = [0, 2, 3][rng.random_range(0..3)];
        let spec = ModelSpec::new(d, n1, n2, k)?;
        let mut params = init_params(spec, InitScheme::Gaussian { std: 1.0 }, rng.random())?;
        for b in [&mut params.b_v, &mut params.b_h1, &mut params.b_h2, &mut params.b_y] {
            b.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        let log_z = oracle.log_partition(&params)?;
        let factored = oracle.log_partition_factored(&params)?;
        report.max_log_partition_gap = report.max_log_partition_gap.max((log_z - factored).abs());

        let mut total = crate::math::LogSumExp::new();
        for bits in 0..1usize << d {
            let v = Array1::from_shape_fn(d, |j| f64::from(u8::from(bits >> j & 1 == 1)));
            if k == 0 {
                total.push(oracle.log_joint(&params, v.view(), None)?);
            } else {
                for c in 0..k {
                    total.push(oracle.log_joint(&params, v.view(), Some(c))?);
                }
            }
        }
        report.max_normalization_error = report.max_normalization_error.max(total.value().exp_m1().abs());

        let v = Array1::from_shape_fn(d, |_| f64::from(u8::from(rng.random_bool(0.5))));
        let y = (k > 0).then(|| rng.random_range(0..k));
        let clamp = ClampSpec::observed(spec, v.view(), y);
        let bound = elbo(&params, &mf_infer_with(&params, &clamp, MfConfig::default())?.state)? - log_z;
        let slack = oracle.log_joint(&params, v.view(), y)? - bound;
        report.min_bound_slack = report.min_bound_slack.min(slack);
    }
    report.passed = report.max_normalization_error <= 1e-10
        && report.max_log_partition_gap <= 1e-10
        && report.min_bound_slack >= -1e-9;
    Ok(report)
}
