use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DbmError, Result};
use crate::inpaint::Example;
use crate::meanfield::{mf_infer_with, ClampSpec, MfConfig};
use crate::model::{one_hot, DbmParams, ParamGradient};
use crate::oracle::accumulate_stats;

use super::gibbs::ChainState;
use super::Schedule;

/// Settings for variational PCD training of the full DBM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcdConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Gibbs sweeps applied to the persistent chains per update.
    pub gibbs_sweeps: usize,
    /// Number of persistent chains; 0 means one per minibatch example.
    pub n_chains: usize,
    /// Positive-phase mean-field settings.
    pub mf: MfConfig,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for PcdConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 100,
            gibbs_sweeps: 5,
            n_chains: 0,
            mf: MfConfig { max_sweeps: 30, tol: 1e-4 },
            schedule: Schedule::default(),
            seed: 0,
        }
    }
}

impl PcdConfig {
    pub fn chain_count(&self) -> usize {
        if self.n_chains == 0 {
            self.batch_size
        } else {
            self.n_chains
        }
    }
}

/// Mean sufficient statistics under the mean-field posterior with each
/// example's `(v, y)` clamped. Unlabelled examples leave the label free.
pub fn positive_phase(params: &DbmParams, batch: &[Example], mf: MfConfig) -> Result<ParamGradient> {
    let spec = params.spec();
    let parts: Vec<ParamGradient> = batch
        .par_iter()
        .map(|(v, y)| {
            let clamp = ClampSpec::observed(spec, v.view(), *y);
            let q = mf_infer_with(params, &clamp, mf)?.state;
            let mut stats = DbmParams::zeros(spec);
            accumulate_stats(&mut stats, 1.0, q.v.view(), q.h1.view(), q.h2.view(), q.y.view());
            Ok(stats)
        })
        .collect::<Result<_>>()?;
    let mut total = DbmParams::zeros(spec);
    for s in &parts {
        total.axpy(1.0 / batch.len() as f64, s);
    }
    Ok(total)
}

/// Mean sufficient statistics of the chains' current samples.
pub fn negative_phase(params: &DbmParams, chains: &ChainState) -> ParamGradient {
    let spec = params.spec();
    let mut total = DbmParams::zeros(spec);
    let w = 1.0 / chains.len() as f64;
    for s in &chains.chains {
        let y = one_hot(s.y, spec.n_classes);
        accumulate_stats(&mut total, w, s.v.view(), s.h1.view(), s.h2.view(), y.view());
    }
    total
}

/// Stochastic estimate of the variational log-likelihood gradient:
/// mean-field positive phase minus the statistics of the persistent chains
/// after advancing them `gibbs_sweeps` sweeps.
pub fn pcd_step(
    params: &DbmParams,
    batch: &[Example],
    chains: &mut ChainState,
    config: &PcdConfig,
) -> Result<ParamGradient> {
    if batch.is_empty() {
        return Err(DbmError::InvalidArgument("empty batch".into()));
    }
    let mut grad = positive_phase(params, batch, config.mf)?;
    chains.advance(params, config.gibbs_sweeps);
    grad.axpy(-1.0, &negative_phase(params, chains));
    Ok(grad)
}

/// Per-epoch summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcdEpoch {
    pub epoch: usize,
    /// Mean squared norm of the gradient estimates, a cheap progress proxy.
    pub grad_norm: f64,
}

/// Resumable SGD-with-momentum trainer state.
#[derive(Debug, Clone)]
pub struct PcdTrainer {
    pub params: DbmParams,
    pub velocity: DbmParams,
    pub chains: ChainState,
    pub epoch: usize,
    pub config: PcdConfig,
}

impl PcdTrainer {
    pub fn new(params: DbmParams, config: PcdConfig) -> Result<Self> {
        params.validate()?;
        if config.batch_size == 0 {
            return Err(DbmError::InvalidArgument("batch size must be positive".into()));
        }
        let chains = ChainState::new(params.spec(), config.chain_count(), config.seed)?;
        let velocity = DbmParams::zeros(params.spec());
        Ok(Self { params, velocity, chains, epoch: 0, config })
    }

    /// One pass over `data` in a seeded shuffled order.
    pub fn run_epoch(&mut self, data: &[Example]) -> Result<PcdEpoch> {
        if data.is_empty() {
            return Err(DbmError::InvalidArgument("no training data".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1_000_000 + self.epoch as u64);
        order.shuffle(&mut rng);
        let lr = self.config.schedule.learning_rate(self.epoch);
        let momentum = self.config.schedule.momentum(self.epoch);
        let decay = self.config.schedule.weight_decay;
        let mut norm_acc = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut grad = pcd_step(&self.params, &batch, &mut self.chains, &self.config)?;
            norm_acc += grad.dot(&grad);
            n_batches += 1;
            grad.w1.scaled_add(-decay, &self.params.w1);
            grad.w2.scaled_add(-decay, &self.params.w2);
            grad.w3.scaled_add(-decay, &self.params.w3);
            self.velocity.scale(momentum);
            self.velocity.axpy(lr, &grad);
            self.params.axpy(1.0, &self.velocity);
        }
        let stats = PcdEpoch { epoch: self.epoch, grad_norm: norm_acc / n_batches as f64 };
        self.epoch += 1;
        Ok(stats)
    }
}

/// Variational PCD training for `config.epochs` epochs. `on_epoch` sees the
/// trainer after every epoch (for checkpoints and metrics).
pub fn train_pcd(
    params: DbmParams,
    data: &[Example],
    config: &PcdConfig,
    mut on_epoch: impl FnMut(&PcdTrainer, &PcdEpoch) -> Result<()>,
) -> Result<DbmParams> {
    let mut trainer = PcdTrainer::new(params, *config)?;
    while trainer.epoch < config.epochs {
        let stats = trainer.run_epoch(data)?;
        on_epoch(&trainer, &stats)?;
    }
    Ok(trainer.params)
}

/// Examples from a binary matrix and labels.
pub fn examples(data: &[Array1<f64>], labels: Option<&[usize]>) -> Vec<Example> {
    data.iter()
        .enumerate()
        .map(|(i, v)| (v.clone(), labels.map(|l| l[i])))
        .collect()
}
