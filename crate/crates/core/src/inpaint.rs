//! The joint-training inpainting criterion.
//!
//! For each example a random subset of the observed variables (pixels and,
//! optionally, the label block) is hidden. The rest are clamped to their
//! data values and a fixed number of mean-field sweeps is run; the score is
//! the log-probability the final variational distribution assigns to the
//! hidden values. Gradients are exact reverse-mode derivatives through the
//! unrolled sweeps, i.e. the sweeps are treated as a recurrent network that
//! shares the DBM's parameters.

use ndarray::{Array1, ArrayView1, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DbmError, Result};
use crate::meanfield::{mf_init, sweep_in_place, ClampSpec, LabelClamp, MeanFieldState};
use crate::model::{add_outer, DbmParams, ModelSpec, ParamGradient};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

const MASK_RETRIES: usize = 100;

/// The observed variables that are inpainted rather than conditioned on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskSet {
    /// Sorted, unique visible indices.
    pub masked_visibles: Vec<usize>,
    /// Whether the whole one-of-k label block is inpainted.
    pub label_masked: bool,
}

impl MaskSet {
    pub fn is_empty(&self) -> bool {
        self.masked_visibles.is_empty() && !self.label_masked
    }

    pub fn len(&self) -> usize {
        self.masked_visibles.len() + usize::from(self.label_masked)
    }

    pub fn validate(&self, spec: ModelSpec) -> Result<()> {
        if self.masked_visibles.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DbmError::InvalidArgument("mask indices must be sorted and unique".into()));
        }
        if self.masked_visibles.last().is_some_and(|&j| j >= spec.n_visible) {
            return Err(DbmError::InvalidArgument("mask index out of range".into()));
        }
        if self.label_masked && !spec.has_label() {
            return Err(DbmError::InvalidArgument("label masked but model has no label".into()));
        }
        Ok(())
    }
}

/// Hyperparameters of the criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintConfig {
    /// Probability that each observed variable is conditioned on.
    pub p: f64,
    /// Number of unrolled mean-field sweeps.
    pub sweeps: usize,
    /// Whether the label block takes part in the mask lottery.
    pub mask_label: bool,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self { p: 0.9, sweeps: 10, mask_label: true }
    }
}

/// Draws one mask: every visible pixel (and the label block when
/// `include_label`) is conditioned on independently with probability `p`,
/// the rest are masked. Empty masks are redrawn up to 100 times, after which
/// a single uniformly chosen variable is masked.
pub fn sample_mask<R: Rng + ?Sized>(spec: ModelSpec, p: f64, include_label: bool, rng: &mut R) -> Result<MaskSet> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DbmError::InvalidArgument(format!("p must lie in (0, 1], got {p}")));
    }
    let label_eligible = include_label && spec.has_label();
    for _ in 0..MASK_RETRIES {
        let masked_visibles: Vec<usize> = (0..spec.n_visible).filter(|_| !rng.random_bool(p)).collect();
        let label_masked = label_eligible && !rng.random_bool(p);
        let mask = MaskSet { masked_visibles, label_masked };
        if !mask.is_empty() {
            return Ok(mask);
        }
    }
    let n_eligible = spec.n_visible + usize::from(label_eligible);
    let pick = rng.random_range(0..n_eligible);
    Ok(if pick == spec.n_visible {
        MaskSet { masked_visibles: vec![], label_masked: true }
    } else {
        MaskSet { masked_visibles: vec![pick], label_masked: false }
    })
}

/// One mask per example, drawn in order from `rng`.
pub fn sample_masks<R: Rng + ?Sized>(spec: ModelSpec, n: usize, config: &InpaintConfig, rng: &mut R) -> Result<Vec<MaskSet>> {
    (0..n).map(|_| sample_mask(spec, config.p, config.mask_label, rng)).collect()
}

/// States visited by the unrolled inference. `states[0]` is the initial
/// state and `states[s]` the state after `s` sweeps; `final_state` follows
/// the last sweep.
#[derive(Debug, Clone)]
pub struct UnrollTrace {
    pub states: Vec<MeanFieldState>,
    pub final_state: MeanFieldState,
}

fn inpaint_clamp(spec: ModelSpec, v: ArrayView1<f64>, y: Option<usize>, mask: &MaskSet) -> Result<ClampSpec> {
    mask.validate(spec)?;
    if mask.is_empty() {
        return Err(DbmError::InvalidArgument("mask is empty".into()));
    }
    if v.len() != spec.n_visible {
        return Err(DbmError::ShapeMismatch("example does not match the model".into()));
    }
    if let Some(c) = y {
        if c >= spec.n_classes {
            return Err(DbmError::InvalidArgument(format!("label {c} out of range")));
        }
    }
    if mask.label_masked && y.is_none() {
        return Err(DbmError::InvalidArgument("label masked on an unlabelled example".into()));
    }
    let mut clamp = ClampSpec::observed(spec, v, y);
    for &j in &mask.masked_visibles {
        clamp.v[j] = None;
    }
    if mask.label_masked {
        clamp.y = LabelClamp::Free;
    }
    Ok(clamp)
}

/// Runs exactly `sweeps` sweeps from the initial state with the
/// conditioned-on variables clamped.
pub fn unroll(
    params: &DbmParams,
    v: ArrayView1<f64>,
    y: Option<usize>,
    mask: &MaskSet,
    sweeps: usize,
) -> Result<UnrollTrace> {
    if sweeps < 1 {
        return Err(DbmError::InvalidArgument("at least one sweep is required".into()));
    }
    let clamp = inpaint_clamp(params.spec(), v, y, mask)?;
    let mut state = mf_init(&clamp, params.spec())?;
    let mut states = Vec::with_capacity(sweeps);
    for _ in 0..sweeps {
        states.push(state.clone());
        sweep_in_place(params, &mut state);
    }
    Ok(UnrollTrace { states, final_state: state })
}

fn floored_log(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Score of the final state and its derivative with respect to the final
/// visible and label variational parameters.
fn score(state: &MeanFieldState, v: ArrayView1<f64>, y: Option<usize>, mask: &MaskSet) -> (f64, Array1<f64>, Array1<f64>) {
    let mut loss = 0.0;
    let mut gv = Array1::zeros(state.v.len());
    let mut gy = Array1::zeros(state.y.len());
    for &j in &mask.masked_visibles {
        let q = state.v[j];
        if v[j] > 0.5 {
            loss += floored_log(q);
            if q > PROB_FLOOR {
                gv[j] = 1.0 / q;
            }
        } else {
            loss += floored_log(1.0 - q);
            if 1.0 - q > PROB_FLOOR {
                gv[j] = -1.0 / (1.0 - q);
            }
        }
    }
    if mask.label_masked {
        let c = y.expect("validated");
        let q = state.y[c];
        loss += floored_log(q);
        if q > PROB_FLOOR {
            gy[c] = 1.0 / q;
        }
    }
    (loss, gv, gy)
}

/// Inpainting log-probability of the masked variables after `sweeps`
/// unrolled sweeps. Always `<= 0`.
pub fn inpaint_loss(params: &DbmParams, v: ArrayView1<f64>, y: Option<usize>, mask: &MaskSet, sweeps: usize) -> Result<f64> {
    let trace = unroll(params, v, y, mask, sweeps)?;
    Ok(score(&trace.final_state, v, y, mask).0)
}

/// Sigmoid backward on free coordinates only.
fn sigmoid_backward(adjoint: &Array1<f64>, out: &Array1<f64>, clamp: &[Option<bool>]) -> Array1<f64> {
    let mut d = Array1::zeros(out.len());
    Zip::from(&mut d).and(adjoint).and(out).and(clamp).for_each(|d, &g, &q, c| {
        if c.is_none() {
            *d = g * q * (1.0 - q);
        }
    });
    d
}

fn zero_clamped(mut x: Array1<f64>, clamp: &[Option<bool>]) -> Array1<f64> {
    x.iter_mut().zip(clamp).filter(|(_, c)| c.is_some()).for_each(|(x, _)| *x = 0.0);
    x
}

/// Inpainting score and its exact gradient through the unrolled sweeps.
pub fn inpaint_grad(
    params: &DbmParams,
    v: ArrayView1<f64>,
    y: Option<usize>,
    mask: &MaskSet,
    sweeps: usize,
) -> Result<(f64, ParamGradient)> {
    let trace = unroll(params, v, y, mask, sweeps)?;
    let clamp = &trace.final_state.clamp;
    let label_free = clamp.label_free() && !trace.final_state.y.is_empty();
    let (loss, mut gv, mut gy) = score(&trace.final_state, v, y, mask);
    let mut gh2 = Array1::zeros(params.spec().n_hidden2);
    let mut grad = DbmParams::zeros(params.spec());

    for s in (0..sweeps).rev() {
        let prev = &trace.states[s];
        let next = if s + 1 == sweeps { &trace.final_state } else { &trace.states[s + 1] };

        // v <- sigmoid(W1 h1 + b_v)
        let da_v = sigmoid_backward(&gv, &next.v, &clamp.v);
        grad.b_v += &da_v;
        add_outer(&mut grad.w1, 1.0, da_v.view(), next.h1.view());
        let mut gh1 = params.w1.t().dot(&da_v);

        // y <- softmax(W3^T h2 + b_y)
        if label_free {
            let inner = gy.dot(&next.y);
            let da_y = &next.y * &(&gy - inner);
            grad.b_y += &da_y;
            add_outer(&mut grad.w3, 1.0, next.h2.view(), da_y.view());
            gh2 += &params.w3.dot(&da_y);
        }

        // h2 <- sigmoid(W2^T h1 + W3 y_prev + b_h2)
        let da_h2 = sigmoid_backward(&gh2, &next.h2, &clamp.h2);
        grad.b_h2 += &da_h2;
        add_outer(&mut grad.w2, 1.0, next.h1.view(), da_h2.view());
        if !prev.y.is_empty() {
            add_outer(&mut grad.w3, 1.0, da_h2.view(), prev.y.view());
        }
        gh1 += &params.w2.dot(&da_h2);
        gy = if label_free { params.w3.t().dot(&da_h2) } else { Array1::zeros(prev.y.len()) };

        // h1 <- sigmoid(W1^T v_prev + W2 h2_prev + b_h1)
        let da_h1 = sigmoid_backward(&gh1, &next.h1, &clamp.h1);
        grad.b_h1 += &da_h1;
        add_outer(&mut grad.w1, 1.0, prev.v.view(), da_h1.view());
        add_outer(&mut grad.w2, 1.0, da_h1.view(), prev.h2.view());
        gv = zero_clamped(params.w1.dot(&da_h1), &clamp.v);
        gh2 = zero_clamped(params.w2.t().dot(&da_h1), &clamp.h2);
    }
    Ok((loss, grad))
}

/// A labelled (or unlabelled) binary example.
pub type Example = (Array1<f64>, Option<usize>);

/// Mean of `-inpaint_loss` over the batch and its gradient, using one mask
/// per example. Per-example work runs in parallel; the reduction is always
/// in batch order.
pub fn minibatch_objective(
    params: &DbmParams,
    batch: &[Example],
    masks: &[MaskSet],
    sweeps: usize,
) -> Result<(f64, ParamGradient)> {
    if batch.is_empty() {
        return Err(DbmError::InvalidArgument("empty batch".into()));
    }
    if masks.len() != batch.len() {
        return Err(DbmError::InvalidArgument("need exactly one mask per example".into()));
    }
    let parts: Vec<(f64, ParamGradient)> = batch
        .par_iter()
        .zip(masks.par_iter())
        .map(|((v, y), mask)| inpaint_grad(params, v.view(), *y, mask, sweeps))
        .collect::<Result<_>>()?;
    let scale = -1.0 / batch.len() as f64;
    let mut grad = DbmParams::zeros(params.spec());
    let mut objective = 0.0;
    for (loss, g) in &parts {
        objective += scale * loss;
        grad.axpy(scale, g);
    }
    Ok((objective, grad))
}

/// [`minibatch_objective`] with masks drawn from `rng`.
pub fn minibatch_objective_sampled<R: Rng + ?Sized>(
    params: &DbmParams,
    batch: &[Example],
    config: &InpaintConfig,
    rng: &mut R,
) -> Result<(f64, ParamGradient)> {
    let masks = sample_masks(params.spec(), batch.len(), config, rng)?;
    minibatch_objective(params, batch, &masks, config.sweeps)
}

/// Mean inpainting score (higher is better) over a set of examples with
/// fixed masks. Forward pass only.
pub fn mean_criterion(params: &DbmParams, data: &[Example], masks: &[MaskSet], sweeps: usize) -> Result<f64> {
    if data.is_empty() || masks.len() != data.len() {
        return Err(DbmError::InvalidArgument("need a non-empty set with one mask per example".into()));
    }
    let losses: Vec<f64> = data
        .par_iter()
        .zip(masks.par_iter())
        .map(|((v, y), m)| inpaint_loss(params, v.view(), *y, m, sweeps))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / data.len() as f64)
}
