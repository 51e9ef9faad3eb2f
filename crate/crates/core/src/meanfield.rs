//! Block coordinate-ascent mean-field inference.
//!
//! Free coordinates are updated layer by layer in the fixed order
//! `h1 -> h2 -> y -> v`. Each block update is the exact maximiser of the
//! variational bound with every other block held fixed, so the bound never
//! decreases from one block update to the next.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{DbmError, Result};
use crate::math::{binary_entropy, sigmoid, softmax, xlogx};
use crate::model::{DbmParams, LayerId, ModelSpec};

/// How the label block is treated during inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelClamp {
    Free,
    /// Clamped to the one-hot code of this class.
    Class(usize),
    /// Clamped to the all-zero vector. Not a valid label state; used only
    /// for feature extraction.
    Zero,
}

/// Per-variable clamp status. `None` means free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampSpec {
    pub v: Vec<Option<bool>>,
    pub h1: Vec<Option<bool>>,
    pub h2: Vec<Option<bool>>,
    pub y: LabelClamp,
}

impl ClampSpec {
    /// Nothing clamped.
    pub fn free(spec: ModelSpec) -> Self {
        Self {
            v: vec![None; spec.n_visible],
            h1: vec![None; spec.n_hidden1],
            h2: vec![None; spec.n_hidden2],
            y: LabelClamp::Free,
        }
    }

    /// Clamps every visible unit to `v` and the label to `y` (if given);
    /// hidden units stay free.
    pub fn observed(spec: ModelSpec, v: ArrayView1<f64>, y: Option<usize>) -> Self {
        let mut clamp = Self::free(spec);
        clamp.v = v.iter().map(|&x| Some(x > 0.5)).collect();
        if let Some(c) = y {
            clamp.y = LabelClamp::Class(c);
        }
        clamp
    }

    pub fn validate(&self, spec: ModelSpec) -> Result<()> {
        if self.v.len() != spec.n_visible
            || self.h1.len() != spec.n_hidden1
            || self.h2.len() != spec.n_hidden2
        {
            return Err(DbmError::ShapeMismatch("clamp does not match spec".into()));
        }
        match self.y {
            LabelClamp::Class(c) if c >= spec.n_classes => Err(DbmError::InvalidArgument(
                format!("clamped class {c} out of range for {} classes", spec.n_classes),
            )),
            LabelClamp::Zero if !spec.has_label() => {
                Err(DbmError::InvalidArgument("model has no label unit".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn label_free(&self) -> bool {
        self.y == LabelClamp::Free
    }
}

/// Factorized variational parameters together with the clamp they respect.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldState {
    pub v: Array1<f64>,
    pub h1: Array1<f64>,
    pub h2: Array1<f64>,
    pub y: Array1<f64>,
    pub clamp: ClampSpec,
}

/// Stopping rule for [`mf_infer`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfConfig {
    pub max_sweeps: usize,
    pub tol: f64,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self { max_sweeps: 30, tol: 1e-6 }
    }
}

/// Result of running mean field to convergence.
#[derive(Debug, Clone)]
pub struct MfOutcome {
    pub state: MeanFieldState,
    pub sweeps: usize,
    pub converged: bool,
}

fn init_layer(clamp: &[Option<bool>]) -> Array1<f64> {
    clamp
        .iter()
        .map(|c| match c {
            Some(true) => 1.0,
            Some(false) => 0.0,
            None => 0.5,
        })
        .collect()
}

/// Free binary units at 0.5, free label uniform, clamped units at their value.
pub fn mf_init(clamp: &ClampSpec, spec: ModelSpec) -> Result<MeanFieldState> {
    clamp.validate(spec)?;
    let k = spec.n_classes;
    let y = match clamp.y {
        LabelClamp::Free => Array1::from_elem(k, 1.0 / k as f64),
        LabelClamp::Class(c) => crate::model::one_hot(Some(c), k),
        LabelClamp::Zero => Array1::zeros(k),
    };
    Ok(MeanFieldState {
        v: init_layer(&clamp.v),
        h1: init_layer(&clamp.h1),
        h2: init_layer(&clamp.h2),
        y,
        clamp: clamp.clone(),
    })
}

fn assign_free(dst: &mut Array1<f64>, clamp: &[Option<bool>], input: Array1<f64>) {
    for ((d, c), a) in dst.iter_mut().zip(clamp).zip(input) {
        if c.is_none() {
            *d = sigmoid(a);
        }
    }
}

/// Replaces the free coordinates of one block by their fixed-point update.
pub fn mf_update_block(params: &DbmParams, state: &mut MeanFieldState, layer: LayerId) {
    match layer {
        LayerId::Hidden1 => {
            let a = params.hidden1_input(state.v.view(), state.h2.view());
            assign_free(&mut state.h1, &state.clamp.h1, a);
        }
        LayerId::Hidden2 => {
            let a = params.hidden2_input(state.h1.view(), state.y.view());
            assign_free(&mut state.h2, &state.clamp.h2, a);
        }
        LayerId::Label => {
            if state.clamp.label_free() && !state.y.is_empty() {
                state.y = softmax(params.label_input(state.h2.view()).view());
            }
        }
        LayerId::Visible => {
            let a = params.visible_input(state.h1.view());
            assign_free(&mut state.v, &state.clamp.v, a);
        }
    }
}

/// Block order of one sweep.
pub const SWEEP_ORDER: [LayerId; 4] =
    [LayerId::Hidden1, LayerId::Hidden2, LayerId::Label, LayerId::Visible];

/// One full sweep `h1 -> h2 -> y -> v` over free coordinates.
pub fn mf_sweep(params: &DbmParams, state: &MeanFieldState) -> Result<MeanFieldState> {
    check_state(params.spec(), state)?;
    let mut next = state.clone();
    sweep_in_place(params, &mut next);
    Ok(next)
}

pub(crate) fn sweep_in_place(params: &DbmParams, state: &mut MeanFieldState) {
    for layer in SWEEP_ORDER {
        mf_update_block(params, state, layer);
    }
}

fn check_state(spec: ModelSpec, state: &MeanFieldState) -> Result<()> {
    state.clamp.validate(spec)?;
    if state.v.len() != spec.n_visible
        || state.h1.len() != spec.n_hidden1
        || state.h2.len() != spec.n_hidden2
        || state.y.len() != spec.n_classes
    {
        return Err(DbmError::ShapeMismatch("mean-field state does not match spec".into()));
    }
    Ok(())
}

fn max_abs_change(a: &MeanFieldState, b: &MeanFieldState) -> f64 {
    [(&a.v, &b.v), (&a.h1, &b.h1), (&a.h2, &b.h2), (&a.y, &b.y)]
        .iter()
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// Runs sweeps until no variational parameter moves by `tol` or more, or
/// `max_sweeps` sweeps have run. Non-convergence is reported, not an error.
pub fn mf_infer(params: &DbmParams, clamp: &ClampSpec, max_sweeps: usize, tol: f64) -> Result<MfOutcome> {
    if max_sweeps == 0 {
        return Err(DbmError::InvalidArgument("max_sweeps must be at least 1".into()));
    }
    let mut state = mf_init(clamp, params.spec())?;
    for sweep in 1..=max_sweeps {
        let prev = state.clone();
        sweep_in_place(params, &mut state);
        if max_abs_change(&prev, &state) < tol {
            return Ok(MfOutcome { state, sweeps: sweep, converged: true });
        }
    }
    Ok(MfOutcome { state, sweeps: max_sweeps, converged: false })
}

/// [`mf_infer`] with a config struct.
pub fn mf_infer_with(params: &DbmParams, clamp: &ClampSpec, config: MfConfig) -> Result<MfOutcome> {
    mf_infer(params, clamp, config.max_sweeps, config.tol)
}

/// Unnormalized variational bound `E_Q[-E] + H(Q)`.
///
/// Subtracting `log Z` gives a lower bound on the log-probability of the
/// clamped variables.
pub fn elbo(params: &DbmParams, state: &MeanFieldState) -> Result<f64> {
    check_state(params.spec(), state)?;
    let (v, h1, h2, y) = (&state.v, &state.h1, &state.h2, &state.y);
    let mut neg_energy = v.dot(&params.w1.dot(h1)) + h1.dot(&params.w2.dot(h2));
    neg_energy += params.b_v.dot(v) + params.b_h1.dot(h1) + params.b_h2.dot(h2);
    if !y.is_empty() {
        neg_energy += h2.dot(&params.w3.dot(y)) + params.b_y.dot(y);
    }
    let mut entropy: f64 = v.iter().chain(h1).chain(h2).map(|&p| binary_entropy(p)).sum();
    entropy -= y.iter().map(|&p| xlogx(p)).sum::<f64>();
    Ok(neg_energy + entropy)
}
