//! Exact inference by enumeration on tiny models.
//!
//! Two independent routes are provided:
//!
//! - brute force over every free unit, evaluating the full energy of each
//!   configuration ([`Oracle::log_sum_clamped`] and friends);
//! - a factored route that enumerates only `h1` and `y` and sums `v` and `h2`
//!   out in closed form, which is possible because the layer graph is
//!   bipartite between `{v, h2}` and `{h1, y}`
//!   ([`Oracle::log_sum_factored`]). This route reaches much larger visible
//!   layers and serves as the cross-check for the brute-force one.
//!
//! All accumulation is done with a running-max log-sum-exp. Operations fail
//! with [`DbmError::BudgetExceeded`] instead of truncating.

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;

use crate::error::{DbmError, Result};
use crate::inpaint::MaskSet;
use crate::math::{softplus, LogSumExp};
use crate::meanfield::{ClampSpec, LabelClamp};
use crate::model::{energy_unchecked, one_hot, DbmParams, FullState, ParamGradient};

pub const DEFAULT_BUDGET: u128 = 1 << 22;

/// Exact marginals. Clamped coordinates hold their clamped value; the label
/// entry is a distribution over classes (all zero under a zero clamp).
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub v: Array1<f64>,
    pub h1: Array1<f64>,
    pub h2: Array1<f64>,
    pub y: Array1<f64>,
}

/// Enumeration engine with a configurable state budget.
#[derive(Debug, Clone, Copy)]
pub struct Oracle {
    pub budget: u128,
}

impl Default for Oracle {
    fn default() -> Self {
        Self { budget: DEFAULT_BUDGET }
    }
}

struct FreeLayout {
    v: Vec<usize>,
    h1: Vec<usize>,
    h2: Vec<usize>,
    labels: Vec<Option<usize>>,
}

impl FreeLayout {
    fn new(params: &DbmParams, clamp: &ClampSpec) -> Result<Self> {
        clamp.validate(params.spec())?;
        let free = |c: &[Option<bool>]| c.iter().enumerate().filter(|(_, x)| x.is_none()).map(|(i, _)| i).collect();
        let k = params.spec().n_classes;
        let labels = match clamp.y {
            LabelClamp::Free if k > 0 => (0..k).map(Some).collect(),
            LabelClamp::Free | LabelClamp::Zero => vec![None],
            LabelClamp::Class(c) => vec![Some(c)],
        };
        Ok(Self { v: free(&clamp.v), h1: free(&clamp.h1), h2: free(&clamp.h2), labels })
    }

    fn n_bits(&self) -> usize {
        self.v.len() + self.h1.len() + self.h2.len()
    }
}

fn clamped_layer(clamp: &[Option<bool>]) -> Array1<f64> {
    clamp.iter().map(|c| if *c == Some(true) { 1.0 } else { 0.0 }).collect()
}

fn state_count(bits: usize, labels: usize) -> u128 {
    if bits >= 100 {
        u128::MAX
    } else {
        (1u128 << bits) * labels as u128
    }
}

impl Oracle {
    pub fn new(budget: u128) -> Self {
        Self { budget }
    }

    fn check_budget(&self, needed: u128) -> Result<()> {
        if needed > self.budget {
            Err(DbmError::BudgetExceeded { needed, budget: self.budget })
        } else {
            Ok(())
        }
    }

    /// Calls `visit` with every configuration consistent with `clamp` and
    /// its negative energy.
    fn for_each_state(
        &self,
        params: &DbmParams,
        clamp: &ClampSpec,
        mut visit: impl FnMut(&FullState, f64),
    ) -> Result<()> {
        let layout = FreeLayout::new(params, clamp)?;
        self.check_budget(state_count(layout.n_bits(), layout.labels.len()))?;
        let mut state = FullState {
            v: clamped_layer(&clamp.v),
            h1: clamped_layer(&clamp.h1),
            h2: clamped_layer(&clamp.h2),
            y: None,
        };
        let n_bits = layout.n_bits();
        for &label in &layout.labels {
            state.y = label;
            for code in 0u64..(1u64 << n_bits) {
                let mut bit = 0;
                for (layer, idx) in [
                    (&mut state.v, &layout.v),
                    (&mut state.h1, &layout.h1),
                    (&mut state.h2, &layout.h2),
                ] {
                    for &i in idx {
                        layer[i] = ((code >> bit) & 1) as f64;
                        bit += 1;
                    }
                }
                let neg = -energy_unchecked(params, &state);
                visit(&state, neg);
            }
        }
        Ok(())
    }

    /// `log sum exp(-E)` over all configurations consistent with `clamp`,
    /// by brute force.
    pub fn log_sum_clamped(&self, params: &DbmParams, clamp: &ClampSpec) -> Result<f64> {
        let mut acc = LogSumExp::new();
        self.for_each_state(params, clamp, |_, neg| acc.push(neg))?;
        Ok(acc.value())
    }

    pub fn log_partition(&self, params: &DbmParams) -> Result<f64> {
        self.log_sum_clamped(params, &ClampSpec::free(params.spec()))
    }

    /// `log P(v, y)` with the hidden layers marginalized.
    pub fn log_joint(&self, params: &DbmParams, v: ArrayView1<f64>, y: Option<usize>) -> Result<f64> {
        let spec = params.spec();
        check_observation(params, v, y)?;
        let clamp = ClampSpec::observed(spec, v, y);
        Ok(self.log_sum_clamped(params, &clamp)? - self.log_partition(params)?)
    }

    /// Exact marginals of the free units given the clamped ones.
    pub fn posterior_marginals(&self, params: &DbmParams, clamp: &ClampSpec) -> Result<Marginals> {
        let log_norm = self.log_sum_clamped(params, clamp)?;
        let spec = params.spec();
        let mut m = Marginals {
            v: Array1::zeros(spec.n_visible),
            h1: Array1::zeros(spec.n_hidden1),
            h2: Array1::zeros(spec.n_hidden2),
            y: Array1::zeros(spec.n_classes),
        };
        self.for_each_state(params, clamp, |s, neg| {
            let w = (neg - log_norm).exp();
            m.v.scaled_add(w, &s.v);
            m.h1.scaled_add(w, &s.h1);
            m.h2.scaled_add(w, &s.h2);
            if let Some(c) = s.y {
                m.y[c] += w;
            }
        })?;
        // Clamped coordinates are exact, not rounded sums.
        for (dst, c) in [(&mut m.v, &clamp.v), (&mut m.h1, &clamp.h1), (&mut m.h2, &clamp.h2)] {
            for (x, c) in dst.iter_mut().zip(c) {
                if let Some(b) = c {
                    *x = f64::from(u8::from(*b));
                }
            }
        }
        if let LabelClamp::Class(c) = clamp.y {
            m.y.fill(0.0);
            m.y[c] = 1.0;
        }
        Ok(m)
    }

    /// Expected sufficient statistics `E[-dE/dtheta]` under the distribution
    /// conditioned on `clamp`.
    pub fn expected_stats(&self, params: &DbmParams, clamp: &ClampSpec) -> Result<ParamGradient> {
        let log_norm = self.log_sum_clamped(params, clamp)?;
        let mut stats = DbmParams::zeros(params.spec());
        let k = params.spec().n_classes;
        self.for_each_state(params, clamp, |s, neg| {
            let w = (neg - log_norm).exp();
            let y = one_hot(s.y, k);
            accumulate_stats(&mut stats, w, s.v.view(), s.h1.view(), s.h2.view(), y.view());
        })?;
        Ok(stats)
    }

    /// Exact `log P(masked observed | conditioned-on observed)` with every
    /// hidden unit marginalized.
    pub fn inpaint_logprob(
        &self,
        params: &DbmParams,
        v: ArrayView1<f64>,
        y: Option<usize>,
        mask: &MaskSet,
    ) -> Result<f64> {
        check_observation(params, v, y)?;
        if mask.is_empty() {
            return Ok(0.0);
        }
        let (full, conditioned) = inpaint_clamps(params, v, y, mask)?;
        Ok(self.log_sum_clamped(params, &full)? - self.log_sum_clamped(params, &conditioned)?)
    }

    /// Exact gradient of the mean of `log P(v, y)` over `batch`.
    pub fn loglik_gradient(&self, params: &DbmParams, batch: &[(Array1<f64>, Option<usize>)]) -> Result<ParamGradient> {
        if batch.is_empty() {
            return Err(DbmError::InvalidArgument("empty batch".into()));
        }
        let spec = params.spec();
        let mut grad = DbmParams::zeros(spec);
        for (v, y) in batch {
            check_observation(params, v.view(), *y)?;
            let data = self.expected_stats(params, &ClampSpec::observed(spec, v.view(), *y))?;
            grad.axpy(1.0 / batch.len() as f64, &data);
        }
        let model = self.expected_stats(params, &ClampSpec::free(spec))?;
        grad.axpy(-1.0, &model);
        Ok(grad)
    }

    /// Gradient of the mean-field variational bound: the positive phase uses
    /// the mean-field posterior with `(v, y)` clamped, the negative phase the
    /// exact model expectations.
    pub fn variational_gradient(
        &self,
        params: &DbmParams,
        batch: &[(Array1<f64>, Option<usize>)],
        mf: crate::meanfield::MfConfig,
    ) -> Result<ParamGradient> {
        if batch.is_empty() {
            return Err(DbmError::InvalidArgument("empty batch".into()));
        }
        let mut grad = crate::baseline::positive_phase(params, batch, mf)?;
        grad.axpy(-1.0, &self.expected_stats(params, &ClampSpec::free(params.spec()))?);
        Ok(grad)
    }

    /// `log sum exp(-E)` over configurations consistent with `clamp`, by
    /// enumerating only the free units of `h1` and the label and summing
    /// `v` and `h2` analytically.
    pub fn log_sum_factored(&self, params: &DbmParams, clamp: &ClampSpec) -> Result<f64> {
        let layout = FreeLayout::new(params, clamp)?;
        let n_bits = layout.h1.len();
        self.check_budget(state_count(n_bits, layout.labels.len()))?;
        let k = params.spec().n_classes;
        let base_h1 = clamped_layer(&clamp.h1);

        let per_label = |label: Option<usize>| -> LogSumExp {
            let y = one_hot(label, k);
            let mut h1 = base_h1.clone();
            let mut a_v = params.visible_input(h1.view());
            let mut a_h2 = params.hidden2_input(h1.view(), y.view());
            let mut lin = params.b_h1.dot(&h1) + if let Some(c) = label { params.b_y[c] } else { 0.0 };
            let mut acc = LogSumExp::new();
            let term = |a_v: &Array1<f64>, a_h2: &Array1<f64>| -> f64 {
                let mut s = 0.0;
                for (a, c) in a_v.iter().zip(&clamp.v) {
                    s += match c {
                        None => softplus(*a),
                        Some(true) => *a,
                        Some(false) => 0.0,
                    };
                }
                for (a, c) in a_h2.iter().zip(&clamp.h2) {
                    s += match c {
                        None => softplus(*a),
                        Some(true) => *a,
                        Some(false) => 0.0,
                    };
                }
                s
            };
            acc.push(lin + term(&a_v, &a_h2));
            // Gray-code walk: each step flips exactly one free h1 unit.
            for step in 1u64..(1u64 << n_bits) {
                let flip = layout.h1[step.trailing_zeros() as usize];
                let sign = if h1[flip] == 0.0 { 1.0 } else { -1.0 };
                h1[flip] += sign;
                a_v.scaled_add(sign, &params.w1.column(flip));
                a_h2.scaled_add(sign, &params.w2.row(flip));
                lin += sign * params.b_h1[flip];
                acc.push(lin + term(&a_v, &a_h2));
            }
            acc
        };

        let total = layout
            .labels
            .par_iter()
            .map(|&label| per_label(label))
            .collect::<Vec<_>>()
            .into_iter()
            .fold(LogSumExp::new(), LogSumExp::merge);
        Ok(total.value())
    }

    pub fn log_partition_factored(&self, params: &DbmParams) -> Result<f64> {
        self.log_sum_factored(params, &ClampSpec::free(params.spec()))
    }

    /// Factored-route counterpart of [`Oracle::inpaint_logprob`]; scales to
    /// wide visible layers as long as `2^N1 * k` is within budget.
    pub fn inpaint_logprob_factored(
        &self,
        params: &DbmParams,
        v: ArrayView1<f64>,
        y: Option<usize>,
        mask: &MaskSet,
    ) -> Result<f64> {
        check_observation(params, v, y)?;
        if mask.is_empty() {
            return Ok(0.0);
        }
        let (full, conditioned) = inpaint_clamps(params, v, y, mask)?;
        Ok(self.log_sum_factored(params, &full)? - self.log_sum_factored(params, &conditioned)?)
    }
}

fn check_observation(params: &DbmParams, v: ArrayView1<f64>, y: Option<usize>) -> Result<()> {
    let spec = params.spec();
    if v.len() != spec.n_visible {
        return Err(DbmError::ShapeMismatch(format!(
            "observation has {} pixels, model has {}",
            v.len(),
            spec.n_visible
        )));
    }
    if v.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(DbmError::InvalidArgument("observation must be binary".into()));
    }
    match (y, spec.n_classes) {
        (None, _) => Ok(()),
        (Some(c), k) if c < k => Ok(()),
        (Some(c), k) => Err(DbmError::InvalidArgument(format!("label {c} out of range for {k} classes"))),
    }
}

/// Clamps for the numerator (everything observed) and the denominator
/// (only the conditioned-on variables) of an inpainting probability.
fn inpaint_clamps(
    params: &DbmParams,
    v: ArrayView1<f64>,
    y: Option<usize>,
    mask: &MaskSet,
) -> Result<(ClampSpec, ClampSpec)> {
    let spec = params.spec();
    mask.validate(spec)?;
    let full = ClampSpec::observed(spec, v, y);
    let mut conditioned = full.clone();
    for &j in &mask.masked_visibles {
        conditioned.v[j] = None;
    }
    if mask.label_masked {
        conditioned.y = LabelClamp::Free;
    }
    Ok((full, conditioned))
}

pub(crate) fn accumulate_stats(
    stats: &mut ParamGradient,
    w: f64,
    v: ArrayView1<f64>,
    h1: ArrayView1<f64>,
    h2: ArrayView1<f64>,
    y: ArrayView1<f64>,
) {
    use crate::model::add_outer;
    add_outer(&mut stats.w1, w, v, h1);
    add_outer(&mut stats.w2, w, h1, h2);
    add_outer(&mut stats.w3, w, h2, y);
    stats.b_v.scaled_add(w, &v);
    stats.b_h1.scaled_add(w, &h1);
    stats.b_h2.scaled_add(w, &h2);
    stats.b_y.scaled_add(w, &y);
}

pub fn exact_log_partition(params: &DbmParams) -> Result<f64> {
    Oracle::default().log_partition(params)
}

pub fn exact_log_joint(params: &DbmParams, v: ArrayView1<f64>, y: Option<usize>) -> Result<f64> {
    Oracle::default().log_joint(params, v, y)
}

pub fn exact_posterior_marginals(params: &DbmParams, clamp: &ClampSpec) -> Result<Marginals> {
    Oracle::default().posterior_marginals(params, clamp)
}

pub fn exact_inpaint_logprob(params: &DbmParams, v: ArrayView1<f64>, y: Option<usize>, mask: &MaskSet) -> Result<f64> {
    Oracle::default().inpaint_logprob(params, v, y, mask)
}

pub fn exact_loglik_gradient(params: &DbmParams, batch: &[(Array1<f64>, Option<usize>)]) -> Result<ParamGradient> {
    Oracle::default().loglik_gradient(params, batch)
}
