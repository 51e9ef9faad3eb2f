//! Discriminative fine-tuning on top of a trained DBM.
//!
//! Features are the converged second-layer mean-field parameters computed
//! with the visible units clamped to the input and the label block clamped
//! to the all-zero vector. An MLP shaped like one extra mean-field sweep is
//! then trained on `(v, features)` with nonlinear CG:
//!
//! ```text
//! h1' = sigmoid(v A + phi B + b1)
//! h2' = sigmoid(h1' C + b2)
//! y   = softmax(h2' D)
//! ```

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cg::{minibatch_ncg, CgConfig};
use crate::error::{DbmError, Result};
use crate::inpaint::Example;
use crate::math::{argmax_lowest, sigmoid, softmax};
use crate::meanfield::{mf_infer_with, ClampSpec, LabelClamp, MfConfig};
use crate::model::{add_outer, DbmParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// `[D x N1]`
    pub a: Array2<f64>,
    /// `[N2 x N1]`
    pub b: Array2<f64>,
    /// `[N1 x N2]`
    pub c: Array2<f64>,
    pub b1: Array1<f64>,
    pub b2: Array1<f64>,
    /// `[N2 x k]`
    pub d_out: Array2<f64>,
}

pub const MLP_FIELDS: [&str; 6] = ["a", "b", "c", "b1", "b2", "d_out"];

impl MlpParams {
    /// Copies `A = W1`, `B = W2^T`, `C = W2`, `D = W3` and the hidden biases.
    /// The copies are independent from then on.
    pub fn from_dbm(params: &DbmParams) -> Result<Self> {
        if !params.spec().has_label() {
            return Err(DbmError::InvalidArgument("classifier needs a model with a label unit".into()));
        }
        Ok(Self {
            a: params.w1.clone(),
            b: params.w2.t().as_standard_layout().into_owned(),
            c: params.w2.clone(),
            b1: params.b_h1.clone(),
            b2: params.b_h2.clone(),
            d_out: params.w3.clone(),
        })
    }

    pub fn zeros(d: usize, n1: usize, n2: usize, k: usize) -> Self {
        Self {
            a: Array2::zeros((d, n1)),
            b: Array2::zeros((n2, n1)),
            c: Array2::zeros((n1, n2)),
            b1: Array1::zeros(n1),
            b2: Array1::zeros(n2),
            d_out: Array2::zeros((n2, k)),
        }
    }

    /// `(D, N1, N2, k)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.a.nrows(), self.a.ncols(), self.c.ncols(), self.d_out.ncols())
    }

    fn check(&self) -> Result<()> {
        let (d, n1, n2, k) = self.dims();
        let ok = self.b.dim() == (n2, n1)
            && self.c.dim() == (n1, n2)
            && self.b1.len() == n1
            && self.b2.len() == n2
            && self.d_out.dim() == (n2, k)
            && d > 0
            && k > 0;
        if ok {
            Ok(())
        } else {
            Err(DbmError::ShapeMismatch("inconsistent MLP blocks".into()))
        }
    }

    pub fn named_blocks(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        vec![
            ("a", self.a.shape().to_vec(), self.a.as_slice().expect("standard layout")),
            ("b", self.b.shape().to_vec(), self.b.as_slice().expect("standard layout")),
            ("c", self.c.shape().to_vec(), self.c.as_slice().expect("standard layout")),
            ("b1", vec![self.b1.len()], self.b1.as_slice().expect("standard layout")),
            ("b2", vec![self.b2.len()], self.b2.as_slice().expect("standard layout")),
            ("d_out", self.d_out.shape().to_vec(), self.d_out.as_slice().expect("standard layout")),
        ]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.named_blocks().into_iter().flat_map(|(_, _, data)| data.iter().copied()).collect()
    }

    pub fn from_flat(d: usize, n1: usize, n2: usize, k: usize, flat: &[f64]) -> Result<Self> {
        let mut out = Self::zeros(d, n1, n2, k);
        let need = d * n1 + 2 * n2 * n1 + n1 + n2 + n2 * k;
        if flat.len() != need {
            return Err(DbmError::ShapeMismatch(format!("expected {need} MLP parameters, got {}", flat.len())));
        }
        let mut offset = 0;
        for block in [
            out.a.as_slice_mut(),
            out.b.as_slice_mut(),
            out.c.as_slice_mut(),
            out.b1.as_slice_mut(),
            out.b2.as_slice_mut(),
            out.d_out.as_slice_mut(),
        ] {
            let block = block.expect("standard layout");
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        Ok(out)
    }
}

/// Intermediate activations of the MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpActivations {
    pub h1: Array1<f64>,
    pub h2: Array1<f64>,
    pub y: Array1<f64>,
}

pub fn mlp_activations(mlp: &MlpParams, v: ArrayView1<f64>, phi: ArrayView1<f64>) -> Result<MlpActivations> {
    mlp.check()?;
    let (d, _, n2, _) = mlp.dims();
    if v.len() != d || phi.len() != n2 {
        return Err(DbmError::ShapeMismatch("input does not match the MLP".into()));
    }
    let h1 = (mlp.a.t().dot(&v) + mlp.b.t().dot(&phi) + &mlp.b1).mapv_into(sigmoid);
    let h2 = (mlp.c.t().dot(&h1) + &mlp.b2).mapv_into(sigmoid);
    let y = softmax(mlp.d_out.t().dot(&h2).view());
    Ok(MlpActivations { h1, h2, y })
}

/// Class distribution predicted for `(v, phi)`.
pub fn mlp_forward(mlp: &MlpParams, v: ArrayView1<f64>, phi: ArrayView1<f64>) -> Result<Array1<f64>> {
    Ok(mlp_activations(mlp, v, phi)?.y)
}

/// Cached classifier input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExample {
    pub v: Array1<f64>,
    pub phi: Array1<f64>,
    pub y: usize,
}

/// Mean negative log-likelihood of the labels and its exact gradient.
pub fn mlp_loss_grad(mlp: &MlpParams, batch: &[FeatureExample]) -> Result<(f64, MlpParams)> {
    if batch.is_empty() {
        return Err(DbmError::InvalidArgument("empty batch".into()));
    }
    let (d, n1, n2, k) = mlp.dims();
    let parts: Vec<(f64, MlpParams)> = batch
        .par_iter()
        .map(|ex| {
            if ex.y >= k {
                return Err(DbmError::InvalidArgument(format!("label {} out of range", ex.y)));
            }
            let act = mlp_activations(mlp, ex.v.view(), ex.phi.view())?;
            let nll = -act.y[ex.y].ln();
            let mut g = MlpParams::zeros(d, n1, n2, k);
            let mut dz = act.y.clone();
            dz[ex.y] -= 1.0;
            add_outer(&mut g.d_out, 1.0, act.h2.view(), dz.view());
            let da2 = mlp.d_out.dot(&dz) * &act.h2.mapv(|q| q * (1.0 - q));
            add_outer(&mut g.c, 1.0, act.h1.view(), da2.view());
            g.b2 += &da2;
            let da1 = mlp.c.dot(&da2) * &act.h1.mapv(|q| q * (1.0 - q));
            add_outer(&mut g.a, 1.0, ex.v.view(), da1.view());
            add_outer(&mut g.b, 1.0, ex.phi.view(), da1.view());
            g.b1 += &da1;
            Ok((nll, g))
        })
        .collect::<Result<_>>()?;
    let w = 1.0 / batch.len() as f64;
    let mut total = MlpParams::zeros(d, n1, n2, k);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += w * l;
        total.a.scaled_add(w, &g.a);
        total.b.scaled_add(w, &g.b);
        total.c.scaled_add(w, &g.c);
        total.b1.scaled_add(w, &g.b1);
        total.b2.scaled_add(w, &g.b2);
        total.d_out.scaled_add(w, &g.d_out);
    }
    Ok((loss, total))
}

/// The clamp used for feature extraction: `v` observed, label zeroed.
pub fn feature_clamp(params: &DbmParams, v: ArrayView1<f64>) -> ClampSpec {
    let mut clamp = ClampSpec::observed(params.spec(), v, None);
    clamp.y = LabelClamp::Zero;
    clamp
}

/// Converged `h2` mean-field parameters with `v` clamped and the label
/// block clamped to zero.
pub fn extract_features(params: &DbmParams, v: ArrayView1<f64>, mf: MfConfig) -> Result<Array1<f64>> {
    if v.len() != params.spec().n_visible {
        return Err(DbmError::ShapeMismatch("input does not match the model".into()));
    }
    if !params.spec().has_label() {
        return Err(DbmError::InvalidArgument("feature extraction needs a label unit".into()));
    }
    Ok(mf_infer_with(params, &feature_clamp(params, v), mf)?.state.h2)
}

/// [`extract_features`] over a dataset, in parallel.
pub fn extract_feature_set(params: &DbmParams, data: &[Example], mf: MfConfig) -> Result<Vec<FeatureExample>> {
    data.par_iter()
        .map(|(v, y)| {
            let y = y.ok_or_else(|| DbmError::InvalidArgument("classifier data must be labelled".into()))?;
            Ok(FeatureExample { v: v.clone(), phi: extract_features(params, v.view(), mf)?, y })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub cg: CgConfig,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 1000, cg: CgConfig::default(), seed: 0 }
    }
}

/// Trains the MLP with minibatch nonlinear CG. Returns the final parameters
/// and the training error after every epoch.
pub fn train_classifier(
    mlp: MlpParams,
    data: &[FeatureExample],
    config: &ClassifierConfig,
    mut on_step: impl FnMut(usize, &crate::cg::BatchSummary) -> Result<()>,
) -> Result<(MlpParams, Vec<f64>)> {
    mlp.check()?;
    if data.is_empty() || config.batch_size == 0 {
        return Err(DbmError::InvalidArgument("need data and a positive batch size".into()));
    }
    let (d, n1, n2, k) = mlp.dims();
    let mut x = mlp.to_flat();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let batches: Vec<Vec<FeatureExample>> = order
            .chunks(config.batch_size)
            .map(|c| c.iter().map(|&i| data[i].clone()).collect())
            .collect();
        x = minibatch_ncg(
            |b| {
                let batch = &batches[b];
                Ok(move |flat: &[f64]| {
                    let params = MlpParams::from_flat(d, n1, n2, k, flat)?;
                    let (loss, g) = mlp_loss_grad(&params, batch)?;
                    Ok((loss, g.to_flat()))
                })
            },
            batches.len(),
            x,
            &config.cg,
            |summary, _| on_step(epoch, summary),
        )?;
        let current = MlpParams::from_flat(d, n1, n2, k, &x)?;
        curve.push(evaluate_error(&current, data)?);
    }
    Ok((MlpParams::from_flat(d, n1, n2, k, &x)?, curve))
}

/// Predicted class: argmax of the output, ties to the lowest index.
pub fn predict(mlp: &MlpParams, v: ArrayView1<f64>, phi: ArrayView1<f64>) -> Result<usize> {
    Ok(argmax_lowest(mlp_forward(mlp, v, phi)?.view()))
}

/// Fraction of examples whose predicted class differs from the label.
pub fn evaluate_error(mlp: &MlpParams, data: &[FeatureExample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let wrong: Vec<bool> = data
        .par_iter()
        .map(|ex| Ok(predict(mlp, ex.v.view(), ex.phi.view())? != ex.y))
        .collect::<Result<_>>()?;
    Ok(wrong.iter().filter(|&&w| w).count() as f64 / data.len() as f64)
}

/// Classification by the generative model alone: mean field with `v`
/// clamped and the label free, predicting the argmax of the label
/// distribution.
pub fn generative_predict(params: &DbmParams, v: ArrayView1<f64>, mf: MfConfig) -> Result<usize> {
    if !params.spec().has_label() {
        return Err(DbmError::InvalidArgument("model has no label unit".into()));
    }
    let clamp = ClampSpec::observed(params.spec(), v, None);
    Ok(argmax_lowest(mf_infer_with(params, &clamp, mf)?.state.y.view()))
}

pub fn generative_error(params: &DbmParams, data: &[Example], mf: MfConfig) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let wrong: Vec<bool> = data
        .par_iter()
        .map(|(v, y)| {
            let y = y.ok_or_else(|| DbmError::InvalidArgument("evaluation data must be labelled".into()))?;
            Ok(generative_predict(params, v.view(), mf)? != y)
        })
        .collect::<Result<_>>()?;
    Ok(wrong.iter().filter(|&&w| w).count() as f64 / data.len() as f64)
}
