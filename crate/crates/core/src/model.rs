//! Model parameterization, energy and block conditionals.

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DbmError, Result};
use crate::math::{sigmoid, softmax};

/// Layer sizes of a two-hidden-layer DBM with an optional label unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_visible: usize,
    pub n_hidden1: usize,
    pub n_hidden2: usize,
    /// Number of classes of the one-of-k label unit; 0 means no label unit.
    pub n_classes: usize,
}

impl ModelSpec {
    pub fn new(n_visible: usize, n_hidden1: usize, n_hidden2: usize, n_classes: usize) -> Result<Self> {
        let spec = Self { n_visible, n_hidden1, n_hidden2, n_classes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_visible == 0 || self.n_hidden1 == 0 || self.n_hidden2 == 0 {
            return Err(DbmError::InvalidSpec(format!(
                "layer sizes must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn has_label(&self) -> bool {
        self.n_classes > 0
    }

    /// Total number of scalar parameters.
    pub fn n_params(&self) -> usize {
        let (d, n1, n2, k) = (self.n_visible, self.n_hidden1, self.n_hidden2, self.n_classes);
        d * n1 + n1 * n2 + n2 * k + d + n1 + n2 + k
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    Zeros,
    Gaussian { std: f64 },
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Gaussian { std: 0.01 }
    }
}

/// Identifies one block of units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerId {
    Visible,
    Hidden1,
    Hidden2,
    Label,
}

/// All parameters of the DBM. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbmParams {
    /// `[D x N1]`
    pub w1: Array2<f64>,
    /// `[N1 x N2]`
    pub w2: Array2<f64>,
    /// `[N2 x k]`
    pub w3: Array2<f64>,
    pub b_v: Array1<f64>,
    pub b_h1: Array1<f64>,
    pub b_h2: Array1<f64>,
    pub b_y: Array1<f64>,
}

/// Gradient with the same layout as the parameters.
pub type ParamGradient = DbmParams;

/// Field names in serialization order.
pub const PARAM_FIELDS: [&str; 7] = ["w1", "w2", "w3", "b_v", "b_h1", "b_h2", "b_y"];

/// Draws parameters for `spec`. Biases are always zero.
pub fn init_params(spec: ModelSpec, scheme: InitScheme, seed: u64) -> Result<DbmParams> {
    spec.validate()?;
    let mut params = DbmParams::zeros(spec);
    match scheme {
        InitScheme::Zeros => {}
        InitScheme::Gaussian { std } => {
            if !(std >= 0.0) || !std.is_finite() {
                return Err(DbmError::InvalidArgument(format!(
                    "gaussian std must be finite and non-negative, got {std}"
                )));
            }
            let normal = Normal::new(0.0, std)
                .map_err(|e| DbmError::InvalidArgument(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for w in [&mut params.w1, &mut params.w2, &mut params.w3] {
                w.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            }
        }
    }
    Ok(params)
}

impl DbmParams {
    pub fn zeros(spec: ModelSpec) -> Self {
        let (d, n1, n2, k) = (spec.n_visible, spec.n_hidden1, spec.n_hidden2, spec.n_classes);
        Self {
            w1: Array2::zeros((d, n1)),
            w2: Array2::zeros((n1, n2)),
            w3: Array2::zeros((n2, k)),
            b_v: Array1::zeros(d),
            b_h1: Array1::zeros(n1),
            b_h2: Array1::zeros(n2),
            b_y: Array1::zeros(k),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            n_visible: self.w1.nrows(),
            n_hidden1: self.w1.ncols(),
            n_hidden2: self.w2.ncols(),
            n_classes: self.w3.ncols(),
        }
    }

    /// Checks shape consistency and finiteness.
    pub fn validate(&self) -> Result<()> {
        let spec = self.spec();
        spec.validate()?;
        let ok = self.w2.nrows() == spec.n_hidden1
            && self.w3.nrows() == spec.n_hidden2
            && self.b_v.len() == spec.n_visible
            && self.b_h1.len() == spec.n_hidden1
            && self.b_h2.len() == spec.n_hidden2
            && self.b_y.len() == spec.n_classes;
        if !ok {
            return Err(DbmError::ShapeMismatch(format!(
                "parameter blocks disagree with spec {spec:?}"
            )));
        }
        if !self.is_finite() {
            return Err(DbmError::InvalidArgument("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    fn blocks(&self) -> [&[f64]; 7] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b_v.as_slice().expect("standard layout"),
            self.b_h1.as_slice().expect("standard layout"),
            self.b_h2.as_slice().expect("standard layout"),
            self.b_y.as_slice().expect("standard layout"),
        ]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b_v.as_slice_mut().expect("standard layout"),
            self.b_h1.as_slice_mut().expect("standard layout"),
            self.b_h2.as_slice_mut().expect("standard layout"),
            self.b_y.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Named blocks in [`PARAM_FIELDS`] order with their shapes.
    pub fn named_blocks(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let shapes = [
            self.w1.shape().to_vec(),
            self.w2.shape().to_vec(),
            self.w3.shape().to_vec(),
            vec![self.b_v.len()],
            vec![self.b_h1.len()],
            vec![self.b_h2.len()],
            vec![self.b_y.len()],
        ];
        PARAM_FIELDS
            .iter()
            .zip(shapes)
            .zip(self.blocks())
            .map(|((name, shape), data)| (*name, shape, data))
            .collect()
    }

    /// Row-major concatenation of all blocks in [`PARAM_FIELDS`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.spec().n_params());
        for block in self.blocks() {
            out.extend_from_slice(block);
        }
        out
    }

    pub fn from_flat(spec: ModelSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.n_params() {
            return Err(DbmError::ShapeMismatch(format!(
                "flat vector has {} entries, spec {spec:?} needs {}",
                flat.len(),
                spec.n_params()
            )));
        }
        let mut params = Self::zeros(spec);
        let mut offset = 0;
        for block in params.blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        Ok(params)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &DbmParams) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn dot(&self, other: &DbmParams) -> f64 {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Total input to each visible unit given `h1`.
    pub fn visible_input(&self, h1: ArrayView1<f64>) -> Array1<f64> {
        self.w1.dot(&h1) + &self.b_v
    }

    /// Total input to each first-layer hidden unit given `v` and `h2`.
    pub fn hidden1_input(&self, v: ArrayView1<f64>, h2: ArrayView1<f64>) -> Array1<f64> {
        let mut a = self.w1.t().dot(&v);
        a += &self.w2.dot(&h2);
        a += &self.b_h1;
        a
    }

    /// Total input to each second-layer hidden unit given `h1` and the label
    /// vector (one-hot, a distribution, or all zeros).
    pub fn hidden2_input(&self, h1: ArrayView1<f64>, y: ArrayView1<f64>) -> Array1<f64> {
        let mut a = self.w2.t().dot(&h1);
        if !y.is_empty() {
            a += &self.w3.dot(&y);
        }
        a += &self.b_h2;
        a
    }

    /// Logits of the label softmax given `h2`.
    pub fn label_input(&self, h2: ArrayView1<f64>) -> Array1<f64> {
        self.w3.t().dot(&h2) + &self.b_y
    }
}

/// A complete binary configuration of every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct FullState {
    pub v: Array1<f64>,
    pub h1: Array1<f64>,
    pub h2: Array1<f64>,
    /// Class index; `None` exactly when the model has no label unit.
    pub y: Option<usize>,
}

impl FullState {
    pub fn zeros(spec: ModelSpec) -> Self {
        Self {
            v: Array1::zeros(spec.n_visible),
            h1: Array1::zeros(spec.n_hidden1),
            h2: Array1::zeros(spec.n_hidden2),
            y: spec.has_label().then_some(0),
        }
    }

    pub fn validate(&self, spec: ModelSpec) -> Result<()> {
        if self.v.len() != spec.n_visible
            || self.h1.len() != spec.n_hidden1
            || self.h2.len() != spec.n_hidden2
        {
            return Err(DbmError::ShapeMismatch("state does not match spec".into()));
        }
        let binary = |a: &Array1<f64>| a.iter().all(|&x| x == 0.0 || x == 1.0);
        if !(binary(&self.v) && binary(&self.h1) && binary(&self.h2)) {
            return Err(DbmError::InvalidArgument("state entries must be 0 or 1".into()));
        }
        match (self.y, spec.n_classes) {
            (None, 0) => Ok(()),
            (Some(c), k) if c < k => Ok(()),
            (y, k) => Err(DbmError::InvalidArgument(format!(
                "label {y:?} invalid for {k} classes"
            ))),
        }
    }

    /// Label as a one-hot vector of length `k` (empty when `k == 0`).
    pub fn y_one_hot(&self, k: usize) -> Array1<f64> {
        one_hot(self.y, k)
    }
}

pub(crate) fn one_hot(y: Option<usize>, k: usize) -> Array1<f64> {
    let mut out = Array1::zeros(k);
    if let Some(c) = y {
        out[c] = 1.0;
    }
    out
}

/// Exact energy of a full configuration.
pub fn energy(params: &DbmParams, state: &FullState) -> Result<f64> {
    let spec = params.spec();
    state.validate(spec)?;
    Ok(energy_unchecked(params, state))
}

pub(crate) fn energy_unchecked(params: &DbmParams, state: &FullState) -> f64 {
    let mut neg = state.v.dot(&params.w1.dot(&state.h1));
    neg += state.h1.dot(&params.w2.dot(&state.h2));
    neg += params.b_v.dot(&state.v) + params.b_h1.dot(&state.h1) + params.b_h2.dot(&state.h2);
    if let Some(c) = state.y {
        neg += state.h2.dot(&params.w3.column(c)) + params.b_y[c];
    }
    -neg
}

/// States of the layers adjacent to the one being conditioned.
#[derive(Debug, Clone, Copy, Default)]
pub struct Neighbors<'a> {
    pub v: Option<ArrayView1<'a, f64>>,
    pub h1: Option<ArrayView1<'a, f64>>,
    pub h2: Option<ArrayView1<'a, f64>>,
    /// One-hot label (or any vector of length k).
    pub y: Option<ArrayView1<'a, f64>>,
}

/// `P(unit = 1 | neighbors)` for a binary layer, or the class distribution
/// for the label layer.
fn need<'a>(x: Option<ArrayView1<'a, f64>>, id: LayerId, len: usize) -> Result<ArrayView1<'a, f64>> {
    let view = x.ok_or(DbmError::MissingNeighbor(id))?;
    if view.len() != len {
        return Err(DbmError::ShapeMismatch(format!(
            "{id:?} has {} units, expected {len}",
            view.len()
        )));
    }
    Ok(view)
}

pub fn conditional_probs(params: &DbmParams, layer: LayerId, nb: &Neighbors) -> Result<Array1<f64>> {
    let spec = params.spec();
    let out = match layer {
        LayerId::Visible => {
            let h1 = need(nb.h1, LayerId::Hidden1, spec.n_hidden1)?;
            params.visible_input(h1).mapv_into(sigmoid)
        }
        LayerId::Hidden1 => {
            let v = need(nb.v, LayerId::Visible, spec.n_visible)?;
            let h2 = need(nb.h2, LayerId::Hidden2, spec.n_hidden2)?;
            params.hidden1_input(v, h2).mapv_into(sigmoid)
        }
        LayerId::Hidden2 => {
            let h1 = need(nb.h1, LayerId::Hidden1, spec.n_hidden1)?;
            let y = if spec.has_label() {
                need(nb.y, LayerId::Label, spec.n_classes)?
            } else {
                nb.y.unwrap_or_else(|| ArrayView1::from(&[]))
            };
            params.hidden2_input(h1, y).mapv_into(sigmoid)
        }
        LayerId::Label => {
            if !spec.has_label() {
                return Err(DbmError::InvalidArgument("model has no label unit".into()));
            }
            let h2 = need(nb.h2, LayerId::Hidden2, spec.n_hidden2)?;
            softmax(params.label_input(h2).view())
        }
    };
    Ok(out)
}

/// Outer-product accumulation `dst += alpha * a b^T`.
pub(crate) fn add_outer(dst: &mut Array2<f64>, alpha: f64, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    Zip::from(dst.rows_mut()).and(&a).for_each(|mut row, &ai| {
        if ai != 0.0 {
            row.scaled_add(alpha * ai, &b);
        }
    });
}
