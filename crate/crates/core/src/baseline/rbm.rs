use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DbmError, Result};
use crate::math::{sigmoid, softmax};
use crate::model::{add_outer, one_hot, DbmParams};

use super::gibbs::{bernoulli_layer, categorical};
use super::Schedule;

/// Softmax label unit attached to the visible side of an RBM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelBlock {
    /// `[n_hidden x k]`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbmParams {
    /// `[n_visible x n_hidden]`
    pub w: Array2<f64>,
    pub b_vis: Array1<f64>,
    pub b_hid: Array1<f64>,
    pub label: Option<LabelBlock>,
}

/// How the negative phase is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingMode {
    /// Chains restarted at the data for every update.
    Cd { steps: usize },
    /// Persistent chains.
    Pcd { steps: usize, n_chains: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RbmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: SamplingMode,
    pub schedule: Schedule,
    /// Multiplier on the bottom-up weights `W^T v` in the hidden
    /// conditional. 2 for the bottom RBM of a DBM stack.
    pub up_factor: f64,
    /// Multiplier on the top-down weights `W h` in the visible conditional.
    /// 2 for the top RBM of a DBM stack.
    pub down_factor: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for RbmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 100,
            mode: SamplingMode::Cd { steps: 1 },
            schedule: Schedule { learning_rate: 0.05, ..Schedule::default() },
            up_factor: 1.0,
            down_factor: 1.0,
            init_std: 0.01,
            seed: 0,
        }
    }
}

/// Negative-phase chains of an RBM.
#[derive(Debug, Clone)]
pub struct RbmChains {
    pub v: Vec<Array1<f64>>,
    pub y: Vec<Option<usize>>,
    rng: ChaCha8Rng,
}

impl RbmChains {
    pub fn new(rbm: &RbmParams, n_chains: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_vis = rbm.n_visible();
        let k = rbm.n_classes();
        let v = (0..n_chains)
            .map(|_| Array1::from_shape_fn(n_vis, |_| f64::from(u8::from(rng.random_bool(0.5)))))
            .collect();
        let y = (0..n_chains).map(|_| (k > 0).then(|| rng.random_range(0..k))).collect();
        Self { v, y, rng }
    }
}

impl RbmParams {
    pub fn zeros(n_visible: usize, n_hidden: usize, n_classes: usize) -> Self {
        Self {
            w: Array2::zeros((n_visible, n_hidden)),
            b_vis: Array1::zeros(n_visible),
            b_hid: Array1::zeros(n_hidden),
            label: (n_classes > 0).then(|| LabelBlock {
                w: Array2::zeros((n_hidden, n_classes)),
                b: Array1::zeros(n_classes),
            }),
        }
    }

    pub fn n_visible(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_hidden(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.label.as_ref().map_or(0, |l| l.b.len())
    }

    pub fn hidden_input(&self, v: ArrayView1<f64>, y: Option<ArrayView1<f64>>, up_factor: f64) -> Array1<f64> {
        let mut a = self.w.t().dot(&v) * up_factor;
        if let (Some(l), Some(y)) = (&self.label, y) {
            a += &l.w.dot(&y);
        }
        a + &self.b_hid
    }

    pub fn hidden_probs(&self, v: ArrayView1<f64>, y: Option<ArrayView1<f64>>, up_factor: f64) -> Array1<f64> {
        self.hidden_input(v, y, up_factor).mapv_into(sigmoid)
    }

    pub fn visible_probs(&self, h: ArrayView1<f64>, down_factor: f64) -> Array1<f64> {
        (self.w.dot(&h) * down_factor + &self.b_vis).mapv_into(sigmoid)
    }

    pub fn label_probs(&self, h: ArrayView1<f64>) -> Option<Array1<f64>> {
        self.label.as_ref().map(|l| softmax((l.w.t().dot(&h) + &l.b).view()))
    }

    /// One alternating Gibbs step `h | v,y` then `v, y | h`.
    pub fn gibbs_step<R: Rng + ?Sized>(
        &self,
        v: &mut Array1<f64>,
        y: &mut Option<usize>,
        up_factor: f64,
        down_factor: f64,
        rng: &mut R,
    ) {
        let yv = one_hot(*y, self.n_classes());
        let y_in = self.label.as_ref().map(|_| yv.view());
        let h = bernoulli_layer(self.hidden_input(v.view(), y_in, up_factor), rng);
        *v = (self.w.dot(&h) * down_factor + &self.b_vis)
            .mapv_into(|a| if rng.random::<f64>() < sigmoid(a) { 1.0 } else { 0.0 });
        if let Some(py) = self.label_probs(h.view()) {
            *y = Some(categorical(py.view(), rng));
        }
    }

    fn axpy(&mut self, alpha: f64, other: &RbmParams) {
        self.w.scaled_add(alpha, &other.w);
        self.b_vis.scaled_add(alpha, &other.b_vis);
        self.b_hid.scaled_add(alpha, &other.b_hid);
        if let (Some(a), Some(b)) = (&mut self.label, &other.label) {
            a.w.scaled_add(alpha, &b.w);
            a.b.scaled_add(alpha, &b.b);
        }
    }

    fn scale(&mut self, alpha: f64) {
        self.w *= alpha;
        self.b_vis *= alpha;
        self.b_hid *= alpha;
        if let Some(l) = &mut self.label {
            l.w *= alpha;
            l.b *= alpha;
        }
    }

    fn accumulate(&mut self, weight: f64, v: ArrayView1<f64>, h: ArrayView1<f64>, y: Option<usize>) {
        add_outer(&mut self.w, weight, v, h);
        self.b_vis.scaled_add(weight, &v);
        self.b_hid.scaled_add(weight, &h);
        if let (Some(l), Some(c)) = (&mut self.label, y) {
            l.w.column_mut(c).scaled_add(weight, &h);
            l.b[c] += weight;
        }
    }

    /// Stochastic log-likelihood gradient: exact hidden expectations for the
    /// data minus those of the negative chains after `steps` Gibbs steps.
    /// In CD mode `chains` is reset to the batch first.
    pub fn gradient_estimate(
        &self,
        batch: &[(ArrayView1<f64>, Option<usize>)],
        chains: &mut RbmChains,
        persistent: bool,
        steps: usize,
        up_factor: f64,
        down_factor: f64,
    ) -> RbmParams {
        let k = self.n_classes();
        let mut grad = RbmParams::zeros(self.n_visible(), self.n_hidden(), k);
        let w_pos = 1.0 / batch.len() as f64;
        for (v, y) in batch {
            let yv = one_hot(*y, k);
            let h = self.hidden_probs(*v, self.label.as_ref().map(|_| yv.view()), up_factor);
            grad.accumulate(w_pos, *v, h.view(), *y);
        }
        if !persistent {
            chains.v = batch.iter().map(|(v, _)| v.to_owned()).collect();
            chains.y = batch.iter().map(|(_, y)| *y).collect();
        }
        let w_neg = -1.0 / chains.v.len() as f64;
        for i in 0..chains.v.len() {
            let (mut v, mut y) = (chains.v[i].clone(), chains.y[i]);
            for _ in 0..steps {
                self.gibbs_step(&mut v, &mut y, up_factor, down_factor, &mut chains.rng);
            }
            let yv = one_hot(y, k);
            let h = self.hidden_probs(v.view(), self.label.as_ref().map(|_| yv.view()), up_factor);
            grad.accumulate(w_neg, v.view(), h.view(), y);
            chains.v[i] = v;
            chains.y[i] = y;
        }
        grad
    }
}

fn check_data(data: &Array2<f64>, binary: bool) -> Result<()> {
    if binary && data.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(DbmError::InvalidArgument("RBM training data must be binary".into()));
    }
    if data.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(DbmError::InvalidArgument("RBM training data must lie in [0, 1]".into()));
    }
    if data.nrows() == 0 {
        return Err(DbmError::InvalidArgument("RBM training data is empty".into()));
    }
    Ok(())
}

fn train_impl(
    data: &Array2<f64>,
    labels: Option<(&[usize], usize)>,
    n_hidden: usize,
    config: &RbmTrainConfig,
    binary: bool,
) -> Result<RbmParams> {
    check_data(data, binary)?;
    if config.batch_size == 0 || n_hidden == 0 {
        return Err(DbmError::InvalidArgument("batch size and hidden size must be positive".into()));
    }
    let k = labels.map_or(0, |(_, k)| k);
    if let Some((ls, k)) = labels {
        if ls.len() != data.nrows() {
            return Err(DbmError::InvalidArgument("one label per example is required".into()));
        }
        if let Some(&bad) = ls.iter().find(|&&c| c >= k) {
            return Err(DbmError::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.init_std).map_err(|e| DbmError::InvalidArgument(e.to_string()))?;
    let mut params = RbmParams::zeros(data.ncols(), n_hidden, k);
    params.w.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
    if let Some(l) = &mut params.label {
        l.w.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
    }
    let (persistent, steps, n_chains) = match config.mode {
        SamplingMode::Cd { steps } => (false, steps, config.batch_size),
        SamplingMode::Pcd { steps, n_chains } => (true, steps, n_chains.max(1)),
    };
    let mut chains = RbmChains::new(&params, n_chains, config.seed.wrapping_add(1));
    let mut velocity = RbmParams::zeros(data.ncols(), n_hidden, k);
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.schedule.learning_rate(epoch);
        let momentum = config.schedule.momentum(epoch);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| (data.row(i), labels.map(|(l, _)| l[i]))).collect();
            let mut grad =
                params.gradient_estimate(&batch, &mut chains, persistent, steps, config.up_factor, config.down_factor);
            grad.w.scaled_add(-config.schedule.weight_decay, &params.w);
            velocity.scale(momentum);
            velocity.axpy(lr, &grad);
            params.axpy(1.0, &velocity);
        }
    }
    Ok(params)
}

/// Trains an RBM on binary rows of `data`.
pub fn train_rbm(data: &Array2<f64>, n_hidden: usize, config: &RbmTrainConfig) -> Result<RbmParams> {
    train_impl(data, None, n_hidden, config, true)
}

/// Trains the top RBM whose visible layer is `h1` plus a softmax label unit.
/// `h1_samples` are normally binary samples from the bottom RBM's posterior;
/// posterior means in `[0, 1]` are accepted as well.
pub fn train_top_rbm(
    h1_samples: &Array2<f64>,
    labels: &[usize],
    n_classes: usize,
    n_hidden: usize,
    config: &RbmTrainConfig,
) -> Result<RbmParams> {
    if n_classes == 0 {
        return Err(DbmError::InvalidArgument("top RBM needs at least one class".into()));
    }
    train_impl(h1_samples, Some((labels, n_classes)), n_hidden, config, false)
}

/// Stacks two RBMs into a DBM.
///
/// `W1`, `W2`, `W3` and the outer biases are copied. The bottom RBM is
/// trained with doubled bottom-up input and the top RBM with doubled
/// top-down input, so each saw `h1` driven as if from both sides. The
/// shared `h1` bias is the mean of the two RBMs' `h1` biases, which gives
/// the identity
///
/// `a_dbm(v, h2) = (a_bottom_up(v) + a_top_down(h2)) / 2`
///
/// where `a_bottom_up(v) = 2 W1^T v + bottom.b_hid` and
/// `a_top_down(h2) = 2 W2 h2 + top.b_vis` are the RBMs' own inputs to `h1`.
pub fn assemble_dbm(bottom: &RbmParams, top: &RbmParams) -> Result<DbmParams> {
    if bottom.n_hidden() != top.n_visible() {
        return Err(DbmError::ShapeMismatch(format!(
            "bottom RBM has {} hidden units but top RBM has {} visible units",
            bottom.n_hidden(),
            top.n_visible()
        )));
    }
    if bottom.label.is_some() {
        return Err(DbmError::InvalidArgument("bottom RBM must not carry a label block".into()));
    }
    let k = top.n_classes();
    let (w3, b_y) = match &top.label {
        Some(l) => (l.w.clone(), l.b.clone()),
        None => (Array2::zeros((top.n_hidden(), 0)), Array1::zeros(0)),
    };
    debug_assert_eq!(w3.ncols(), k);
    let params = DbmParams {
        w1: bottom.w.clone(),
        w2: top.w.clone(),
        w3,
        b_v: bottom.b_vis.clone(),
        b_h1: (&bottom.b_hid + &top.b_vis) * 0.5,
        b_h2: top.b_hid.clone(),
        b_y,
    };
    params.validate()?;
    Ok(params)
}
