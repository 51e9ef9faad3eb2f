use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DbmError, Result};
use crate::math::{sigmoid, softmax};
use crate::model::{one_hot, DbmParams, FullState, ModelSpec};

pub(crate) fn bernoulli_layer<R: Rng + ?Sized>(input: Array1<f64>, rng: &mut R) -> Array1<f64> {
    input.mapv_into(|a| if rng.random::<f64>() < sigmoid(a) { 1.0 } else { 0.0 })
}

pub(crate) fn categorical<R: Rng + ?Sized>(probs: ArrayView1<f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One block Gibbs sweep in the order `h1 | v,h2`, `h2 | h1,y`, `y | h2`,
/// `v | h1`, each an exact draw from the block conditional.
pub fn gibbs_sweep<R: Rng + ?Sized>(params: &DbmParams, chain: &FullState, rng: &mut R) -> Result<FullState> {
    chain.validate(params.spec())?;
    let mut next = chain.clone();
    gibbs_sweep_in_place(params, &mut next, rng);
    Ok(next)
}

pub(crate) fn gibbs_sweep_in_place<R: Rng + ?Sized>(params: &DbmParams, s: &mut FullState, rng: &mut R) {
    let k = params.spec().n_classes;
    s.h1 = bernoulli_layer(params.hidden1_input(s.v.view(), s.h2.view()), rng);
    let y = one_hot(s.y, k);
    s.h2 = bernoulli_layer(params.hidden2_input(s.h1.view(), y.view()), rng);
    if k > 0 {
        let py = softmax(params.label_input(s.h2.view()).view());
        s.y = Some(categorical(py.view(), rng));
    }
    s.v = bernoulli_layer(params.visible_input(s.h1.view()), rng);
}

/// Serializable position of a chain's random stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngPosition {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngPosition {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Persistent Gibbs chains, each with its own random stream.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub chains: Vec<FullState>,
    rngs: Vec<ChaCha8Rng>,
}

impl ChainState {
    /// `n_chains` chains started from uniformly random states.
    pub fn new(spec: ModelSpec, n_chains: usize, seed: u64) -> Result<Self> {
        if n_chains == 0 {
            return Err(DbmError::InvalidArgument("at least one chain is required".into()));
        }
        let mut chains = Vec::with_capacity(n_chains);
        let mut rngs = Vec::with_capacity(n_chains);
        for i in 0..n_chains {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let mut bits = |n: usize| Array1::from_shape_fn(n, |_| f64::from(u8::from(rng.random_bool(0.5))));
            let v = bits(spec.n_visible);
            let h1 = bits(spec.n_hidden1);
            let h2 = bits(spec.n_hidden2);
            let y = spec.has_label().then(|| rng.random_range(0..spec.n_classes));
            chains.push(FullState { v, h1, h2, y });
            rngs.push(rng);
        }
        Ok(Self { chains, rngs })
    }

    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }

    /// Advances every chain by `sweeps` Gibbs sweeps, in parallel.
    pub fn advance(&mut self, params: &DbmParams, sweeps: usize) {
        self.chains.par_iter_mut().zip(self.rngs.par_iter_mut()).for_each(|(chain, rng)| {
            for _ in 0..sweeps {
                gibbs_sweep_in_place(params, chain, rng);
            }
        });
    }

    pub fn rng_positions(&self) -> Vec<RngPosition> {
        self.rngs.iter().map(RngPosition::capture).collect()
    }

    pub fn from_parts(chains: Vec<FullState>, positions: &[RngPosition]) -> Result<Self> {
        if chains.is_empty() || chains.len() != positions.len() {
            return Err(DbmError::InvalidArgument("chain and rng counts differ".into()));
        }
        Ok(Self { chains, rngs: positions.iter().map(RngPosition::restore).collect() })
    }
}
