//! Fixtures shared by the benchmarks.

use jdbm::model::init_params;
use jdbm::{DbmParams, InitScheme, ModelSpec};

/// Gaussian-initialised parameters with the given layer sizes.
pub fn random_model(d: usize, n1: usize, n2: usize, k: usize, std: f64, seed: u64) -> DbmParams {
    let spec = ModelSpec::new(d, n1, n2, k).expect("valid sizes");
    init_params(spec, InitScheme::Gaussian { std }, seed).expect("valid scheme")
}
