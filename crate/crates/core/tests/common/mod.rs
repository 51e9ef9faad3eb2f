//! Reference implementations for the integration tests.
//!
//! Everything here is written with plain index loops and full enumeration,
//! independently of the library's vectorised code paths.

#![allow(dead_code)]

use jdbm::inpaint::MaskSet;
use jdbm::meanfield::{ClampSpec, LabelClamp};
use jdbm::model::init_params;
use jdbm::{DbmParams, InitScheme, ModelSpec};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian weights with standard deviation `std` and uniform biases in
/// `[-bias, bias]`.
pub fn random_model(rng: &mut ChaCha8Rng, spec: ModelSpec, std: f64, bias: f64) -> DbmParams {
    let mut p = init_params(spec, InitScheme::Gaussian { std }, rng.random()).unwrap();
    for b in [&mut p.b_v, &mut p.b_h1, &mut p.b_h2, &mut p.b_y] {
        b.mapv_inplace(|_| rng.random_range(-bias..=bias));
    }
    p
}

pub fn random_spec(rng: &mut ChaCha8Rng, max: usize, classes: &[usize]) -> ModelSpec {
    ModelSpec::new(
        rng.random_range(1..=max),
        rng.random_range(1..=max),
        rng.random_range(1..=max),
        classes[rng.random_range(0..classes.len())],
    )
    .unwrap()
}

pub fn random_bits(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
}

pub fn random_label(rng: &mut ChaCha8Rng, k: usize) -> Option<usize> {
    (k > 0).then(|| rng.random_range(0..k))
}

pub fn bits(x: usize, n: usize) -> Vec<f64> {
    (0..n).map(|j| if x >> j & 1 == 1 { 1.0 } else { 0.0 }).collect()
}

pub fn energy_ref(p: &DbmParams, v: &[f64], h1: &[f64], h2: &[f64], y: Option<usize>) -> f64 {
    let s = p.spec();
    let mut e = 0.0;
    for i in 0..s.n_visible {
        e -= p.b_v[i] * v[i];
        for j in 0..s.n_hidden1 {
            e -= v[i] * p.w1[[i, j]] * h1[j];
        }
    }
    for j in 0..s.n_hidden1 {
        e -= p.b_h1[j] * h1[j];
        for l in 0..s.n_hidden2 {
            e -= h1[j] * p.w2[[j, l]] * h2[l];
        }
    }
    for l in 0..s.n_hidden2 {
        e -= p.b_h2[l] * h2[l];
        if let Some(c) = y {
            e -= h2[l] * p.w3[[l, c]];
        }
    }
    if let Some(c) = y {
        e -= p.b_y[c];
    }
    e
}

/// One enumerated configuration.
#[derive(Debug, Clone)]
pub struct Config {
    pub v: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub y: Option<usize>,
}

/// Visits every joint configuration, label outermost and `v` innermost.
pub fn for_each_config(spec: ModelSpec, mut f: impl FnMut(&Config)) {
    let labels: Vec<Option<usize>> = if spec.n_classes == 0 { vec![None] } else { (0..spec.n_classes).map(Some).collect() };
    for &y in &labels {
        for b2 in 0..1usize << spec.n_hidden2 {
            for b1 in 0..1usize << spec.n_hidden1 {
                for bv in 0..1usize << spec.n_visible {
                    f(&Config {
                        v: bits(bv, spec.n_visible),
                        h1: bits(b1, spec.n_hidden1),
                        h2: bits(b2, spec.n_hidden2),
                        y,
                    });
                }
            }
        }
    }
}

/// `log sum exp(-E)` over configurations accepted by `keep`; collects all
/// terms and subtracts the maximum once.
pub fn log_sum_where(p: &DbmParams, keep: impl Fn(&Config) -> bool) -> f64 {
    let mut terms = Vec::new();
    for_each_config(p.spec(), |c| {
        if keep(c) {
            terms.push(-energy_ref(p, &c.v, &c.h1, &c.h2, c.y));
        }
    });
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

pub fn log_z_ref(p: &DbmParams) -> f64 {
    log_sum_where(p, |_| true)
}

pub fn log_joint_ref(p: &DbmParams, v: &[f64], y: Option<usize>) -> f64 {
    log_sum_where(p, |c| c.v == v && c.y == y) - log_z_ref(p)
}

pub fn clamp_accepts(clamp: &ClampSpec, c: &Config) -> bool {
    let ok = |cl: &[Option<bool>], x: &[f64]| cl.iter().zip(x).all(|(c, &x)| c.is_none_or(|b| (x == 1.0) == b));
    let y_ok = match clamp.y {
        LabelClamp::Free => true,
        LabelClamp::Class(k) => c.y == Some(k),
        LabelClamp::Zero => panic!("zero clamp has no exact meaning"),
    };
    ok(&clamp.v, &c.v) && ok(&clamp.h1, &c.h1) && ok(&clamp.h2, &c.h2) && y_ok
}

/// Exact marginals `(v, h1, h2, y)` under `clamp`.
pub fn marginals_ref(p: &DbmParams, clamp: &ClampSpec) -> [Vec<f64>; 4] {
    let s = p.spec();
    let log_norm = log_sum_where(p, |c| clamp_accepts(clamp, c));
    let mut m = [vec![0.0; s.n_visible], vec![0.0; s.n_hidden1], vec![0.0; s.n_hidden2], vec![0.0; s.n_classes]];
    for_each_config(s, |c| {
        if clamp_accepts(clamp, c) {
            let w = (-energy_ref(p, &c.v, &c.h1, &c.h2, c.y) - log_norm).exp();
            for (dst, src) in m.iter_mut().zip([&c.v, &c.h1, &c.h2]) {
                dst.iter_mut().zip(src).for_each(|(d, x)| *d += w * x);
            }
            if let Some(k) = c.y {
                m[3][k] += w;
            }
        }
    });
    m
}

/// Exact `log P(masked observed | conditioned-on observed)`.
pub fn inpaint_exact_ref(p: &DbmParams, v: &[f64], y: Option<usize>, mask: &MaskSet) -> f64 {
    let conditioned = |c: &Config| {
        (0..v.len()).all(|j| mask.masked_visibles.contains(&j) || c.v[j] == v[j]) && (mask.label_masked || c.y == y)
    };
    log_sum_where(p, |c| c.v == v && c.y == y) - log_sum_where(p, conditioned)
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean-field inpainting score after `k` sweeps, with explicit loops.
pub fn inpaint_score_ref(p: &DbmParams, v: &[f64], y: Option<usize>, mask: &MaskSet, k: usize) -> f64 {
    let s = p.spec();
    let (d, n1, n2, nc) = (s.n_visible, s.n_hidden1, s.n_hidden2, s.n_classes);
    let free_v: Vec<bool> = (0..d).map(|j| mask.masked_visibles.contains(&j)).collect();
    let mut qv: Vec<f64> = (0..d).map(|j| if free_v[j] { 0.5 } else { v[j] }).collect();
    let mut q1 = vec![0.5; n1];
    let mut q2 = vec![0.5; n2];
    let mut qy: Vec<f64> = match (y, mask.label_masked) {
        (_, true) => vec![1.0 / nc as f64; nc],
        (Some(c), false) => (0..nc).map(|i| if i == c { 1.0 } else { 0.0 }).collect(),
        (None, false) => vec![1.0 / nc as f64; nc],
    };
    let label_free = nc > 0 && (mask.label_masked || y.is_none());
    for _ in 0..k {
        for j in 0..n1 {
            let mut a = p.b_h1[j];
            for i in 0..d {
                a += qv[i] * p.w1[[i, j]];
            }
            for l in 0..n2 {
                a += p.w2[[j, l]] * q2[l];
            }
            q1[j] = sig(a);
        }
        for l in 0..n2 {
            let mut a = p.b_h2[l];
            for j in 0..n1 {
                a += q1[j] * p.w2[[j, l]];
            }
            for c in 0..nc {
                a += p.w3[[l, c]] * qy[c];
            }
            q2[l] = sig(a);
        }
        if label_free {
            let a: Vec<f64> = (0..nc).map(|c| p.b_y[c] + (0..n2).map(|l| q2[l] * p.w3[[l, c]]).sum::<f64>()).collect();
            let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = a.iter().map(|x| (x - m).exp()).sum();
            qy = a.iter().map(|x| (x - m).exp() / z).collect();
        }
        for i in 0..d {
            if free_v[i] {
                let mut a = p.b_v[i];
                for j in 0..n1 {
                    a += p.w1[[i, j]] * q1[j];
                }
                qv[i] = sig(a);
            }
        }
    }
    let floor = |x: f64| x.max(1e-12).ln();
    let mut score = 0.0;
    for &j in &mask.masked_visibles {
        score += if v[j] == 1.0 { floor(qv[j]) } else { floor(1.0 - qv[j]) };
    }
    if mask.label_masked {
        score += floor(qy[y.unwrap()]);
    }
    score
}

/// Central finite differences of `f` at `x`.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y, floor)).fold(0.0, f64::max)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Random mask over `spec` with each observed variable masked with
/// probability `q`, never empty.
pub fn random_mask(rng: &mut ChaCha8Rng, spec: ModelSpec, q: f64) -> MaskSet {
    loop {
        let masked_visibles: Vec<usize> = (0..spec.n_visible).filter(|_| rng.random_bool(q)).collect();
        let label_masked = spec.has_label() && rng.random_bool(q);
        let m = MaskSet { masked_visibles, label_masked };
        if !m.is_empty() {
            return m;
        }
    }
}
