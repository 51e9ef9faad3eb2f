mod common;

use common::rng;
use jdbm::cg::{minibatch_ncg, ncg_minimize, BetaFormula, CgConfig, CgResult, CgStatus};
use jdbm::Result;
use proptest::prelude::*;
use rand::Rng;

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn spd_problem(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = rng(seed);
    let m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| m[k][i] * m[k][j]).sum::<f64>() / n as f64 + f64::from(u8::from(i == j))).collect())
        .collect();
    let b = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    (a, b)
}

fn quadratic(a: &[Vec<f64>], b: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
    let ax: Vec<f64> = a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect();
    let f = 0.5 * ax.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() - b.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
    let g = ax.iter().zip(b).map(|(p, q)| p - q).collect();
    (f, g)
}

fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (a, b) = (x[0], x[1]);
    let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
    let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
    Ok((f, g))
}

fn assert_strong_wolfe(r: &CgResult, c1: f64, c2: f64) {
    for s in &r.trace {
        assert!(s.slope_start < 0.0, "step {} is not a descent direction", s.iter);
        assert!(s.f <= s.f_start + c1 * s.alpha * s.slope_start + 1e-12 * s.f_start.abs(), "armijo fails at {}", s.iter);
        assert!(s.slope.abs() <= c2 * s.slope_start.abs() + 1e-12, "curvature fails at {}", s.iter);
    }
}

#[test]
fn spd_quadratic_matches_direct_solve() {
    for seed in 0..5 {
        let (a, b) = spd_problem(seed, 20);
        let want = solve(a.clone(), b.clone());
        let cfg = CgConfig { max_iters: 40, grad_tol: 1e-12, ..CgConfig::default() };
        let r = ncg_minimize(|x: &[f64]| Ok(quadratic(&a, &b, x)), vec![0.0; 20], &cfg).unwrap();
        let err = r.x.iter().zip(&want).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "seed {seed}: error {err} after {} iterations", r.iterations);
        assert!(r.iterations <= 40);
        assert_strong_wolfe(&r, cfg.c1, cfg.c2);
    }
}

#[test]
fn rosenbrock_is_solved_within_200_iterations() {
    for beta in [BetaFormula::PolakRibierePlus, BetaFormula::FletcherReeves] {
        let cfg = CgConfig { max_iters: 200, grad_tol: 1e-10, beta, ..CgConfig::default() };
        let r = ncg_minimize(rosenbrock, vec![-1.2, 1.0], &cfg).unwrap();
        if beta == BetaFormula::PolakRibierePlus {
            assert!(r.f < 1e-8, "f = {} after {} iterations", r.f, r.iterations);
            assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4);
        }
        assert_strong_wolfe(&r, cfg.c1, cfg.c2);
        assert!(r.trace.windows(2).all(|w| w[1].f <= w[0].f));
    }
}

#[test]
fn non_finite_objective_is_reported() {
    let r = ncg_minimize(|_: &[f64]| Ok((f64::NAN, vec![1.0])), vec![0.0], &CgConfig::default()).unwrap();
    assert_eq!(r.status, CgStatus::NonFinite);
}

#[test]
fn minibatch_driver_caps_iterations_and_warm_starts() {
    let targets = [vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, 3.0]];
    let cfg = CgConfig { max_iters_per_batch: 3, ..CgConfig::default() };
    let mut seen = Vec::new();
    let x = minibatch_ncg(
        |b| {
            let t = targets[b].clone();
            Ok(move |x: &[f64]| {
                let d: Vec<f64> = x.iter().zip(&t).map(|(p, q)| p - q).collect();
                Ok((d.iter().map(|v| v * v).sum::<f64>(), d.iter().map(|v| 2.0 * v).collect()))
            })
        },
        3,
        vec![0.0, 0.0],
        &cfg,
        |s, x| {
            assert!(s.trace.len() <= 3);
            assert!(s.f_end <= s.f_start);
            assert!(s.trace.first().is_none_or(|t| t.restarted));
            seen.push(x.to_vec());
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(seen.len(), 3);
    assert!((x[0] - 3.0).abs() < 1e-8 && (x[1] - 3.0).abs() < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn accepted_steps_satisfy_strong_wolfe(seed in any::<u64>(), n in 2usize..12) {
        let (a, b) = spd_problem(seed, n);
        let cfg = CgConfig { max_iters: 50, ..CgConfig::default() };
        let r = ncg_minimize(|x: &[f64]| Ok(quadratic(&a, &b, x)), vec![1.0; n], &cfg).unwrap();
        assert_strong_wolfe(&r, cfg.c1, cfg.c2);
        prop_assert!(r.trace.windows(2).all(|w| w[1].f <= w[0].f));
    }
}
