//! Nonlinear conjugate gradient with a strong-Wolfe line search.
//!
//! Directions use Polak-Ribiere-plus by default and fall back to steepest
//! descent whenever a direction is not a descent direction, every
//! `restart_every` iterations, and once after a failed line search.

use serde::{Deserialize, Serialize};

use crate::error::{DbmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaFormula {
    PolakRibierePlus,
    FletcherReeves,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CgConfig {
    /// Iteration cap for a plain [`ncg_minimize`] call.
    pub max_iters: usize,
    /// Iterations spent on each minibatch by [`minibatch_ncg`].
    pub max_iters_per_batch: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Stop when the gradient norm falls below this.
    pub grad_tol: f64,
    /// Restart period; 0 means the problem dimension.
    pub restart_every: usize,
    /// Objective evaluations allowed per line search.
    pub max_line_evals: usize,
    pub beta: BetaFormula,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            max_iters_per_batch: 3,
            c1: 1e-4,
            c2: 0.1,
            grad_tol: 1e-9,
            restart_every: 0,
            max_line_evals: 40,
            beta: BetaFormula::PolakRibierePlus,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(DbmError::InvalidArgument(format!(
                "line search constants must satisfy 0 < c1 < c2 < 1, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        if self.max_line_evals == 0 {
            return Err(DbmError::InvalidArgument("max_line_evals must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CgStatus {
    Converged,
    MaxIters,
    LineSearchFailed,
    NonFinite,
}

/// One accepted step. `f_start` and `slope_start` describe the line at the
/// start of the step; `f` and `slope` the accepted point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgStep {
    pub iter: usize,
    pub alpha: f64,
    pub f_start: f64,
    pub slope_start: f64,
    pub f: f64,
    pub slope: f64,
    pub grad_norm: f64,
    pub restarted: bool,
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub status: CgStatus,
    pub iterations: usize,
    pub evaluations: usize,
    pub trace: Vec<CgStep>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimiser of the cubic matching values and slopes at `a` and `b`.
fn cubic_minimizer(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> Option<f64> {
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = disc.sqrt().copysign(b - a);
    let t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
    t.is_finite().then_some(t)
}

struct Point {
    alpha: f64,
    f: f64,
    slope: f64,
}

struct LineSearch<'a, F> {
    objective: &'a mut F,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    slope0: f64,
    c1: f64,
    c2: f64,
    evals_left: usize,
    evaluations: usize,
    trial: Vec<f64>,
}

struct Accepted {
    alpha: f64,
    f: f64,
    slope: f64,
    grad: Vec<f64>,
}

impl<F> LineSearch<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn eval(&mut self, alpha: f64) -> Result<Option<(Point, Vec<f64>)>> {
        if self.evals_left == 0 {
            return Ok(None);
        }
        self.evals_left -= 1;
        self.evaluations += 1;
        for ((t, xi), di) in self.trial.iter_mut().zip(self.x).zip(self.d) {
            *t = xi + alpha * di;
        }
        let (f, g) = (self.objective)(&self.trial)?;
        let slope = dot(&g, self.d);
        Ok(Some((Point { alpha, f, slope }, g)))
    }

    fn armijo(&self, p: &Point) -> bool {
        p.f.is_finite() && p.f <= self.f0 + self.c1 * p.alpha * self.slope0
    }

    fn curvature(&self, p: &Point) -> bool {
        p.slope.is_finite() && p.slope.abs() <= -self.c2 * self.slope0
    }

    fn run(&mut self, alpha0: f64) -> Result<Option<Accepted>> {
        let mut prev = Point { alpha: 0.0, f: self.f0, slope: self.slope0 };
        let mut alpha = alpha0;
        let mut first = true;
        loop {
            let Some((p, g)) = self.eval(alpha)? else { return Ok(None) };
            if !self.armijo(&p) || (!first && p.f >= prev.f) {
                return self.zoom(prev, p);
            }
            if self.curvature(&p) {
                return Ok(Some(Accepted { alpha: p.alpha, f: p.f, slope: p.slope, grad: g }));
            }
            if p.slope >= 0.0 {
                return self.zoom(p, prev);
            }
            let lo = 1.1 * p.alpha;
            let hi = 10.0 * p.alpha;
            let next = cubic_minimizer(prev.alpha, prev.f, prev.slope, p.alpha, p.f, p.slope)
                .filter(|t| *t > p.alpha)
                .map_or(hi, |t| t.clamp(lo, hi));
            prev = p;
            alpha = next;
            first = false;
        }
    }

    /// `lo` satisfies sufficient decrease and has the lower value; the
    /// minimiser lies between `lo` and `hi`.
    fn zoom(&mut self, mut lo: Point, mut hi: Point) -> Result<Option<Accepted>> {
        loop {
            let width = hi.alpha - lo.alpha;
            if width.abs() <= f64::EPSILON * lo.alpha.abs().max(1e-300) {
                return Ok(None);
            }
            let interior = (lo.alpha.min(hi.alpha) + 0.1 * width.abs(), lo.alpha.max(hi.alpha) - 0.1 * width.abs());
            let guess = if hi.f.is_finite() && hi.slope.is_finite() {
                cubic_minimizer(lo.alpha, lo.f, lo.slope, hi.alpha, hi.f, hi.slope)
            } else {
                None
            };
            let alpha = guess.map_or(0.5 * (lo.alpha + hi.alpha), |t| t.clamp(interior.0, interior.1));
            let Some((p, g)) = self.eval(alpha)? else { return Ok(None) };
            if !self.armijo(&p) || p.f >= lo.f {
                hi = p;
            } else {
                if self.curvature(&p) {
                    return Ok(Some(Accepted { alpha: p.alpha, f: p.f, slope: p.slope, grad: g }));
                }
                if p.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
        }
    }
}

/// Minimises `objective` from `x0` for at most `config.max_iters`
/// iterations. `f` never increases across accepted steps, and every
/// accepted step satisfies the strong Wolfe conditions.
pub fn ncg_minimize<F>(mut objective: F, x0: Vec<f64>, config: &CgConfig) -> Result<CgResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    minimize_iters(&mut objective, x0, config, config.max_iters)
}

fn minimize_iters<F>(objective: &mut F, x0: Vec<f64>, config: &CgConfig, max_iters: usize) -> Result<CgResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    config.validate()?;
    let n = x0.len();
    let restart_every = if config.restart_every == 0 { n.max(1) } else { config.restart_every };
    let mut x = x0;
    let (mut f, mut g) = objective(&x)?;
    if g.len() != n {
        return Err(DbmError::ShapeMismatch("gradient length differs from x".into()));
    }
    let mut evaluations = 1;
    let mut trace = Vec::new();
    let finish = |x, f, g, status, iterations, evaluations, trace| {
        Ok(CgResult { x, f, grad: g, status, iterations, evaluations, trace })
    };
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return finish(x, f, g, CgStatus::NonFinite, 0, evaluations, trace);
    }
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut since_restart = 0;
    let mut restarted = true;
    let mut prev_f: Option<f64> = None;
    let mut prev_alpha = 1.0;
    let mut iterations = 0;

    while iterations < max_iters {
        let gnorm = norm(&g);
        if gnorm < config.grad_tol {
            return finish(x, f, g, CgStatus::Converged, iterations, evaluations, trace);
        }
        let mut slope0 = dot(&g, &d);
        if !(slope0 < 0.0) {
            d = g.iter().map(|v| -v).collect();
            slope0 = -gnorm * gnorm;
            restarted = true;
            since_restart = 0;
        }
        let alpha0 = match prev_f {
            None => (1.0 / gnorm).min(1.0),
            Some(pf) => {
                let guess = 1.01 * 2.0 * (f - pf) / slope0;
                if guess.is_finite() && guess > 0.0 {
                    guess
                } else {
                    prev_alpha
                }
            }
        };
        let mut ls = LineSearch {
            objective: &mut *objective,
            x: &x,
            d: &d,
            f0: f,
            slope0,
            c1: config.c1,
            c2: config.c2,
            evals_left: config.max_line_evals,
            evaluations: 0,
            trial: vec![0.0; n],
        };
        let accepted = ls.run(alpha0)?;
        evaluations += ls.evaluations;
        let Some(step) = accepted else {
            if restarted {
                return finish(x, f, g, CgStatus::LineSearchFailed, iterations, evaluations, trace);
            }
            d = g.iter().map(|v| -v).collect();
            restarted = true;
            since_restart = 0;
            prev_f = None;
            continue;
        };
        debug_assert!(step.f <= f + config.c1 * step.alpha * slope0);
        debug_assert!(step.slope.abs() <= -config.c2 * slope0);
        if step.grad.iter().any(|v| !v.is_finite()) {
            return finish(x, f, g, CgStatus::NonFinite, iterations, evaluations, trace);
        }
        for (xi, di) in x.iter_mut().zip(&d) {
            *xi += step.alpha * di;
        }
        iterations += 1;
        since_restart += 1;
        trace.push(CgStep {
            iter: iterations,
            alpha: step.alpha,
            f_start: f,
            slope_start: slope0,
            f: step.f,
            slope: step.slope,
            grad_norm: norm(&step.grad),
            restarted,
        });

        let g_new = step.grad;
        let beta = if since_restart >= restart_every {
            since_restart = 0;
            0.0
        } else {
            let gg = dot(&g, &g);
            match config.beta {
                BetaFormula::PolakRibierePlus => {
                    let pr = g_new.iter().zip(&g).map(|(a, b)| a * (a - b)).sum::<f64>() / gg;
                    pr.max(0.0)
                }
                BetaFormula::FletcherReeves => dot(&g_new, &g_new) / gg,
            }
        };
        for (di, gi) in d.iter_mut().zip(&g_new) {
            *di = -gi + beta * *di;
        }
        restarted = beta == 0.0;
        prev_f = Some(f);
        prev_alpha = step.alpha;
        f = step.f;
        g = g_new;
    }
    let status = if norm(&g) < config.grad_tol { CgStatus::Converged } else { CgStatus::MaxIters };
    finish(x, f, g, status, iterations, evaluations, trace)
}

/// Outcome of one minibatch's CG run.
#[derive(Debug, Clone)]
pub struct BatchSummary {
    pub batch: usize,
    pub f_start: f64,
    pub f_end: f64,
    pub status: CgStatus,
    pub trace: Vec<CgStep>,
}

/// Runs `config.max_iters_per_batch` CG iterations on each of `n_batches`
/// deterministic objectives in turn, warm-starting from the previous
/// iterate with the search direction reset. `source(b)` must return the
/// objective for batch `b` with everything random (masks, ordering) fixed.
pub fn minibatch_ncg<S, F>(
    mut source: S,
    n_batches: usize,
    x0: Vec<f64>,
    config: &CgConfig,
    mut on_batch: impl FnMut(&BatchSummary, &[f64]) -> Result<()>,
) -> Result<Vec<f64>>
where
    S: FnMut(usize) -> Result<F>,
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0;
    for b in 0..n_batches {
        let mut objective = source(b)?;
        let result = minimize_iters(&mut objective, x, config, config.max_iters_per_batch)?;
        let f_start = result.trace.first().map_or(result.f, |s| s.f_start);
        let summary = BatchSummary { batch: b, f_start, f_end: result.f, status: result.status, trace: result.trace };
        x = result.x;
        on_batch(&summary, &x)?;
    }
    Ok(x)
}
