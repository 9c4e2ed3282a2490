//! Limited-memory BFGS with Armijo backtracking.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the relative decrease of the objective drops below this.
    pub tolerance: f64,
    /// Largest allowed change of any single variable per iteration.
    pub max_step: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { memory: 7, max_iterations: 100, tolerance: 1e-6, max_step: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// No step along the search direction decreased the objective.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub stop: StopReason,
}

/// Objective evaluation failed with a non-finite value or gradient.
#[derive(Debug, Clone)]
pub struct NonFinite {
    pub iteration: usize,
    pub value: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn finite(v: f64, g: &[f64]) -> bool {
    v.is_finite() && g.iter().all(|x| x.is_finite())
}

/// Minimizes `f`, which returns the objective and its gradient.
pub fn minimize(
    mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    x0: Vec<f64>,
    opts: &LbfgsOptions,
) -> Result<LbfgsOutcome, NonFinite> {
    const C1: f64 = 1e-4;
    const SHRINK: f64 = 0.5;
    const MAX_BACKTRACK: usize = 30;

    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut evaluations = 1;
    if !finite(fx, &g) {
        return Err(NonFinite { iteration: 0, value: fx });
    }
    let initial_value = fx;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        if g.iter().all(|&v| v == 0.0) {
            stop = StopReason::Converged;
            break;
        }
        let mut d = direction(&g, &history);
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut alpha = if dmax > opts.max_step { opts.max_step / dmax } else { 1.0 };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            let (fn_, gn) = f(&xn);
            evaluations += 1;
            if !finite(fn_, &gn) {
                return Err(NonFinite { iteration: iterations, value: fn_ });
            }
            if fn_ <= fx + C1 * alpha * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            alpha *= SHRINK;
        }
        iterations += 1;
        let Some((xn, fn_, gn)) = accepted else {
            if history.is_empty() {
                stop = StopReason::LineSearchFailed;
                break;
            }
            // Retry from steepest descent.
            history.clear();
            continue;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let decrease = fx - fn_;
        x = xn;
        g = gn;
        let previous = fx;
        fx = fn_;
        if decrease <= opts.tolerance * previous.abs().max(f64::MIN_POSITIVE) {
            stop = StopReason::Converged;
            break;
        }
    }

    Ok(LbfgsOutcome { x, value: fx, initial_value, iterations, evaluations, stop })
}

/// Two-loop recursion: `-H g`.
fn direction(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_minimum() {
        let scales = [1.0, 10.0, 0.1, 3.0];
        let target = [1.0, -2.0, 0.5, 4.0];
        let f = |x: &[f64]| {
            let v = x.iter().zip(&scales).zip(&target).map(|((x, s), t)| s * (x - t).powi(2)).sum();
            let g = x.iter().zip(&scales).zip(&target).map(|((x, s), t)| 2.0 * s * (x - t)).collect();
            (v, g)
        };
        let opts = LbfgsOptions { max_step: 100.0, tolerance: 1e-14, ..Default::default() };
        let out = minimize(f, vec![0.0; 4], &opts).unwrap();
        for (x, t) in out.x.iter().zip(&target) {
            assert!((x - t).abs() < 1e-5, "{:?}", out.x);
        }
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            (v, g)
        };
        let opts = LbfgsOptions { max_iterations: 500, tolerance: 1e-15, max_step: 0.5, ..Default::default() };
        let out = minimize(f, vec![-1.2, 1.0], &opts).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-3 && (out.x[1] - 1.0).abs() < 1e-3, "{out:?}");
    }

    #[test]
    fn step_is_capped() {
        let f = |x: &[f64]| ((x[0] - 100.0).powi(2), vec![2.0 * (x[0] - 100.0)]);
        let opts = LbfgsOptions { max_iterations: 1, max_step: 1.0, ..Default::default() };
        let out = minimize(f, vec![0.0], &opts).unwrap();
        assert!(out.x[0] <= 1.0 + 1e-12 && out.x[0] > 0.0);
    }

    #[test]
    fn non_finite_is_reported() {
        let f = |x: &[f64]| (if x[0] > 0.5 { f64::NAN } else { -x[0] }, vec![-1.0]);
        assert!(minimize(f, vec![0.0], &LbfgsOptions::default()).is_err());
    }
}
