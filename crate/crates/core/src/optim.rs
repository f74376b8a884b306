//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! Minimizes; callers maximizing a likelihood pass the negated objective.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub max_iters: usize,
    /// Exit once the Euclidean gradient norm drops below this.
    pub grad_tol: f64,
    pub memory: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-5,
            memory: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitReason {
    GradientTolerance,
    MaxIterations,
    /// Line search could not decrease the objective further.
    Stalled,
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub exit: ExitReason,
    pub trace: Vec<TraceEntry>,
}

impl OptimResult {
    pub fn grad_norm(&self) -> f64 {
        norm(&self.grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;

/// `objective` returns value and gradient; an `Err` or non-finite value at a
/// trial point is treated as an infinitely bad step.
pub fn minimize<F>(
    mut objective: F,
    x0: &[f64],
    settings: &OptimizerSettings,
) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0.to_vec();
    let (mut f, mut g) = match objective(&x) {
        Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => (f, g),
        Ok(_) => {
            return Err(Error::Diverged {
                message: "objective is not finite at the starting point".into(),
                iterations: 0,
                last_params: x,
            })
        }
        Err(e) => {
            return Err(Error::Diverged {
                message: format!("objective failed at the starting point: {e}"),
                iterations: 0,
                last_params: x,
            })
        }
    };
    let mut trace = vec![TraceEntry {
        iteration: 0,
        value: f,
        grad_norm: norm(&g),
    }];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut exit = ExitReason::MaxIterations;
    let mut iterations = 0;

    for it in 1..=settings.max_iters {
        if norm(&g) <= settings.grad_tol {
            exit = ExitReason::GradientTolerance;
            break;
        }
        let mut dir = two_loop(&g, &history);
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            // lost descent; restart from steepest descent
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut accepted = line_search(
            &mut objective,
            &x,
            f,
            &dir,
            slope,
            initial_step(&g, &history),
        );
        if accepted.is_none() && !history.is_empty() {
            // quasi-Newton direction failed; retry once along steepest descent
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            accepted = line_search(
                &mut objective,
                &x,
                f,
                &dir,
                slope,
                initial_step(&g, &history),
            );
        }
        let Some((xn, fn_, gn)) = accepted else {
            exit = ExitReason::Stalled;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if history.len() == settings.memory.max(1) {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let improvement = f - fn_;
        x = xn;
        f = fn_;
        g = gn;
        iterations = it;
        trace.push(TraceEntry {
            iteration: it,
            value: f,
            grad_norm: norm(&g),
        });
        if improvement.abs() <= 1e-15 * f.abs().max(1.0) && norm(&g) > settings.grad_tol {
            exit = ExitReason::Stalled;
            break;
        }
    }
    if norm(&g) <= settings.grad_tol {
        exit = ExitReason::GradientTolerance;
    }
    Ok(OptimResult {
        x,
        value: f,
        grad: g,
        iterations,
        exit,
        trace,
    })
}

fn initial_step(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> f64 {
    if history.is_empty() {
        (1.0 / norm(g)).min(1.0)
    } else {
        1.0
    }
}

/// Backtracking until the Armijo condition holds.
fn line_search<F>(
    objective: &mut F,
    x: &[f64],
    f: f64,
    dir: &[f64],
    slope: f64,
    mut step: f64,
) -> Option<(Vec<f64>, f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    for _ in 0..MAX_BACKTRACKS {
        let trial: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + step * d).collect();
        if let Ok((ft, gt)) = objective(&trial) {
            if ft.is_finite()
                && gt.iter().all(|v| v.is_finite())
                && ft <= f + ARMIJO_C1 * step * slope
            {
                return Some((trial, ft, gt));
            }
        }
        step *= 0.5;
    }
    None
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            Ok((v, g))
        };
        let settings = OptimizerSettings {
            max_iters: 1000,
            grad_tol: 1e-8,
            memory: 8,
        };
        let r = minimize(f, &[-1.2, 1.0], &settings).unwrap();
        assert_eq!(r.exit, ExitReason::GradientTolerance);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
        assert!(r.trace.windows(2).all(|w| w[1].value <= w[0].value));
    }

    #[test]
    fn infeasible_region_is_avoided() {
        // log barrier: undefined for x <= 0
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            if x[0] <= 0.0 {
                return Err(Error::NonFinite("log".into()));
            }
            Ok((x[0] - 2.0 * x[0].ln(), vec![1.0 - 2.0 / x[0]]))
        };
        let r = minimize(f, &[0.1], &OptimizerSettings::default()).unwrap();
        assert!((r.x[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn bad_start_is_an_error() {
        let f = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![0.0])) };
        assert!(matches!(
            minimize(f, &[0.0], &OptimizerSettings::default()),
            Err(Error::Diverged { .. })
        ));
    }
}
