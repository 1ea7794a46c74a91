//! Box-constrained first-order minimizers.
//!
//! `projected_lbfgs` runs a limited-memory quasi-Newton direction restricted
//! to the free variables (those not pinned at a bound by the gradient) with a
//! projected Armijo backtracking search. `projected_gradient` is the plain
//! projected steepest-descent variant with an adaptive step.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIter,
    LineSearchFailure,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIter => "max_iter",
            Termination::LineSearchFailure => "line_search_failure",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Settings {
    pub max_iterations: usize,
    /// Stop when the largest projected-gradient component falls below this.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step lowers the objective by less than this
    /// fraction of its magnitude.
    pub relative_decrease: f64,
    /// Largest component of the first trial step.
    pub initial_step: f64,
    pub history: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-8,
            relative_decrease: 1e-12,
            initial_step: 0.1,
            history: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    /// Objective of every accepted iterate, starting with the initial point.
    pub trace: Vec<f64>,
    pub reason: Termination,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self { lower: vec![f64::NEG_INFINITY; n], upper: vec![f64::INFINITY; n] }
    }

    pub fn uniform(n: usize, lo: f64, hi: f64) -> Self {
        Self { lower: vec![lo; n], upper: vec![hi; n] }
    }

    fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Variables sitting on a bound with the gradient pushing outward.
    fn pinned(&self, x: &[f64], g: &[f64], i: usize) -> bool {
        (x[i] <= self.lower[i] && g[i] > 0.0) || (x[i] >= self.upper[i] && g[i] < 0.0)
    }

    fn projected_gradient_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        (0..x.len())
            .filter(|&i| !self.pinned(x, g, i))
            .map(|i| g[i].abs())
            .fold(0.0, f64::max)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

struct Evaluator<F> {
    f: F,
    count: usize,
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Evaluator<F> {
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.count += 1;
        let (v, g) = (self.f)(x)?;
        if !v.is_finite() || g.iter().any(|d| !d.is_finite()) {
            return Err(Error::Numerical(format!(
                "objective or gradient is not finite at evaluation {}",
                self.count
            )));
        }
        Ok((v, g))
    }
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

fn check_start(x0: &[f64], bounds: &Bounds) -> Result<()> {
    if x0.is_empty() {
        return Err(Error::invalid("nothing to optimize: zero variables"));
    }
    if bounds.lower.len() != x0.len() || bounds.upper.len() != x0.len() {
        return Err(Error::invalid("bounds do not match the number of variables"));
    }
    if bounds.lower.iter().zip(&bounds.upper).any(|(l, u)| l > u) {
        return Err(Error::invalid("lower bound exceeds upper bound"));
    }
    Ok(())
}

pub fn projected_lbfgs<F>(f: F, x0: &[f64], bounds: &Bounds, s: &Settings) -> Result<Outcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    check_start(x0, bounds)?;
    let mut ev = Evaluator { f, count: 0 };
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let (mut fx, mut g) = ev.eval(&x)?;
    let mut trace = vec![fx];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let n = x.len();

    for _ in 0..s.max_iterations {
        if bounds.projected_gradient_norm(&x, &g) <= s.gradient_tolerance {
            return Ok(finish(x, fx, trace, Termination::Converged, ev.count));
        }
        let free: Vec<bool> = (0..n).map(|i| !bounds.pinned(&x, &g, i)).collect();
        let mut d = two_loop(&g, &free, &memory);
        if dot(&g, &d) >= 0.0 || memory.is_empty() {
            memory.clear();
            d = (0..n).map(|i| if free[i] { -g[i] } else { 0.0 }).collect();
        }
        let mut alpha = if memory.is_empty() { s.initial_step / max_abs(&d) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            bounds.project(&mut trial);
            let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &step);
            if decrease < 0.0 {
                let (ft, gt) = ev.eval(&trial)?;
                if ft <= fx + ARMIJO * decrease {
                    accepted = Some((trial, ft, gt, step));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew, gnew, step)) = accepted else {
            if memory.is_empty() {
                return Ok(finish(x, fx, trace, Termination::LineSearchFailure, ev.count));
            }
            memory.clear();
            continue;
        };
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&step, &y);
        if sy > 1e-12 * dot(&step, &step).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if memory.len() == s.history.max(1) {
                memory.pop_front();
            }
            memory.push_back((step, y, 1.0 / sy));
        }
        let small = fx - fnew <= s.relative_decrease * fx.abs().max(1e-300);
        x = xn;
        fx = fnew;
        g = gnew;
        trace.push(fx);
        if small {
            return Ok(finish(x, fx, trace, Termination::Converged, ev.count));
        }
    }
    let reason = if bounds.projected_gradient_norm(&x, &g) <= s.gradient_tolerance {
        Termination::Converged
    } else {
        Termination::MaxIter
    };
    Ok(finish(x, fx, trace, reason, ev.count))
}

/// `-H g` on the free variables from the stored curvature pairs.
fn two_loop(g: &[f64], free: &[bool], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> {
        v.iter().zip(free).map(|(x, &f)| if f { *x } else { 0.0 }).collect()
    };
    let mut q = mask(g);
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(&mask(s), &q);
        for (qi, yi) in q.iter_mut().zip(mask(y)) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let (s, y) = (mask(s), mask(y));
        let yy = dot(&y, &y);
        if yy > 0.0 {
            let gamma = dot(&s, &y) / yy;
            if gamma > 0.0 {
                q.iter_mut().for_each(|v| *v *= gamma);
            }
        }
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(&mask(y), &q);
        for (qi, si) in q.iter_mut().zip(mask(s)) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

pub fn projected_gradient<F>(f: F, x0: &[f64], bounds: &Bounds, s: &Settings) -> Result<Outcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    check_start(x0, bounds)?;
    let mut ev = Evaluator { f, count: 0 };
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let (mut fx, mut g) = ev.eval(&x)?;
    let mut trace = vec![fx];
    let mut alpha = s.initial_step / max_abs(&g).max(1e-300);

    for _ in 0..s.max_iterations {
        if bounds.projected_gradient_norm(&x, &g) <= s.gradient_tolerance {
            return Ok(finish(x, fx, trace, Termination::Converged, ev.count));
        }
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - alpha * gi).collect();
            bounds.project(&mut trial);
            let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &step);
            if decrease < 0.0 {
                let (ft, gt) = ev.eval(&trial)?;
                if ft <= fx + ARMIJO * decrease {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            return Ok(finish(x, fx, trace, Termination::LineSearchFailure, ev.count));
        };
        let small = fx - fnew <= s.relative_decrease * fx.abs().max(1e-300);
        x = xn;
        fx = fnew;
        g = gnew;
        trace.push(fx);
        alpha *= 2.0;
        if small {
            return Ok(finish(x, fx, trace, Termination::Converged, ev.count));
        }
    }
    Ok(finish(x, fx, trace, Termination::MaxIter, ev.count))
}

fn finish(x: Vec<f64>, value: f64, trace: Vec<f64>, reason: Termination, evaluations: usize) -> Outcome {
    Outcome { x, value, trace, reason, evaluations }
}
