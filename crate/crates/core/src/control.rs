//! Distortion-aware pulse optimization for the Rydberg excitation and
//! pre-distortion of target pulses through a known kernel.
//!
//! Controls are optimized in box-normalized coordinates `z = (u - lo)/(hi - lo)`
//! so both channels share a unit box. When a kernel is given the atom sees
//! `apply(kernel, u)` for each channel over the lengthened horizon, and the
//! gradient is pulled back through the kernel Jacobian.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_json;
use crate::optim::{projected_gradient, projected_lbfgs, Bounds, Outcome, Settings, Termination};
use crate::pulse::{rng_from_seed, Pulse};
use crate::rydberg::{cost_gradient, excitation_cost, ControlSchedule, DensityMatrix, RydbergSystem, G, R};
use crate::volterra::VolterraKernel;

pub const BLUE_RISE_TIME: f64 = 0.15;
pub const RED_RISE_TIME: f64 = 0.1;
pub const DEFAULT_MAX_RABI: f64 = 2.0 * PI * 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerMode {
    /// Limited-memory quasi-Newton with projection onto the box.
    #[serde(rename = "box-qn")]
    BoxQn,
    /// Projected gradient descent with the rise-speed penalty.
    #[serde(rename = "penalty-pg")]
    PenaltyPg,
}

impl OptimizerMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "box-qn" => Ok(Self::BoxQn),
            "penalty-pg" => Ok(Self::PenaltyPg),
            _ => Err(Error::invalid(format!(
                "unknown optimizer mode '{s}'; valid modes: box-qn, penalty-pg"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub mode: OptimizerMode,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Largest normalized control change of the first trial step.
    pub step_scale: f64,
    /// `[lo, hi]` for the blue and red Rabi frequencies, rad/µs.
    pub box_bounds: [[f64; 2]; 2],
    /// Maximum `|u(j+1) - u(j)| / dt` for blue and red, rad/µs².
    pub rise_speed_limit: [f64; 2],
    pub rise_penalty_weight: f64,
    pub history_size: usize,
    pub seed: u64,
    /// Uniform perturbation of the initial guess, as a fraction of the box width.
    pub perturbation: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::with_max_rabi(DEFAULT_MAX_RABI)
    }
}

impl OptimizerConfig {
    /// Box `[0, max]` on both channels with rise limits `max / rise_time`.
    pub fn with_max_rabi(max: f64) -> Self {
        Self {
            mode: OptimizerMode::BoxQn,
            max_iterations: 300,
            gradient_tolerance: 1e-9,
            step_scale: 0.1,
            box_bounds: [[0.0, max], [0.0, max]],
            rise_speed_limit: [max / BLUE_RISE_TIME, max / RED_RISE_TIME],
            rise_penalty_weight: 10.0,
            history_size: 12,
            seed: 0,
            perturbation: 0.0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for [lo, hi] in self.box_bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::validation(format!("invalid box bounds [{lo}, {hi}]")));
            }
        }
        if self.rise_speed_limit.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::validation("rise_speed_limit must be positive"));
        }
        if !(self.gradient_tolerance > 0.0) || !(self.step_scale > 0.0) {
            return Err(Error::validation("gradient_tolerance and step_scale must be positive"));
        }
        if !(self.rise_penalty_weight >= 0.0) || !(self.perturbation >= 0.0) {
            return Err(Error::validation(
                "rise_penalty_weight and perturbation must be non-negative",
            ));
        }
        if self.history_size == 0 {
            return Err(Error::validation("history_size must be at least 1"));
        }
        Ok(())
    }

    fn settings(&self) -> Settings {
        Settings {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            relative_decrease: 1e-12,
            initial_step: self.step_scale,
            history: self.history_size,
        }
    }

    fn width(&self, ch: usize) -> f64 {
        self.box_bounds[ch][1] - self.box_bounds[ch][0]
    }
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    pub controls: ControlSchedule,
    /// The pulses the atom actually sees; equal to `controls` without a kernel.
    pub distorted_controls: ControlSchedule,
    /// Objective (cost plus rise penalty) of every accepted iterate.
    pub cost_trace: Vec<f64>,
    pub final_cost: f64,
    /// Excitation error of the final controls, without the penalty.
    pub excitation_error: f64,
    pub rise_penalty: f64,
    pub termination_reason: Termination,
    pub evaluations: usize,
}

#[derive(Serialize)]
pub struct ResultSummary {
    pub duration: f64,
    pub steps: usize,
    pub distorted_steps: usize,
    pub final_cost: f64,
    pub excitation_error: f64,
    pub rise_penalty: f64,
    pub termination_reason: Termination,
    pub iterations: usize,
    pub evaluations: usize,
    pub cost_trace: Vec<f64>,
}

impl OptimizationResult {
    pub fn summary(&self) -> ResultSummary {
        ResultSummary {
            duration: self.controls.duration(),
            steps: self.controls.steps(),
            distorted_steps: self.distorted_controls.steps(),
            final_cost: self.final_cost,
            excitation_error: self.excitation_error,
            rise_penalty: self.rise_penalty,
            termination_reason: self.termination_reason,
            iterations: self.cost_trace.len() - 1,
            evaluations: self.evaluations,
            cost_trace: self.cost_trace.clone(),
        }
    }
}

/// `Jᵀ · dC/ds`: pulls an output-space gradient back to the kernel input.
pub fn chain_gradient(dc_ds: &[f64], kernel: &VolterraKernel, x: &Pulse) -> Result<Vec<f64>> {
    kernel.vjp(x.samples(), dc_ds)
}

/// Applies `kernel` to both channels; without a kernel returns a copy.
pub fn distort_schedule(
    controls: &ControlSchedule,
    kernel: Option<&VolterraKernel>,
) -> Result<ControlSchedule> {
    match kernel {
        None => Ok(controls.clone()),
        Some(k) => ControlSchedule::new(k.apply(controls.omega_b()), k.apply(controls.omega_r())),
    }
}

/// Excitation error when both channels pass through `kernel` first.
pub fn evaluate_distorted(
    sys: &RydbergSystem,
    controls: &ControlSchedule,
    kernel: &VolterraKernel,
) -> Result<f64> {
    excitation_cost(sys, &distort_schedule(controls, Some(kernel))?)
}

/// Normalized quadratic penalty `w Σ (max(0, |Δu|/dt − limit)/limit)²` and its
/// gradient with respect to `u`.
pub fn rise_penalty(u: &[f64], dt: f64, limit: f64, weight: f64) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = vec![0.0; u.len()];
    if weight == 0.0 {
        return (0.0, grad);
    }
    for j in 0..u.len().saturating_sub(1) {
        let diff = u[j + 1] - u[j];
        let excess = diff.abs() / dt - limit;
        if excess > 0.0 {
            let e = excess / limit;
            value += weight * e * e;
            let d = 2.0 * weight * e / limit / dt * diff.signum();
            grad[j + 1] += d;
            grad[j] -= d;
        }
    }
    (value, grad)
}

/// Counterintuitive Gaussian pair: red peaks at 0.4 T, blue at 0.6 T, width
/// T/6, both at mid-box amplitude unless the steepest flank of the Gaussian
/// would exceed the channel's rise-speed limit, in which case the amplitude is
/// lowered to meet it.
pub fn initial_guess(steps: usize, dt: f64, cfg: &OptimizerConfig) -> Result<ControlSchedule> {
    if steps == 0 {
        return Err(Error::invalid("control schedule needs at least one step"));
    }
    let t = steps as f64 * dt;
    let sigma = t / 6.0;
    let mut rng = rng_from_seed(cfg.seed);
    let mut channel = |ch: usize, center: f64| -> Vec<f64> {
        let [lo, hi] = cfg.box_bounds[ch];
        // peak slope of a·exp(-x²/2σ²) is a/(σ√e)
        let amp = (0.5 * (lo + hi)).min(cfg.rise_speed_limit[ch] * sigma * 0.5f64.exp());
        (0..steps)
            .map(|j| {
                let x = ((j as f64 + 0.5) * dt - center) / sigma;
                let mut v = amp * (-0.5 * x * x).exp();
                if cfg.perturbation > 0.0 {
                    use rand::Rng;
                    v += cfg.perturbation * (hi - lo) * rng.random_range(-1.0..1.0);
                }
                v.clamp(lo, hi)
            })
            .collect()
    };
    let blue = channel(0, 0.6 * t);
    let red = channel(1, 0.4 * t);
    ControlSchedule::from_samples(blue, red, dt)
}

struct Problem<'a> {
    sys: &'a RydbergSystem,
    kernel: Option<&'a VolterraKernel>,
    cfg: &'a OptimizerConfig,
    steps: usize,
    dt: f64,
    rho0: DensityMatrix,
    target: DensityMatrix,
}

struct Evaluation {
    cost: f64,
    penalty: f64,
    grad: Vec<f64>,
}

impl Problem<'_> {
    fn controls(&self, z: &[f64]) -> Result<ControlSchedule> {
        let (zb, zr) = z.split_at(self.steps);
        let denorm = |ch: usize, zc: &[f64]| -> Vec<f64> {
            let lo = self.cfg.box_bounds[ch][0];
            zc.iter().map(|v| lo + v * self.cfg.width(ch)).collect()
        };
        ControlSchedule::from_samples(denorm(0, zb), denorm(1, zr), self.dt)
    }

    fn normalize(&self, c: &ControlSchedule) -> Vec<f64> {
        let norm = |ch: usize, u: &[f64]| {
            let lo = self.cfg.box_bounds[ch][0];
            u.iter().map(|v| (v - lo) / self.cfg.width(ch)).collect::<Vec<_>>()
        };
        let mut z = norm(0, c.omega_b().samples());
        z.extend(norm(1, c.omega_r().samples()));
        z
    }

    fn evaluate(&self, z: &[f64]) -> Result<Evaluation> {
        let controls = self.controls(z)?;
        let seen = distort_schedule(&controls, self.kernel)?;
        let cg = cost_gradient(self.sys, &seen, &self.rho0, &self.target)?;
        let (gb, gr) = match self.kernel {
            None => (cg.d_omega_b, cg.d_omega_r),
            Some(k) => (
                chain_gradient(&cg.d_omega_b, k, controls.omega_b())?,
                chain_gradient(&cg.d_omega_r, k, controls.omega_r())?,
            ),
        };
        let mut penalty = 0.0;
        let mut grad = Vec::with_capacity(2 * self.steps);
        for (ch, (u, g)) in [(controls.omega_b(), gb), (controls.omega_r(), gr)].into_iter().enumerate() {
            let (p, pg) = rise_penalty(
                u.samples(),
                self.dt,
                self.cfg.rise_speed_limit[ch],
                self.cfg.rise_penalty_weight,
            );
            penalty += p;
            let w = self.cfg.width(ch);
            grad.extend(g.iter().zip(&pg).map(|(a, b)| (a + b) * w));
        }
        Ok(Evaluation { cost: cg.cost, penalty, grad })
    }
}

/// Minimizes the `|g⟩ → |r⟩` excitation error over `steps` piecewise-constant
/// samples spanning `duration`, starting from [`initial_guess`].
pub fn optimize_excitation(
    sys: &RydbergSystem,
    duration: f64,
    steps: usize,
    kernel: Option<&VolterraKernel>,
    cfg: &OptimizerConfig,
) -> Result<OptimizationResult> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::invalid(format!("duration must be positive, got {duration}")));
    }
    if steps == 0 {
        return Err(Error::invalid("control schedule needs at least one step"));
    }
    let start = initial_guess(steps, duration / steps as f64, cfg)?;
    optimize_from(sys, &start, kernel, cfg)
}

/// Same as [`optimize_excitation`] from a caller-supplied starting schedule.
pub fn optimize_from(
    sys: &RydbergSystem,
    start: &ControlSchedule,
    kernel: Option<&VolterraKernel>,
    cfg: &OptimizerConfig,
) -> Result<OptimizationResult> {
    cfg.validate()?;
    let problem = Problem {
        sys,
        kernel,
        cfg,
        steps: start.steps(),
        dt: start.dt(),
        rho0: DensityMatrix::pure(G),
        target: DensityMatrix::pure(R),
    };
    let z0 = problem.normalize(start);
    let bounds = Bounds::uniform(z0.len(), 0.0, 1.0);
    let objective = |z: &[f64]| -> Result<(f64, Vec<f64>)> {
        let e = problem.evaluate(z)?;
        Ok((e.cost + e.penalty, e.grad))
    };
    let outcome: Outcome = match cfg.mode {
        OptimizerMode::BoxQn => projected_lbfgs(objective, &z0, &bounds, &cfg.settings())?,
        OptimizerMode::PenaltyPg => projected_gradient(objective, &z0, &bounds, &cfg.settings())?,
    };
    let controls = problem.controls(&outcome.x)?;
    let last = problem.evaluate(&outcome.x)?;
    Ok(OptimizationResult {
        distorted_controls: distort_schedule(&controls, kernel)?,
        controls,
        final_cost: outcome.value,
        excitation_error: last.cost,
        rise_penalty: last.penalty,
        cost_trace: outcome.trace,
        termination_reason: outcome.reason,
        evaluations: outcome.evaluations,
    })
}

#[derive(Debug, Clone)]
pub struct PredistortResult {
    pub input: Pulse,
    /// Mean absolute deviation between the target and the distorted input.
    pub mean_abs_deviation: f64,
    pub converged: bool,
}

const HUBER_FINAL: f64 = 1e-8;

fn huber(r: f64, delta: f64) -> (f64, f64) {
    if r.abs() <= delta {
        (0.5 * r * r / delta, r / delta)
    } else {
        (r.abs() - 0.5 * delta, r.signum())
    }
}

/// Finds an input of length `N - R + 1` whose distortion best matches
/// `target` in mean absolute deviation. The ℓ1 objective is smoothed with a
/// Huber function whose width is annealed down to 1e-8, warm-starting each
/// stage; the first stage starts from the target's leading samples.
pub fn predistort(
    kernel: &VolterraKernel,
    target: &Pulse,
    cfg: &OptimizerConfig,
) -> Result<PredistortResult> {
    let r = kernel.memory_length();
    let n = target.len();
    if n < r {
        return Err(Error::invalid(format!(
            "target has {n} samples but the kernel memory is {r}; need at least {r}"
        )));
    }
    let len = n - r + 1;
    let t = target.samples();
    let objective = |delta: f64| {
        move |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let y = kernel.apply_samples(x);
            let mut value = 0.0;
            let mut dy = vec![0.0; n];
            for i in 0..n {
                let (h, d) = huber(t[i] - y[i], delta);
                value += h;
                dy[i] = -d / n as f64;
            }
            Ok((value / n as f64, kernel.vjp(x, &dy)?))
        }
    };
    let scale = target.max_abs().max(1.0);
    let mut x = t[..len].to_vec();
    let settings = Settings {
        max_iterations: cfg.max_iterations.max(1),
        gradient_tolerance: 1e-14,
        relative_decrease: 1e-14,
        initial_step: cfg.step_scale * scale,
        history: cfg.history_size,
    };
    let mut delta = 1e-2 * scale;
    let converged = loop {
        let out = projected_lbfgs(objective(delta), &x, &Bounds::unbounded(len), &settings)?;
        x = out.x;
        if delta <= HUBER_FINAL {
            break out.reason == Termination::Converged;
        }
        delta = (delta * 1e-2).max(HUBER_FINAL);
    };
    let y = kernel.apply_samples(&x);
    let mad = t.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
    Ok(PredistortResult {
        input: Pulse::new(x, target.dt())?.with_label("predistorted"),
        mean_abs_deviation: mad,
        converged,
    })
}
