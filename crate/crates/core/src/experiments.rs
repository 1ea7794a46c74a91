//! Figure-level sweeps: kernel recovery, linear vs. quadratic prediction,
//! orthogonalization, training-data frequency content, excitation errors
//! under distortion and distortion-aware correction.
//!
//! Every sweep is deterministic in its seed. Results come back as typed
//! records for programmatic checks and as [`Table`]s for CSV export.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::control::{
    evaluate_distorted, optimize_excitation, optimize_from, predistort, OptimizationResult,
    OptimizerConfig, OptimizerMode,
};
use crate::error::{Error, Result};
use crate::estimate::{
    build_design_matrix, kernel_errors, mase, solve_linear_only, solve_normal_equations,
    solve_orthogonalized, EstimateReport, KernelErrors,
};
use crate::io::write_atomic;
use crate::pulse::{
    add_measurement_noise, generate_cosine, generate_gaussian_pulse, generate_random_noise,
    generate_spline, Pulse, TrainingPair,
};
use crate::rydberg::{excitation_cost, RydbergSystem};
use crate::volterra::{preset, small_study_kernel, VolterraKernel, PRESET_NAMES};

/// Amplitude of the random training and test pulses for the large kernels.
/// The quadratic part of the presets is only visible above the 1e-4 output
/// noise at amplitudes of order 10³.
pub const TRAINING_AMPLITUDE: f64 = 2000.0;
pub const TRAINING_STEPS: usize = 4000;
pub const OUTPUT_NOISE: f64 = 1e-4;
pub const ESTIMATED_MEMORY: usize = 60;
pub const PREDICTION_TESTS: usize = 10;

pub const STUDY_STEPS: usize = 500;
pub const STUDY_TESTS: usize = 50;
pub const STUDY_NOISE: f64 = 1e-9;
pub const STUDY_TRAIN_PULSES: usize = 3;
pub const STUDY_MAX_PULSES: usize = 5;
/// Knot count of the first spline training pulse; each further pulse adds
/// `STUDY_KNOT_STEP`. Fewer knots leave the design rank deficient at the
/// larger memory lengths.
pub const STUDY_KNOTS: usize = 40;
/// Independent noise draws pooled by the noisy orthogonalization study.
pub const STUDY_REALIZATIONS: usize = 8;
pub const STUDY_KNOT_STEP: usize = 20;
/// Estimated memory lengths of the small-kernel sweeps (true memory is 5).
pub const STUDY_MEMORY: [usize; 10] = [5, 6, 7, 8, 9, 10, 11, 12, 13, 14];
/// Pulses per training set at equal data budget.
pub const BUDGET_PULSES: usize = 4;
pub const HIGH_KNOTS: usize = 100;

pub const DURATIONS: [f64; 5] = [0.1, 0.15, 0.2, 0.3, 0.4];
pub const CONTROL_DT: f64 = 0.002;
/// Rabi-frequency ceiling of the reproduction runs, rad/µs.
pub const MAX_RABI: f64 = 2.0 * PI * 150.0;
pub const OPTIMIZER_ITERATIONS: usize = 300;

/// Derives an independent stream seed from a base seed, a tag and an index.
pub fn mix(seed: u64, tag: u64, i: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(i.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean with a 95% normal-approximation confidence interval.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let half = if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        } else {
            0.0
        };
        Stat { mean, ci_low: mean - half, ci_high: mean + half }
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }
}

/// A CSV table with `#`-prefixed notes above the header row.
#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub notes: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            notes: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn note(mut self, s: impl Into<String>) -> Self {
        self.notes.push(s.into());
        self
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        for n in &self.notes {
            out.push_str("# ");
            out.push_str(n);
            out.push('\n');
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let wrap = |e: csv::Error| Error::Numerical(format!("csv encoding failed: {e}"));
        w.write_record(&self.columns).map_err(wrap)?;
        for r in &self.rows {
            w.write_record(r).map_err(wrap)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
        out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.csv", self.name));
        write_atomic(&path, self.to_csv()?.as_bytes())?;
        Ok(path)
    }
}

fn num(v: f64) -> String {
    format!("{v:.10e}")
}

// ---------------------------------------------------------------------------
// Large-kernel estimation

/// Output of `truth` recorded for `L + memory - 1` samples, as a measurement
/// window long enough for any fit up to `memory` lags. Fits with fewer lags
/// truncate it.
pub fn record(truth: &VolterraKernel, x: &Pulse, memory: usize) -> Result<Pulse> {
    Ok(truth.with_memory_length(memory.max(truth.memory_length()))?.apply(x))
}

#[derive(Debug, Clone)]
pub struct PresetEstimate {
    pub name: String,
    pub truth: VolterraKernel,
    pub quadratic: EstimateReport,
    pub linear: EstimateReport,
    pub errors: KernelErrors,
}

impl PresetEstimate {
    /// Largest estimated coefficient (either order) at lags `>= from`,
    /// relative to the largest coefficient overall.
    pub fn tail_ratio(&self, from: usize) -> f64 {
        let k = &self.quadratic.kernel;
        let c = k.to_coefficients();
        let max = c.0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let r = k.memory_length();
        let mut tail = 0.0f64;
        for a in from..r {
            tail = tail.max(k.h1()[a].abs());
            for b in 0..r {
                let scale = if a == b { 1.0 } else { 2.0 };
                tail = tail.max(scale * k.h2(a, b).abs());
            }
        }
        tail / max
    }
}

/// One random training pulse per preset, noisy output, quadratic and linear
/// fits with [`ESTIMATED_MEMORY`] lags.
pub fn estimate_preset(name: &str, seed: u64) -> Result<PresetEstimate> {
    let truth = preset(name)?.build()?;
    let x = generate_random_noise(TRAINING_STEPS, TRAINING_AMPLITUDE, mix(seed, 1, 0))?;
    let y = add_measurement_noise(&record(&truth, &x, ESTIMATED_MEMORY)?, OUTPUT_NOISE, mix(seed, 2, 0))?;
    let pairs = [TrainingPair::new(x, y)];
    let quadratic = solve_orthogonalized(&build_design_matrix(&pairs, ESTIMATED_MEMORY)?)?;
    let linear = solve_linear_only(&pairs, ESTIMATED_MEMORY)?;
    let errors = kernel_errors(&truth, &quadratic.kernel)?;
    Ok(PresetEstimate { name: name.to_string(), truth, quadratic, linear, errors })
}

pub fn estimate_presets(names: &[&str], seed: u64) -> Result<Vec<PresetEstimate>> {
    names.par_iter().map(|n| estimate_preset(n, seed)).collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PredictionErrors {
    pub quadratic: Stat,
    pub linear: Stat,
}

/// Output MASE of both fits on smooth test pulses at training amplitude.
pub fn prediction_errors(est: &PresetEstimate, seed: u64) -> Result<PredictionErrors> {
    let mut quad = Vec::with_capacity(PREDICTION_TESTS);
    let mut lin = Vec::with_capacity(PREDICTION_TESTS);
    for i in 0..PREDICTION_TESTS {
        let test = generate_spline(STUDY_STEPS, 20 + 5 * i, mix(seed, 3, i as u64))?
            .scaled(TRAINING_AMPLITUDE)?;
        quad.push(output_mase(&est.truth, &est.quadratic.kernel, &test)?);
        lin.push(output_mase(&est.truth, &est.linear.kernel, &test)?);
    }
    Ok(PredictionErrors { quadratic: Stat::of(&quad), linear: Stat::of(&lin) })
}

fn fig1_and_3(seed: u64) -> Result<Vec<Table>> {
    let ests = estimate_presets(&PRESET_NAMES, seed)?;
    let mut fig1 = Table::new("fig1b", &["distortion", "method", "mean_error", "ci_low", "ci_high"])
        .note(format!(
            "test-output MASE of quadratic vs linear estimates; training: one {TRAINING_STEPS}-step random pulse, amplitude {TRAINING_AMPLITUDE}, noise {OUTPUT_NOISE}, R_est {ESTIMATED_MEMORY}"
        ))
        .note(format!("{PREDICTION_TESTS} spline test pulses of {STUDY_STEPS} steps at the same amplitude"));
    let mut fig3 = Table::new("fig3_errors", &["distortion", "h0_abs_error", "h1_mase", "h2_mase", "tail_ratio"])
        .note("kernel MASE of the quadratic estimate vs truth; tail_ratio = max |coefficient| at lags >= true R over max |coefficient|");
    for e in &ests {
        let p = prediction_errors(e, seed)?;
        for (method, s) in [("quadratic", p.quadratic), ("linear", p.linear)] {
            fig1.push(vec![e.name.clone(), method.into(), num(s.mean), num(s.ci_low), num(s.ci_high)]);
        }
        fig3.push(vec![
            e.name.clone(),
            num(e.errors.h0_abs),
            num(e.errors.h1_mase),
            num(e.errors.h2_mase),
            num(e.tail_ratio(e.truth.memory_length())),
        ]);
    }
    let c = ests.iter().find(|e| e.name == "C").expect("C is a preset");
    let mut h1 = Table::new("fig3_h1_C", &["lag", "true", "estimated"]);
    let est_c = &c.quadratic.kernel;
    let truth_c = c.truth.with_memory_length(ESTIMATED_MEMORY)?;
    for j in 0..ESTIMATED_MEMORY {
        h1.push(vec![j.to_string(), num(truth_c.h1()[j]), num(est_c.h1()[j])]);
    }
    let mut h2 = Table::new("fig3_h2_C", &["lag1", "lag2", "true", "estimated"]);
    for a in 0..ESTIMATED_MEMORY {
        for b in 0..ESTIMATED_MEMORY {
            h2.push(vec![a.to_string(), b.to_string(), num(truth_c.h2(a, b)), num(est_c.h2(a, b))]);
        }
    }
    Ok(vec![fig1, fig3, h1, h2])
}

// ---------------------------------------------------------------------------
// Small-kernel studies

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingKind {
    Random,
    Spline,
    Cosine,
    Gaussian,
}

impl TrainingKind {
    pub const ALL: [TrainingKind; 4] =
        [TrainingKind::Random, TrainingKind::Spline, TrainingKind::Cosine, TrainingKind::Gaussian];

    pub fn name(self) -> &'static str {
        match self {
            TrainingKind::Random => "random",
            TrainingKind::Spline => "spline",
            TrainingKind::Cosine => "cosine",
            TrainingKind::Gaussian => "gaussian",
        }
    }
}

/// Training inputs of one kind. `count` pulses of [`STUDY_STEPS`] samples
/// each, every pulse with its own frequency, knot pattern or width; splines
/// carry `knots` knots.
pub fn training_inputs(kind: TrainingKind, count: usize, knots: usize, seed: u64) -> Result<Vec<Pulse>> {
    (0..count)
        .map(|i| {
            let s = mix(seed, 10, i as u64);
            match kind {
                TrainingKind::Random => generate_random_noise(STUDY_STEPS, 1.0, s),
                TrainingKind::Spline => generate_spline(STUDY_STEPS, knots, s),
                TrainingKind::Cosine => {
                    let phase = (s % 1000) as f64 / 1000.0 * 2.0 * PI;
                    generate_cosine(STUDY_STEPS, 3.0 + 7.0 * i as f64, 1.0, phase)
                }
                TrainingKind::Gaussian => generate_gaussian_pulse(
                    STUDY_STEPS,
                    0.5 * STUDY_STEPS as f64,
                    20.0 + 15.0 * i as f64,
                    1.0,
                ),
            }
        })
        .collect()
}

/// Smooth spline test pulses with varied knot counts.
pub fn study_tests(seed: u64) -> Result<Vec<Pulse>> {
    (0..STUDY_TESTS)
        .map(|i| generate_spline(STUDY_STEPS, 10 + (i % 40), mix(seed, 20, i as u64)))
        .collect()
}

fn study_pairs(truth: &VolterraKernel, inputs: Vec<Pulse>, noise: f64, seed: u64) -> Result<Vec<TrainingPair>> {
    let longest = STUDY_MEMORY[STUDY_MEMORY.len() - 1];
    inputs
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            let y = add_measurement_noise(&record(truth, &x, longest)?, noise, mix(seed, 30, i as u64))?;
            Ok(TrainingPair::new(x, y))
        })
        .collect()
}

/// MASE between the true and predicted outputs for `x`, both kernels lifted
/// to the longer memory so the outputs share a length.
pub fn output_mase(truth: &VolterraKernel, est: &VolterraKernel, x: &Pulse) -> Result<f64> {
    let r = truth.memory_length().max(est.memory_length());
    let a = truth.with_memory_length(r)?.apply(x);
    let b = est.with_memory_length(r)?.apply(x);
    mase(a.samples(), b.samples())
}

fn test_errors(truth: &VolterraKernel, est: &VolterraKernel, tests: &[Pulse]) -> Result<Vec<f64>> {
    tests.iter().map(|t| output_mase(truth, est, t)).collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MethodPoint {
    pub memory: usize,
    pub coefficients: usize,
    pub qr: Stat,
    pub normal: Stat,
    /// Paired per-test difference, normal minus QR.
    pub gap: Stat,
}

/// QR vs. normal-equation test error across estimated memory lengths. Each
/// entry of `realizations` is one training set; test errors are pooled over
/// all of them.
pub fn orthogonalization_sweep(
    realizations: &[Vec<TrainingPair>],
    truth: &VolterraKernel,
    tests: &[Pulse],
    memories: &[usize],
) -> Result<Vec<MethodPoint>> {
    memories
        .par_iter()
        .map(|&r| {
            let (mut qr, mut normal) = (Vec::new(), Vec::new());
            for pairs in realizations {
                let p = build_design_matrix(pairs, r)?;
                qr.extend(test_errors(truth, &solve_orthogonalized(&p)?.kernel, tests)?);
                normal.extend(test_errors(truth, &solve_normal_equations(&p)?.kernel, tests)?);
            }
            let gap: Vec<f64> = normal.iter().zip(&qr).map(|(n, q)| n - q).collect();
            Ok(MethodPoint {
                memory: r,
                coefficients: crate::volterra::coefficient_count(r),
                qr: Stat::of(&qr),
                normal: Stat::of(&normal),
                gap: Stat::of(&gap),
            })
        })
        .collect()
}

/// Fig. 5(a)/(c): spline training, error vs. number of coefficients. With
/// noise the training inputs stay fixed and the noise is redrawn
/// `STUDY_REALIZATIONS` times.
pub fn orthogonalization_study(noise: f64, seed: u64) -> Result<Vec<MethodPoint>> {
    let truth = small_study_kernel().build()?;
    let inputs: Vec<Pulse> = (0..STUDY_TRAIN_PULSES)
        .map(|i| generate_spline(STUDY_STEPS, STUDY_KNOTS + STUDY_KNOT_STEP * i, mix(seed, 40, i as u64)))
        .collect::<Result<_>>()?;
    let draws = if noise > 0.0 { STUDY_REALIZATIONS } else { 1 };
    let realizations = (0..draws)
        .map(|k| study_pairs(&truth, inputs.clone(), noise, mix(seed, 41, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    orthogonalization_sweep(&realizations, &truth, &study_tests(seed)?, &STUDY_MEMORY)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DataPoint {
    pub pulses: usize,
    pub qr: Stat,
    pub normal: Stat,
}

/// Fig. 5(b)/(d): error vs. number of spline training pulses, pooled over
/// the memory sweep.
pub fn data_amount_study(noise: f64, seed: u64) -> Result<Vec<DataPoint>> {
    let truth = small_study_kernel().build()?;
    let tests = study_tests(seed)?;
    (1..=STUDY_MAX_PULSES)
        .map(|n| {
            let inputs: Vec<Pulse> = (0..n)
                .map(|i| generate_spline(STUDY_STEPS, STUDY_KNOTS + STUDY_KNOT_STEP * i, mix(seed, 40, i as u64)))
                .collect::<Result<_>>()?;
            let pairs = study_pairs(&truth, inputs, noise, seed)?;
            let pooled: Vec<(Vec<f64>, Vec<f64>)> = STUDY_MEMORY
                .par_iter()
                .map(|&r| {
                    let p = build_design_matrix(&pairs, r)?;
                    Ok((
                        test_errors(&truth, &solve_orthogonalized(&p)?.kernel, &tests)?,
                        test_errors(&truth, &solve_normal_equations(&p)?.kernel, &tests)?,
                    ))
                })
                .collect::<Result<_>>()?;
            let qr: Vec<f64> = pooled.iter().flat_map(|p| p.0.iter().copied()).collect();
            let normal: Vec<f64> = pooled.iter().flat_map(|p| p.1.iter().copied()).collect();
            Ok(DataPoint { pulses: n, qr: Stat::of(&qr), normal: Stat::of(&normal) })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct KindPoint {
    pub kind: TrainingKind,
    /// Pulse count, or knot count for splines in the content sweep.
    pub content: usize,
    pub memory: usize,
    pub error: Stat,
}

fn kind_errors(
    truth: &VolterraKernel,
    kind: TrainingKind,
    count: usize,
    knots: usize,
    noise: f64,
    tests: &[Pulse],
    memories: &[usize],
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let pairs = study_pairs(truth, training_inputs(kind, count, knots, seed)?, noise, seed)?;
    memories
        .par_iter()
        .map(|&r| {
            let est = solve_orthogonalized(&build_design_matrix(&pairs, r)?)?;
            test_errors(truth, &est.kernel, tests)
        })
        .collect()
}

/// Fig. 6(a)/(c): QR test error vs. memory at an equal budget of
/// [`BUDGET_PULSES`] × [`STUDY_STEPS`] training samples per kind.
pub fn frequency_study(noise: f64, seed: u64) -> Result<Vec<KindPoint>> {
    let truth = small_study_kernel().build()?;
    let tests = study_tests(seed)?;
    let mut out = Vec::new();
    for kind in TrainingKind::ALL {
        let errs = kind_errors(&truth, kind, BUDGET_PULSES, HIGH_KNOTS, noise, &tests, &STUDY_MEMORY, seed)?;
        for (r, e) in STUDY_MEMORY.iter().zip(errs) {
            out.push(KindPoint { kind, content: BUDGET_PULSES, memory: *r, error: Stat::of(&e) });
        }
    }
    Ok(out)
}

/// Mean error per kind pooled over the memory sweep at equal budget.
pub fn frequency_ranking(noise: f64, seed: u64) -> Result<Vec<(TrainingKind, Stat)>> {
    let truth = small_study_kernel().build()?;
    let tests = study_tests(seed)?;
    TrainingKind::ALL
        .iter()
        .map(|&kind| {
            let errs = kind_errors(&truth, kind, BUDGET_PULSES, HIGH_KNOTS, noise, &tests, &STUDY_MEMORY, seed)?;
            let pooled: Vec<f64> = errs.into_iter().flatten().collect();
            Ok((kind, Stat::of(&pooled)))
        })
        .collect()
}

/// Fig. 6(b)/(d): pooled error as the frequency content grows: more pulses
/// for random, cosine and Gaussian inputs, more knots in one spline.
pub fn content_study(noise: f64, seed: u64) -> Result<Vec<KindPoint>> {
    let truth = small_study_kernel().build()?;
    let tests = study_tests(seed)?;
    let mut out = Vec::new();
    for kind in TrainingKind::ALL {
        for level in 1..=STUDY_MAX_PULSES {
            let (count, knots, content) = match kind {
                TrainingKind::Spline => (1, 10 * 2usize.pow(level as u32 - 1), 10 * 2usize.pow(level as u32 - 1)),
                _ => (level, HIGH_KNOTS, level),
            };
            let errs = kind_errors(&truth, kind, count, knots, noise, &tests, &STUDY_MEMORY, seed)?;
            let pooled: Vec<f64> = errs.into_iter().flatten().collect();
            out.push(KindPoint { kind, content, memory: 0, error: Stat::of(&pooled) });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pre-distortion

#[derive(Debug, Clone)]
pub struct PredistortDemo {
    pub target: Pulse,
    pub input: Pulse,
    pub output: Pulse,
    pub mase: f64,
    pub converged: bool,
}

/// Gaussian control-scale target through distortion C.
pub fn predistort_gaussian(cfg: &OptimizerConfig) -> Result<PredistortDemo> {
    let kernel = preset("C")?.build()?;
    let target = generate_gaussian_pulse(300, 150.0, 25.0, 2.0 * PI * 15.0)?.with_dt(CONTROL_DT)?;
    predistort_demo(&kernel, target, cfg)
}

pub fn predistort_demo(kernel: &VolterraKernel, target: Pulse, cfg: &OptimizerConfig) -> Result<PredistortDemo> {
    let res = predistort(kernel, &target, cfg)?;
    let output = kernel.apply(&res.input);
    let err = mase(target.samples(), output.samples())?;
    Ok(PredistortDemo { target, input: res.input, output, mase: err, converged: res.converged })
}

/// Optimized control pulse zero-padded by `R - 1` samples as a target.
pub fn padded_target(p: &Pulse, kernel: &VolterraKernel) -> Result<Pulse> {
    let mut s = p.samples().to_vec();
    s.extend(std::iter::repeat_n(0.0, kernel.memory_length() - 1));
    Ok(Pulse::new(s, p.dt())?.with_label(p.label()))
}

fn predistort_tables() -> Result<Vec<Table>> {
    let cfg = reproduction_config(OptimizerMode::BoxQn);
    let demo = predistort_gaussian(&cfg)?;
    let mut t = Table::new("fig6_predistort_gaussian", &["step", "target", "predistorted_input", "distorted_output"])
        .note(format!("Gaussian target through distortion C; MASE(target, output) = {:e}", demo.mase));
    for n in 0..demo.target.len() {
        t.push(vec![
            n.to_string(),
            num(demo.target.samples()[n]),
            demo.input.samples().get(n).map_or(String::new(), |v| num(*v)),
            num(demo.output.samples()[n]),
        ]);
    }
    Ok(vec![t])
}

// ---------------------------------------------------------------------------
// Excitation under distortion

pub fn reproduction_config(mode: OptimizerMode) -> OptimizerConfig {
    OptimizerConfig {
        mode,
        max_iterations: OPTIMIZER_ITERATIONS,
        ..OptimizerConfig::with_max_rabi(MAX_RABI)
    }
}

pub fn steps_for(duration: f64) -> usize {
    (duration / CONTROL_DT).round().max(1.0) as usize
}

/// Optimized undistorted pulses for every duration.
pub fn ideal_sweep(sys: &RydbergSystem, cfg: &OptimizerConfig, durations: &[f64]) -> Result<Vec<OptimizationResult>> {
    durations
        .par_iter()
        .map(|&t| optimize_excitation(sys, t, steps_for(t), None, cfg))
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CorrectionPoint {
    pub duration: f64,
    pub ideal: f64,
    pub distorted: f64,
    pub corrected: f64,
}

/// Ideal pulses passed through `kernel`, then re-optimized with the kernel in
/// the loop starting from the ideal pulses.
pub fn correction_sweep(
    sys: &RydbergSystem,
    ideal: &[OptimizationResult],
    kernel: &VolterraKernel,
    cfg: &OptimizerConfig,
) -> Result<Vec<CorrectionPoint>> {
    ideal
        .par_iter()
        .map(|res| {
            let corrected = optimize_from(sys, &res.controls, Some(kernel), cfg)?;
            Ok(CorrectionPoint {
                duration: res.controls.duration(),
                ideal: excitation_cost(sys, &res.controls)?,
                distorted: evaluate_distorted(sys, &res.controls, kernel)?,
                corrected: corrected.excitation_error,
            })
        })
        .collect()
}

fn fig4(seed: u64) -> Result<Vec<Table>> {
    let sys = RydbergSystem::default();
    let cfg = OptimizerConfig { seed, ..reproduction_config(OptimizerMode::BoxQn) };
    let ideal = ideal_sweep(&sys, &cfg, &DURATIONS)?;
    let mut t = Table::new("fig4", &["duration_us", "distortion", "excitation_error"])
        .note(format!(
            "optimized undistorted pulses (box-qn, {OPTIMIZER_ITERATIONS} iterations, dt {CONTROL_DT} us, box [0, 2pi*150] rad/us) evaluated with and without each preset distortion"
        ));
    for res in &ideal {
        let d = res.controls.duration();
        t.push(vec![num(d), "ideal".into(), num(res.excitation_error)]);
        for name in PRESET_NAMES {
            let k = preset(name)?.build()?;
            t.push(vec![num(d), name.into(), num(evaluate_distorted(&sys, &res.controls, &k)?)]);
        }
    }
    Ok(vec![t])
}

fn correction_figure(name: &str, mode: OptimizerMode, seed: u64) -> Result<Vec<Table>> {
    let sys = RydbergSystem::default();
    let mut cfg = OptimizerConfig { seed, ..reproduction_config(mode) };
    if mode == OptimizerMode::BoxQn {
        // the quasi-Newton path only enforces the box
        cfg.rise_penalty_weight = 0.0;
    }
    let ideal = ideal_sweep(&sys, &cfg, &DURATIONS)?;
    let mut tables = Vec::new();
    for dist in ["C", "F"] {
        let k = preset(dist)?.build()?;
        let mut t = Table::new(&format!("{name}_{dist}"), &["duration_us", "ideal", "distorted", "corrected"])
            .note(format!(
                "mode {}, {OPTIMIZER_ITERATIONS} iterations, dt {CONTROL_DT} us; corrected runs start from the ideal pulses",
                match mode {
                    OptimizerMode::BoxQn => "box-qn (box constraints only)",
                    OptimizerMode::PenaltyPg => "penalty-pg (box + rise-speed penalty)",
                }
            ));
        for p in correction_sweep(&sys, &ideal, &k, &cfg)? {
            t.push(vec![num(p.duration), num(p.ideal), num(p.distorted), num(p.corrected)]);
        }
        tables.push(t);
    }
    Ok(tables)
}

// ---------------------------------------------------------------------------
// Orchestration

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    Fig1,
    Fig3,
    Fig4,
    Fig5,
    Fig6,
    Fig8,
    Fig9,
}

impl Figure {
    pub const ALL: [Figure; 7] =
        [Figure::Fig1, Figure::Fig3, Figure::Fig4, Figure::Fig5, Figure::Fig6, Figure::Fig8, Figure::Fig9];

    pub fn id(self) -> &'static str {
        match self {
            Figure::Fig1 => "fig1",
            Figure::Fig3 => "fig3",
            Figure::Fig4 => "fig4",
            Figure::Fig5 => "fig5",
            Figure::Fig6 => "fig6",
            Figure::Fig8 => "fig8",
            Figure::Fig9 => "fig9",
        }
    }

    pub fn parse(s: &str) -> Result<Figure> {
        let s = s.to_ascii_lowercase();
        let s = if s == "fig1b" { "fig1".to_string() } else { s };
        Figure::ALL.into_iter().find(|f| f.id() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown figure '{s}'; valid ids: {}",
                Figure::ALL.map(|f| f.id()).join(", ")
            ))
        })
    }
}

fn method_tables(name: &str, pts: &[MethodPoint], noise: f64) -> Table {
    let mut t = Table::new(name, &["M", "mean_error", "ci_low", "ci_high", "method"])
        .note(format!(
            "small kernel R=5; {STUDY_TRAIN_PULSES} spline training pulses of {STUDY_STEPS} steps; output noise {noise:e}; {STUDY_TESTS} spline test pulses; 95% CI"
        ))
        .note(format!("coarsened: {} memory lengths {:?}", STUDY_MEMORY.len(), STUDY_MEMORY));
    if noise > 0.0 {
        t = t.note(format!("errors pooled over {STUDY_REALIZATIONS} noise draws on the same training inputs"));
    }
    for p in pts {
        for (m, s) in [("qr", p.qr), ("normal", p.normal)] {
            t.push(vec![p.coefficients.to_string(), num(s.mean), num(s.ci_low), num(s.ci_high), m.into()]);
        }
    }
    t
}

fn data_tables(name: &str, pts: &[DataPoint], noise: f64) -> Table {
    let mut t = Table::new(name, &["pulses", "mean_error", "ci_low", "ci_high", "method"]).note(format!(
        "spline training pulses added one at a time; output noise {noise:e}; each point pools {} memory lengths x {STUDY_TESTS} tests",
        STUDY_MEMORY.len()
    ));
    for p in pts {
        for (m, s) in [("qr", p.qr), ("normal", p.normal)] {
            t.push(vec![p.pulses.to_string(), num(s.mean), num(s.ci_low), num(s.ci_high), m.into()]);
        }
    }
    t
}

fn kind_table(name: &str, pts: &[KindPoint], by_memory: bool, note: String) -> Table {
    let first = if by_memory { "M" } else { "content" };
    let mut t = Table::new(name, &[first, "mean_error", "ci_low", "ci_high", "training"]).note(note);
    for p in pts {
        let x = if by_memory { crate::volterra::coefficient_count(p.memory) } else { p.content };
        t.push(vec![x.to_string(), num(p.error.mean), num(p.error.ci_low), num(p.error.ci_high), p.kind.name().into()]);
    }
    t
}

/// Runs the sweeps behind one figure and returns its panel tables.
pub fn reproduce(fig: Figure, seed: u64) -> Result<Vec<Table>> {
    match fig {
        Figure::Fig1 => Ok(fig1_and_3(seed)?.into_iter().take(1).collect()),
        Figure::Fig3 => Ok(fig1_and_3(seed)?.into_iter().skip(1).collect()),
        Figure::Fig4 => fig4(seed),
        Figure::Fig5 => Ok(vec![
            method_tables("fig5a", &orthogonalization_study(0.0, seed)?, 0.0),
            data_tables("fig5b", &data_amount_study(0.0, seed)?, 0.0),
            method_tables("fig5c", &orthogonalization_study(STUDY_NOISE, seed)?, STUDY_NOISE),
            data_tables("fig5d", &data_amount_study(STUDY_NOISE, seed)?, STUDY_NOISE),
        ]),
        Figure::Fig6 => {
            let budget = |noise: f64| {
                format!("QR estimates at equal budget {BUDGET_PULSES} x {STUDY_STEPS} samples, spline knots {HIGH_KNOTS}; output noise {noise:e}")
            };
            let content = |noise: f64| {
                format!("content = pulse count (random, cosine, gaussian) or knot count of a single spline; output noise {noise:e}")
            };
            let mut tables = vec![
                kind_table("fig6a", &frequency_study(0.0, seed)?, true, budget(0.0)),
                kind_table("fig6b", &content_study(0.0, seed)?, false, content(0.0)),
                kind_table("fig6c", &frequency_study(STUDY_NOISE, seed)?, true, budget(STUDY_NOISE)),
                kind_table("fig6d", &content_study(STUDY_NOISE, seed)?, false, content(STUDY_NOISE)),
            ];
            tables.extend(predistort_tables()?);
            Ok(tables)
        }
        Figure::Fig8 => correction_figure("fig8", OptimizerMode::PenaltyPg, seed),
        Figure::Fig9 => correction_figure("fig9", OptimizerMode::BoxQn, seed),
    }
}

/// Writes every table of `tables` into `dir`.
pub fn write_tables(dir: &Path, tables: &[Table]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tables.iter().map(|t| t.write(dir)).collect()
}
